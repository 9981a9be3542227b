import json
from collections import Counter

import numpy as np
import pytest
import torch
from scipy import stats

from dymon.model import DyMON, load_checkpoint
from dymon.trainer import (BranchBatcher, StepReport, TrainConfig, fit, lr_at_step,
                           random_walk_times, sample_query_times, sequence_objective)
from dymon.types import FCSO, SCFO, ConfigError

from conftest import random_sequence
from oracles import finite_difference_check

F64 = torch.float64


def small_cfg(**kw):
    base = dict(K=2, D=4, H=8, W=8, L=2, total_steps=4, batch_size=2, dtype="float64",
                viewpoint_scale=9.0, refiner_pool=2)
    base.update(kw)
    return TrainConfig(**base)


def toy_dataset(n=4, T=12):
    return [random_sequence(T=T, seed=i, label=FCSO if i % 2 else SCFO) for i in range(n)]


# --- config -----------------------------------------------------------------

def test_config_invariants():
    with pytest.raises(ConfigError):
        TrainConfig(delta_t=3, delta_tau=3)
    with pytest.raises(ConfigError):
        TrainConfig(delta_t=5, delta_tau=2)
    with pytest.raises(ConfigError):
        TrainConfig(beta_fcso=0.5, beta_scfo=0.5)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"model": {"K": 3}, "bogus": 1})
    cfg = TrainConfig.from_dict({"model": {"K": 3, "D": 8}, "optim": {"eta0": 1e-3}})
    assert (cfg.K, cfg.D, cfg.eta0) == (3, 8, 1e-3)


def test_branch_schedules():
    cfg = TrainConfig(beta_fcso=1.0, beta_scfo=0.5, delta_t=5, delta_tau=3)
    assert cfg.schedule(FCSO) == (1.0, 3, 5)     # views refresh more often
    assert cfg.schedule(SCFO) == (0.5, 5, 3)     # latents refresh more often
    over = TrainConfig(dt_z_override=4, dt_v_override=8, beta_override=2.0)
    assert over.schedule(FCSO) == over.schedule(SCFO) == (2.0, 8, 4)


# --- samplers ---------------------------------------------------------------

@pytest.mark.parametrize("dt", [3, 4, 5, 7])
def test_random_walk_gap_support(dt):
    rng = np.random.default_rng(dt)
    gaps = Counter()
    for _ in range(2000):
        times = random_walk_times(1, 40, dt, rng)
        assert times[0] == 1 and times[-1] <= 40
        gaps.update(np.diff(times).tolist())
    assert set(gaps) == set(range(dt - 2, dt + 3))


def test_random_walk_renewal_mean():
    rng = np.random.default_rng(0)
    counts = [len(random_walk_times(1, 40, 4, rng)) for _ in range(10000)]
    assert abs(np.mean(counts) - 10.75) <= 0.5


def test_random_walk_errors():
    with pytest.raises(ValueError):
        random_walk_times(1, 0, 4, np.random.default_rng())
    with pytest.raises(ValueError):
        random_walk_times(1, 10, 2, np.random.default_rng())


def test_query_window_support_and_uniformity():
    rng = np.random.default_rng(0)
    draws = sample_query_times(20, 6, 50000, 40, rng)
    assert set(draws) == set(range(17, 24))
    counts = np.bincount(draws, minlength=24)[17:24]
    assert stats.chisquare(counts).pvalue > 0.01


def test_query_window_clipping():
    rng = np.random.default_rng(1)
    assert set(sample_query_times(1, 6, 5000, 40, rng)) == {1, 2, 3, 4}
    assert set(sample_query_times(40, 5, 5000, 40, rng)) == {38, 39, 40}
    with pytest.raises(ValueError):
        sample_query_times(0, 4, 3, 10, rng)


def test_lr_schedule():
    eta = 3e-3
    assert abs(lr_at_step(0, eta) - eta) < 1e-12
    assert abs(lr_at_step(500_000, eta) - 0.55 * eta) < 1e-12
    assert abs(lr_at_step(1_000_000, eta) - 0.1 * eta) < 1e-12
    assert lr_at_step(5_000_000, eta) == pytest.approx(0.1 * eta)
    vals = [lr_at_step(s, eta) for s in range(0, 2_000_000, 50_000)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


# --- objective --------------------------------------------------------------

def test_objective_label_mismatch():
    cfg = small_cfg()
    model = DyMON(cfg.model_config()).double()
    with pytest.raises(ConfigError):
        sequence_objective(random_sequence(label=SCFO), FCSO, cfg, model, np.random.default_rng())


def test_view_and_latent_update_counts():
    cfg = small_cfg(L=1)
    model = DyMON(cfg.model_config()).double()
    seq = random_sequence(T=30, seed=3)
    for seed in range(3):
        f = sequence_objective(seq, FCSO, cfg, model, np.random.default_rng(seed))
        s = sequence_objective(seq, SCFO, cfg, model, np.random.default_rng(seed))
        assert len(f.view_updates) >= len(f.inference_times)
        assert len(s.view_updates) <= len(s.inference_times)
        assert f.view_updates == [t for t in range(1, 31) if t % 3 == 0]
        assert s.view_updates == [t for t in range(1, 31) if t % 5 == 0]


def test_self_query_equals_reconstruction_loglik():
    """Querying only t itself from its held view scores the sampled z^t at v^t."""
    from dymon.decoder import log_likelihood
    from dymon.inference import iterative_inference
    from dymon.types import SlotGaussians, sample_slots

    cfg = small_cfg(delta_t=5, delta_tau=3, Q_size=1)
    model = DyMON(cfg.model_config()).double()
    seq = random_sequence(T=3, seed=5)
    # FCSO holds v from frame 1 until t = 3; infer only at t = 1
    res = sequence_objective(seq, FCSO, cfg, model, np.random.default_rng(0),
                             torch.Generator().manual_seed(4), inference_times=[1], query_times={1: [1]})
    g = torch.Generator().manual_seed(4)
    x = torch.tensor(seq[1].image)
    v = torch.tensor(seq[1].viewpoint)
    inf = iterative_inference(x, v, SlotGaussians.standard(2, 4, dtype=F64), cfg.L, model, g)
    z = sample_slots(inf.lambda_post, g)
    expected = log_likelihood(x, model.decoder(z, v))
    assert float(res.ll_query.detach()) == pytest.approx(float(expected.detach()), rel=1e-10)
    assert float(res.elbo.detach()) == pytest.approx(float(inf.elbo.detach()), rel=1e-10)


def test_beta_zero_gradient_is_elbo_gradient():
    cfg = small_cfg(beta_override=0.0)
    torch.manual_seed(0)
    model = DyMON(cfg.model_config()).double()
    seq = random_sequence(T=8, seed=2)
    kw = dict(inference_times=[1, 5], query_times={1: [1, 2], 5: [4, 6]})

    def grads(which):
        model.zero_grad()
        r = sequence_objective(seq, SCFO, cfg, model, np.random.default_rng(0),
                               torch.Generator().manual_seed(1), **kw)
        (r.loss if which == "loss" else -r.elbo).backward()
        return [p.grad.clone() for p in model.parameters()]

    for a, b in zip(grads("loss"), grads("elbo")):
        assert torch.allclose(a, b, rtol=1e-12, atol=1e-14)


def test_objective_gradient_finite_differences():
    """Full objective on the 8x8 / K=2 / T=12 miniature."""
    cfg = small_cfg()
    torch.manual_seed(2)
    model = DyMON(cfg.model_config()).double()
    seq = random_sequence(T=12, seed=8)
    times = random_walk_times(1, 12, 5, np.random.default_rng(3))
    q_rng = np.random.default_rng(4)
    queries = {t: sample_query_times(t, 5, cfg.Q_size, 12, q_rng) for t in times}

    def loss():
        return sequence_objective(seq, FCSO, cfg, model, np.random.default_rng(0),
                                  torch.Generator().manual_seed(5), inference_times=times,
                                  query_times=queries).loss

    err, rows, skipped = finite_difference_check(model, loss, n=20, seed=1)
    assert err < 1e-3, rows
    assert skipped <= 20


# --- batching and fit -------------------------------------------------------

def test_batches_never_mix_labels():
    labels = [FCSO, SCFO, SCFO, FCSO, SCFO, FCSO, SCFO]
    b = BranchBatcher(labels, 3, np.random.default_rng(0))
    seen = []
    for _ in range(1000):
        branch, idx = b.next()
        assert {labels[i] for i in idx} == {branch}
        seen.append(branch)
    assert seen[:4] == [FCSO, SCFO, FCSO, SCFO]


def test_single_cluster_warns(caplog):
    b = BranchBatcher([SCFO] * 3, 2, np.random.default_rng(0))
    assert "single cluster" in caplog.text
    assert all(b.next()[0] == SCFO for _ in range(5))
    with pytest.raises(ConfigError):
        BranchBatcher([], 2, np.random.default_rng(0))


def test_fit_requires_labels():
    with pytest.raises(ConfigError):
        fit([random_sequence(T=8)], small_cfg())


def test_fit_zero_steps_keeps_initialization(tmp_path):
    cfg = small_cfg(total_steps=0)
    torch.manual_seed(cfg.seed)
    init = DyMON(cfg.model_config()).double()
    model, reports = fit(toy_dataset(), cfg, out_dir=tmp_path)
    assert reports == []
    loaded, payload = load_checkpoint(tmp_path / "final.pt")
    for (k, a), b in zip(init.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(a, b), k


def test_fit_determinism_and_log(tmp_path):
    ds = toy_dataset()
    cfg = small_cfg(total_steps=3, checkpoint_every=2)
    _, r1 = fit(ds, cfg, out_dir=tmp_path / "a")
    _, r2 = fit(ds, cfg, out_dir=tmp_path / "b")
    assert [r.to_json() for r in r1] == [r.to_json() for r in r2]
    lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 3
    rec = StepReport(**json.loads(lines[0]))
    assert rec.loss == pytest.approx(-(rec.elbo + rec.beta * rec.ll_query), abs=1e-9)
    assert [r.cluster_branch for r in r1] == [FCSO, SCFO, FCSO]
    assert (tmp_path / "a" / "step_0000002.pt").exists()


def test_loss_decomposition():
    cfg = small_cfg()
    model = DyMON(cfg.model_config()).double()
    r = sequence_objective(random_sequence(T=10, seed=1), FCSO, cfg, model, np.random.default_rng(2))
    assert float(r.loss.detach()) == pytest.approx(-(float(r.elbo.detach()) + r.beta * float(r.ll_query.detach())), abs=1e-9)


def test_viewpoint_scale_inferred():
    cfg = small_cfg(total_steps=0, viewpoint_scale=None)
    model, _ = fit(toy_dataset(2), cfg)
    assert model.decoder.viewpoint_scale == 9.0
