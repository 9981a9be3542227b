import math

import numpy as np
import pytest
import torch

from dymon import inference
from dymon.decoder import DecodedSlots, Decoder, compose, log_likelihood, mixture_weights
from dymon.inference import (AUX_CHANNELS, RefinementNetwork, auxiliary_inputs, iterative_inference,
                             kl_diag_gaussian, sequence_inference)
from dymon.types import ConfigError, SlotGaussians, sample_slots

from conftest import random_sequence, tiny_model
from oracles import StubModel, StubRefiner, finite_difference_check

F64 = torch.float64


def small_decoder(D=4, H=6, W=6, seed=0):
    torch.manual_seed(seed)
    return Decoder(D, H, W, hidden=16, channels=(8, 8), viewpoint_scale=9.0).double()


# --- KL ---------------------------------------------------------------------

def test_kl_identity_is_zero():
    a = SlotGaussians.standard(3, 5, dtype=F64)
    assert float(kl_diag_gaussian(a, a)) == 0.0


def test_kl_single_mean_entry():
    mu = torch.zeros(2, 3, dtype=F64)
    mu[1, 2] = 1.0
    a = SlotGaussians(mu, torch.zeros_like(mu))
    b = SlotGaussians.standard(2, 3, dtype=F64)
    assert abs(float(kl_diag_gaussian(a, b)) - 0.5) < 1e-9


def test_kl_nonnegative_and_closed_form():
    g = torch.Generator().manual_seed(0)
    for _ in range(1000):
        a = SlotGaussians(torch.randn(2, 3, generator=g, dtype=F64), torch.randn(2, 3, generator=g, dtype=F64))
        b = SlotGaussians(torch.randn(2, 3, generator=g, dtype=F64), torch.randn(2, 3, generator=g, dtype=F64))
        kl = float(kl_diag_gaussian(a, b))
        assert kl >= 0
    # torch.distributions as an independent reference for the last pair
    ref = torch.distributions.kl_divergence(torch.distributions.Normal(a.mu, a.sigma),
                                            torch.distributions.Normal(b.mu, b.sigma)).sum()
    assert kl == pytest.approx(float(ref), rel=1e-12)


def test_kl_shape_mismatch():
    with pytest.raises(ConfigError):
        kl_diag_gaussian(SlotGaussians.standard(2, 3), SlotGaussians.standard(3, 3))


# --- auxiliary inputs -------------------------------------------------------

def _aux_for(x, decoded):
    rgb = decoded.rgb_means.detach().requires_grad_()
    logits = decoded.mask_logits.detach().requires_grad_()
    d = DecodedSlots(rgb, logits)
    loss = -log_likelihood(x, d)
    g = torch.autograd.grad(loss, [rgb, logits])
    return auxiliary_inputs(x, d, mixture_weights(d), g)


@pytest.mark.parametrize("K,H,W", [(1, 4, 4), (3, 5, 7), (5, 8, 8)])
def test_aux_channel_count(K, H, W):
    x = torch.rand(H, W, 3, dtype=F64)
    d = DecodedSlots(torch.rand(K, H, W, 3, dtype=F64), torch.randn(K, H, W, dtype=F64))
    assert _aux_for(x, d).shape == (K, AUX_CHANNELS, H, W)


def test_aux_normalized_gradient_channels():
    torch.manual_seed(0)
    x = torch.rand(16, 16, 3, dtype=F64)
    d = DecodedSlots(torch.rand(3, 16, 16, 3, dtype=F64), torch.randn(3, 16, 16, dtype=F64))
    aux = _aux_for(x, d)
    grads = aux[:, 12:17]
    assert torch.allclose(grads.mean(dim=(-2, -1)), torch.zeros(3, 5, dtype=F64), atol=1e-9)
    assert torch.allclose(grads.std(dim=(-2, -1), unbiased=False), torch.ones(3, 5, dtype=F64), atol=1e-3)


def test_aux_at_optimum_has_zero_residual_and_gradients():
    x = torch.rand(4, 4, 3, dtype=F64)
    rgb = torch.stack([x, torch.rand(4, 4, 3, dtype=F64)])
    logits = torch.stack([torch.full((4, 4), 60.0, dtype=F64), torch.full((4, 4), -60.0, dtype=F64)])
    aux = _aux_for(x, DecodedSlots(rgb, logits))
    assert aux[:, 9:12].abs().max() < 1e-12          # residual
    assert aux[:, 12:16].abs().max() < 1e-12          # normalized grads of a zero map stay zero


def test_aux_shape_mismatch():
    d = DecodedSlots(torch.rand(2, 4, 4, 3), torch.randn(2, 4, 4))
    with pytest.raises(ConfigError):
        auxiliary_inputs(torch.rand(5, 4, 3), d, mixture_weights(d), (d.rgb_means, d.mask_logits))


def test_leave_one_out_matches_direct():
    torch.manual_seed(1)
    x = torch.rand(3, 3, 3, dtype=F64)
    d = DecodedSlots(torch.rand(3, 3, 3, 3, dtype=F64), torch.randn(3, 3, 3, dtype=F64))
    loo = inference.leave_one_out_loglik(x, d)
    for k in range(3):
        keep = [j for j in range(3) if j != k]
        sub = DecodedSlots(d.rgb_means[keep], d.mask_logits[keep])
        comps = inference.pixel_log_density(x, sub.rgb_means) + torch.log_softmax(sub.mask_logits, 0)
        assert torch.allclose(loo[k], torch.logsumexp(comps, 0))


# --- refinement network -----------------------------------------------------

def test_refiner_shapes_and_cells():
    for cell in ("gru", "lstm"):
        net = RefinementNetwork(D=4, H=8, W=8, channels=(8, 8), hidden=16, state=12, cell=cell, pool=2)
        h = net.initial_state(3)
        dmu, dls, h2 = net(torch.randn(3, AUX_CHANNELS, 8, 8), torch.randn(3, 16), h)
        assert dmu.shape == (3, 4) and dls.shape == (3, 4)
    with pytest.raises(ConfigError):
        RefinementNetwork(D=4, H=8, W=8, cell="rnn")
    with pytest.raises(ConfigError):
        RefinementNetwork(D=4, H=9, W=8, pool=2)


def test_refiner_full_layout():
    net = RefinementNetwork(D=16, H=64, W=64)
    widths = [m.out_channels for m in net.encoder if isinstance(m, torch.nn.Conv2d)]
    assert widths == [32, 32, 64, 64]
    linears = [m for m in net.encoder if isinstance(m, torch.nn.Linear)]
    assert [(l.in_features, l.out_features) for l in linears] == [(64 * 64 * 64, 256), (256, 128)]
    assert net.cell.input_size == 128 + 4 * 16 and net.cell.hidden_size == 128
    assert net.head.out_features == 32


# --- iterative inference ----------------------------------------------------

def test_identity_refinement_l1():
    dec = small_decoder()
    model = StubModel(dec, StubRefiner(4))
    x = torch.rand(6, 6, 3, dtype=F64)
    v = torch.tensor([9.0, 0.0, 0.0], dtype=F64)
    prior = SlotGaussians(torch.randn(2, 4, dtype=F64), 0.1 * torch.randn(2, 4, dtype=F64))
    res = iterative_inference(x, v, prior, 1, model, torch.Generator().manual_seed(3))
    assert torch.equal(res.lambda_post.mu.detach(), prior.mu)
    assert torch.equal(res.lambda_post.log_sigma.detach(), prior.log_sigma)
    z = sample_slots(prior, torch.Generator().manual_seed(3))
    expected = log_likelihood(x, dec(z, v))      # KL(prior || prior) = 0
    assert float(res.elbo.detach()) == pytest.approx(float(expected.detach()), abs=1e-9)


def test_manual_accumulation_l2():
    dec = small_decoder(seed=1)
    shift = torch.tensor(0.3, dtype=F64)

    def fn(aux, stats, call):
        K = stats.shape[0]
        return torch.full((K, 4), float(shift), dtype=F64), torch.full((K, 4), -0.2, dtype=F64)

    model = StubModel(dec, StubRefiner(4, fn))
    x = torch.rand(6, 6, 3, dtype=F64)
    v = torch.tensor([0.0, 9.0, 0.0], dtype=F64)
    prior = SlotGaussians.standard(2, 4, dtype=F64)
    res = iterative_inference(x, v, prior, 2, model, torch.Generator().manual_seed(7))

    g = torch.Generator().manual_seed(7)
    lam, steps = prior, []
    for _ in range(2):
        z = sample_slots(lam, g)
        steps.append(float((log_likelihood(x, dec(z, v)) - kl_diag_gaussian(lam, prior)).detach()))
        lam = SlotGaussians(lam.mu + 0.3, lam.log_sigma - 0.2)
    assert float(res.elbo.detach()) == pytest.approx(0.5 * (steps[0] + steps[1]), abs=1e-9)
    assert [float(s.detach()) for s in res.step_elbos] == pytest.approx(steps, abs=1e-9)
    assert torch.allclose(res.lambda_post.mu, lam.mu) and torch.allclose(res.lambda_post.log_sigma, lam.log_sigma)


def test_sigma_clamp(caplog):
    dec = small_decoder()
    model = StubModel(dec, StubRefiner(4, lambda a, s, c: (torch.zeros(2, 4, dtype=F64),
                                                          torch.full((2, 4), -50.0, dtype=F64))))
    res = iterative_inference(torch.rand(6, 6, 3, dtype=F64), torch.ones(3, dtype=F64),
                              SlotGaussians.standard(2, 4, dtype=F64), 2, model)
    assert torch.all(res.lambda_post.sigma >= 1e-5 * (1 - 1e-12))
    assert "clamping" in caplog.text


def test_invalid_L():
    model = tiny_model()
    with pytest.raises(ConfigError):
        iterative_inference(torch.rand(8, 8, 3), torch.ones(3), SlotGaussians.standard(2, 4), 0, model)


def _permuting_sampler(order, monkeypatch):
    """Make sample_slots draw eps from a fixed stream, optionally slot-permuted."""
    g = torch.Generator().manual_seed(11)
    stream = [torch.randn(2, 4, generator=g, dtype=F64) for _ in range(8)]
    calls = {"n": 0}

    def fake(params, generator=None, eps=None):
        e = stream[calls["n"]]
        calls["n"] += 1
        if order is not None:
            e = e[order]
        return params.mu + params.sigma * e
    monkeypatch.setattr(inference, "sample_slots", fake)


def test_slot_exchangeability(monkeypatch):
    model = tiny_model(seed=3)
    x = torch.rand(8, 8, 3, dtype=F64)
    v = torch.tensor([3.0, 4.0, 5.0], dtype=F64)
    prior = SlotGaussians(torch.randn(2, 4, dtype=F64), 0.2 * torch.randn(2, 4, dtype=F64))
    _permuting_sampler(None, monkeypatch)
    a = iterative_inference(x, v, prior, 2, model, create_graph=False)
    order = [1, 0]
    _permuting_sampler(order, monkeypatch)
    b = iterative_inference(x, v, prior.permute(order), 2, model, create_graph=False)
    assert float(b.elbo.detach()) == pytest.approx(float(a.elbo.detach()), rel=1e-10)
    assert torch.allclose(b.lambda_post.mu, a.lambda_post.mu[order], atol=1e-10)
    assert torch.allclose(b.lambda_post.log_sigma, a.lambda_post.log_sigma[order], atol=1e-10)


def test_create_graph_flag_same_values():
    model = tiny_model(seed=4)
    x = torch.rand(8, 8, 3, dtype=F64)
    v = torch.ones(3, dtype=F64)
    prior = SlotGaussians.standard(2, 4, dtype=F64)
    a = iterative_inference(x, v, prior, 2, model, torch.Generator().manual_seed(0), create_graph=True)
    b = iterative_inference(x, v, prior, 2, model, torch.Generator().manual_seed(0), create_graph=False)
    assert float(a.elbo.detach()) == pytest.approx(float(b.elbo.detach()), rel=1e-12)


def test_elbo_gradient_finite_differences():
    """d(-ELBO)/d(params) on the 8x8 / K=2 / D=4 / L=2 miniature."""
    model = tiny_model(seed=5)
    x = torch.rand(8, 8, 3, dtype=F64, generator=torch.Generator().manual_seed(1))
    v = torch.tensor([2.0, -5.0, 6.0], dtype=F64)

    def loss():
        prior = SlotGaussians.standard(2, 4, dtype=F64)
        return -iterative_inference(x, v, prior, 2, model, torch.Generator().manual_seed(9)).elbo

    err, rows, skipped = finite_difference_check(model, loss, n=20, seed=0)
    assert err < 1e-3, rows
    assert skipped <= 20


# --- sequence inference -----------------------------------------------------

def test_sequence_inference_single_time_equals_one_call():
    model = tiny_model(seed=6)
    seq = random_sequence(T=3)
    traj = sequence_inference(seq, [2], model, torch.Generator().manual_seed(0), dtype=F64)
    res = iterative_inference(torch.tensor(seq[2].image), torch.tensor(seq[2].viewpoint),
                              SlotGaussians.standard(2, 4, dtype=F64), model.cfg.L, model,
                              torch.Generator().manual_seed(0), create_graph=False)
    assert len(traj) == 1 and traj[0][0] == 2
    assert torch.allclose(traj[0][1].mu, res.lambda_post.mu)


def test_posterior_chaining():
    model = tiny_model(seed=7)
    seq = random_sequence(T=5)
    g = torch.Generator().manual_seed(1)
    traj = sequence_inference(seq, [1, 3, 5], model, g, dtype=F64)
    assert [t for t, _, _ in traj] == [1, 3, 5]
    g2 = torch.Generator().manual_seed(1)
    lam = SlotGaussians.standard(2, 4, dtype=F64)
    for (t, post, _) in traj:
        res = iterative_inference(torch.tensor(seq[t].image), torch.tensor(seq[t].viewpoint), lam,
                                  model.cfg.L, model, g2, create_graph=False)
        assert torch.equal(res.lambda_post.mu.detach(), post.mu)
        lam = post        # the next prior is exactly this posterior
    assert all(torch.all(p.sigma > 0) for _, p, _ in traj)


def test_sequence_inference_validation():
    model = tiny_model()
    seq = random_sequence(T=4)
    assert sequence_inference(seq, [], model, dtype=F64) == []
    with pytest.raises(ConfigError):
        sequence_inference(seq, [3, 2], model, dtype=F64)
    with pytest.raises(ConfigError):
        sequence_inference(seq, [1, 5], model, dtype=F64)


def test_visitation_order_matters():
    dec = small_decoder(H=8, W=8)

    def fn(aux, stats, call):
        # pulls mu halfway towards the image's mean brightness: non-commutative
        K = stats.shape[0]
        target = aux[:, 0:3].mean()
        mu = stats[:, :4]
        return 0.5 * (target - mu), torch.zeros(K, 4, dtype=F64)

    model = StubModel(dec, StubRefiner(4, fn))
    model.cfg = type("C", (), {"K": 2, "D": 4, "L": 1})()
    a = random_sequence(T=2, seed=1)
    frames = [a[2], a[1]]
    from dymon.types import Frame, Sequence
    b = Sequence([Frame(f.image, f.viewpoint, i + 1) for i, f in enumerate(frames)])
    ta = sequence_inference(a, [1, 2], model, dtype=F64)
    tb = sequence_inference(b, [1, 2], model, dtype=F64)
    assert not torch.allclose(ta[-1][1].mu, tb[-1][1].mu)


# --- gradient-free oracle on the inference objective ------------------------

def test_coordinate_descent_oracle_decreases_loss():
    """A gradient-free optimizer on lambda, with common random numbers,
    lowers -ELBO monotonically for a scene rendered from known latents."""
    torch.manual_seed(0)
    dec = small_decoder(D=3, H=6, W=6, seed=2)
    for p in dec.parameters():
        p.requires_grad_(False)
    v = torch.tensor([6.0, 6.0, 3.0], dtype=F64)
    prior = SlotGaussians.standard(2, 3, dtype=F64)
    ok = 0
    trials = 20
    for trial in range(trials):
        g = torch.Generator().manual_seed(trial)
        z_true = torch.randn(2, 3, generator=g, dtype=F64)
        with torch.no_grad():
            x = compose(dec(z_true, v))[0]
            eps = torch.randn(4, 2, 3, generator=g, dtype=F64)

            def neg_elbo(lam):
                ll = sum(log_likelihood(x, dec(lam.mu + lam.sigma * e, v)) for e in eps) / len(eps)
                return float(kl_diag_gaussian(lam, prior) - ll)

            lam = SlotGaussians(prior.mu.clone(), prior.log_sigma.clone())
            trace = [neg_elbo(lam)]
            step = 0.5
            for it in range(50):
                best = None
                for field in ("mu", "log_sigma"):
                    for idx in np.ndindex(2, 3):
                        for s in (step, -step):
                            cand = SlotGaussians(lam.mu.clone(), lam.log_sigma.clone())
                            getattr(cand, field)[idx] += s
                            val = neg_elbo(cand)
                            if best is None or val < best[0]:
                                best = (val, cand)
                if best[0] < trace[-1]:
                    lam = best[1]
                    trace.append(best[0])
                else:
                    step *= 0.5
                    trace.append(trace[-1])
        monotone = all(b <= a for a, b in zip(trace, trace[1:]))
        if monotone and trace[-1] < trace[0]:
            ok += 1
    assert ok >= 0.9 * trials
