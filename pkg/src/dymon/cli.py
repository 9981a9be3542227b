"""Command-line entry point: ``dymon <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (YAML, nested stanzas allowed);
flags given on the command line override values from the file. Each run
writes ``run_manifest.yaml`` beside its outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from dymon import io

log = logging.getLogger("dymon")

DATA_ROOT_ENV = "DYMON_DATA_ROOT"


class UsageError(Exception):
    pass


def _flatten(d: dict) -> dict:
    flat = {}
    for k, v in d.items():
        if isinstance(v, dict):
            flat.update(_flatten(v))
        else:
            flat[k.replace("-", "_")] = v
    return flat


def _parse_floats(text: str, n: Optional[int] = None) -> list[float]:
    vals = [float(x) for x in str(text).replace(" ", "").split(",") if x]
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _viewpoint(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    return _parse_floats(text, 3)


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    text = str(text)
    if ":" in text:
        a, b = text.split(":")
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in text.split(",") if x]


def dataset_fingerprint(root: os.PathLike) -> str:
    root = Path(root)
    h = hashlib.sha256()
    manifest = io.read_manifest(root)
    h.update((root / io.MANIFEST).read_bytes())
    for name in manifest["sequences"]:
        vp = root / name / io.VIEWPOINTS
        if vp.exists():
            h.update(vp.read_bytes())
    return h.hexdigest()[:16]


def write_run_manifest(out_dir: os.PathLike, command: str, config: dict, seed, started: str,
                       dataset: Optional[os.PathLike] = None, checkpoint: Optional[os.PathLike] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "dataset": str(dataset) if dataset else None,
        "dataset_fingerprint": dataset_fingerprint(dataset) if dataset and (Path(dataset) / io.MANIFEST).exists() else None,
        "checkpoint": str(checkpoint) if checkpoint else None,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    io.write_yaml(out / "run_manifest.yaml", manifest)
    return out / "run_manifest.yaml"


def _save_image(path: Path, image: np.ndarray, scale: int = 1) -> None:
    from PIL import Image

    img = Image.fromarray(io.quantize(image))
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(path)


def _weights_visual(weights: np.ndarray) -> np.ndarray:
    """Color each pixel by its dominant slot, shaded by the slot's weight."""
    K = weights.shape[0]
    hues = np.linspace(0, 1, K, endpoint=False)
    import colorsys

    palette = np.array([colorsys.hsv_to_rgb(h, 0.8, 0.95) for h in hues])
    arg = weights.argmax(0)
    return palette[arg] * weights.max(0)[..., None]


# --------------------------------------------------------------------------- commands

def cmd_generate(args) -> dict:
    from dymon.droom import generate_dataset, get_subset

    spec = get_subset(args.subset, args.subset_file)
    spec = spec.with_overrides(n_sequences=args.n, T=args.T, H=args.H, W=args.W,
                               n_objects=_int_list(args.objects) if args.objects else None)
    rng = np.random.default_rng(args.seed)
    root = generate_dataset(spec, args.out, rng, split=args.split, seed=args.seed)
    return {"out": root, "dataset": root}


def cmd_assign(args) -> dict:
    from dymon.assign import assign_on_disk

    labels, model, speeds = assign_on_disk(args.data, restarts=args.restarts, seed=args.seed,
                                           fallback=args.fallback_label)
    report = (Path(args.data) / "cluster_report.txt").read_text()
    print(report, end="")
    return {"out": args.data, "dataset": args.data}


def _train_config(args):
    from dymon.trainer import TrainConfig

    values = {}
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return TrainConfig(**values)


def cmd_train(args) -> dict:
    from dymon.trainer import fit, infer_viewpoint_scale

    cfg = _train_config(args)
    ds = io.Dataset(args.data)
    if cfg.viewpoint_scale is None:
        cfg = dataclasses.replace(cfg, viewpoint_scale=infer_viewpoint_scale(ds))
    model, reports = fit(ds, cfg, out_dir=args.out, log_every=args.log_every)
    if reports:
        last = reports[-1]
        print(f"trained {len(reports)} steps; last loss {last.loss:.2f} (elbo {last.elbo:.2f}, llq {last.ll_query:.2f})")
    return {"out": args.out, "dataset": args.data, "checkpoint": Path(args.out) / "final.pt",
            "config": dataclasses.asdict(cfg)}


def _load_model(path):
    from dymon.model import load_checkpoint

    model, _ = load_checkpoint(path)
    model.eval()
    return model


def cmd_eval(args) -> dict:
    from dymon.evalkit import evaluate

    model = _load_model(args.ckpt)
    ds = io.Dataset(args.data)
    report = evaluate(model, ds, n_novel_views=args.novel_views, time_stride=args.time_stride,
                      seed=args.seed, max_sequences=args.max_sequences)
    report.write(args.out)
    print(report.summary())
    return {"out": args.out, "dataset": args.data, "checkpoint": args.ckpt}


def _infer_sequence(model, seq_dir, seed, stride=1):
    import torch

    from dymon.inference import sequence_inference

    seq = io.load_sequence(seq_dir)
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    return seq, sequence_inference(seq, range(1, seq.T + 1, stride), model, generator=gen, dtype=dtype)


def cmd_query(args) -> dict:
    from dymon.evalkit import query_spacetime

    model = _load_model(args.ckpt)
    _, traj = _infer_sequence(model, args.seq, args.seed)
    image, weights = query_spacetime(traj, args.time, _viewpoint(args.view), model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_image(out / f"query_t{args.time:04d}.png", image, args.scale)
    _save_image(out / f"query_t{args.time:04d}_weights.png", _weights_visual(weights), args.scale)
    np.save(out / f"query_t{args.time:04d}_weights.npy", weights)
    return {"out": out, "checkpoint": args.ckpt}


def cmd_replay(args) -> dict:
    from PIL import Image

    from dymon.evalkit import replay

    model = _load_model(args.ckpt)
    seq, traj = _infer_sequence(model, args.seq, args.seed)
    times = _int_list(args.times) if args.times else list(range(1, seq.T + 1))
    K = model.cfg.K
    if args.keep_slot is not None:
        frozen = [k for k in range(K) if k != args.keep_slot]
    else:
        frozen = _int_list(args.frozen) if args.frozen else []
    frames = replay(traj, times, _viewpoint(args.view), model, frozen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pics = []
    for t, (image, _) in zip(times, frames):
        _save_image(out / f"replay_t{t:04d}.png", image, args.scale)
        pics.append(Image.open(out / f"replay_t{t:04d}.png").convert("RGB"))
    if pics:
        pics[0].save(out / "replay.gif", save_all=True, append_images=pics[1:], duration=100, loop=0)
    return {"out": out, "checkpoint": args.ckpt}


def cmd_sweep(args) -> dict:
    from dymon.evalkit import dataset_sweep

    if not args.config:
        raise UsageError("sweep needs --config with train_roots/test_roots and a harness stanza")
    spec = yaml.safe_load(Path(args.config).read_text())
    cfg_args = argparse.Namespace(**{k: v for k, v in _flatten(spec.get("train", {})).items()})
    cfg = _train_config(cfg_args)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, total_steps=args.steps)
    results = dataset_sweep(spec.get("harness", {}), cfg, spec["train_roots"], spec["test_roots"],
                            out_dir=args.out, n_novel_views=spec.get("novel_views", 3),
                            max_eval_sequences=spec.get("max_eval_sequences"))
    for r in results:
        print(f"[{r.kind}]")
        print(r.table())
    return {"out": args.out}


# --------------------------------------------------------------------------- parser

def _add_train_flags(p):
    from dymon.trainer import TrainConfig

    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        kind = f.type if isinstance(f.type, str) else str(f.type).replace("<class '", "")
        if "bool" in kind:
            p.add_argument(flag, dest=f.name, type=lambda s: str(s).lower() in ("1", "true", "yes"), default=None)
        elif "int" in kind:
            p.add_argument(flag, dest=f.name, type=int, default=None)
        elif "float" in kind:
            p.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None)
    p.add_argument("--steps", dest="total_steps", type=int, default=None, help="alias of --total-steps")


def build_parser() -> argparse.ArgumentParser:
    default_data = os.environ.get(DATA_ROOT_ENV)
    parser = argparse.ArgumentParser(prog="dymon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="YAML file of flag defaults")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("generate", "generate a procedural dataset subset")
    p.add_argument("--subset", required=True)
    p.add_argument("--n", type=int, default=None, help="number of sequences")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--H", type=int, default=None)
    p.add_argument("--W", type=int, default=None)
    p.add_argument("--objects", default=None, help="min,max objects per scene")
    p.add_argument("--subset-file", default=None)
    p.set_defaults(func=cmd_generate)

    p = add("assign", "label sequences SCFO/FCSO by camera speed")
    p.add_argument("--data", default=default_data, required=default_data is None)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--fallback-label", choices=["SCFO", "FCSO"], default=None)
    p.set_defaults(func=cmd_assign)

    p = add("train", "train a model on a labelled dataset")
    p.add_argument("--data", default=default_data, required=default_data is None)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=50)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = add("eval", "evaluate a checkpoint on a test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=default_data, required=default_data is None)
    p.add_argument("--out", required=True)
    p.add_argument("--novel-views", type=int, default=3)
    p.add_argument("--time-stride", type=int, default=1)
    p.add_argument("--max-sequences", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = add("query", "render an inferred scene at (time, viewpoint)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--time", type=int, required=True)
    p.add_argument("--view", required=True, help="x,y,z")
    p.add_argument("--out", default="query_out")
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_query)

    p = add("replay", "replay inferred dynamics from a fixed viewpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--view", required=True, help="x,y,z")
    p.add_argument("--times", default=None, help="a:b or comma list (default: all)")
    p.add_argument("--frozen", default=None, help="comma list of 0-based slots to freeze")
    p.add_argument("--keep-slot", type=int, default=None, help="freeze every slot except this one")
    p.add_argument("--out", default="replay_out")
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_replay)

    p = add("sweep", "ablation sweeps over dt_z/dt_v, beta, speed levels")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def _apply_config_file(parser, argv):
    """Re-parse with the --config file's values as defaults (flags still win)."""
    args = parser.parse_args(argv)
    if args.command is None or not getattr(args, "config", None) or args.command == "sweep":
        return args
    path = Path(args.config)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    values = _flatten(yaml.safe_load(path.read_text()) or {})
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    for action in sub._actions:
        if action.dest in values:
            action.required = False
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config_file(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else 2
    except (UsageError, FileNotFoundError) as exc:
        print(f"dymon: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    started = datetime.now(timezone.utc).isoformat()
    try:
        outputs = args.func(args)
    except UsageError as exc:
        print(f"dymon {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, KeyError) as exc:
        print(f"dymon {args.command}: error: {exc}", file=sys.stderr)
        return 1
    config = outputs.get("config") or {k: (str(v) if isinstance(v, Path) else v)
                                       for k, v in vars(args).items() if k != "func"}
    write_run_manifest(outputs["out"], args.command, config, args.seed, started,
                       dataset=outputs.get("dataset"), checkpoint=outputs.get("checkpoint"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
