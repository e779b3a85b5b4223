"""Command-line entry point wiring data generation, training, and evaluation.

Every command is a pure function of its flags, input files, and seed, so
reruns write byte-identical outputs. Option precedence: command-line flags
beat the optional `--config key=value` file, which beats built-in
defaults; the resolved configuration is echoed next to each command's
output as run-config.txt for provenance.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import adapt as adapt_mod
from . import evaluate, tasks, training
from .model import Arch, init_params, load_checkpoint, save_checkpoint
from .training import AdaptConfig, MetaConfig


class UsageError(ValueError):
    """Bad flags or argument values; exits with code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through UsageError
        raise UsageError(message)


def _parse_widths(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise UsageError(f"bad width list {text!r}; expected e.g. 16,32,64")


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"bad size {text!r}; expected HxW, e.g. 32x32")


def _load_config_file(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    cfg: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge flag > config-file > default for every option of a command."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_cfg:
            raw = file_cfg[key]
            if isinstance(default, bool):
                resolved[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                resolved[key] = int(raw)
            elif isinstance(default, float):
                resolved[key] = float(raw)
            else:
                resolved[key] = raw
        else:
            resolved[key] = default
    return resolved


def _echo_config(out_path: Path, command: str, cfg: dict) -> None:
    """Write the resolved configuration next to the command's output."""
    target = out_path / "run-config.txt" if out_path.is_dir() else Path(
        str(out_path) + ".run-config.txt"
    )
    lines = [f"command={command}"] + [f"{k}={cfg[k]}" for k in sorted(cfg)]
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _adapt_config(cfg: dict) -> AdaptConfig:
    return AdaptConfig(
        inner_lr=cfg["alpha"], steps=cfg["k"], optimizer=cfg["inner_optimizer"]
    )


def _load_tasks(data_dir: str) -> list[tasks.Task]:
    seqs, names = tasks.load_dataset(data_dir)
    return tasks.all_tasks(seqs, names)


# -- commands ----------------------------------------------------------------


def _cmd_synth_data(args) -> int:
    defaults = dict(
        out=args.out, count=0, velocity_range=2.0, size="32x32", seed=0, length=7,
        smoothness=1.5,
    )
    cfg = _resolve(args, defaults)
    if cfg["count"] < 1:
        raise UsageError("--count must be >= 1")
    size = _parse_size(cfg["size"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    for i in range(cfg["count"]):
        velocity = tuple(rng.uniform(-cfg["velocity_range"], cfg["velocity_range"], 2))
        seq = tasks.synth_sequence(
            texture_seed=cfg["seed"] * 1_000_003 + i,
            velocity=velocity,
            length=cfg["length"],
            size=size,
            smoothness=cfg["smoothness"],
        )
        tasks.save_sequence(seq, out / f"seq_{i:04d}")
    _echo_config(out, "synth-data", cfg)
    return 0


def _cmd_pretrain(args) -> int:
    defaults = dict(
        data=args.data, out=args.out, steps=500, lr=1e-3, seed=0, batch=4,
        widths="16,32,64", taps=5, optimizer="adamax",
    )
    cfg = _resolve(args, defaults)
    seqs, _ = tasks.load_dataset(cfg["data"])
    arch = Arch(
        channels=seqs[0][0].shape[0], widths=_parse_widths(cfg["widths"]), taps=cfg["taps"]
    )
    init = init_params(arch, cfg["seed"])
    trained = training.pretrain(
        init,
        training.narrow_triplets(seqs),
        lr=cfg["lr"],
        steps=cfg["steps"],
        batch=cfg["batch"],
        seed=cfg["seed"],
        optimizer=cfg["optimizer"],
    )
    save_checkpoint(trained, cfg["out"])
    _echo_config(Path(cfg["out"]), "pretrain", cfg)
    return 0


def _cmd_retrain(args) -> int:
    defaults = dict(
        ckpt=args.ckpt, data=args.data, out=args.out, steps=500, lr=1e-3, seed=0,
        batch=4, optimizer="sgd",
    )
    cfg = _resolve(args, defaults)
    params = load_checkpoint(cfg["ckpt"])
    seqs, _ = tasks.load_dataset(cfg["data"])
    trained = training.retrain(
        params, seqs, lr=cfg["lr"], steps=cfg["steps"], batch=cfg["batch"],
        seed=cfg["seed"], optimizer=cfg["optimizer"],
    )
    save_checkpoint(trained, cfg["out"])
    _echo_config(Path(cfg["out"]), "retrain", cfg)
    return 0


def _cmd_meta_train(args) -> int:
    defaults = dict(
        ckpt=args.ckpt, data=args.data, val=args.val, out=args.out, report=None,
        alpha=1e-4, beta=1e-4, k=1, batch=4, steps=1000, seed=0, val_interval=50,
        patience=20, decay_factor=5.0, inner_optimizer="sgd", quiet=False,
    )
    cfg = _resolve(args, defaults)
    params = load_checkpoint(cfg["ckpt"])
    train_seqs, _ = tasks.load_dataset(cfg["data"])
    val_seqs, _ = tasks.load_dataset(cfg["val"])
    acfg = _adapt_config(cfg)
    mcfg = MetaConfig(
        outer_lr=cfg["beta"],
        outer_steps=cfg["steps"],
        batch=cfg["batch"],
        seed=cfg["seed"],
        val_interval=cfg["val_interval"],
        patience=cfg["patience"],
        decay_factor=cfg["decay_factor"],
    )
    log = None if cfg["quiet"] else lambda msg: print(msg)
    trained, report = training.meta_train(params, train_seqs, val_seqs, acfg, mcfg, log=log)
    save_checkpoint(trained, cfg["out"])
    if cfg["report"]:
        report.to_csv(cfg["report"])
    _echo_config(Path(cfg["out"]), "meta-train", cfg)
    return 0


def _cmd_adapt(args) -> int:
    defaults = dict(
        ckpt=args.ckpt, seq=args.seq, out=args.out, alpha=1e-4, k=1,
        inner_optimizer="sgd",
    )
    cfg = _resolve(args, defaults)
    params = load_checkpoint(cfg["ckpt"])
    seq = tasks.load_sequence(cfg["seq"])
    middles = adapt_mod.interpolate_middles(params, seq, _adapt_config(cfg), adapt=True)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(middles):
        tasks.save_frame(frame, out / (tasks.FRAME_NAME % i))
    _echo_config(out, "adapt", cfg)
    return 0


def _cmd_interpolate(args) -> int:
    defaults = dict(
        ckpt=args.ckpt, seq=args.seq, out=args.out, alpha=1e-4, k=1,
        inner_optimizer="sgd", no_adapt=False,
    )
    cfg = _resolve(args, defaults)
    params = load_checkpoint(cfg["ckpt"])
    seq = tasks.load_sequence(cfg["seq"])
    doubled = adapt_mod.interpolate_sequence(
        params, seq, _adapt_config(cfg), adapt=not cfg["no_adapt"]
    )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(doubled):
        tasks.save_frame(frame, out / (tasks.FRAME_NAME % i))
    _echo_config(out, "interpolate", cfg)
    return 0


def _cmd_eval(args) -> int:
    defaults = dict(
        baseline=args.baseline, retrained=args.retrained, meta=args.meta,
        data=args.data, out=args.out, alpha=1e-4, k=1, inner_optimizer="sgd",
        condition="testset",
    )
    cfg = _resolve(args, defaults)
    rows = evaluate.compare_modes(
        load_checkpoint(cfg["baseline"]),
        load_checkpoint(cfg["retrained"]),
        load_checkpoint(cfg["meta"]),
        _load_tasks(cfg["data"]),
        _adapt_config(cfg),
        condition=cfg["condition"],
    )
    evaluate.write_rows(cfg["out"], rows)
    _echo_config(Path(cfg["out"]), "eval", cfg)
    return 0


def _cmd_ablate(args) -> int:
    if args.mode == "k":
        defaults = dict(
            mode="k", meta=args.meta, retrained=args.retrained, data=args.data,
            out=args.out, alpha=1e-4, ks="0,1,2,3,5", inner_optimizer="sgd",
        )
        cfg = _resolve(args, defaults)
        if not cfg["meta"] or not cfg["retrained"]:
            raise UsageError("--mode k needs --meta and --retrained checkpoints")
        ks = tuple(int(v) for v in cfg["ks"].split(","))
        grid = evaluate.ablate_inner_steps(
            load_checkpoint(cfg["meta"]),
            load_checkpoint(cfg["retrained"]),
            _load_tasks(cfg["data"]),
            inner_lr=cfg["alpha"],
            ks=ks,
            optimizer=cfg["inner_optimizer"],
        )
        evaluate.write_k_grid(cfg["out"], ks, grid)
    else:
        defaults = dict(
            mode="lr", data=args.data, out=args.out, k=1, inner_optimizer="sgd",
            ckpt=None,
        )
        cfg = _resolve(args, defaults)
        pairs = args.ckpt or []
        if not pairs:
            raise UsageError("--mode lr needs one or more --ckpt ALPHA=PATH")
        checkpoints = []
        for pair in pairs:
            if "=" not in pair:
                raise UsageError(f"--ckpt expects ALPHA=PATH, got {pair!r}")
            rate, path = pair.split("=", 1)
            checkpoints.append((float(rate), load_checkpoint(path)))
        cfg["ckpt"] = ",".join(pairs)
        cells = evaluate.ablate_lr(
            checkpoints, _load_tasks(cfg["data"]), steps=cfg["k"],
            optimizer=cfg["inner_optimizer"],
        )
        evaluate.write_lr_row(cfg["out"], cells)
    _echo_config(Path(cfg["out"]), "ablate", cfg)
    return 0


def _cmd_feasibility(args) -> int:
    defaults = dict(
        ckpt=args.ckpt, seq=args.seq, out=args.out, steps=200, lr=1e-3,
        optimizer="adamax",
    )
    cfg = _resolve(args, defaults)
    series = evaluate.feasibility_curve(
        load_checkpoint(cfg["ckpt"]),
        tasks.load_sequence(cfg["seq"]),
        lr=cfg["lr"],
        steps=cfg["steps"],
        optimizer=cfg["optimizer"],
    )
    evaluate.write_series(cfg["out"], series)
    _echo_config(Path(cfg["out"]), "feasibility", cfg)
    return 0


# -- parser ------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="metainterp",
        description=(
            "Scene-adaptive frame interpolation: synthesize data, train the "
            "baseline/retrained/meta-learned models, adapt at test time, and "
            "run the comparison harnesses."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: _Parser):
        p.add_argument("--config", help="flat key=value config file (flags win)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap (runs are single-threaded; reserved)")

    p = sub.add_parser("synth-data", help="generate synthetic moving-texture sequences")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, help="number of sequences")
    p.add_argument("--velocity-range", dest="velocity_range", type=float,
                   help="velocities drawn uniformly from +/- this (px/frame)")
    p.add_argument("--size", help="frame size HxW (default 32x32)")
    p.add_argument("--seed", type=int)
    p.add_argument("--length", type=int, help="frames per sequence (default 7)")
    p.add_argument("--smoothness", type=float, help="texture blur radius in px")
    common(p)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("pretrain", help="train a fresh model on narrow-gap triplets")
    p.add_argument("--data", required=True, help="dataset directory of sequences")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--widths", help="encoder widths, e.g. 16,32,64")
    p.add_argument("--taps", type=int, help="adaptive kernel size (odd)")
    p.add_argument("--optimizer", choices=["sgd", "adamax"])
    common(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("retrain", help="jointly fine-tune a checkpoint on sequence data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--optimizer", choices=["sgd", "adamax"])
    common(p)
    p.set_defaults(func=_cmd_retrain)

    p = sub.add_parser(
        "meta-train",
        help="adaptation-aware training: per-task inner updates, first-order meta step",
    )
    p.add_argument("--ckpt", required=True, help="starting checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True, help="held-out sequences for plateau decay")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="training-report CSV path")
    p.add_argument("--alpha", type=float, help="inner-loop learning rate")
    p.add_argument("--beta", type=float, help="outer-loop learning rate")
    p.add_argument("--k", type=int, help="inner steps per task")
    p.add_argument("--batch", type=int, help="tasks per outer step")
    p.add_argument("--steps", type=int, help="outer steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--val-interval", dest="val_interval", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--decay-factor", dest="decay_factor", type=float)
    p.add_argument("--inner-optimizer", dest="inner_optimizer",
                   choices=["sgd", "adamax"])
    p.add_argument("--quiet", action="store_const", const=True)
    common(p)
    p.set_defaults(func=_cmd_meta_train)

    p = sub.add_parser("adapt", help="adapt to a sequence and write its middle frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True, help="sequence directory (low frame rate)")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--inner-optimizer", dest="inner_optimizer",
                   choices=["sgd", "adamax"])
    common(p)
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("interpolate", help="double a sequence's frame rate")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--inner-optimizer", dest="inner_optimizer",
                   choices=["sgd", "adamax"])
    p.add_argument("--no-adapt", dest="no_adapt", action="store_const", const=True,
                   help="plain sliding inference, no test-time adaptation")
    common(p)
    p.set_defaults(func=_cmd_interpolate)

    p = sub.add_parser("eval", help="baseline / retrained / meta three-way comparison")
    p.add_argument("--baseline", required=True)
    p.add_argument("--retrained", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--alpha", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--inner-optimizer", dest="inner_optimizer",
                   choices=["sgd", "adamax"])
    p.add_argument("--condition", help="label for the condition column")
    common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="inner-step-count or inner-rate ablation grids")
    p.add_argument("--mode", choices=["k", "lr"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--meta", help="meta checkpoint (mode k)")
    p.add_argument("--retrained", help="retrained checkpoint (mode k)")
    p.add_argument("--alpha", type=float, help="adaptation rate (mode k)")
    p.add_argument("--ks", help="step counts, e.g. 0,1,2,3,5 (mode k)")
    p.add_argument("--k", type=int, help="adaptation steps (mode lr)")
    p.add_argument("--ckpt", action="append",
                   help="ALPHA=PATH pair, repeatable (mode lr)")
    p.add_argument("--inner-optimizer", dest="inner_optimizer",
                   choices=["sgd", "adamax"])
    common(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser(
        "feasibility",
        help="naive fine-tuning curve: PSNR change on a held-out middle frame",
    )
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True, help="full-rate 7-frame sequence directory")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["sgd", "adamax"])
    common(p)
    p.set_defaults(func=_cmd_feasibility)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
