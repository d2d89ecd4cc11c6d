"""Command-line surface: gen-data, pretrain, finetune, eval, interpret, inspect.

Exit codes: 0 success, 1 runtime/numeric failure, 2 usage or configuration
error. `MOEPOT_LOG` in {error, info, debug} controls verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import read_checkpoint, require_matching_config, write_checkpoint
from .data import FAMILIES, FamilyParams, generate, heldout_indices, pad_channels
from .errors import ConfigError, MoepotError
from .evaluation import (
    CENTROID_SMOOTHING, classification_accuracy, error_accumulation,
    expert_usage, heldout_windows, model_predictor, model_signature_fn,
    signatures_for, split_calibration_test, write_pgm,
)
from .model import count_params
from .runconfig import RunConfig, parse_config, serialize_config
from .training import finetune, metrics_csv, pretrain
from .trajio import read_trajectories, write_trajectories

log = logging.getLogger("moepot")


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("MOEPOT_LOG", "error"), logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run configuration file")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker parallelism cap")
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved configuration and exit")
    p.add_argument("--dry-run", action="store_true",
                   help="validate the pipeline without writing outputs")


def _load_config(args) -> RunConfig:
    if args.config is not None:
        cfg = parse_config(Path(args.config).read_text())
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    return cfg


def _maybe_print_config(args, cfg: RunConfig) -> bool:
    if args.print_config:
        sys.stdout.write(serialize_config(cfg))
        return True
    return False


def _load_mixture(cfg: RunConfig, extra: list[Path] | None):
    entries = list(cfg.mixture)
    for p in extra or []:
        entries.append((str(p), 1.0))
    if not entries:
        raise ConfigError("no datasets: give data entries in the config or --dataset flags")
    sets = [read_trajectories(path) for path, _ in entries]
    weights = [w for _, w in entries]
    return sets, weights


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    params = FamilyParams(
        family=args.family,
        grid=(args.grid, args.grid),
        dt=args.dt if args.dt is not None else _family_default_dt(args.family),
        T_total=args.frames,
        n_traj=args.n,
        seed=args.seed if args.seed is not None else 0,
        nu=args.nu,
        c=(args.cx, args.cy),
        D=args.D,
        amplitude=args.amplitude,
    )
    params.validate()
    traj = generate(params)
    if args.channels > 1 or args.mask:
        traj = pad_channels(traj, args.channels, fill=1.0, add_mask=args.mask)
    out_dir = Path(args.out)
    path = out_dir / f"{params.family}-s{params.seed}.mpot"
    if args.dry_run:
        print(f"dry-run: would write {path}")
        return 0
    out_dir.mkdir(parents=True, exist_ok=True)
    write_trajectories(traj, path)
    n, t, c, h, w = traj.trajectories.shape
    print(f"{path}\t{params.family}\tN={n}\tT_total={t}\tH={h}\tW={w}\tC={c}")
    return 0


def _family_default_dt(family: str) -> float:
    return {"heat": 0.1, "advection": 0.25, "reaction_diffusion": 0.05}[family]


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    sets, weights = _load_mixture(cfg, args.dataset)
    if args.dry_run:
        from dataclasses import replace
        probe = replace(cfg.train, epochs=1, steps_per_epoch=1)
        result = pretrain(sets, weights, cfg.model, probe)
        print(f"dry-run ok: one batch trained, loss path finite "
              f"(init sha256 {result.init_params_sha256[:16]})")
        return 0
    result = pretrain(sets, weights, cfg.model, cfg.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.mpck"
    write_checkpoint(result.checkpoint, ckpt_path)
    (out / "metrics.csv").write_text(metrics_csv(result.metrics))
    print(f"init-params-sha256: {result.init_params_sha256}")
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics: {out / 'metrics.csv'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    ckpt = read_checkpoint(args.ckpt)
    if args.config is not None:
        require_matching_config(ckpt, cfg.model)
    dataset = read_trajectories(args.dataset)
    if args.dry_run:
        from dataclasses import replace
        probe = replace(cfg.train, epochs=1, steps_per_epoch=1)
        finetune(ckpt, dataset, probe)
        print("dry-run ok: one fine-tuning batch trained")
        return 0
    result = finetune(ckpt, dataset, cfg.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "finetuned.mpck"
    write_checkpoint(result.checkpoint, ckpt_path)
    (out / "metrics.csv").write_text(metrics_csv(result.metrics))
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics: {out / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    ckpt = read_checkpoint(args.ckpt)
    sets, _ = _load_mixture(cfg, args.dataset)
    horizons = ([int(h) for h in args.horizons.split(",")]
                if args.horizons else cfg.eval.horizons)
    window = ckpt.model_config.t_window
    predict = model_predictor(ckpt.params)

    def one_step(dataset):
        wins = heldout_windows(dataset, window, max_per_traj=4)
        targets = _heldout_targets(dataset, window, max_per_traj=4)
        preds = predict(wins)
        from .evaluation import l2re
        return float(np.mean([l2re(preds[i], targets[i]) for i in range(len(wins))]))

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        one_step_errs = list(pool.map(one_step, sets))

    lines = ["# metrics", "dataset,one_step_l2re"]
    for s, e in zip(sets, one_step_errs):
        lines.append(f"{s.dataset_id},{e:.8f}")
    lines.append("# error_accumulation")
    lines.append("dataset,horizon,l2re")
    for s in sets:
        usable = [h for h in horizons if window + h <= s.n_frames]
        if not usable:
            raise ConfigError(
                f"no requested horizon fits the {s.n_frames}-frame trajectories")
        errs = error_accumulation(predict, s, window, usable)
        for h in usable:
            lines.append(f"{s.dataset_id},{h},{errs[h]:.8f}")
    report = "\n".join(lines) + "\n"
    if args.dry_run:
        sys.stdout.write(report)
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report)
    print(f"report: {out / 'report.csv'}")
    if args.dump_frames > 0:
        from .evaluation import rollout
        for s in sets:
            idx = heldout_indices(s.n_traj)
            frames = rollout(predict, s.trajectories[idx[0], 0:window], args.dump_frames)
            for f in range(args.dump_frames):
                write_pgm(out / f"{s.dataset_id}-pred-{f + 1}.pgm", frames[f, 0])
                write_pgm(out / f"{s.dataset_id}-gt-{f + 1}.pgm",
                          s.trajectories[idx[0], window + f, 0])
        print(f"frames: {out}")
    return 0


def _heldout_targets(dataset, window, max_per_traj):
    frames = dataset.trajectories
    idx = heldout_indices(dataset.n_traj)
    from .data import valid_starts
    starts = valid_starts(dataset.n_frames, window)
    take = np.linspace(0, starts - 1, num=min(max_per_traj, starts), dtype=int)
    return np.stack([frames[i, s + window] for i in idx for s in take])


def cmd_interpret(args) -> int:
    cfg = _load_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    ckpt = read_checkpoint(args.ckpt)
    sets, _ = _load_mixture(cfg, args.dataset)
    if len(sets) < 2:
        raise ConfigError("interpret needs at least 2 datasets to classify between")
    window = ckpt.model_config.t_window
    n_blocks = ckpt.model_config.n_blocks
    signature_fn = model_signature_fn(ckpt.params)

    cal_windows, test_windows = [], []
    for s in sets:
        held = heldout_indices(s.n_traj)
        cal_pos, test_pos = split_calibration_test(len(held), seed=cfg.eval.split_seed)
        from .data import valid_starts
        starts = valid_starts(s.n_frames, window)
        frames = s.trajectories
        cal_windows.append(np.stack([frames[held[i], st:st + window]
                                     for i in cal_pos for st in range(starts)]))
        test_windows.append(np.stack([frames[held[i], st:st + window]
                                      for i in test_pos for st in range(starts)]))
    ids = [s.dataset_id for s in sets]

    lines = ["# per_block_accuracy", "block,accuracy"]
    for block in range(n_blocks):
        acc = classification_accuracy(signature_fn, cal_windows, test_windows, ids, block)
        lines.append(f"{block},{acc:.6f}")
    lines.append(f"concat,{_concat_accuracy(signature_fn, cal_windows, test_windows):.6f}")
    lines.append("# expert_usage")
    lines.append("dataset,block," + ",".join(f"expert_{i}" for i in range(ckpt.model_config.n_routed)))
    for s, wins in zip(sets, test_windows):
        for block in range(n_blocks):
            usage = expert_usage(ckpt.params, wins, block)
            lines.append(f"{s.dataset_id},{block}," + ",".join(f"{u:.6f}" for u in usage))
    report = "\n".join(lines) + "\n"
    if args.dry_run:
        sys.stdout.write(report)
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "interpret.csv").write_text(report)
    print(f"report: {out / 'interpret.csv'}")
    return 0


def _concat_accuracy(signature_fn, cal_windows, test_windows) -> float:
    """Classification over all blocks at once: per-block cross-entropies sum."""
    cal_sigs = [signatures_for(signature_fn, w) for w in cal_windows]
    centroids = [s.mean(axis=0) for s in cal_sigs]
    n_r = centroids[0].shape[-1]
    smoothed = [(c + CENTROID_SMOOTHING) / (1 + n_r * CENTROID_SMOOTHING)
                for c in centroids]
    hits = total = 0
    for true_idx, wins in enumerate(test_windows):
        sigs = signatures_for(signature_fn, wins)
        for s in sigs:
            scores = [-(s * np.log(c)).sum() for c in smoothed]
            hits += int(np.argmin(scores) == true_idx)
            total += 1
    return hits / total


def cmd_inspect(args) -> int:
    ckpt = read_checkpoint(args.ckpt)
    counts = count_params(ckpt.model_config)
    tensors = dict(ckpt.params.named_tensors())
    if args.json:
        payload = {
            "model": ckpt.model_config.to_dict(),
            "train": ckpt.train_config.to_dict(),
            "global_step": ckpt.global_step,
            "total_params": counts.total,
            "activated_params": counts.activated,
            "activated_expert_fraction": counts.activated_expert_fraction,
            "tensors": {n: list(t.shape) for n, t in tensors.items()},
            "crc": "ok",
        }
        print(json.dumps(payload, indent=2, sort_keys=True))
        return 0
    print(f"moepot checkpoint (version {__version__}) step={ckpt.global_step}")
    print("model config:")
    for k, v in ckpt.model_config.to_dict().items():
        print(f"  {k} = {v}")
    print(f"total params:     {counts.total}")
    print(f"activated params: {counts.activated}")
    print(f"activated expert fraction per MoE layer: "
          f"{counts.expert_fraction_num}/{counts.expert_fraction_den} "
          f"= {counts.activated_expert_fraction:.6f}")
    print("tensors:")
    for n, t in tensors.items():
        print(f"  {n}: {tuple(t.shape)} {t.precision}")
    print("crc: ok")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moepot",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic trajectory file")
    _common_flags(g)
    g.add_argument("--family", required=True, choices=FAMILIES)
    g.add_argument("--n", type=int, default=20, help="trajectories")
    g.add_argument("--frames", type=int, default=24, help="frames per trajectory")
    g.add_argument("--grid", type=int, default=32)
    g.add_argument("--dt", type=float, default=None)
    g.add_argument("--nu", type=float, default=2e-3)
    g.add_argument("--cx", type=float, default=0.5)
    g.add_argument("--cy", type=float, default=0.25)
    g.add_argument("--D", type=float, default=1e-3)
    g.add_argument("--amplitude", type=float, default=1.0)
    g.add_argument("--channels", type=int, default=1, help="pad to this channel count")
    g.add_argument("--mask", action="store_true", help="append an all-ones mask channel")
    g.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="denoising pre-training over a mixture")
    _common_flags(p)
    p.add_argument("--epochs", type=int, help="override configured epochs")
    p.add_argument("--dataset", type=Path, action="append",
                   help="extra dataset (weight 1), may repeat")
    p.set_defaults(fn=cmd_pretrain)

    f = sub.add_parser("finetune", help="router-frozen tuning on one dataset")
    _common_flags(f)
    f.add_argument("--ckpt", type=Path, required=True)
    f.add_argument("--dataset", type=Path, required=True)
    f.add_argument("--epochs", type=int, help="override configured epochs")
    f.set_defaults(fn=cmd_finetune)

    e = sub.add_parser("eval", help="one-step and rollout error report")
    _common_flags(e)
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--dataset", type=Path, action="append")
    e.add_argument("--horizons", type=str, help="comma-separated rollout depths")
    e.add_argument("--dump-frames", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("interpret", help="router-signature dataset classification")
    _common_flags(i)
    i.add_argument("--ckpt", type=Path, required=True)
    i.add_argument("--dataset", type=Path, action="append")
    i.set_defaults(fn=cmd_interpret)

    s = sub.add_parser("inspect", help="summarize a checkpoint")
    _common_flags(s)
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MoepotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
