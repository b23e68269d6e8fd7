"""Command-line entry point ``ide``.

Exit codes: 0 ok, 2 configuration error, 3 missing prerequisite, 4 data or
checkpoint mismatch, 5 numeric failure.
"""

from __future__ import annotations

import os

# Pin BLAS to one thread before numpy loads so numerics never depend on the
# machine's core count; IDE_THREADS only controls per-item worker pools.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

from .errors import (CheckpointError, ConfigError, DataError, DimensionError, NumericError,  # noqa: E402
                     PrerequisiteError, VocabularyError)

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5
CORRUPT_ENV = "IDE_CORRUPT_GRAD"
FOOTER = ("# metrics use a fixed random feature extractor; values are comparable only "
          "within this package")

log = logging.getLogger("idegen")


def _config(args):
    from .config import RunConfig, load_config
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "out", None):
        over["out"] = args.out
    if getattr(args, "stage", None) is not None:
        over["stage"] = args.stage
    if getattr(args, "stage1_ckpt", None):
        over["stage1_ckpt"] = args.stage1_ckpt
    if getattr(args, "disable", None):
        over["disable"] = tuple(sorted(set(cfg.disable) | set(args.disable)))
    if getattr(args, "fuse_mode", None):
        over["fuse_mode"] = args.fuse_mode
    if getattr(args, "dataset", None):
        over["dataset"] = args.dataset
    cfg = replace(cfg, **over)
    from .config import validate
    validate(cfg)
    return cfg


def _log_to(out_dir: Path, cfg=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    for old in [h for h in root.handlers if getattr(h, "_ide_run_log", False)]:
        root.removeHandler(old)
        old.close()
    handler = logging.FileHandler(out_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._ide_run_log = True
    root.addHandler(handler)
    if cfg is not None:
        (out_dir / "run_config.txt").write_text(cfg.echo(), encoding="utf-8")
        for line in cfg.echo().splitlines():
            log.info("config %s", line)


def cmd_gen_data(args) -> int:
    from .pipeline import run_gen_data
    cfg = _config(args)
    out = Path(args.out or cfg.dataset)
    ds = run_gen_data(cfg, cfg.seed, out)
    print(f"wrote {len(ds.entries)} clips to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import run_stage1, run_stage2
    cfg = _config(args)
    out = Path(cfg.out)
    _log_to(out, cfg)
    if cfg.stage == 1:
        summary = run_stage1(cfg)
        print(f"stage 1: held-out L_stage1 {summary['init_total']:.6f} -> {summary['final_total']:.6f}")
    else:
        if not cfg.stage1_ckpt:
            raise PrerequisiteError("stage 2 needs --stage1-ckpt (or stage1_ckpt in the config)")
        summary = run_stage2(cfg)
        print(f"stage 2: held-out L_dm {summary['heldout_init']:.6f} -> {summary['heldout_final']:.6f}; "
              f"first-100 training average {summary['first100_dm']:.6f}")
    print(f"checkpoint: {summary['checkpoint']}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .pipeline import run_generate
    files = None
    if args.exo1 or args.ego1 or args.traj or args.desc is not None:
        missing = [n for n in ("exo1", "ego1", "traj") if not getattr(args, n)]
        if missing or args.desc is None:
            raise ConfigError("file inputs need --exo1, --ego1, --traj and --desc together")
        files = {"exo1": args.exo1, "ego1": args.ego1, "traj": args.traj, "words": args.desc.split()}
    elif not args.dataset:
        raise ConfigError("give --dataset (with --clip-id or --split) or the file inputs")
    out = Path(args.out or "generated")
    written = run_generate(args.ckpt, out, args.seed or 0, dataset=args.dataset, clip_ids=args.clip_id or (),
                           split=args.split, files=files, gen_batch=args.batch, flow_vis=args.flow_vis,
                           dump_steps=args.dump_steps)
    print(f"generated {len(written)} clip(s) into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate
    from .worldsim import worker_count
    report = evaluate(args.generated, args.reference, args.out, workers=worker_count())
    sys.stdout.write(report.csv_text())
    print(FOOTER)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    import contextlib

    from .autodiff.gradcheck import run_model_checks, run_op_checks
    from .autodiff.tensor import REGISTRY, corrupt_gradient
    target = os.environ.get(CORRUPT_ENV, "")
    ctx = corrupt_gradient(target) if target else contextlib.nullcontext()
    with ctx:
        ops = run_op_checks(seed=args.seed or 0)
        models = run_model_checks(seed=args.seed or 0) if not args.ops_only else {}
    ok = True
    print(f"{'check':<28} {'max_rel_err':>12} {'tol':>8}  result")
    for name, (err, tol, passed) in list(ops.items()) + list(models.items()):
        ok &= passed
        print(f"{name:<28} {err:12.3e} {tol:8.0e}  {'PASS' if passed else 'FAIL'}")
    print(f"ops checked: {len(ops)} of {len(REGISTRY)} registered; model suites: {len(models)}")
    print("gradcheck: " + ("all passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ide", description="Ego-to-exo video generation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the procedural paired-view dataset")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="dataset directory (default: config 'dataset')")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train stage 1 (autoencoder) or stage 2 (diffusion)")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--stage", type=int, choices=(1, 2))
    t.add_argument("--stage1-ckpt")
    t.add_argument("--dataset")
    t.add_argument("--disable", action="append", choices=("cfpm", "adu", "ttm"), default=[])
    t.add_argument("--fuse-mode", choices=("ide", "traj_condition", "traj_concat", "ego_video_feats"))
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("generate", help="sample exo clips from a stage-2 checkpoint")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--dataset")
    q.add_argument("--clip-id", action="append")
    q.add_argument("--split", help="split suffix to generate when no --clip-id is given (default: test)")
    q.add_argument("--exo1")
    q.add_argument("--ego1")
    q.add_argument("--traj")
    q.add_argument("--desc", help="action description, e.g. 'approach red box'")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--batch", type=int, default=8)
    q.add_argument("--flow-vis", action="store_true", help="also write flow and occlusion images")
    q.add_argument("--dump-steps", action="store_true", help="write every reverse-diffusion state")
    q.add_argument("--out")
    q.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="score generated clips against reference clips")
    e.add_argument("generated")
    e.add_argument("reference")
    e.add_argument("--out", help="CSV report path")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--ops-only", action="store_true", help="skip the model-level suites")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.getLogger().setLevel(logging.INFO)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (DataError, VocabularyError, CheckpointError, DimensionError) as exc:
        print(f"data mismatch: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
