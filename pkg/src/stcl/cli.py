"""Command-line entry point: ``stcl {gen-data,train,eval,gradcheck,ablate,infer}``.

Exit codes: 0 success, 2 usage, 3 config, 4 numeric failure, 5 I/O.
``STCL_THREADS`` caps the BLAS/OpenMP worker count; it is applied before
numpy is imported when the CLI is the entry point.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

log = logging.getLogger("stcl")


def apply_thread_cap(env=os.environ) -> int | None:
    raw = env.get("STCL_THREADS")
    if raw is None or raw == "":
        return None
    from .errors import ConfigError
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"STCL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"STCL_THREADS must be a positive integer, got {raw!r}")
    for var in THREAD_VARS:
        env[var] = str(n)
    return n


ABLATIONS = {
    "component": {
        "base": {"use_pcl": False, "use_ocl": False},
        "pcl": {"use_pcl": True, "use_ocl": False},
        "ocl": {"use_pcl": False, "use_ocl": True},
        "full": {"use_pcl": True, "use_ocl": True},
    },
    "negatives": {
        "inter": {"pcl_negative_mode": "inter"},
        "intra": {"pcl_negative_mode": "intra"},
        "both": {"pcl_negative_mode": "both"},
    },
    "sources": {
        "annotated": {"ocl_sources": "annotated"},
        "discovered": {"ocl_sources": "discovered"},
        "both": {"ocl_sources": "both"},
    },
}

ABLATE_COLUMNS = ["variant", "seed", "l_seg_step0", "l_seg_final", "J", "F", "JF_mean", "corr_acc"]


def _nanmean(xs) -> float:
    import numpy as np
    arr = np.asarray(xs, float)
    arr = arr[~np.isnan(arr)]
    return float(arr.mean()) if arr.size else float("nan")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stcl", description="Correspondence-regularised video object segmentation")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", help="output directory (defaults to out_dir from the config)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("gen-data", help="write train/eval clips as PPM/PGM with manifests"))
    tr = common(sub.add_parser("train", help="train and write checkpoints plus metrics.csv"))
    tr.add_argument("--resume", help="checkpoint to continue from")
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint on the eval split"))
    ev.add_argument("--checkpoint", required=True)
    gc = common(sub.add_parser("gradcheck", help="finite-difference check of every loss"))
    gc.add_argument("--seeds", type=int, default=100)
    gc.add_argument("--losses", default="seg,pcl,ocl,total")
    gc.add_argument("--tol", type=float, default=1e-4)
    ab = common(sub.add_parser("ablate", help="run a variant matrix with shared seeds"))
    ab.add_argument("--matrix", choices=sorted(ABLATIONS), default="component")
    ab.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated run seeds")
    inf = common(sub.add_parser("infer", help="propagate the first mask of one clip directory"))
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--clip", required=True, help="clip directory written by gen-data")
    return p


def _overrides(pairs) -> dict:
    from .errors import UsageError
    from .trainer import TrainConfig
    known = {f.name for f in fields(TrainConfig)}
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        k = k.strip()
        if k not in known:
            raise UsageError(f"unknown config key {k!r}")
        out[k] = v.strip()
    return out


def _config(args):
    from .errors import UsageError
    from .trainer import load_config
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} does not exist")
    cfg = load_config(args.config, _overrides(args.set))
    out = Path(args.out or cfg.out_dir)
    return cfg, out


def _mkdir(path: Path) -> Path:
    from .errors import CheckpointError
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CheckpointError(f"cannot create {path}: {exc}") from None
    return path


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from .synthvid import generate_clip, generate_proposals, write_clip
    from .trainer import dump_config
    cfg, out = _config(args)
    spec = cfg.clip_spec()
    try:
        for split, n, base in (("train", cfg.train_clips, cfg.train_seed_base),
                               ("eval", cfg.eval_clips, cfg.eval_seed_base)):
            d = _mkdir(out / split)
            names = []
            for i in range(n):
                seed = base + i
                clip = generate_clip(spec, seed)
                generate_proposals(clip, cfg.distractors_per_frame, cfg.proposal_jitter, seed=seed,
                                   cell=cfg.cluster_cell)
                name = f"clip_{seed:07d}"
                write_clip(clip, d / name, proposal_seed=seed)
                names.append(name)
            (d / "manifest.txt").write_text("".join(f"{nm}\n" for nm in names), encoding="utf-8")
            print(f"{split}: {n} clips -> {d}")
        (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    except OSError as exc:
        from .errors import CheckpointError
        raise CheckpointError(f"cannot write clips under {out}: {exc}") from None
    return 0


def cmd_train(args) -> int:
    from .errors import CheckpointError
    from .trainer import dump_config, run_training
    cfg, out = _config(args)
    if args.resume and not Path(args.resume).is_file():
        raise CheckpointError(f"checkpoint {args.resume} does not exist")
    _mkdir(out)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    res = run_training(cfg, out, resume=args.resume)
    last = res.rows[-1] if res.rows else {}
    summary = ", ".join(f"{k}={last[k]:.4f}" for k in ("l_seg", "JF_mean", "corr_acc") if k in last)
    print(f"trained to step {res.state.step} in {res.seconds:.1f}s; checkpoint {res.checkpoint}"
          + (f"; {summary}" if summary else ""))
    return 0


def _load_params(path):
    from .trainer import TrainState
    return TrainState.load(path).params


def cmd_eval(args) -> int:
    from .evaluate import evaluate_clips
    from .trainer import make_dataset
    cfg, out = _config(args)
    params = _load_params(args.checkpoint)
    rep = evaluate_clips(params, make_dataset(cfg, "eval"), cfg.net(), cfg.memory_capacity, cfg.memory_stride,
                         cfg.eval_corr_tol, cfg.digest(), cfg.eval_with_corr)
    _mkdir(out)
    path = out / "eval.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["object", "J", "F"])
        for key in rep.per_object_J:
            w.writerow([key, repr(rep.per_object_J[key]), repr(rep.per_object_F[key])])
        w.writerow(["mean", repr(rep.J_mean), repr(rep.F_mean)])
    print(f"J={rep.J_mean:.4f} F={rep.F_mean:.4f} JF={rep.JF_mean:.4f} corr_acc={rep.corr_acc:.4f} -> {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .errors import UsageError
    from .gradcheck import SUITE, run_suite
    names = [n.strip() for n in args.losses.split(",") if n.strip()]
    bad = [n for n in names if n not in SUITE]
    if bad or args.seeds < 1:
        raise UsageError(f"unknown losses {bad}" if bad else "--seeds must be >= 1")
    ok = True
    for r in run_suite(names, args.seeds, args.tol):
        ok &= r.passed
        status = "PASS" if r.passed else f"FAIL (seeds {r.failures[:5]})"
        print(f"{r.name:6s} seeds={r.seeds} max_rel_err={r.max_rel_err:.3e} {status} [{r.seconds:.1f}s]")
    return 0 if ok else 4


def run_ablation(cfg, out: Path, matrix: str, seeds) -> dict:
    """Train every variant for every seed; returns ``{variant: [row, ...]}`` and writes the CSVs."""
    import numpy as np
    from dataclasses import replace
    from .trainer import make_dataset, run_training
    _mkdir(out)
    data, eval_set = make_dataset(cfg, "train"), make_dataset(cfg, "eval")
    results = {}
    for variant, kw in ABLATIONS[matrix].items():
        rows = []
        for s in seeds:
            vcfg = replace(cfg, seed=s, init_seed=s, **kw).validate()
            res = run_training(vcfg, out / variant / f"seed_{s}", dataset=data, eval_set=eval_set)
            ev = res.final_eval
            rows.append({"variant": variant, "seed": s,
                         "l_seg_step0": res.rows[0]["l_seg"] if res.rows else float("nan"),
                         "l_seg_final": res.rows[-1]["l_seg"] if res.rows else float("nan"),
                         "J": ev.J_mean if ev else float("nan"), "F": ev.F_mean if ev else float("nan"),
                         "JF_mean": ev.JF_mean if ev else float("nan"),
                         "corr_acc": ev.corr_acc if ev else float("nan")})
            log.info("%s seed %s: JF=%.4f", variant, s, rows[-1]["JF_mean"])
        with open(out / f"{variant}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATE_COLUMNS)
            w.writeheader()
            w.writerows(rows)
        results[variant] = rows
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seeds", "J", "F", "JF_mean", "JF_std", "corr_acc"])
        for variant, rows in results.items():
            col = lambda k: [r[k] for r in rows]
            jf = np.array(col("JF_mean"), float)
            w.writerow([variant, len(rows), f"{_nanmean(col('J')):.4f}", f"{_nanmean(col('F')):.4f}",
                        f"{_nanmean(jf):.4f}", f"{np.std(jf):.4f}", f"{_nanmean(col('corr_acc')):.4f}"])
    return results


def cmd_ablate(args) -> int:
    from .errors import UsageError
    cfg, out = _config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    results = run_ablation(cfg, out, args.matrix, seeds)
    print(f"{'variant':12s} {'J':>7s} {'F':>7s} {'JF':>7s} {'corr':>7s}")
    for variant, rows in results.items():
        m = {k: _nanmean([r[k] for r in rows]) for k in ("J", "F", "JF_mean", "corr_acc")}
        print(f"{variant:12s} {m['J']:7.4f} {m['F']:7.4f} {m['JF_mean']:7.4f} {m['corr_acc']:7.4f}")
    print(f"per-variant CSVs and summary.csv in {out}")
    return 0


def cmd_infer(args) -> int:
    from .errors import CheckpointError
    from .evaluate import contour_F, region_J
    from .segnet import infer_sequence
    from .synthvid import read_clip, write_pgm
    cfg, out = _config(args)
    params = _load_params(args.checkpoint)
    if not (Path(args.clip) / "manifest.txt").is_file():
        raise CheckpointError(f"{args.clip} is not a clip directory")
    clip = read_clip(args.clip)
    preds = infer_sequence(params, clip.frames, clip.masks[0], cfg.net(), cfg.memory_capacity, cfg.memory_stride)
    _mkdir(out)
    for t, pred in enumerate(preds, start=1):
        write_pgm(out / f"pred_{t:03d}.pgm", pred)
    js, fs = [], []
    with open(out / "infer.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "object", "J", "F"])
        for t, pred in enumerate(preds, start=1):
            for oid in clip.object_ids:
                j, f = region_J(pred, clip.masks[t], oid), contour_F(pred, clip.masks[t], oid)
                js.append(j)
                fs.append(f)
                w.writerow([t, oid, repr(j), repr(f)])
    mean = lambda xs: sum(xs) / len(xs) if xs else float("nan")
    print(f"{len(preds)} masks -> {out}; J={mean(js):.4f} F={mean(fs):.4f}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "ablate": cmd_ablate, "infer": cmd_infer}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .errors import StclError
    try:
        apply_thread_cap()
        return COMMANDS[args.command](args)
    except StclError as exc:
        print(f"stcl {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"stcl {args.command}: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
