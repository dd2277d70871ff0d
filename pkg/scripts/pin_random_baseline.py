"""Measure correspondence accuracy of untrained encoders on the smoke eval split.

Prints the mean and sd over init seeds 0..19; the acceptance test pins these values.

    python3 scripts/pin_random_baseline.py [--config configs/smoke.cfg] [--seeds 20]
"""
import argparse
import math
import statistics

from stcl.evaluate import correspondence_accuracy
from stcl.segnet import init_params
from stcl.trainer import load_config, make_dataset


def random_baseline(cfg, n_seeds=20):
    clips = make_dataset(cfg, "eval")
    means = []
    for s in range(n_seeds):
        params = init_params(cfg.net(), s)
        accs = [correspondence_accuracy(params, c, t, t + 1, cfg.eval_corr_tol, cfg.measure)
                for c in clips for t in range(c.T - 1)]
        accs = [a for a in accs if not math.isnan(a)]
        means.append(statistics.fmean(accs))
    return statistics.fmean(means), statistics.stdev(means), means


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/smoke.cfg")
    ap.add_argument("--seeds", type=int, default=20)
    args = ap.parse_args()
    mean, sd, per_seed = random_baseline(load_config(args.config), args.seeds)
    print("per-seed:", " ".join(f"{m:.4f}" for m in per_seed))
    print(f"RANDOM_CORR_MEAN = {mean!r}")
    print(f"RANDOM_CORR_SD = {sd!r}")


if __name__ == "__main__":
    main()
