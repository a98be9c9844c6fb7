#!/usr/bin/env python3
"""Inversion-then-sampling error of the exact Gaussian predictor across
schedules, data variances and step counts.

The error is first order in the step size. For unit-variance data centred at
zero each DDIM step multiplies z by cos(dtheta), with alpha_bar = cos^2(theta),
so a round trip loses roughly sum(dtheta^2) >= theta_max^2 / S.
"""

from __future__ import annotations

import argparse
import math

import numpy as np

from segdistill import ddim


def round_trip(kind, steps, variance, dim=8, batch=64, seed=0):
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=dim)
    pred = ddim.GaussianPredictor(mu, variance)
    z0 = mu + math.sqrt(variance) * rng.normal(size=(batch, dim))
    sched = ddim.build_schedule(kind, steps)
    back = ddim.sample(ddim.invert(z0, pred, sched), pred, sched)
    return float(np.linalg.norm(back - z0) / np.linalg.norm(z0))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, nargs="+", default=[25, 50, 100, 200, 500])
    ap.add_argument("--variances", type=float, nargs="+", default=[0.01, 0.25, 1.0, 4.0])
    ap.add_argument("--kinds", nargs="+", default=["linear", "scaled_linear", "cosine"])
    args = ap.parse_args()

    print(f"{'schedule':<14}{'var':>6}" + "".join(f"{s:>10d}" for s in args.steps))
    for kind in args.kinds:
        for var in args.variances:
            errs = [round_trip(kind, s, var) for s in args.steps]
            print(f"{kind:<14}{var:>6g}" + "".join(f"{e:>10.4f}" for e in errs))
    for kind in args.kinds:
        for s in args.steps:
            theta = np.arccos(np.sqrt(ddim.build_schedule(kind, s).alpha_bar))
            print(f"{kind} S={s}: sum dtheta^2 = {np.sum(np.diff(theta) ** 2):.4f} "
                  f"(bound theta_max^2/S = {theta[-1] ** 2 / s:.4f})")


if __name__ == "__main__":
    main()
