#!/usr/bin/env python3
"""Central finite differences of the misfit against the adjoint gradient.

Coarse setup: 20 x 10 spans, p = 2, two sources, five receivers, 400 steps.
Both gradient rules are reported; the midpoint value is multiplied by the
voxel area so that it is comparable with the derivative.
"""

import argparse
from dataclasses import replace

import numpy as np

from igafwi.fwi import ExperimentConfig, Model, optimizable_mask, synthesize_reference
from igafwi.geometry import Circle


def coarse_config() -> ExperimentConfig:
    return ExperimentConfig(
        extents=(20.0, 10.0), spans=(20, 10), degree=2, geometry=[(Circle((6.0, 3.0), 1.2), "fictitious")],
        defects=[Circle((12.0, 5.0), 1.0)], sources=[(6.0, 10.0), (14.0, 10.0)],
        receivers=[(2.0, 10.0), (6.0, 10.0), (10.0, 10.0), (14.0, 10.0), (18.0, 10.0)],
        sigma=(0.5, 0.5), frequency=0.25, t_max=40.0, n_steps=400, depth=3, gradient_rule="consistent")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--voxels", type=int, default=10)
    ap.add_argument("--eps", type=float, default=1e-4)
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()

    cfg = coarse_config()
    reference = synthesize_reference(cfg)
    model = Model(cfg)
    midpoint = Model(replace(cfg, gradient_rule="midpoint"))
    rng = np.random.default_rng(args.seed)
    g0 = model.initial_grid()
    grid = g0.with_values(0.7 + 0.3 * rng.random(g0.n_active))
    _, g_exact, _ = model.misfit_and_gradient(grid, reference)
    _, g_mid, _ = midpoint.misfit_and_gradient(grid, reference)
    area = grid.areas()
    vals = grid.values
    print(f"{'voxel':>6} {'finite diff':>14} {'consistent':>14} {'rel err':>10} {'midpoint*area':>14}")
    for i in rng.choice(np.flatnonzero(optimizable_mask(model, grid)), args.voxels, replace=False):
        up, down = vals.copy(), vals.copy()
        up[i] += args.eps
        down[i] -= args.eps
        fd = (model.misfit(grid.with_values(up), reference)
              - model.misfit(grid.with_values(down), reference)) / (2 * args.eps)
        rel = abs(fd - g_exact.values[i]) / abs(fd)
        print(f"{i:6d} {fd:14.6e} {g_exact.values[i]:14.6e} {rel:10.2e} {g_mid.values[i] * area[i]:14.6e}")


if __name__ == "__main__":
    main()
