"""Penalization rate, perturbation decay, expansion ratio and gradient check
on the canonical twin. Tables go to out_dir as CSV.

    python3 scripts/rate_studies.py [out_dir]
"""

import sys
from dataclasses import replace
from pathlib import Path

from topoflow import experiments as ex
from topoflow.grid import ShapeSpec, rasterize
from topoflow.io import write_rows

H = 1 / 96


def rate(path, name, fn, *args):
    try:
        res = fn(*args)
        note = ""
    except ex.RegimeError as exc:
        res, note = exc.result, f" (rejected: {exc})"
    write_rows(path, [name, "norm"], res.rows(), [f"# slope={res.slope!r} max_residual={res.max_residual!r}"])
    print(f"{path.stem}: slope {res.slope:.3f}{note}")


def main(out=Path("runs/rates")):
    out.mkdir(parents=True, exist_ok=True)
    spec = ex.canonical_twin()
    soft = replace(spec.solver, k_penalty=1.0)

    mask = rasterize(spec.grid, spec.obstacles[0], obstacle=True)
    rate(out / "penalization.csv", "k", ex.verify_penalization_rate, spec.solver, mask, [1e2, 1e3, 1e4, 1e5, 1e6], spec.forcing, spec.boundary)
    for k, cfg in (("k1", soft), ("k1e6", spec.solver)):
        rate(out / f"decay_{k}.csv", "eps", ex.verify_perturbation_decay, cfg, spec.grid, (0.5, 0.5), [8, 4, 2, 1],
             ShapeSpec.box(0, 0, H, H), spec.forcing, spec.boundary, spec.holdall)

    twin = ex.run_twin(spec, keep_stars=True)
    tab = ex.verify_expansion(soft, twin, [15, 7, 3, 1], ShapeSpec.box(0, 0, H / 2, H / 2))
    write_rows(out / "expansion.csv", ["eps", "area", "cost", "ratio", "rel_error"],
               [(r.eps, r.area, r.cost, r.ratio, e) for r, e in zip(tab.rows, tab.rel_errors())],
               [f"# cell={tab.cell} dk_z={tab.dk_z!r}"])
    print(f"expansion at {tab.cell}: rel errors {[round(e, 4) for e in tab.rel_errors()]}")

    chk = ex.adjoint_gradient_check(spec.solver, twin, [(40, 40), (56, 40), (48, 56), (64, 60), (30, 66)], [1e-1, 1e-2, 1e-3])
    rows = [(c[0], c[1], a, chk.fd[i, k], chk.predicted[i], chk.exact[i])
            for i, c in enumerate(chk.cells) for k, a in enumerate(chk.a_values)]
    write_rows(out / "adjoint_check.csv", ["i", "j", "a", "fd", "vc_dk", "exact"], rows)
    print(f"gradient check: max rel error vs Vc*D_K {chk.max_error():.2e}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/rates"))
