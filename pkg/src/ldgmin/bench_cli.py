"""Benchmark command line: run a named problem and write its history.

``ldgmin --benchmark <name> [options] --out <dir>`` solves one of the
three built-in L-shape benchmarks through the adaptive (or uniform)
refinement loop and writes, into the output directory:

* ``history.csv``   — one row per level (level, ndof, hmax, eta, Eh,
  Ehdual, gap, EvC, EstarRT, iters, seconds, cells), floats printed
  with ``%.17g`` so identical runs produce identical bytes; the
  ``seconds`` column is zeroed unless ``--timing`` is given.
* ``manifest.json`` — the resolved parameters and final-level summary.
* ``convergence.svg`` (with ``--plot``) — log-log estimator vs ndof.
* ``mesh_level_NNN.txt`` (with ``--dump-mesh``) — per-level meshes with
  the cellwise mean gradient magnitude of the conforming average.

A ``--config`` file of flat ``key = value`` lines supplies defaults;
explicit flags win.  Exit codes: 0 success, 1 solver failure (partial
outputs are still written), 2 usage errors.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

__all__ = ["main", "build_problem", "build_adapt"]

_BENCHMARKS = ("odp", "plaplace4", "bingham")
_BOOL_KEYS = ("dump_mesh", "plot", "timing")
_INT_KEYS = ("k", "levels", "ndof_budget")
_FLOAT_KEYS = ("r", "s", "epsilon", "theta")
_STR_KEYS = ("benchmark", "mode", "out")

_DEFAULTS = {
    "benchmark": None,
    "k": 1,
    "r": 2.0,
    "s": 1.0,
    "epsilon": None,
    "theta": 0.5,
    "mode": "adaptive",
    "levels": None,
    "ndof_budget": None,
    "out": None,
    "dump_mesh": False,
    "plot": False,
    "timing": False,
}

_BINGHAM_MU = 1.0
_BINGHAM_G = 0.2
_BINGHAM_EPS = 1e-5
_BINGHAM_CHAIN = (1e-2, 1e-3, 1e-4)
_ODP_MU = (1.0, 2.0)
_ODP_LAMBDA = 0.0145


class UsageError(Exception):
    """Bad flags or config; reported on stderr with exit code 2."""


# ----------------------------------------------------------------------
# Problem construction
# ----------------------------------------------------------------------

def _unit_load(x):
    import numpy as np

    return np.ones(x.shape[:-1])


def build_problem(benchmark: str, k: int = 1, r: float = 2.0,
                  s: float = 1.0, epsilon: float | None = None):
    """Problem definition for one of the built-in benchmark names.

    All three pose the unit load on the L-shaped domain.  ``epsilon``
    applies to the Bingham benchmark only and selects the regularization
    of the target solve; coarser regularizations are chained in front as
    warm-up stages.
    """
    from . import densities, mesh
    from .ldg_core import ProblemConfig

    if benchmark not in _BENCHMARKS:
        raise UsageError(
            f"unknown benchmark {benchmark!r}; choose from "
            + ", ".join(_BENCHMARKS))
    if epsilon is not None and benchmark != "bingham":
        raise UsageError("--epsilon applies to the bingham benchmark only")

    if benchmark == "odp":
        mu1, mu2 = _ODP_MU
        t1 = math.sqrt(2.0 * _ODP_LAMBDA * mu1 / mu2)
        t2 = mu2 * t1 / mu1
        return ProblemConfig(
            density=densities.optimal_design(mu1, mu2, t1, t2),
            k=k, boundary=mesh.all_dirichlet(), load=_unit_load,
            r=r, s=s, name="odp")

    if benchmark == "plaplace4":
        segments = [((0.0, 0.0), (0.0, -1.0)), ((0.0, 0.0), (1.0, 0.0))]
        boundary = mesh.boundary_from_segments(segments, "corner-arms")
        return ProblemConfig(
            density=densities.p_laplace(4.0),
            k=k, boundary=boundary, load=_unit_load,
            r=r, s=s, name="plaplace4")

    eps = _BINGHAM_EPS if epsilon is None else float(epsilon)
    if eps <= 0.0:
        raise UsageError("epsilon must be positive")
    boundary = mesh.all_dirichlet()
    warmup = tuple(
        ProblemConfig(
            density=densities.bingham_regularized(_BINGHAM_MU, _BINGHAM_G, e),
            k=k, boundary=boundary, load=_unit_load, r=r, s=s,
            epsilon=e, name=f"bingham-warmup-{e:g}")
        for e in _BINGHAM_CHAIN if e > eps * (1.0 + 1e-12))
    return ProblemConfig(
        density=densities.bingham_regularized(_BINGHAM_MU, _BINGHAM_G, eps),
        k=k, boundary=boundary, load=_unit_load, r=r, s=s,
        epsilon=eps, name="bingham",
        estimator_density=densities.bingham(_BINGHAM_MU, _BINGHAM_G),
        warmup=warmup)


def build_adapt(mode: str = "adaptive", theta: float = 0.5,
                levels: int | None = None,
                ndof_budget: int | None = None):
    """Refinement-loop parameters; four levels if nothing else is set."""
    from .adapt import AdaptConfig

    if levels is None and ndof_budget is None:
        levels = 4
    return AdaptConfig(theta=theta, mode=mode, levels=levels,
                       ndof_budget=ndof_budget)


# ----------------------------------------------------------------------
# Option handling
# ----------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ldgmin",
        description="Run an L-shape minimization benchmark and write "
                    "its convergence history.")
    ap.add_argument("--benchmark", choices=_BENCHMARKS, default=None,
                    help="problem to solve")
    ap.add_argument("--k", type=int, default=None,
                    help="polynomial degree (default 1)")
    ap.add_argument("--r", type=float, default=None,
                    help="jump penalty exponent (default 2)")
    ap.add_argument("--s", type=float, default=None,
                    help="jump penalty mesh-size exponent (default 1)")
    ap.add_argument("--epsilon", type=float, default=None,
                    help="Bingham regularization (default 1e-5)")
    ap.add_argument("--theta", type=float, default=None,
                    help="bulk marking fraction (default 0.5)")
    ap.add_argument("--mode", choices=("adaptive", "uniform"), default=None,
                    help="refinement mode (default adaptive)")
    ap.add_argument("--levels", type=int, default=None,
                    help="number of refinement levels")
    ap.add_argument("--ndof-budget", type=int, default=None,
                    help="refine until this many degrees of freedom")
    ap.add_argument("--out", default=None,
                    help="output directory (required)")
    ap.add_argument("--config", default=None,
                    help="file of key = value defaults; flags override")
    ap.add_argument("--dump-mesh", action="store_true", default=None,
                    help="write each level's mesh")
    ap.add_argument("--plot", action="store_true", default=None,
                    help="write a log-log convergence plot (SVG)")
    ap.add_argument("--timing", action="store_true", default=None,
                    help="record wall-clock seconds in the history")
    return ap


def _parse_bool(text: str, key: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"config key {key!r}: expected a boolean, got {text!r}")


def _read_config(path: str) -> dict:
    opts = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(
                f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            if key in _BOOL_KEYS:
                opts[key] = _parse_bool(val, key)
            elif key in _INT_KEYS:
                opts[key] = int(val)
            elif key in _FLOAT_KEYS:
                opts[key] = float(val)
            else:
                opts[key] = val
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for "
                             f"{key!r}: {val!r}") from exc
    return opts


def _resolve_options(args: argparse.Namespace) -> dict:
    opts = dict(_DEFAULTS)
    if args.config is not None:
        opts.update(_read_config(args.config))
    for key in _DEFAULTS:
        given = getattr(args, key)
        if given is not None:
            opts[key] = given
    if opts["benchmark"] is None:
        raise UsageError("a benchmark is required (--benchmark or config)")
    if opts["out"] is None:
        raise UsageError("an output directory is required (--out or config)")
    return opts


# ----------------------------------------------------------------------
# Output writers
# ----------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (int,)):
        return str(value)
    return format(float(value), ".17g")


def write_history(path: Path, records, timing: bool) -> None:
    from .adapt import ConvergenceRecord

    lines = [",".join(ConvergenceRecord.FIELDS)]
    for rec in records:
        row = rec.row()
        if not timing:
            row[ConvergenceRecord.FIELDS.index("seconds")] = 0.0
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _svg_ticks(lo: float, hi: float) -> list[int]:
    first = math.ceil(lo - 1e-9)
    last = math.floor(hi + 1e-9)
    return list(range(first, last + 1))


def write_convergence_svg(path: Path, records, k: int) -> None:
    """Hand-rolled log-log plot of the estimator against ndof.

    Dashed guides with slopes -1/3 and -k (the uniform corner-limited
    and the optimal adaptive rate) pass through the final data point.
    """
    data = [(r.ndof, r.eta) for r in records if r.eta > 0.0]
    if not data:
        path.write_text("<svg xmlns='http://www.w3.org/2000/svg' "
                        "width='640' height='480'/>\n")
        return
    xs = [math.log10(n) for n, _ in data]
    ys = [math.log10(e) for _, e in data]
    pad = 0.3
    x0, x1 = min(xs) - pad, max(xs) + pad
    y0, y1 = min(ys) - pad, max(ys) + pad
    width, height = 640.0, 480.0
    ml, mr, mt, mb = 70.0, 20.0, 20.0, 50.0

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (width - ml - mr)

    def py(y):
        return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb)

    parts = [
        f"<svg xmlns='http://www.w3.org/2000/svg' width='{width:.0f}' "
        f"height='{height:.0f}' viewBox='0 0 {width:.0f} {height:.0f}'>",
        "<rect width='100%' height='100%' fill='white'/>",
        f"<rect x='{ml:.1f}' y='{mt:.1f}' width='{width-ml-mr:.1f}' "
        f"height='{height-mt-mb:.1f}' fill='none' stroke='black'/>",
    ]
    for t in _svg_ticks(x0, x1):
        parts.append(f"<line x1='{px(t):.2f}' y1='{py(y0):.2f}' "
                     f"x2='{px(t):.2f}' y2='{py(y0)+5:.2f}' stroke='black'/>")
        parts.append(f"<text x='{px(t):.2f}' y='{py(y0)+20:.2f}' "
                     f"font-size='12' text-anchor='middle'>1e{t}</text>")
    for t in _svg_ticks(y0, y1):
        parts.append(f"<line x1='{ml:.2f}' y1='{py(t):.2f}' "
                     f"x2='{ml-5:.2f}' y2='{py(t):.2f}' stroke='black'/>")
        parts.append(f"<text x='{ml-8:.2f}' y='{py(t)+4:.2f}' font-size='12' "
                     f"text-anchor='end'>1e{t}</text>")
    parts.append(f"<text x='{(ml+width-mr)/2:.1f}' y='{height-10:.1f}' "
                 "font-size='13' text-anchor='middle'>degrees of freedom"
                 "</text>")
    parts.append(f"<text x='18' y='{(mt+height-mb)/2:.1f}' font-size='13' "
                 f"text-anchor='middle' transform='rotate(-90 18 "
                 f"{(mt+height-mb)/2:.1f})'>estimator</text>")

    for slope, dash, label in ((-1.0 / 3.0, "6 3", "slope -1/3"),
                               (-float(k), "2 3", f"slope -{k}")):
        xa, ya = xs[-1], ys[-1]
        xb = max(x0 + pad / 2, xa - 1.5)
        yb = ya + slope * (xb - xa)
        parts.append(f"<line x1='{px(xb):.2f}' y1='{py(yb):.2f}' "
                     f"x2='{px(xa):.2f}' y2='{py(ya):.2f}' stroke='gray' "
                     f"stroke-dasharray='{dash}'/>")
        parts.append(f"<text x='{px(xb)+4:.2f}' y='{py(yb)-4:.2f}' "
                     f"font-size='11' fill='gray'>{label}</text>")

    poly = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
    parts.append(f"<polyline points='{poly}' fill='none' stroke='#1f77b4' "
                 "stroke-width='1.5'/>")
    for x, y in zip(xs, ys):
        parts.append(f"<circle cx='{px(x):.2f}' cy='{py(y):.2f}' r='3' "
                     "fill='#1f77b4'/>")
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def _write_manifest(path: Path, opts: dict, records, failed: bool,
                    files: list[str]) -> None:
    from . import __version__

    final = records[-1] if records else None
    manifest = {
        "tool": "ldgmin",
        "version": __version__,
        "parameters": {key: opts[key] for key in
                       ("benchmark", "k", "r", "s", "epsilon", "theta",
                        "mode", "levels", "ndof_budget", "timing")},
        "levels_completed": len(records),
        "converged": not failed,
        "final": None if final is None else {
            "level": final.level,
            "ndof": final.ndof,
            "cells": final.cells,
            "hmax": final.hmax,
            "eta": final.eta,
            "Eh": final.Eh,
            "gap": final.gap,
        },
        "files": sorted(files),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------

def _run(opts: dict) -> int:
    import numpy as np

    from .adapt import AdaptiveRunError, run_loop
    from .mesh import save_mesh

    problem = build_problem(opts["benchmark"], k=opts["k"], r=opts["r"],
                            s=opts["s"], epsilon=opts["epsilon"])
    adapt_cfg = build_adapt(mode=opts["mode"], theta=opts["theta"],
                            levels=opts["levels"],
                            ndof_budget=opts["ndof_budget"])
    out = Path(opts["out"])
    files = ["history.csv", "manifest.json"]

    def observer(state) -> None:
        if not opts["dump_mesh"]:
            return
        space = state.operator.space
        vb = space.volume_bundle(2 * space.k)
        grad = space.cell_gradient_values(state.conforming.function, vb)
        mag = np.sqrt((grad ** 2).sum(axis=-1))
        mean = space.cell_integrals(mag, vb) / state.mesh.areas
        name = f"mesh_level_{state.level:03d}.txt"
        save_mesh(state.mesh, out / name, cell_data=mean)
        files.append(name)

    failed = False
    try:
        records = run_loop(problem, adapt_cfg, observer=observer)
    except AdaptiveRunError as exc:
        print(f"ldgmin: {exc}", file=sys.stderr)
        records = exc.records
        failed = True

    write_history(out / "history.csv", records, timing=opts["timing"])
    if opts["plot"]:
        write_convergence_svg(out / "convergence.svg", records, opts["k"])
        files.append("convergence.svg")
    _write_manifest(out / "manifest.json", opts, records, failed, files)
    return 1 if failed else 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        opts = _resolve_options(args)
    except UsageError as exc:
        print(f"ldgmin: error: {exc}", file=sys.stderr)
        return 2

    out = Path(opts["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"ldgmin: error: cannot create output directory: {exc}",
              file=sys.stderr)
        return 2

    lock = out / ".ldgmin.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        print(f"ldgmin: error: {lock} exists; another run is writing to "
              "this directory (remove the file if that run is dead)",
              file=sys.stderr)
        return 2
    try:
        try:
            return _run(opts)
        except UsageError as exc:
            print(f"ldgmin: error: {exc}", file=sys.stderr)
            return 2
    finally:
        os.close(fd)
        try:
            os.unlink(lock)
        except OSError:
            pass


if __name__ == "__main__":
    sys.exit(main())
