"""Command line entry point.

Every command reads one config file, validates the system before doing any
work and writes its outputs under ``--out``.  Each output embeds the hash of
the resolved config; identical config and seed give byte-identical files at
any ``--threads`` setting.

Exit codes: 0 Holds (or success), 1 Fails, 2 Unknown, 64 config or usage
error, 65 budget exceeded.
"""

from __future__ import annotations

import argparse
import math
import sys as _sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .attractor import attractor_cloud, chaos_game, root_box
from .config import RunConfig, check, load_config
from .density import (
    MeasureOptions,
    convex_density_trace,
    default_depth,
    dim_estimate,
    measure_estimate,
    upper_density_estimate,
)
from .digits import decide_osc, enumerate_DM, read_expansion_cache, write_expansion_cache
from .errors import BudgetExceeded, ConfigError, SelfAffineError, UnsupportedDimension
from .io import canonical_json, content_hash, read_csv, write_csv, write_pgm, write_ppm, write_summary
from .linalg import ExpandingSystem
from .pseudo_norm import (
    build_pseudo_norm,
    comparability_fit,
    estimate_beta,
    estimate_lambda_eps,
    sample_annulus,
)
from .rng import substream

EXIT_OK = 0
EXIT_CODES = {"Holds": 0, "Fails": 1, "Unknown": 2}
EXIT_CONFIG = 64
EXIT_BUDGET = 65


class Run:
    """Resolved config plus the validated system and output helpers."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.sys: ExpandingSystem = cfg.build_system()
        self.hash = cfg.hash
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cache = self.out / "cache"

    @property
    def stamp(self) -> list[str]:
        return [f"config_hash = {self.hash}", f"config = {canonical_json(self.cfg.resolved())}"]

    def csv(self, name: str, header, rows) -> Path:
        path = self.out / name
        write_csv(path, header, rows, comments=self.stamp)
        return path

    def summary(self, name: str, items: dict) -> Path:
        path = self.out / name
        head = {"command": self.command, "config_hash": self.hash}
        write_summary(path, {**head, **items, "config": self.cfg.resolved()})
        return path

    def pseudo_norm(self):
        n = self.cfg.norm
        return build_pseudo_norm(
            self.sys, n.variant, delta=n.delta, grid_step=n.grid_step, quad_nodes=n.quad_nodes,
            max_interp_error=n.max_interp_error, seed=self.cfg.seed, cache_dir=self.cache,
        )

    def expansions(self, M: int):
        """``D_M`` through the content-hashed cache under ``out/cache``."""
        s = self.sys
        key = content_hash({"A": s.A.entries.tolist(), "D": s.digits.tolist(), "mode": s.mode,
                            "tau": s.tau, "M": M})
        path = self.cache / f"expansions-{key}.csv"
        if path.exists():
            return read_expansion_cache(path)
        eset = enumerate_DM(s, M, self.cfg.budgets.points)
        self.cache.mkdir(parents=True, exist_ok=True)
        write_expansion_cache(path, s, eset)
        return eset


# --------------------------------------------------------------------------
# commands


def cmd_check_osc(run: Run, args) -> int:
    b = run.cfg.budgets
    v = decide_osc(run.sys, max_depth=b.max_depth, budget=b.points, state_budget=b.states)
    wit = v.witness
    items = {
        "status": v.status,
        "method": v.method,
        "mode": run.sys.mode,
        "tau": run.sys.tau,
        # the automaton covers every depth at once
        "depths_searched": "all" if v.depth_reached < 0 else v.depth_reached,
        "discreteness_delta": v.discreteness_delta if v.discreteness_delta is not None else "none",
        "state_bound": v.state_bound if v.state_bound is not None else "none",
        "states": len(v.states) if v.states is not None else "none",
        "witness": {"depth": wit.depth, "word_a": list(wit.word_a), "word_b": list(wit.word_b),
                    "value": list(wit.value)} if wit else "none",
    }
    run.summary("osc_report.txt", items)
    if v.trend:
        run.csv("osc_trend.csv", ["depth", "distinct", "words", "min_separation"], v.trend)
    reach = "all depths" if v.depth_reached < 0 else f"depth {v.depth_reached}"
    print(f"{v.status} ({v.method}, {reach})")
    if wit is not None:
        print(f"witness: {wit.word_a} == {wit.word_b} = {wit.value} at depth {wit.depth}")
    return EXIT_CODES[v.status]


def _density_rows(est) -> list:
    return [(r.scale, r.family, r.windows_swept, r.sup_ratio) for r in est.rows]


DENSITY_HEADER = ["scale", "family", "windows_swept", "sup_ratio"]


def cmd_measure(run: Run, args) -> int:
    cfg, sys = run.cfg, run.sys
    m = cfg.measure
    w = run.pseudo_norm()
    M = m.depth if m.depth is not None else default_depth(sys)
    verdict = decide_osc(sys, max_depth=cfg.budgets.max_depth, budget=cfg.budgets.points,
                         state_budget=cfg.budgets.states)
    opts = MeasureOptions(
        budget=cfg.budgets.points, state_budget=cfg.budgets.states, schedule=m.schedule,
        family=m.family, fold=m.fold, sigma_depth=m.sigma_depth, refine=m.refine,
        lo_windows=m.lo_windows, seed=cfg.seed, workers=cfg.threads, max_centers=m.max_centers,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mb = measure_estimate(sys, w, M, opts, verdict=verdict, eset=run.expansions(M))
    est = mb.density
    run.csv("density.csv", DENSITY_HEADER, _density_rows(est))
    items = {
        "s": mb.s,
        "H_lo": mb.H_lo,
        "H_hi": mb.H_hi,
        "verdict": mb.verdict,
        "method_lo": mb.method_lo,
        "method_hi": mb.method_hi,
        "M": mb.M,
        "sigma_depth": mb.sigma_depth,
        "r0": mb.r0,
        "cover_bound": mb.cover_bound,
        "density_best": est.best,
        "density_drift": est.drift,
        "windows_swept": est.windows_swept,
        "amplification": _jsonable(mb.amplification) if mb.amplification else "none",
        "norm": w.constants(),
        "tau": sys.tau,
        "seeds": {"seed": cfg.seed},
        "budgets": {"points": cfg.budgets.points, "states": cfg.budgets.states,
                    "max_depth": cfg.budgets.max_depth},
        "warnings": list(mb.warnings),
    }
    run.summary("measure_summary.txt", items)
    print(f"s = {mb.s:.6f}  H in [{mb.H_lo:.6g}, {mb.H_hi:.6g}]  ({mb.verdict})")
    for note in mb.warnings:
        print(f"warning: {note}")
    return EXIT_OK


def cmd_density(run: Run, args) -> int:
    cfg, sys = run.cfg, run.sys
    d = cfg.density
    w = run.pseudo_norm()
    M = d.depth if d.depth is not None else default_depth(sys)
    est = upper_density_estimate(sys, w, None, M, None, d.family, eset=run.expansions(M),
                                 budget=cfg.budgets.points, workers=cfg.threads)
    run.csv("density_sweep.csv", DENSITY_HEADER, _density_rows(est))
    dim = dim_estimate(sys, w, d.dim_depth, budget=cfg.budgets.points)
    items = {
        "s": est.s,
        "M": est.M,
        "family": est.family,
        "best": est.best,
        "top": est.top,
        "drift": est.drift,
        "windows_swept": est.windows_swept,
        "s_w_hat": dim.s_w_hat,
        "euclid_dim_hat": dim.euclid_dim_hat,
        "dim_bounds": list(dim.bounds),
        "euclid_dim_inside_bounds": dim.inside,
        "seeds": {"seed": cfg.seed},
        "budgets": {"points": cfg.budgets.points},
    }
    if d.trace_point is not None:
        x = np.atleast_1d(np.asarray(d.trace_point, dtype=float))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            tr = convex_density_trace(sys, w, x, radii=tuple(d.radii), budget=cfg.budgets.points)
        run.csv("trace.csv", ["radius", "lo", "hi", "windows"],
                zip(tr.radii, tr.lo, tr.hi, tr.windows))
        items["trace_point"] = x.tolist()
    run.summary("density_summary.txt", items)
    print(f"s = {est.s:.6f}  best density {est.best:.6g}  s_w_hat {dim.s_w_hat:.4f}  "
          f"euclid_dim_hat {dim.euclid_dim_hat:.4f}")
    return EXIT_OK


def _raster(pts: np.ndarray, lo: np.ndarray, hi: np.ndarray, width: int, height: int,
            n: int) -> np.ndarray:
    span = np.where(hi > lo, hi - lo, 1.0)
    ix = np.clip(((pts[:, 0] - lo[0]) / span[0] * width).astype(np.int64), 0, width - 1)
    if n == 1:
        counts = np.bincount(ix, minlength=width).astype(float)
        top = counts.max() if counts.size else 1.0
        bars = np.ceil(counts / top * height).astype(np.int64)
        rows = np.arange(height)[:, None]
        return np.where(height - rows <= bars[None, :], 255, 0).astype(np.uint8)
    iy = np.clip(((pts[:, 1] - lo[1]) / span[1] * height).astype(np.int64), 0, height - 1)
    counts = np.zeros((height, width))
    np.add.at(counts, (height - 1 - iy, ix), 1.0)
    scale = math.log1p(counts.max()) if counts.max() > 0 else 1.0
    return np.round(255.0 * np.log1p(counts) / scale).astype(np.uint8)


def cmd_render(run: Run, args) -> int:
    cfg, sys = run.cfg, run.sys
    r = cfg.render
    if r.samples > 0:
        pts = chaos_game(sys, r.samples, seed=cfg.seed, workers=cfg.threads)
        source = f"chaos-game samples={r.samples}"
    else:
        pts = attractor_cloud(sys, r.depth, cfg.budgets.points).points
        source = f"attractor-cloud depth={r.depth}"
    n = sys.n
    run.csv("cloud.csv", [f"x{i + 1}" for i in range(n)], pts.tolist())
    if n >= 3:
        raise UnsupportedDimension(f"raster output needs n <= 2, got n = {n}; cloud.csv written")
    lo, hi = root_box(sys)
    img = _raster(pts, lo, hi, r.width, r.height, n)
    view = " ".join(f"{a!r} {b!r}" for a, b in zip(lo.tolist(), hi.tolist()))
    comments = [f"viewport = {view}", f"source = {source}", f"points = {len(pts)}", *run.stamp]
    if r.format == "ppm":
        v = img.astype(float) / 255.0
        rgb = np.stack([v, v**2, np.sqrt(v) * (1 - v) * 2], axis=-1)
        write_ppm(run.out / "render.ppm", np.round(255 * np.clip(rgb, 0, 1)), comments)
    else:
        write_pgm(run.out / "render.pgm", img, comments)
    occupied = int(np.count_nonzero(img)) if n == 2 else int(np.count_nonzero(img[-1]))
    print(f"{source}: {len(pts)} points, {occupied} occupied cells")
    return EXIT_OK


def _probe_points(run: Run, path: str | None) -> np.ndarray:
    n = run.sys.n
    if path is None:
        rng = substream(run.cfg.seed, 13, 0)
        v = sample_annulus(run.sys.norm, run.cfg.probe.samples, rng)
        return np.vstack([np.zeros((1, n)), v])
    p = Path(path)
    if not p.is_absolute() and not p.exists():
        p = Path(run.cfg.base_dir) / p
    try:
        header, rows = read_csv(p)
        data = [header] + rows if not header[0].strip().startswith("x") else rows
        pts = np.array([[float(v) for v in row] for row in data], dtype=float)
    except (OSError, ValueError, IndexError) as exc:
        raise ConfigError(f"cannot read points file {p}: {exc}") from exc
    if pts.ndim != 2 or pts.shape[1] != n:
        raise ConfigError(f"points file {p} must have {n} columns")
    return pts


def cmd_norm_probe(run: Run, args) -> int:
    cfg, sys = run.cfg, run.sys
    w = run.pseudo_norm()
    pts = _probe_points(run, args.points or cfg.probe.points)
    Ax = pts @ sys.A.entries.T
    wx, wAx = np.atleast_1d(w(pts)), np.atleast_1d(w(Ax))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(wx > 0, wAx / np.where(wx > 0, wx, 1.0), np.nan)
    n = sys.n
    header = [f"x{i + 1}" for i in range(n)] + ["w", "w_Ax", "ratio"]
    run.csv("norm_probe.csv", header, [[*p, a, b, c] for p, a, b, c in zip(pts.tolist(), wx, wAx, ratio)])

    eps = min(cfg.probe.eps, 0.5 * (sys.A.lambda_min - 1.0))
    estimate_beta(w, seed=cfg.seed)
    for e in (eps, eps / 2):
        estimate_lambda_eps(w, e, seed=cfg.seed)
    fit = comparability_fit(w, eps, seed=cfg.seed)
    items = {
        **{k: v for k, v in w.constants().items() if v is not None},
        "q_root": sys.q ** (1.0 / n),
        "annulus_upper": w.p * sys.q ** (w.p / n),
        "comparability": {"eps": eps, "C": fit.C, "exponent_lo": fit.exponent_lo,
                          "exponent_hi": fit.exponent_hi, "slope_small": fit.slope_small,
                          "slope_large": fit.slope_large, "violations": fit.violations},
        "points": len(pts),
    }
    items["lambda_eps"] = {repr(k): v for k, v in w.lambda_eps_table.items()}
    run.summary("norm_constants.txt", items)
    print(f"{len(pts)} points probed; p = {w.p}, alpha = {w.alpha:.6g}, C = {fit.C:.6g}")
    return EXIT_OK


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, (np.ndarray, tuple)):
            v = np.asarray(v).tolist()
        elif isinstance(v, (np.floating, np.integer)):
            v = v.item()
        elif isinstance(v, list):
            v = [np.asarray(x).tolist() if isinstance(x, (np.ndarray, tuple)) else x for x in v]
        out[k] = v
    return out


COMMANDS = {
    "check-osc": (cmd_check_osc, "decide the open set condition"),
    "measure": (cmd_measure, "bracket the pseudo Hausdorff measure"),
    "render": (cmd_render, "raster and point cloud of the attractor"),
    "norm-probe": (cmd_norm_probe, "evaluate the pseudo norm on points"),
    "density": (cmd_density, "density sweep and dimension estimates"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="INI config file")
    common.add_argument("--seed", type=int, default=None, metavar="U64", help="override [run] seed")
    common.add_argument("--threads", type=int, default=None, metavar="N",
                        help="worker threads (outputs do not depend on it)")
    common.add_argument("--out", default=None, metavar="DIR", help="output directory")

    parser = argparse.ArgumentParser(prog="selfaffine", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "norm-probe":
            p.add_argument("--points", default=None, metavar="PATH",
                           help="CSV of points, one per row (defaults to annulus samples)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            cfg.threads = args.threads
        if args.out is not None:
            cfg.out = args.out
        check(cfg)
        run = Run(cfg, args.command)
        return COMMANDS[args.command][0](run, args)
    except BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=_sys.stderr)
        return EXIT_BUDGET
    except SelfAffineError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=_sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    _sys.exit(main())
