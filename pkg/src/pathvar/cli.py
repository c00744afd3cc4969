"""Command line runner: ``pathvar run config.json``.

A config is one JSON document naming an experiment, a measure, a drift, a
functional and the Monte Carlo sizes.  Each run writes ``summary.json`` and
CSV tables into the output directory.  Exit status is 0 when every assertion
passes, 2 when one fails and 1 on configuration or runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
from scipy.stats import ks_2samp

from . import entropy, girsanov, prekopa, variational
from .core import RandomSource, TimeGrid, brownian_increments
from .drifts import Clipped, DriftSpec, OpenLoop, Retarded, affine_feedback
from .functionals import REGISTRY, Functional, make_functional
from .measures import (
    Bridge,
    Diffusion,
    Loop,
    MeasureSpec,
    MeasureSpecError,
    Particles,
    Wiener,
    compose_check,
    loop_log_kernel,
)
from .montecarlo import set_default_threads

EXPERIMENTS = (
    "girsanov-validate",
    "law-transport",
    "duality",
    "entropy-criterion",
    "compose-check",
    "prekopa",
    "particles-sim",
    "bridge-vs-loop",
)


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# -- serialisation ------------------------------------------------------------------


def _fmt(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def to_json(obj, indent: int = 2, level: int = 0) -> str:
    """JSON with insertion-ordered keys and floats at 17 significant digits."""
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {to_json(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + to_json(v, indent, level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt(float(obj))
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# -- config parsing -------------------------------------------------------------------


def _require(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise ConfigError(f"{where}.{key}" if where else key, "missing required field")
    return cfg[key]


def _coefficient(value, where: str):
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, dict):
        kind = value.get("kind")
        if kind == "linear":
            slope, intercept = float(value.get("slope", 0.0)), float(value.get("intercept", 0.0))
            return lambda x: slope * x + intercept
        if kind == "sin":
            amp, freq, off = (float(value.get(k, d)) for k, d in (("amplitude", 1.0), ("frequency", 1.0), ("offset", 0.0)))
            return lambda x: off + amp * np.sin(freq * x)
    raise ConfigError(where, "expected a number or {kind: linear|sin, ...}")


def build_measure(cfg: dict) -> MeasureSpec:
    family = _require(cfg, "family", "measure")
    try:
        if family == "wiener":
            return Wiener(int(cfg.get("dim", 1)))
        if family == "bridge":
            return Bridge(tuple(np.atleast_1d(cfg.get("endpoint", [0.0])).tolist()))
        if family == "loop":
            return Loop(cfg.get("atoms", [[1.0], [-1.0]]), cfg.get("weights", [0.5, 0.5]))
        if family == "particles":
            keys = ("sigma", "b", "c", "gamma", "gap_floor", "max_halvings", "drift_cap")
            kw = {k: cfg[k] for k in keys if k in cfg}
            return Particles(z0=tuple(cfg.get("z0", [0.0, 1.0])), **kw)
        if family == "diffusion":
            return Diffusion(_coefficient(cfg.get("sigma", 1.0), "measure.sigma"),
                             _coefficient(cfg.get("b", 0.0), "measure.b"), float(cfg.get("c", 0.0)))
    except MeasureSpecError as exc:
        raise ConfigError("measure", str(exc)) from None
    raise ConfigError("measure.family", f"unknown family {family!r}")


def build_functional(cfg: dict | None, where: str = "functional") -> Functional:
    if cfg is None:
        raise ConfigError(where, "missing required field")
    name = _require(cfg, "name", where)
    if name not in REGISTRY:
        raise ConfigError(f"{where}.name", f"unknown functional {name!r}")
    try:
        return make_functional(name, **cfg.get("params", {}))
    except TypeError as exc:
        raise ConfigError(f"{where}.params", str(exc)) from None


def build_drift(cfg: dict | None, grid: TimeGrid, dim: int, f: Functional | None, where: str = "drift") -> DriftSpec:
    cfg = cfg or {"kind": "zero"}
    kind = _require(cfg, "kind", where)
    if kind == "zero":
        return OpenLoop(np.zeros((grid.steps, dim)))
    if kind == "constant":
        value = np.broadcast_to(np.asarray(cfg.get("value", 0.0), float), (dim,))
        return OpenLoop(np.broadcast_to(value, (grid.steps, dim)).copy())
    if kind == "affine-feedback":
        u = affine_feedback(float(cfg.get("slope", 0.0)), float(cfg.get("intercept", 0.0)))
        return Clipped(u, float(cfg["bound"])) if "bound" in cfg else u
    if kind == "foellmer":
        if f is None or f.endpoint is None:
            raise ConfigError(where, "foellmer drift needs an endpoint functional")
        return variational.foellmer_drift(f, nodes=int(cfg.get("nodes", 64)))
    if kind == "clipped":
        return Clipped(build_drift(_require(cfg, "inner", where), grid, dim, f, f"{where}.inner"),
                       float(_require(cfg, "bound", where)))
    if kind == "retarded":
        try:
            return Retarded(build_drift(_require(cfg, "inner", where), grid, dim, f, f"{where}.inner"),
                            float(_require(cfg, "lag", where)))
        except ValueError as exc:
            raise ConfigError(f"{where}.lag", str(exc)) from None
    raise ConfigError(f"{where}.kind", f"unknown drift kind {kind!r}")


class Run:
    """Parsed config plus the collected results of one experiment."""

    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = out
        self.experiment = _require(cfg, "experiment", "")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError("experiment", f"unknown experiment {self.experiment!r}")
        self.N = int(_require(cfg, "grid_N", ""))
        self.M = int(_require(cfg, "samples_M", ""))
        if self.N < 1:
            raise ConfigError("grid_N", "must be positive")
        if self.M < 2:
            raise ConfigError("samples_M", "must be at least 2")
        seed = _require(cfg, "seed", "")
        if not isinstance(seed, int):
            raise ConfigError("seed", "must be an integer")
        self.rng = RandomSource(seed)
        self.grid = TimeGrid(self.N)
        self.expect = cfg.get("expect", {})
        self.results: dict = {}
        self.assertions: list[dict] = []

    def check(self, name: str, passed: bool, **detail) -> None:
        self.assertions.append({"name": name, "passed": bool(passed), **detail})

    def measure(self) -> MeasureSpec:
        return build_measure(_require(self.cfg, "measure", ""))

    def functional(self) -> Functional:
        return build_functional(self.cfg.get("functional"))

    def statistics(self) -> list[Functional]:
        stats = self.cfg.get("statistics")
        if stats is None:
            return [make_functional("endpoint-clamp"), make_functional("midpoint-square-clamp"),
                    make_functional("running-max-clamp")]
        return [build_functional(s, f"statistics[{i}]") for i, s in enumerate(stats)]


# -- experiments --------------------------------------------------------------------


def _transport(run: Run, stats: list[Functional]) -> None:
    spec = run.measure()
    f = stats[0] if stats else None
    u = build_drift(run.cfg.get("drift"), run.grid, spec.noise_dim, f)
    corrupt = run.cfg.get("corrupt")
    if corrupt not in girsanov.CORRUPTIONS:
        raise ConfigError("corrupt", f"unknown corruption {corrupt!r}")
    checks = girsanov.law_transport_checks(stats, spec, u, run.grid, run.M, run.rng, corrupt)
    norm = girsanov.weight_normalization(spec, u, run.grid, run.M, run.rng.child(2))
    run.results["statistics"] = [
        {"name": c.name, "plain": c.plain.as_dict(), "reweighted": c.reweighted.as_dict(), "z": c.z} for c in checks
    ]
    run.results["weight_normalization"] = norm.as_dict()
    write_csv(run.out / "report.csv", ["statistic", "plain_mean", "plain_se", "reweighted_mean", "reweighted_se", "z"],
              [[c.name, c.plain.mean, c.plain.std_error, c.reweighted.mean, c.reweighted.std_error, c.z] for c in checks])
    if corrupt is None:
        z_max = float(run.expect.get("z_max", 3.0))
        for c in checks:
            run.check(f"z[{c.name}] < {z_max}", c.z < z_max, z=c.z)
        run.check("weight normalization within 3 SE", norm.z_against(1.0) < 3.0, z=norm.z_against(1.0))
    else:
        z_min = float(run.expect.get("z_min", 5.0))
        run.check(f"negative control max z > {z_min}", max(c.z for c in checks) > z_min,
                  z=max(c.z for c in checks))


def exp_girsanov(run: Run) -> None:
    _transport(run, [run.functional()])


def exp_law_transport(run: Run) -> None:
    _transport(run, run.statistics())


def exp_duality(run: Run) -> None:
    spec, f = run.measure(), run.functional()
    drift_cfg = run.cfg.get("drift", {"kind": "zero"})
    if drift_cfg.get("kind") == "optimize":
        fam_name = drift_cfg.get("family", "constant")
        if fam_name not in variational.FAMILIES:
            raise ConfigError("drift.family", f"unknown family {fam_name!r}")
        family = variational.FAMILIES[fam_name](bound=float(drift_cfg.get("bound", 10.0)))
        try:
            opt = variational.OptimizerConfig.from_dict({"eval_samples": run.M, **run.cfg.get("optimizer", {})})
        except (TypeError, ValueError) as exc:
            raise ConfigError("optimizer", str(exc)) from None
        theta, report = variational.optimize_drift(f, spec, family, run.grid, opt, run.rng)
        write_csv(run.out / "trace.csv", ["epoch", "J"], [[e, j] for e, j in report.optimizer_trace])
    else:
        u = build_drift(drift_cfg, run.grid, spec.noise_dim, f)
        report = variational.duality_gap(f, spec, u, run.grid, run.M, run.rng)
    run.results["duality"] = report.as_dict()
    write_csv(run.out / "report.csv", ["quantity", "mean", "std_error"],
              [["lhs", report.lhs.mean, report.lhs.std_error], ["rhs", report.rhs.mean, report.rhs.std_error],
               ["gap", report.gap, report.pooled_se]])
    run.check("weak duality: gap >= -3 SE", report.gap >= -3.0 * report.pooled_se, gap=report.gap)
    if "gap_max" in run.expect:
        run.check(f"gap < {run.expect['gap_max']}", report.gap < float(run.expect["gap_max"]), gap=report.gap)
    if "lhs" in run.expect:
        target, tol = float(run.expect["lhs"]), float(run.expect.get("lhs_tol", 0.02))
        run.check(f"lhs within {tol} of {target}", abs(report.lhs.mean - target) <= tol, lhs=report.lhs.mean)


def exp_entropy(run: Run) -> None:
    spec = run.measure()
    u = build_drift(run.cfg.get("drift"), run.grid, spec.noise_dim, None)
    oracle = run.cfg.get("oracle", "auto")
    report = entropy.criterion_report(spec, u, run.grid, run.M, run.rng, oracle=oracle,
                                      tolerance=float(run.expect.get("tolerance", 0.01)))
    run.results["entropy"] = report.as_dict()
    write_csv(run.out / "report.csv", ["quantity", "value"],
              [["kinetic", report.kinetic.mean], ["kinetic_se", report.kinetic.std_error],
               ["entropy", "" if report.entropy is None else report.entropy],
               ["defect", "" if report.defect is None else report.defect],
               ["inverse_residual", "" if report.inverse_residual is None else report.inverse_residual]])
    if report.entropy is not None:
        run.check("entropy <= kinetic + 3 SE", report.entropy <= report.kinetic.mean + 3 * report.kinetic.std_error,
                  defect=report.defect)
    expected = run.expect.get("criterion")
    if expected is not None:
        run.check(f"criterion == {expected}", report.criterion_met.value == expected,
                  criterion=report.criterion_met.value)


def exp_compose(run: Run) -> None:
    spec = run.measure()
    u = build_drift(run.cfg.get("drift"), run.grid, spec.noise_dim, None)
    v = build_drift(run.cfg.get("drift_v"), run.grid, spec.noise_dim, None, "drift_v")
    base = spec.sample_base(run.grid, run.rng, run.M)
    residual = compose_check(spec, u, v, base)
    run.results["residual"] = residual
    write_csv(run.out / "report.csv", ["N", "residual"], [[run.N, residual]])
    limit = float(run.expect.get("residual_max", 1e-10))
    run.check(f"composition residual <= {limit}", residual <= limit, residual=residual)


def exp_prekopa(run: Run) -> None:
    spec = run.measure()
    pl = run.cfg.get("prekopa", {})
    # a, b, c enter as exp(-f) so that positivity holds by construction
    fns = []
    for key in ("a", "b", "c"):
        fn = build_functional(pl.get(key, run.cfg.get("functional")), f"prekopa.{key}")
        fns.append(lambda p, fn=fn: np.exp(-fn(p)))
    t = float(pl.get("t", 0.5))
    try:
        inst = prekopa.PLInstance(*fns, t)
    except ValueError as exc:
        raise ConfigError("prekopa.t", str(exc)) from None
    levels = pl.get("shifts", [-1.0, -0.5, 0.0, 0.5, 1.0])
    shifts = [np.full((run.grid.steps, spec.noise_dim), float(c)) for c in levels]
    probe_samples = int(pl.get("probe_samples", min(run.M, 2000)))
    rates = prekopa.probe_grid(inst, spec, shifts, run.grid, probe_samples, run.rng.child(0))
    check = prekopa.pl_check(inst, spec, run.grid, run.M, run.rng.child(1), float(rates.max()))
    run.results["violation_rate_max"] = float(rates.max())
    run.results["pl_check"] = check.as_dict()
    write_csv(run.out / "report.csv", ["h", "k", "violation_rate"],
              [[float(levels[i]), float(levels[j]), float(rates[i, j])]
               for i in range(len(levels)) for j in range(len(levels))])
    if check.certifying:
        run.check("margin >= -3 SE", check.margin >= -max(3.0 * check.std_error, 1e-12), margin=check.margin)
    if "violation_rate" in run.expect:
        want = float(run.expect["violation_rate"])
        run.check(f"max violation rate == {want}", float(rates.max()) == want, rate=float(rates.max()))
    if run.expect.get("margin_zero"):
        run.check("margin within 3 SE of 0", abs(check.margin) <= max(3.0 * check.std_error, 1e-12), margin=check.margin)


def exp_particles(run: Run) -> None:
    spec = run.measure()
    if not isinstance(spec, Particles):
        raise ConfigError("measure.family", "particles-sim needs the particles family")
    base = spec.sample_base(run.grid, run.rng, run.M)
    z = base.W.values
    ordered = float(np.mean(np.all(np.diff(z, axis=-1) > 0, axis=(-2, -1)))) if spec.path_dim > 1 else 1.0
    run.results["ordered_fraction"] = ordered
    run.check("strict ordering on every path", ordered == 1.0, fraction=ordered)
    rows = [["ordered_fraction", ordered, ""]]
    if spec.path_dim == 2 and spec.b == 0.0 and spec.c == 0.0:
        gap = (z[:, -1, 1] - z[:, -1, 0]) ** 2
        target = (spec.z0[1] - spec.z0[0]) ** 2 + 4.0 * spec.gamma + 2.0 * spec.sigma**2
        mean, se = float(gap.mean()), float(gap.std(ddof=1) / np.sqrt(gap.size))
        run.results["gap_second_moment"] = {"mean": mean, "std_error": se, "target": target}
        rows.append(["gap_second_moment", mean, se])
        rows.append(["gap_target", target, ""])
        tol = float(run.expect.get("gap_rel_tol", 0.05))
        run.check(f"E[D^2(1)] within {tol:.0%} of {target}", abs(mean - target) <= tol * target, mean=mean)
    write_csv(run.out / "report.csv", ["quantity", "value", "std_error"], rows)
    if run.cfg.get("write_paths", False):
        write_csv(run.out / "paths.csv", ["t"] + [f"dim_{i}" for i in range(spec.path_dim)],
                  [[float(t)] + [float(x) for x in row] for t, row in zip(run.grid.nodes, z[0])])


def exp_bridge_vs_loop(run: Run) -> None:
    spec = run.measure()
    if isinstance(spec, Bridge):
        bridge = spec
    elif isinstance(spec, Loop) and len(spec.weights) == 1:
        bridge = Bridge(spec.atoms[0])
    else:
        raise ConfigError("measure", "bridge-vs-loop needs a bridge or a single-atom loop")
    loop = Loop((bridge.endpoint,), (1.0,))
    a = bridge.a
    ts = np.linspace(0.0, 0.9, 10)
    xs = np.linspace(-2.0, 2.0, 10)
    worst = 0.0
    for t in ts:
        for x in xs:
            pt = np.full(a.size, x)
            _, grad = loop_log_kernel(t, pt, loop.atom_array, [1.0])
            exact = (a - pt) / (1.0 - t)
            worst = max(worst, float(np.max(np.abs(grad - exact) / np.maximum(np.abs(exact), 1e-300))))
    run.results["drift_identity_max_rel_error"] = worst
    run.check("drift identity to 1e-10 relative", worst <= 1e-10, error=worst)

    w_bridge = bridge.sample_base(run.grid, run.rng.child(0), run.M).W.values
    w_loop = _loop_sde(loop, run.grid, run.M, run.rng.child(1))
    rows = []
    for t in (0.25, 0.5, 0.75):
        k = run.grid.index_of(t)
        p = float(ks_2samp(w_bridge[:, k, 0], w_loop[:, k, 0]).pvalue)
        rows.append([t, p])
        run.check(f"two-sample KS at t={t} (p > 0.01)", p > 0.01, pvalue=p)
    pinned = bool(np.all(w_bridge[:, -1, :] == a))
    run.check("bridge endpoint exact", pinned)
    run.results["ks"] = [{"t": t, "pvalue": p} for t, p in rows]
    write_csv(run.out / "report.csv", ["t", "ks_pvalue"], rows)


def _loop_sde(loop: Loop, grid: TimeGrid, samples: int, rng: RandomSource) -> np.ndarray:
    """Euler scheme for ``dX = dbeta + g(t, X) dt`` with the loop drift, from fresh noise."""
    incr = brownian_increments(grid, loop.path_dim, rng, samples)
    x = np.zeros((samples, grid.steps + 1, loop.path_dim))
    for k, t in enumerate(grid.left_nodes):
        x[:, k + 1] = x[:, k] + incr[:, k] + loop.log_drift(t, x[:, k]) * grid.dt
    return x


RUNNERS = {
    "girsanov-validate": exp_girsanov,
    "law-transport": exp_law_transport,
    "duality": exp_duality,
    "entropy-criterion": exp_entropy,
    "compose-check": exp_compose,
    "prekopa": exp_prekopa,
    "particles-sim": exp_particles,
    "bridge-vs-loop": exp_bridge_vs_loop,
}


def run_config(cfg: dict, output_dir: str | os.PathLike | None = None) -> int:
    """Run one experiment and write its outputs; returns the exit code."""
    out = Path(output_dir or cfg.get("output_dir") or "pathvar-out")
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    run = Run(cfg, out)
    RUNNERS[run.experiment](run)
    passed = all(a["passed"] for a in run.assertions)
    summary = {
        "experiment": run.experiment,
        "config": cfg,
        "results": run.results,
        "assertions": run.assertions,
        "passed": passed,
        "wall_time": time.perf_counter() - start,
    }
    (out / "summary.json").write_text(to_json(summary) + "\n")
    return 0 if passed else 2


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pathvar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a JSON config")
    run.add_argument("config", help="path to the JSON config")
    run.add_argument("--output-dir", help="override output_dir from the config")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--threads", type=int, help="worker threads (default: $PATHVAR_THREADS or 1)")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    set_default_threads(args.threads)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise ConfigError("", "config must be a JSON object")
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.output_dir is not None:
            cfg["output_dir"] = args.output_dir
        code = run_config(cfg)
    except (ConfigError, MeasureSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        set_default_threads(None)
    if code == 2:
        print("one or more assertions failed; see summary.json", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
