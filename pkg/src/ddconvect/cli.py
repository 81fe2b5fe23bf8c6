"""Command-line front end.

``ddconvect run-example <1|2|3>`` runs a built-in experiment and
``ddconvect run-config <path>`` a configuration file.  Both write
``table<N>.csv`` (plus ``.full.csv``), ``run.json`` and optional VTK files
to the output directory.  Exit codes: 0 success, 2 invalid input, 3 solver
failure (a ``FAILED`` marker is left next to the partial outputs).

The environment variable ``DDCONVECT_SEED`` is reserved; the pipeline is
deterministic and does not read it.
"""

import argparse
import configparser
import json
import logging
import re
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from .benchmarks import Benchmark, example3_phi_D, get_benchmark, manufactured_config
from .errors import ConfigurationError, DDConvectError, SolverError
from .exact import example1_solution, example2_solution
from .mesh import (
    Pattern, Shape, selector_horizontal_sides, selector_l_shape_outer, selector_vertical_sides,
)
from .problem import VISCOSITY_REGISTRY, ProblemConfig
from .solver import FixedPointConfig, FlowMode
from .verify import convergence_study, rows_of, write_csv

log = logging.getLogger("ddconvect")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 2, 3
SNAPSHOT_STEPS = (1, 5, 10, 15, 20, 25)

SELECTORS = {
    "horizontal": selector_horizontal_sides,
    "vertical": selector_vertical_sides,
    "l_outer": selector_l_shape_outer,
}
MANUFACTURED = {"example1": example1_solution, "example2": example2_solution}


# ------------------------------------------------------------------- runs

class Run:
    """Everything needed to execute and record one study."""

    def __init__(self, bench: Benchmark, k, levels, out, fp, table, vtk=False, steps=None,
                 jobs=1, coarse=None, resolutions=None, source=None):
        if k not in (0, 1, 2):
            raise ConfigurationError(f"k must be 0, 1 or 2, got {k}")
        if levels < 2:
            raise ConfigurationError("levels must be at least 2")
        if jobs < 1:
            raise ConfigurationError("jobs must be positive")
        if steps is not None and steps < 1:
            raise ConfigurationError("steps must be positive")
        self.bench, self.k, self.levels, self.fp = bench, k, levels, fp
        self.out, self.table, self.vtk = Path(out), table, vtk
        self.steps, self.jobs, self.coarse, self.resolutions = steps, jobs, coarse, resolutions
        self.source = source

    def manifest(self):
        cfg: ProblemConfig = self.bench.config
        return dict(
            source=self.source, example=self.bench.example, k=self.k, levels=self.levels,
            coarse=self.coarse or self.bench.coarse, resolutions=self.level_resolutions(),
            pattern=self.bench.pattern.value,
            steps=self.steps, dt=self.bench.dt,
            gamma=cfg.gamma, nu=dict(name=cfg.nu.name, lower=cfg.nu.lower, upper=cfg.nu.upper),
            alpha=list(cfg.alpha), K=list(cfg.K), g=list(cfg.g),
            solver=dict(
                mode=self.fp.mode.value, tol=self.fp.tol, max_outer=self.fp.max_outer,
                newton_tol=self.fp.newton_tol, newton_max=self.fp.newton_max,
                advection=self.fp.advection, linear_solver=self.fp.linear_solver,
            ),
        )

    def level_resolutions(self):
        """Resolutions of the study levels, or None for dyadic refinement."""
        if self.resolutions is not None:
            return [int(r) for r in self.resolutions]
        if self.coarse is None and self.bench.resolutions is not None:
            return list(self.bench.resolutions[:self.levels])
        return None

    def kappas(self):
        cfg = self.bench.config
        if self.bench.dt is not None:
            cfg = cfg.with_(dt=self.bench.dt)
        return list(cfg.stabilization)

    def execute(self):
        self.out.mkdir(parents=True, exist_ok=True)
        marker = self.out / "FAILED"
        if marker.exists():
            marker.unlink()
        record = dict(self.manifest(), kappas=self.kappas(), status="running")
        start = time.perf_counter()
        try:
            results = convergence_study(
                self.bench, self.k, self.levels, self.fp, coarse=self.coarse,
                steps=self.steps, jobs=self.jobs, keep_steps=self.vtk,
                resolutions=self.resolutions,
            )
        except SolverError as exc:
            record.update(status="failed", error=str(exc),
                          runtime_seconds=time.perf_counter() - start)
            _write_json(self.out / "run.json", record)
            marker.write_text(f"{exc}\n")
            raise
        record["runtime_seconds"] = time.perf_counter() - start
        write_csv(rows_of(results), self.out / self.table)
        record["levels_detail"] = [_level_record(r) for r in results]
        record["status"] = "ok"
        _write_json(self.out / "run.json", record)
        if self.vtk:
            self._write_vtk(results)
        return results

    def _write_vtk(self, results):
        from .vtk import write_state

        for i, r in enumerate(results):
            write_state(self.out / f"level{i}.vtk", r.fes, r.state)
        last = results[-1]
        for s in last.steps:
            if s.index in SNAPSHOT_STEPS:
                write_state(self.out / f"step{s.index:03d}.vtk", last.fes, s.state,
                            title=f"t = {s.time:.6g}")


def _level_record(r):
    hist = r.history
    rec = dict(
        triangles=int(r.fes.mesh.n_triangles), h=float(r.fes.mesh.h), N=int(r.fes.n_total),
        reference=r.row is None,
    )
    if hist is not None:
        rec.update(
            outer_iterations=hist.outer_iterations,
            newton_iterations=[int(n) for n in hist.newton_iterations],
            linear_iterations=int(hist.linear_iterations),
            residual=hist.residual,
            increment=hist.increments[-1] if hist.increments else None,
        )
    if r.row is not None:
        rec.update(pressure_mean=r.row.pressure_mean, pressure_norm=r.row.pressure_norm,
                   paper_N=r.row.paper_N)
    if r.steps:
        rec["step_outer_iterations"] = [s.history.outer_iterations for s in r.steps]
    return rec


def _write_json(path, record):
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(f"not serializable: {type(o)}")

    Path(path).write_text(json.dumps(record, indent=2, default=default) + "\n")


# ---------------------------------------------------------------- configs

def _line_of(text, section, key):
    """1-based line of ``key`` inside ``[section]`` (0 when absent)."""
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
        elif current == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
            return i
    return 0


class _Reader:
    """Typed access to a parsed config with line-tagged errors."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self.text = self.path.read_text()
        except OSError as exc:
            raise ConfigurationError(f"{path}: {exc.strerror}") from None
        self.cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            self.cp.read_string(self.text, source=str(path))
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from None

    def fail(self, section, key, msg):
        line = _line_of(self.text, section, key)
        where = f"{self.path}:{line}" if line else str(self.path)
        raise ConfigurationError(f"{where}: [{section}] {key}: {msg}")

    def get(self, section, key, default=None, required=False):
        if self.cp.has_option(section, key):
            return self.cp.get(section, key).strip()
        if required:
            self.fail(section, key, "missing")
        return default

    def number(self, section, key, default=None, kind=float, required=False):
        raw = self.get(section, key, None, required)
        if raw is None:
            return default
        try:
            return kind(raw)
        except ValueError:
            self.fail(section, key, f"expected {kind.__name__}, got {raw!r}")

    def vector(self, section, key, default=None, size=2):
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            vals = tuple(float(v) for v in raw.replace(",", " ").split())
        except ValueError:
            self.fail(section, key, f"expected {size} numbers, got {raw!r}")
        if len(vals) != size:
            self.fail(section, key, f"expected {size} numbers, got {len(vals)}")
        return vals

    def flag(self, section, key, default=False):
        if not self.cp.has_option(section, key):
            return default
        try:
            return self.cp.getboolean(section, key)
        except ValueError:
            self.fail(section, key, "expected yes/no")

    def choice(self, section, key, options, default=None):
        raw = self.get(section, key, default)
        if raw not in options:
            self.fail(section, key, f"expected one of {', '.join(sorted(options))}, got {raw!r}")
        return raw


def _viscosity(rd: _Reader):
    name = rd.choice("physics", "viscosity", set(VISCOSITY_REGISTRY), "constant")
    if name == "constant":
        value = rd.number("physics", "nu", required=True)
        if not value > 0:
            rd.fail("physics", "nu", "must be positive")
        return VISCOSITY_REGISTRY[name](value)
    return VISCOSITY_REGISTRY[name]()


def load_config(path, out=None) -> Run:
    """Parse a run configuration; raises ConfigurationError with line numbers."""
    rd = _Reader(path)
    shape = Shape(rd.choice("domain", "shape", {s.value for s in Shape}, "unit_square"))
    default_sel = "l_outer" if shape == Shape.L_SHAPE else "horizontal"
    selector = SELECTORS[rd.choice("domain", "dirichlet", set(SELECTORS), default_sel)]
    pattern = Pattern(rd.choice("domain", "pattern", {p.value for p in Pattern}, "crisscross"))
    coarse = rd.number("domain", "resolution", 8, int)
    if coarse < 1:
        rd.fail("domain", "resolution", "must be a positive integer")
    resolutions = None
    if rd.get("domain", "resolutions") is not None:
        raw = rd.get("domain", "resolutions").replace(",", " ").split()
        try:
            resolutions = [int(r) for r in raw]
        except ValueError:
            rd.fail("domain", "resolutions", f"expected integers, got {' '.join(raw)!r}")
        if len(resolutions) < 2 or any(b <= a for a, b in zip(resolutions, resolutions[1:])) \
                or resolutions[0] < 1:
            rd.fail("domain", "resolutions", "expected at least two increasing positive integers")

    manufactured = rd.choice("physics", "manufactured", set(MANUFACTURED) | {"none"}, "none")
    if manufactured != "none":
        ex = MANUFACTURED[manufactured]()
        kw = {}
        if rd.get("physics", "kappas") is not None:
            kw["kappas"] = rd.vector("physics", "kappas", size=3)
        cfg = manufactured_config(ex, **kw)
        example = int(manufactured[-1])
    else:
        gamma = rd.number("physics", "gamma", required=True)
        if not gamma > 0:
            rd.fail("physics", "gamma", f"must be positive, got {gamma}")
        K = rd.vector("physics", "K", (1.0, 1.0))
        if min(K) <= 0:
            rd.fail("physics", "K", "entries must be positive")
        phi_mode = rd.choice("physics", "phi_dirichlet", {"left_right", "constant"}, "left_right")
        if phi_mode == "constant":
            c = np.asarray(rd.vector("physics", "phi_value", (0.0, 0.0)))
            phi_D = lambda x: np.broadcast_to(c, x.shape).copy()  # noqa: E731
        else:
            phi_D = example3_phi_D
        cfg = ProblemConfig(
            gamma=gamma, nu=_viscosity(rd), alpha=rd.vector("physics", "alpha", (1.0, 1.0)),
            K=K, g=rd.vector("physics", "g", (0.0, -1.0)),
            kappas=rd.vector("physics", "kappas", None, size=3), phi_D=phi_D,
        )
        example = 0

    k = rd.number("discretization", "k", 0, int)
    levels = rd.number("discretization", "levels", len(resolutions) if resolutions else 3, int)
    if resolutions is not None and levels != len(resolutions):
        rd.fail("discretization", "levels", f"must equal the {len(resolutions)} resolutions")
    dt = rd.number("discretization", "dt", None)
    steps = rd.number("discretization", "steps", None, int)
    if dt is not None and not dt > 0:
        rd.fail("discretization", "dt", "must be positive")
    transient = dt is not None
    if transient and manufactured != "none":
        rd.fail("discretization", "dt", "time stepping needs manufactured = none")
    u0 = phi0 = None
    if transient:
        from .benchmarks import example3_phi0, example3_u0

        u0, phi0 = example3_u0, example3_phi0
        if steps is None:
            rd.fail("discretization", "steps", "required when dt is given")

    fp = FixedPointConfig(
        tol=rd.number("solver", "tol", 1e-6),
        max_outer=rd.number("solver", "max_outer", 100, int),
        mode=FlowMode(rd.choice("solver", "mode", {"newton", "picard"}, "newton")),
        advection=rd.choice("solver", "advection", {"lhs", "rhs"}, "lhs"),
        linear_solver=rd.choice("solver", "linear_solver",
                                {"direct", "bicgstab", "krylov", "dense"}, "direct"),
    )
    bench = Benchmark(example if not transient else 3, shape, selector, coarse, cfg,
                      MANUFACTURED[manufactured]() if manufactured != "none" else None,
                      u0=u0, phi0=phi0, dt=dt, t_final=None if dt is None else dt * steps,
                      pattern=pattern)
    if not transient and manufactured == "none":
        raise ConfigurationError(
            f"{path}: stationary runs need [physics] manufactured to measure errors"
        )
    out_dir = out or rd.get("output", "dir", "out")
    table = rd.get("output", "table", f"table{bench.example}.csv")
    return Run(bench, k, levels, out_dir, fp, table, vtk=rd.flag("output", "vtk"),
               steps=steps, jobs=rd.number("solver", "jobs", 1, int), resolutions=resolutions,
               source=str(path))


def example_run(example, k=0, levels=None, steps=None, out="out", vtk=False, picard=False,
                jobs=1, coarse=None, resolutions=None) -> Run:
    bench = get_benchmark(example)
    if levels is None:
        if resolutions:
            levels = len(resolutions)
        elif coarse is None and bench.resolutions is not None:
            levels = len(bench.resolutions)
        else:
            levels = 4
    fp = FixedPointConfig(mode=FlowMode.PICARD if picard else FlowMode.NEWTON)
    return Run(bench, k, levels, out, fp, f"table{bench.example}.csv", vtk=vtk, steps=steps,
               jobs=jobs, coarse=coarse, resolutions=resolutions,
               source=f"example {bench.example}")


# ------------------------------------------------------------------- main

def build_parser():
    p = argparse.ArgumentParser(prog="ddconvect", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log every outer iteration")
    sub = p.add_subparsers(dest="command", required=True)
    ex = sub.add_parser("run-example", help="run one of the built-in experiments")
    ex.add_argument("example", type=int, choices=(1, 2, 3))
    ex.add_argument("--k", type=int, default=0, choices=(0, 1, 2))
    ex.add_argument("--levels", type=int, default=None)
    ex.add_argument("--coarse", type=int, default=None, help="resolution of the coarsest mesh")
    ex.add_argument("--resolutions", type=int, nargs="+", default=None,
                    help="explicit mesh resolutions, one per level")
    ex.add_argument("--steps", type=int, default=None, help="time steps (example 3)")
    ex.add_argument("--out", default="out")
    ex.add_argument("--vtk", action="store_true")
    ex.add_argument("--picard", action="store_true", help="Picard flow solves instead of Newton")
    ex.add_argument("--jobs", type=int, default=1)
    cf = sub.add_parser("run-config", help="run a configuration file")
    cf.add_argument("path")
    cf.add_argument("--out", default=None, help="overrides [output] dir")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run-example":
            run = example_run(args.example, args.k, args.levels, args.steps, args.out,
                              args.vtk, args.picard, args.jobs, args.coarse, args.resolutions)
        else:
            run = load_config(args.path, args.out)
        results = run.execute()
    except SolverError as exc:
        print(f"ddconvect: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ConfigurationError as exc:
        print(f"ddconvect: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DDConvectError as exc:
        log.debug("%s", traceback.format_exc())
        print(f"ddconvect: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    for row in rows_of(results):
        rates = " ".join("--" if r is None else f"{r:.2f}" for r in row.rates())
        print(f"h={row.h:.4g} N={row.N} rates(t,sig,u,phi,p)= {rates}")
    print(f"wrote {run.out / run.table} and {run.out / 'run.json'}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
