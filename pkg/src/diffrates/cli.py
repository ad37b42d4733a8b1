"""Command-line entry point: ``validate``, ``sweep``, ``report`` and ``sample``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checks, oracle, plotting
from .density import DensityError, forward_density, gaussian_chain_law, reverse_density
from .metrics import (ConvergenceReport, ConvergenceRow, gaussian_tv, kl_divergence,
                      pinsker_check, tv_distance)
from .samplers import SamplerKind, SamplerSpec, default_threads, run_reverse
from .schedule import ScheduleError, ScheduleParams, build_schedule, verify_schedule_properties
from .targets import MixtureTarget, TargetError

log = logging.getLogger("diffrates")

SWEEP_CSV = "sweep.csv"
SWEEP_JSON = "sweep.json"
GRID_DIR = "grids"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    target_path: Path
    T: list[int]
    c0: float = 2.0
    c1: float = 4.0
    samplers: list[SamplerKind] = field(default_factory=lambda: list(SamplerKind))
    lo: float = -8.0
    hi: float = 8.0
    points: int = 4096
    leak_tol: float = 1e-3
    # "absolute" windows are used as given; "forward_std" windows are in units of sd(q_1)
    units: str = "absolute"
    refine_check: list[int] = field(default_factory=list)
    fit_rule: str = "in_sample"
    dump_grids: bool = True
    oracle_n: int = 200_000
    oracle_seed: int = 0
    oracle_conditions: int = 20
    oracle_T: int | None = None
    sample_seed: int = 0
    output: Path = Path("results")

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"{path}: config file not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        base = path.parent
        try:
            sch = doc["schedule"]
            dens = doc.get("density", {})
            orc = doc.get("oracle", {})
            cfg = cls(
                target_path=(base / doc["target"]).resolve(),
                T=[int(t) for t in sch["T"]],
                c0=float(sch.get("c0", 2.0)),
                c1=float(sch.get("c1", 4.0)),
                samplers=[SamplerKind(k) for k in doc.get("samplers", [k.value for k in SamplerKind])],
                lo=float(dens.get("lo", -8.0)),
                hi=float(dens.get("hi", 8.0)),
                points=int(dens.get("points", 4096)),
                leak_tol=float(dens.get("leak_tol", 1e-3)),
                units=str(dens.get("units", "absolute")),
                refine_check=[int(t) for t in dens.get("refine_check", [])],
                fit_rule=str(doc.get("fit", {}).get("rule", "in_sample")),
                dump_grids=bool(dens.get("dump_grids", True)),
                oracle_n=int(orc.get("n", 200_000)),
                oracle_seed=int(orc.get("seed", 0)),
                oracle_conditions=int(orc.get("conditions", 20)),
                oracle_T=None if orc.get("T") is None else int(orc["T"]),
                sample_seed=int(doc.get("sample_seed", 0)),
                output=(base / doc.get("output", "results")).resolve(),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: bad config entry ({exc!r})") from exc
        cfg.check()
        return cfg

    def check(self):
        if not self.T or any(b <= a for a, b in zip(self.T, self.T[1:])):
            raise ConfigError(f"T list must be non-empty and strictly increasing, got {self.T}")
        if not self.lo < self.hi:
            raise ConfigError(f"density window [{self.lo}, {self.hi}] is empty")
        if self.fit_rule not in ("in_sample", "deletion"):
            raise ConfigError(f"fit.rule must be 'in_sample' or 'deletion', got {self.fit_rule!r}")
        if self.units not in ("absolute", "forward_std"):
            raise ConfigError(f"density.units must be 'absolute' or 'forward_std', got {self.units!r}")

    def target(self) -> MixtureTarget:
        return MixtureTarget.from_json(self.target_path)

    def schedule(self, T: int):
        return build_schedule(ScheduleParams(T, self.c0, self.c1))

    def window(self, target: MixtureTarget, schedule) -> tuple[float, float]:
        if self.units == "absolute":
            return self.lo, self.hi
        _, ab, gam = schedule.at(1)
        sd = math.sqrt(ab * float(target.covariance()[0, 0]) + gam)
        centre = math.sqrt(ab) * float(target.mean()[0])
        return centre + self.lo * sd, centre + self.hi * sd


# -- validate ----------------------------------------------------------------


def cmd_validate(cfg: RunConfig) -> int:
    target = cfg.target()
    report: dict = {"schedule": {}, "failures": []}
    fails = report["failures"]

    for T in cfg.T:
        props = verify_schedule_properties(cfg.schedule(T))
        report["schedule"][str(T)] = props.to_dict()
        fails += [f"schedule T={T}: property ({c.name}) violated, {c.detail}"
                  for c in props.checks if not c.passed]

    T_val = cfg.oracle_T or cfg.T[len(cfg.T) // 2]
    sch = cfg.schedule(T_val)

    conds = oracle.random_conditions(target, sch, cfg.oracle_conditions, cfg.oracle_seed)
    suite = oracle.agreement_suite(target, sch, conds, cfg.oracle_n, cfg.oracle_seed)
    report["oracle"] = {"T": T_val, "n": cfg.oracle_n, "functionals": suite}
    fails += [f"oracle {name}: max |z| = {r['max_abs_z']:.3g} > 4 at t={r['worst_t']}"
              for name, r in suite.items() if not r["passed"]]

    jac = checks.jacobian_errors(target, sch, checks.random_points(target, sch, 50, cfg.oracle_seed))
    report["jacobian"] = {"max_rel_error": float(jac.max()), "points": len(jac), "passed": bool(jac.max() <= 1e-6)}
    if jac.max() > 1e-6:
        fails.append(f"jacobian: relative error {jac.max():.3g} > 1e-6")

    form = checks.kernel_form_errors(target, sch, 100, cfg.oracle_seed)
    report["kernel_form"] = {"max_abs_error": float(form.max()), "points": len(form),
                             "passed": bool(form.max() <= 1e-12)}
    if form.max() > 1e-12:
        fails.append(f"kernel form: difference {form.max():.3g} > 1e-12")

    report["passed"] = not fails
    cfg.output.mkdir(parents=True, exist_ok=True)
    (cfg.output / "validate.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if fails:
        print(f"FAIL: {fails[0]}", file=sys.stderr)
        return 1
    print(f"validate: all checks passed ({cfg.output / 'validate.json'})")
    return 0


# -- sweep -------------------------------------------------------------------


def _cell(cfg: RunConfig, target: MixtureTarget, T: int, kind: SamplerKind, points: int):
    sch = cfg.schedule(T)
    win = cfg.window(target, sch)
    p1 = reverse_density(target, sch, kind, win, points, cfg.leak_tol)
    q1 = forward_density(target, sch, win, points)
    tv = tv_distance(p1, q1)
    kl = kl_divergence(q1, p1)
    row = ConvergenceRow(T, kind.value, tv.raw, tv.corrected, kl.value, points,
                         p1.leaked_mass_bound + q1.leaked_mass_bound)
    return row, p1, q1


def _is_point_atom(target: MixtureTarget) -> bool:
    return target.dim == 1 and target.n_components == 1 and not np.any(target.covs)


def run_sweep(cfg: RunConfig, threads: int | None = None) -> ConvergenceReport:
    target = cfg.target()
    if target.dim != 1:
        raise ConfigError(f"the grid sweep needs a 1-d target, {cfg.target_path} has d = {target.dim}")
    for T in cfg.T:
        cfg.schedule(T)  # fail early on bad schedule parameters
    threads = default_threads() if threads is None else threads
    cells = [(T, k) for k in cfg.samplers for T in cfg.T]
    work = lambda c: _cell(cfg, target, c[0], c[1], cfg.points)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, cells))
    else:
        results = [work(c) for c in cells]

    report = ConvergenceReport([r for r, _, _ in results])
    if len(cfg.T) >= 3:
        report.fit_slopes(rule=cfg.fit_rule)
    else:
        report.notes.append(f"{len(cfg.T)} value(s) of T: slope fits skipped")
        log.info("fewer than 3 values of T, slope fits skipped")
    pinsker_check(report)

    extra: dict = {}
    refine = []
    for T in cfg.refine_check:
        for k in cfg.samplers:
            base = next(r for r, _, _ in results if r.T == T and r.kind == k.value) if T in cfg.T else None
            coarse = base if base is not None else _cell(cfg, target, T, k, cfg.points)[0]
            fine = _cell(cfg, target, T, k, 2 * cfg.points)[0]
            refine.append({"T": T, "kind": k.value, "tv": coarse.tv_corrected,
                           "tv_refined": fine.tv_corrected,
                           "change": abs(fine.tv_corrected - coarse.tv_corrected)})
    if refine:
        extra["refinement"] = refine
    if _is_point_atom(target):
        chain = []
        for row in report.sorted_rows():
            sch = cfg.schedule(row.T)
            m, v = gaussian_chain_law(target, sch, SamplerKind(row.kind))
            _, ab, gam = sch.at(1)
            exact = gaussian_tv(m, v, math.sqrt(ab) * float(target.means[0, 0]), gam)
            chain.append({"T": row.T, "kind": row.kind, "tv": row.tv, "tv_exact": exact,
                          "error": abs(row.tv - exact)})
        extra["gaussian_chain"] = chain

    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    (out / SWEEP_CSV).write_text(report.to_csv())
    doc = json.loads(report.to_json())
    doc.update(extra)
    doc["config"] = {"T": cfg.T, "c0": cfg.c0, "c1": cfg.c1, "points": cfg.points,
                     "window": [cfg.lo, cfg.hi], "units": cfg.units, "target": cfg.target_path.name,
                     "fit_rule": cfg.fit_rule}
    (out / SWEEP_JSON).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_plot_data(report, out / "plot_data.csv")
    if cfg.dump_grids:
        gdir = out / GRID_DIR
        gdir.mkdir(exist_ok=True)
        for row, p1, q1 in results:
            _dump_grid(p1, q1, gdir / f"grid_{row.kind}_T{row.T}.csv")
    return report


def _write_plot_data(report: ConvergenceReport, path: Path):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "T", "log_T", "log_tv"])
        for r in report.sorted_rows():
            w.writerow([r.kind, r.T, repr(math.log(r.T)), repr(math.log(max(r.tv_corrected, 1e-300)))])


def _dump_grid(p1, q1, path: Path):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "p1", "q1", "abs_diff"])
        for y, a, b in zip(p1.x, p1.values, q1.values):
            w.writerow([repr(float(y)), repr(float(a)), repr(float(b)), repr(float(abs(a - b)))])


def cmd_sweep(cfg: RunConfig) -> int:
    report = run_sweep(cfg)
    print(f"sweep: {len(report.rows)} rows written to {cfg.output / SWEEP_CSV}")
    for k, fit in sorted(report.slopes.items()):
        print(f"  {k:<11} slope {fit.slope:+.3f}  (rms residual {fit.residual:.3g})")
    for note in report.notes:
        print(f"  note: {note}")
    if not report.pinsker_ok:
        print("  warning: a row violates TV <= sqrt(KL/2)", file=sys.stderr)
    return 0


# -- report ------------------------------------------------------------------

GAPS = (("ODE_PLAIN", "ODE_ACCEL"), ("DDPM_PLAIN", "DDPM_ACCEL"))


def render_report(result_dir) -> str:
    d = Path(result_dir)
    missing = [f for f in (SWEEP_CSV, SWEEP_JSON) if not (d / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{d}: expected sweep outputs {', '.join(missing)}")
    report = ConvergenceReport.from_json((d / SWEEP_JSON).read_text())
    lines = ["kind         slope     intercept  rms_resid  points  pinsker"]
    by_kind: dict = {}
    for r in report.sorted_rows():
        by_kind.setdefault(r.kind, []).append(r)
    for k in sorted(by_kind):
        ok = all(r.pinsker_ok() for r in by_kind[k])
        fit = report.slopes.get(k)
        if fit is None:
            lines.append(f"{k:<12} {'-':>8}  {'-':>9}  {'-':>9}  {len(by_kind[k]):>6}  {ok}")
        else:
            lines.append(f"{k:<12} {fit.slope:>8.4f}  {fit.intercept:>9.4f}  {fit.residual:>9.3g}"
                         f"  {fit.n_points:>6}  {ok}")
    gaps = [(a, b) for a, b in GAPS if a in report.slopes and b in report.slopes]
    if gaps:
        lines.append("")
        for a, b in gaps:
            lines.append(f"slope gap {b} - {a}: {report.slopes[b].slope - report.slopes[a].slope:+.4f}")
    lines.append("")
    lines.append("T     " + "  ".join(f"{k:>11}" for k in sorted(by_kind)))
    Ts = sorted({r.T for r in report.rows})
    for T in Ts:
        vals = []
        for k in sorted(by_kind):
            row = next((r for r in by_kind[k] if r.T == T), None)
            vals.append(f"{row.tv_corrected:>11.4e}" if row else f"{'-':>11}")
        lines.append(f"{T:<5} " + "  ".join(vals))
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def cmd_report(result_dir) -> int:
    d = Path(result_dir)
    text = render_report(d)
    report = ConvergenceReport.from_json((d / SWEEP_JSON).read_text())
    (d / "report.txt").write_text(text)
    with (d / "slopes.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "slope", "intercept", "residual", "n_points", "excluded_T"])
        for k in sorted(report.slopes):
            f = report.slopes[k]
            w.writerow([k, repr(f.slope), repr(f.intercept), repr(f.residual), f.n_points,
                        "" if f.excluded_T is None else f.excluded_T])
    series = {}
    for r in report.sorted_rows():
        T, tv = series.setdefault(r.kind, ([], []))
        T.append(r.T)
        tv.append(r.tv_corrected)
    plotting.plot_rates(series, {k: f.slope for k, f in report.slopes.items()}, d / "tv_vs_T.svg")
    gdir = d / GRID_DIR
    if gdir.is_dir():
        T_max = max(r.T for r in report.rows)
        for k in sorted(series):
            g = gdir / f"grid_{k}_T{T_max}.csv"
            if g.is_file():
                data = np.loadtxt(g, delimiter=",", skiprows=1)
                plotting.plot_density(data[:, 0], data[:, 1], data[:, 2], f"{k}, T = {T_max}",
                                      d / f"density_{k}_T{T_max}.svg")
    sys.stdout.write(text)
    return 0


# -- sample ------------------------------------------------------------------


def cmd_sample(cfg: RunConfig, kind: SamplerKind, T: int, n: int, out: Path | None) -> int:
    run = run_reverse(cfg.target(), cfg.schedule(T), SamplerSpec(kind, cfg.sample_seed), n)
    out = out or cfg.output / f"samples_{kind.value}_T{T}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    header = ",".join(f"x{i}" for i in range(run.samples.shape[1]))
    np.savetxt(out, run.samples, delimiter=",", header=header, comments="", fmt="%.17g")
    meta = {"target": cfg.target_path.name, "T": T, "c0": cfg.c0, "c1": cfg.c1, "kind": kind.value,
            "seed": cfg.sample_seed, "n": n, "failures": int(run.failures)}
    out.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"sample: {n} draws ({run.failures} failed) written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffrates", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("validate", help="closed-form vs oracle, Jacobian and schedule checks")
    p.add_argument("config")
    p = sub.add_parser("sweep", help="TV against T for every sampler on the grid engine")
    p.add_argument("config")
    p = sub.add_parser("report", help="slope table and figures from a sweep directory")
    p.add_argument("result_dir")
    p = sub.add_parser("sample", help="draw trajectories from one sampler")
    p.add_argument("config")
    p.add_argument("--kind", required=True, choices=[k.value for k in SamplerKind])
    p.add_argument("--T", type=int, required=True)
    p.add_argument("-n", type=int, default=10_000)
    p.add_argument("-o", "--out", type=Path)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.result_dir)
        cfg = RunConfig.load(args.config)
        if args.command == "validate":
            return cmd_validate(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        return cmd_sample(cfg, SamplerKind(args.kind), args.T, args.n, args.out)
    except (ConfigError, TargetError, ScheduleError, DensityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
