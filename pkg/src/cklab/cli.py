"""Command-line driver: ``cklab <subcommand> [options]``.

Options resolve as flags > ``--config`` TOML > built-in defaults.  Top-level
TOML keys apply to every subcommand; a table named after the subcommand
(``[straighten]``, ``[tubes-sk-run]``, ...) overrides them, and a ``[phase]``
table defines a user phase.  Every output file embeds the resolved config.
Exit codes: 0 success, 1 a verdict failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .phases import BUILTINS, abc_naive, builtin, canonical_abc, load_phase_toml, phase_from_table, tomllib

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


DEFAULTS = {
    "common": {"phase": "rest", "n": 3, "seed": 0, "out": "ck_out", "plot": False},
    "check": {"samples": 200, "expect": "auto", "tol": 1e-6, "fail_floor": 0.1, "t_window": None},
    "abc-verify": {"samples": 50, "tol": 1e-9},
    "trace": {"xi": None, "v": None, "t_count": 101},
    "straighten": {"anchor": "generic", "naive_abc": False, "samples_per_radius": 8, "radii": "2^-3,2^-4,2^-5,2^-6,2^-7,2^-8", "band": "1.8,inf"},
    "tan-coniness": {"t0": 1.05, "p": "1e-3,1e-3", "grid": 0, "h_s": None, "tol": 0.1},
    "tubes-sk-run": {"delta": "2^-6", "mode": "grid", "eta": 0.2, "ladder": None, "grid_res": None, "family": None, "keep": 2},
    "tubes-rescale-check": {"rho_ladder": "2^-3,2^-4,2^-5", "children": 16, "grid_res": 256, "anchor": "generic", "jacobian_tol": 0.15, "stability": 2.0},
}


@dataclass
class RunConfig:
    command: str
    options: dict = field(default_factory=dict)
    phase_table: dict | None = None

    def to_dict(self) -> dict:
        # the output directory does not affect results, so it is left out
        opts = {k: v for k, v in sorted(self.options.items()) if k != "out"}
        d = {"command": self.command, "version": __version__, "options": opts}
        if self.phase_table is not None:
            d["phase_table"] = self.phase_table
        return d


# value parsing ------------------------------------------------------------------


def parse_number(text) -> float:
    """Floats, plus ``a^b`` powers such as ``2^-6``."""
    if isinstance(text, (int, float)):
        return float(text)
    s = str(text).strip()
    try:
        if "^" in s:
            base, exp = s.split("^", 1)
            return float(base) ** float(exp)
        return float(s)
    except ValueError:
        raise UsageError(f"cannot parse number {text!r}") from None


def parse_list(text) -> list[float]:
    if text is None:
        return []
    if isinstance(text, (list, tuple)):
        return [parse_number(v) for v in text]
    return [parse_number(v) for v in str(text).split(",") if v.strip()]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


# parser ------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="TOML file with defaults for this run")
    p.add_argument("--phase", default=S, help=f"built-in phase ({', '.join(BUILTINS)}) or a TOML file with a [phase] table")
    p.add_argument("--n", type=int, default=S, help="ambient dimension")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--plot", action="store_true", default=S, help="also write an SVG figure")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="cklab", description="Numerical experiments on curved Kakeya phases.")
    parser.add_argument("--version", action="version", version=f"cklab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="sample the nondegeneracy and curvature conditions")
    _common(p)
    p.add_argument("--samples", type=int, default=S)
    p.add_argument("--expect", choices=("auto", "pass", "fail"), default=S)
    p.add_argument("--tol", type=float, default=S)
    p.add_argument("--fail-floor", dest="fail_floor", type=float, default=S)
    p.add_argument("--t-window", dest="t_window", type=float, default=S, help="restrict samples to |t - t_origin| <= this")

    p = sub.add_parser("abc-verify", help="check the (A, B, c) identity of a built-in phase")
    _common(p)
    p.add_argument("--samples", type=int, default=S)
    p.add_argument("--tol", type=float, default=S)

    p = sub.add_parser("trace", help="trace one curve and write it as CSV")
    _common(p)
    p.add_argument("--xi", default=S, help="comma-separated direction")
    p.add_argument("--v", default=S, help="comma-separated offset")
    p.add_argument("--t-count", dest="t_count", type=int, default=S)

    p = sub.add_parser("straighten", help="fit the straightening error order around an anchor")
    _common(p)
    p.add_argument("--anchor", default=S, help="'generic', 'origin', or an offset a for the generic rule (0 = origin)")
    p.add_argument("--naive-abc", dest="naive_abc", action="store_true", default=S)
    p.add_argument("--samples-per-radius", dest="samples_per_radius", type=int, default=S)
    p.add_argument("--radii", default=S)
    p.add_argument("--band", default=S, help="accepted slope interval 'lo,hi'")

    p = sub.add_parser("tan-coniness", help="tangent-frame determinant for the tan pencil")
    _common(p)
    p.add_argument("--t0", type=float, default=S)
    p.add_argument("--p", default=S, help="comma-separated point p")
    p.add_argument("--grid", type=int, default=S, help="run this many seeded configurations instead")
    p.add_argument("--h-s", dest="h_s", type=float, default=S)
    p.add_argument("--tol", type=float, default=S)

    tubes = sub.add_parser("tubes", help="tube-family experiments")
    tsub = tubes.add_subparsers(dest="tubes_command", required=True)
    p = tsub.add_parser("sk-run", help="check the SK' hypotheses and measure the union")
    _common(p)
    p.add_argument("--delta", default=S)
    p.add_argument("--mode", choices=("grid", "cantor"), default=S)
    p.add_argument("--keep", type=int, choices=(2, 3, 4), default=S, help="quarters kept per Cantor level")
    p.add_argument("--eta", type=float, default=S)
    p.add_argument("--ladder", default=S)
    p.add_argument("--grid-res", dest="grid_res", type=int, default=S)
    p.add_argument("--family", default=S, help="JSONL family to load instead of generating one")
    p = tsub.add_parser("rescale-check", help="rescale children inside parents across a ladder of rho")
    _common(p)
    p.add_argument("--rho-ladder", dest="rho_ladder", default=S)
    p.add_argument("--children", type=int, default=S)
    p.add_argument("--grid-res", dest="grid_res", type=int, default=S)
    p.add_argument("--anchor", default=S)
    p.add_argument("--jacobian-tol", dest="jacobian_tol", type=float, default=S)
    p.add_argument("--stability", type=float, default=S)
    return parser


def resolve(ns: argparse.Namespace) -> RunConfig:
    command = ns.command if ns.command != "tubes" else f"tubes-{ns.tubes_command}"
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "tubes_command")}
    opts = {**DEFAULTS["common"], **DEFAULTS[command]}
    phase_table = None
    cfg_path = flags.pop("config", None)
    if cfg_path is not None:
        try:
            with open(cfg_path, "rb") as fh:
                data = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from None
        if isinstance(data.get("phase"), dict):
            phase_table = data.pop("phase")
        section = data.pop(command, {})
        top = {k.replace("-", "_"): v for k, v in data.items() if not isinstance(v, dict)}
        sec = {k.replace("-", "_"): v for k, v in section.items()}
        for key in {**top, **sec}:
            if key not in opts:
                raise UsageError(f"unknown config key {key!r} for {command}")
        opts.update(top)
        opts.update(sec)
        if phase_table is not None and "phase" not in flags and "phase" not in {**top, **sec}:
            opts["phase"] = "config"
    opts.update(flags)
    return RunConfig(command, opts, phase_table)


def load_phase(cfg: RunConfig):
    name, n = cfg.options["phase"], int(cfg.options["n"])
    try:
        if name == "config":
            return phase_from_table({"n": n, **cfg.phase_table})
        if str(name).endswith(".toml"):
            return load_phase_toml(name)
        return builtin(name, n)
    except (KeyError, ValueError, OSError) as exc:
        raise UsageError(str(exc).strip("'\"")) from None


# output helpers -----------------------------------------------------------------


class Output:
    """Writes into the run directory; timestamps go only to the sidecar log."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = Path(cfg.options["out"])
        self.written: list[str] = []

    def path(self, name: str) -> Path:
        return self.dir / name

    def json(self, name: str, payload: dict) -> None:
        self.path(name).write_text(dumps({"config": self.cfg.to_dict(), **payload}))
        self.written.append(name)

    def text(self, name: str, body: str, comment: str = "#") -> None:
        head = "".join(f"{comment} {line}\n" for line in dumps({"config": self.cfg.to_dict()}).splitlines())
        self.path(name).write_text(head + body)
        self.written.append(name)

    def svg(self, name: str, fig) -> None:
        import matplotlib

        matplotlib.rcParams["svg.hashsalt"] = "cklab"
        fig.text(0.01, 0.005, json.dumps(self.cfg.to_dict(), sort_keys=True), fontsize=3, alpha=0.6)
        fig.savefig(self.path(name), format="svg", metadata={"Date": None})
        self.written.append(name)

    def log(self, status: int) -> None:
        stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
        with open(self.path("run.log"), "a") as fh:
            fh.write(f"{stamp} {self.cfg.command} exit={status} files={','.join(self.written)}\n")


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt.subplots(figsize=(5, 4))


# subcommands -------------------------------------------------------------------


def cmd_check(cfg: RunConfig, out: Output) -> int:
    from .phase_core import Box, check_bourgain, sample_domain, write_reports_csv
    import io

    o = cfg.options
    phase = load_phase(cfg)
    if o["t_window"] is not None:
        M = phase.domain_M
        t0, w = M.origin[-1], float(o["t_window"]) / 0.9
        lo, hi = np.array(M.lo), np.array(M.hi)
        lo[-1], hi[-1] = max(lo[-1], t0 - w), min(hi[-1], t0 + w)
        phase = phase.with_domain(domain_M=Box(lo, hi, M.origin))
    expect = o["expect"]
    if expect == "auto":
        expect = "fail" if phase.tag == "worst" else "pass"
    reports = [check_bourgain(phase, x, t, xi, o["tol"]) for x, t, xi in sample_domain(phase, int(o["samples"]), int(o["seed"]))]
    res = np.array([r.bourgain_residual for r in reports])
    ok = bool(np.all(res <= o["tol"])) if expect == "pass" else bool(np.all(res >= o["fail_floor"]))
    buf = io.StringIO()
    write_reports_csv(reports, buf, phase.n)
    out.text("check.csv", buf.getvalue())
    summary = {"phase": phase.name, "expect": expect, "verdict_holds": ok, "max_residual": float(res.max()), "min_residual": float(res.min()), "samples": len(reports)}
    out.json("check.json", summary)
    if o["plot"]:
        fig, ax = _figure()
        ax.semilogy(np.maximum(res, 1e-18), ".")
        ax.set_xlabel("sample")
        ax.set_ylabel("proportionality residual")
        ax.set_title(phase.name)
        out.svg("check.svg", fig)
    print(f"{phase.name}: residual in [{res.min():.3g}, {res.max():.3g}], expected {expect}: {'ok' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_abc_verify(cfg: RunConfig, out: Output) -> int:
    from .phase_core import check_abc, sample_domain

    o = cfg.options
    phase = load_phase(cfg)
    try:
        abc = canonical_abc(phase)
    except KeyError as exc:
        raise UsageError(str(exc).strip("'\"")) from None
    checks = [check_abc(phase, abc, x, t, xi) for x, t, xi in sample_domain(phase, int(o["samples"]), int(o["seed"]))]
    res = [c.residual for c in checks]
    ok = max(res) <= o["tol"]
    out.json("abc.json", {"phase": phase.name, "abc": abc.name, "max_residual": max(res), "min_abs_det_B": min(abs(c.b_det) for c in checks), "residuals": res, "verdict_holds": ok})
    print(f"{phase.name}/{abc.name}: max residual {max(res):.3g}: {'ok' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_trace(cfg: RunConfig, out: Output) -> int:
    import io

    from .curve_tracer import TraceError, trace_curve, v_of

    o = cfg.options
    phase = load_phase(cfg)
    x0, t0, xi0 = phase.origin
    xi = np.array(parse_list(o["xi"])) if o["xi"] is not None else xi0
    v = np.array(parse_list(o["v"])) if o["v"] is not None else v_of(phase, x0, t0, xi0)
    if xi.size != phase.n - 1 or v.size != phase.n - 1:
        raise UsageError(f"--xi and --v need {phase.n - 1} entries")
    M0 = phase.domain_M.shrunk(0.9)
    grid = np.linspace(M0.lo[-1], M0.hi[-1], int(o["t_count"]))
    try:
        sample = trace_curve(phase, xi, v, grid)
    except TraceError as exc:
        print(f"trace failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    buf = io.StringIO()
    sample.write_csv(buf)
    out.text("trace.csv", buf.getvalue())
    if o["plot"]:
        fig, ax = _figure()
        for j in range(phase.n - 1):
            ax.plot(sample.t_grid, sample.points[:, j], label=f"x{j + 1}")
        ax.set_xlabel("t")
        ax.legend()
        out.svg("trace.svg", fig)
    print(f"traced {grid.size} points, max Newton iterations {int(sample.newton_iters.max())}")
    return EXIT_OK


def _anchor(phase, choice):
    from .curve_tracer import v_of
    from .straightener import generic_anchor

    x0, t0, xi0 = phase.origin
    if choice == "origin":
        return xi0, v_of(phase, x0, t0, xi0)
    a = 0.1 if choice == "generic" else parse_number(choice)
    if a == 0:
        return xi0, v_of(phase, x0, t0, xi0)
    return generic_anchor(phase, a)


def cmd_straighten(cfg: RunConfig, out: Output) -> int:
    from .straightener import InconsistentDataError, InvalidAnchorError, fit_error_order, worst_explicit_map

    o = cfg.options
    phase = load_phase(cfg)
    band = parse_list(o["band"])
    if len(band) != 2:
        raise UsageError("--band needs 'lo,hi'")
    radii = parse_list(o["radii"])
    xi0, v0 = _anchor(phase, o["anchor"])
    kw = dict(radii=radii, samples_per_radius=int(o["samples_per_radius"]), seed=int(o["seed"]))
    try:
        if o["naive_abc"]:
            rep = fit_error_order(phase, abc_naive(), xi0, v0, strict=False, **kw)
        elif phase.tag == "worst":
            rep = fit_error_order(phase, None, xi0, v0, smap=worst_explicit_map(), **kw)
        else:
            rep = fit_error_order(phase, canonical_abc(phase), xi0, v0, **kw)
    except KeyError as exc:
        raise UsageError(str(exc).strip("'\"")) from None
    except (InconsistentDataError, InvalidAnchorError) as exc:
        print(f"cannot straighten: {exc}", file=sys.stderr)
        return EXIT_FAIL
    ok = rep.exact or (band[0] <= rep.slope <= band[1])
    out.path("straighten.json").write_text(rep.to_json(config=cfg.to_dict(), band=band, verdict_holds=ok) + "\n")
    out.written.append("straighten.json")
    if o["plot"]:
        fig, ax = _figure()
        ax.loglog(rep.radii, np.maximum(rep.max_errors, 1e-18), "o-")
        ax.set_xlabel("r")
        ax.set_ylabel("max straightening error")
        ax.set_title("exact" if rep.exact else f"slope {rep.slope:.3f}")
        out.svg("straighten.svg", fig)
    print("exact" if rep.exact else f"slope {rep.slope:.4f} (r^2 = {rep.r2:.4f}), band {band}: {'ok' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_tan(cfg: RunConfig, out: Output) -> int:
    from .tan_example import AmbiguousRootError, PoleError, TanConfig, coniness_det, config_grid

    o = cfg.options
    n = int(o["n"])
    try:
        if int(o["grid"]) > 0:
            configs = config_grid(n, int(o["grid"]), int(o["seed"]))
        else:
            configs = [TanConfig(n, float(o["t0"]), parse_list(o["p"]))]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = []
    ok = True
    for c in configs:
        try:
            det, lead, rel = coniness_det(c, o["h_s"])
            control, _, _ = coniness_det(c, o["h_s"], family="lines")
        except (PoleError, AmbiguousRootError, ValueError) as exc:
            rows.append({**c.to_dict(), "error": str(exc)})
            ok = False
            continue
        good = det > 0 and rel <= o["tol"]
        ok &= good
        rows.append({**c.to_dict(), "det": det, "leading": lead, "rel_err": rel, "control_det": control, "holds": good})
    out.json("tan_coniness.json", {"configurations": rows, "verdict_holds": ok})
    if o["plot"]:
        fig, ax = _figure()
        pn = [float(np.linalg.norm(r["p"])) for r in rows if "det" in r]
        ax.loglog(pn, [abs(r["det"]) for r in rows if "det" in r], "o", label="frame determinant")
        ax.loglog(pn, [r["leading"] for r in rows if "det" in r], "x", label="leading order")
        ax.set_xlabel("|p|")
        ax.legend()
        out.svg("tan_coniness.svg", fig)
    for r in rows:
        print(f"t0={r['t0']} p={r['p']}: " + (f"det {r['det']:.4g}, lead {r['leading']:.4g}, rel {r['rel_err']:.3g}" if "det" in r else r["error"]))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_sk_run(cfg: RunConfig, out: Output) -> int:
    from .tube_lab import TubeFamily, make_sticky_family, sk_experiment

    o = cfg.options
    phase = load_phase(cfg)
    delta = parse_number(o["delta"])
    if o["family"] is not None:
        try:
            fam = TubeFamily.from_jsonl(Path(o["family"]).read_text(), phase, Path(o["family"]).stem)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read family: {exc}") from None
    else:
        try:
            fam = make_sticky_family(phase, delta, o["mode"], int(o["seed"]), int(o["keep"]))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    ladder = parse_list(o["ladder"]) or None
    rep = sk_experiment(phase, delta, fam, float(o["eta"]), ladder, o["grid_res"])
    out.path("family.jsonl").write_text(json.dumps(_jsonable({"config": cfg.to_dict()}), sort_keys=True) + "\n" + fam.to_jsonl())
    out.written.append("family.jsonl")
    out.path("sk_report.json").write_text(rep.to_json(config=cfg.to_dict()) + "\n")
    out.written.append("sk_report.json")
    if o["plot"]:
        _plot_slice(out, fam, phase)
    print(f"{fam.label}: (a) {rep.a_pass} (b) {rep.b_pass} {rep.b_counts} (c) {rep.c_pass} mass {rep.shading_mass:.4g}; union {rep.union_volume:.4g}, eps_hat {rep.eps_hat:.4g}")
    return EXIT_OK if rep.hypotheses_hold else EXIT_FAIL


def _plot_slice(out: Output, fam, phase) -> None:
    from matplotlib.patches import Circle

    from .curve_tracer import trace_curves

    t = phase.origin[1]
    xis, vs = fam.params()
    X = trace_curves(phase, xis, vs, [t])[0][:, 0, :2]
    fig, ax = _figure()
    for c in X:
        ax.add_patch(Circle(c, fam.delta, alpha=0.3, lw=0))
    ax.set_aspect("equal")
    ax.autoscale_view()
    ax.set_title(f"slice t = {t:g}")
    out.svg("slice.svg", fig)


def cmd_rescale(cfg: RunConfig, out: Output) -> int:
    from .curve_tracer import CurveParam
    from .tube_lab import ContainmentError, Tube, children_around, rescale_within

    o = cfg.options
    phase = load_phase(cfg)
    try:
        abc = canonical_abc(phase)
    except KeyError as exc:
        raise UsageError(str(exc).strip("'\"")) from None
    xi0, v0 = _anchor(phase, o["anchor"])
    rows = []
    for rho in parse_list(o["rho_ladder"]):
        parent = Tube(CurveParam(xi0, v0), rho, phase)
        kids = children_around(parent, rho * rho, int(o["children"]), int(o["seed"]))
        try:
            rep = rescale_within(parent, abc, kids, int(o["grid_res"]))
        except ContainmentError as exc:
            print(str(exc), file=sys.stderr)
            return EXIT_FAIL
        rows.append(rep.to_dict())
    d = [r["deviation_over_rho"] for r in rows]
    nonzero = [x for x in d if x > 1e-12]
    spread = max(nonzero) / min(nonzero) if nonzero else 1.0
    jac_ok = all(abs(r["jacobian_ratio"] - 1) <= o["jacobian_tol"] for r in rows)
    ok = spread <= o["stability"] and jac_ok
    out.json("rescale.json", {"ladder": rows, "deviation_over_rho_spread": spread, "jacobian_ok": jac_ok, "verdict_holds": ok})
    for r in rows:
        print(f"rho={r['rho']:g}: deviation {r['max_line_deviation']:.4g}, /rho {r['deviation_over_rho']:.4g}, jacobian ratio {r['jacobian_ratio']:.4f}")
    print(f"spread of deviation/rho: {spread:.3f}: {'ok' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "check": cmd_check,
    "abc-verify": cmd_abc_verify,
    "trace": cmd_trace,
    "straighten": cmd_straighten,
    "tan-coniness": cmd_tan,
    "tubes-sk-run": cmd_sk_run,
    "tubes-rescale-check": cmd_rescale,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        cfg = resolve(ns)
        out = Output(cfg)
        out.dir.mkdir(parents=True, exist_ok=True)
        try:
            lock = FileLock(str(out.path(".lock")), timeout=0)
            lock.acquire()
        except Timeout:
            print(f"another run holds the lock on {out.dir}", file=sys.stderr)
            return EXIT_FAIL
        try:
            status = COMMANDS[cfg.command](cfg, out)
            out.log(status)
        finally:
            lock.release()
        return status
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
