"""Command line front end.

Exit codes: 0 when every check passes (or a data-only command succeeds),
1 when some check fails (``--expect-fail`` swaps 0 and 1), 2 for usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import algorithms, analysis, counterexample, flows, zoo
from .errors import DivergentTail, KLError
from .reports import FAIL, PASS

FORMAT_VERSION = 1

# keys accepted in a --config file, with their parsers
CONFIG_KEYS = {
    "field": str, "x0": str, "T": float, "stop": float, "tol": float, "lambda": float,
    "steps": int, "t": float, "beta": float, "r0": float, "rmin": float, "levels": int,
    "directions": int, "samples": int, "seed": int, "nmax": int, "gens": int, "k": float,
    "r": float, "R": float, "out": str, "band": str,
}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ output
def fmt(v) -> str:
    """Shortest round-trip decimal (at most 17 significant digits)."""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def write_atomic(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def json_text(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def svg_text(curves=(), paths=(), points=(), extent=None) -> str:
    """Overlay of closed level curves, open paths and markers.

    The picture is 800 by 800 user units showing ``[-extent, extent]^2``
    (``extent`` defaults to 1.25 times the largest coordinate).
    """
    every = [np.asarray(c) for c in curves] + [np.asarray(p) for p in paths]
    every += [np.atleast_2d(np.asarray(p)) for p in points]
    if extent is None:
        m = max((float(np.max(np.abs(a))) for a in every if a.size), default=1.0)
        extent = 1.25 * m if m > 0 else 1.0
    s = 400.0 / extent

    def pts(a):
        return " ".join(f"{400 + s * x:.3f},{400 - s * y:.3f}" for x, y in np.asarray(a))

    out = ['<svg xmlns="http://www.w3.org/2000/svg" width="800" height="800" viewBox="0 0 800 800">',
           '<rect width="800" height="800" fill="white"/>']
    for c in curves:
        out.append(f'<polygon points="{pts(c)}" fill="none" stroke="#4a6fa5" stroke-width="0.8"/>')
    for p in paths:
        out.append(f'<polyline points="{pts(p)}" fill="none" stroke="#c0392b" stroke-width="1.5"/>')
    for p in points:
        x, y = np.asarray(p, dtype=float)
        out.append(f'<circle cx="{400 + s * x:.3f}" cy="{400 - s * y:.3f}" r="3" fill="black"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ------------------------------------------------------------------ config
def parse_point(text: str):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"bad point {text!r}") from None
    if len(vals) != 2:
        raise UsageError(f"point {text!r} needs two coordinates")
    return np.array(vals)


def read_config(path: str) -> dict:
    out = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        try:
            out[key] = CONFIG_KEYS[key](val)
        except ValueError:
            raise UsageError(f"{path}:{n}: bad value for {key}") from None
    return out


def resolve(args, defaults: dict) -> dict:
    """Merge flags over the config file over built-in defaults."""
    cfg = read_config(args.config) if args.config else {}
    out = dict(defaults)
    for key in set(defaults) | set(cfg):
        if key in cfg:
            out[key] = cfg[key]
        flag = getattr(args, key.replace("lambda", "lam"), None)
        if flag is not None:
            out[key] = flag
    return out


def _field(spec):
    try:
        return zoo.make_field(spec)
    except (ValueError, KLError) as exc:
        raise UsageError(str(exc)) from None


def _check(cond, msg):
    if not cond:
        raise UsageError(msg)


# ---------------------------------------------------------------- commands
def cmd_zoo(args, cfg):
    entries = []
    for e in zoo.zoo_entries():
        entries.append({"name": e.name, "formulas": e.formulas})
        print(e.name)
    write_atomic(os.path.join(cfg["out"], "zoo.json"), json_text({"fields": entries}))
    return PASS


def _level_curves(field, levels, N=256):
    curves = []
    for r in sorted(levels, reverse=True):
        try:
            curves.append(analysis.trace_level(field, r, N=N))
        except KLError:
            continue
    return curves


def cmd_flow(args, cfg):
    field = _field(cfg["field"])
    x0 = parse_point(cfg["x0"])
    _check(cfg["T"] is not None or cfg["stop"] is not None, "flow needs --T or --stop")
    _check(1e-12 <= cfg["tol"] <= 1e-3, "tol must lie in [1e-12, 1e-3]")
    stop = None if cfg["stop"] is None else field.min_value + cfg["stop"]
    tr = flows.integrate_flow(field, x0, T=cfg["T"], stop=stop, tol=cfg["tol"])
    rows = zip(tr.t, tr.x[:, 0], tr.x[:, 1], tr.f, tr.speed, tr.cumlen)
    write_atomic(os.path.join(cfg["out"], "flow.csv"),
                 csv_text(["t", "x1", "x2", "f", "speed", "cumlen"], rows))
    f0 = float(tr.f[0] - field.min_value)
    lv = [f0 * q for q in (1.0, 0.5, 0.25, 0.125)] if f0 > 0 else []
    write_atomic(os.path.join(cfg["out"], "flow.svg"),
                 svg_text(_level_curves(field, lv), [tr.x], [tr.x[0]]))
    return PASS


def _run_csv(run):
    K = len(run.f)
    rows = zip(range(K), run.Y[:, 0], run.Y[:, 1], run.f, run.step, run.disp, run.cumlen,
               run.cert_margin)
    return csv_text(["k", "y1", "y2", "f", "step", "disp", "cumlen", "cert_margin"], rows)


def _phi_for(field, r0):
    """Closed-form desingulariser if known, else one built from a profile."""
    if field.phi_oracle is not None and field.dphi_oracle is not None:
        return field.phi_oracle, (field.phi_oracle, field.dphi_oracle)
    prof = analysis.build_phi(analysis.slope_profile(field, np.geomspace(r0, r0 * 1e-8, 48), N=512))
    return prof.model, prof


def cmd_prox(args, cfg):
    field = _field(cfg["field"])
    x0 = parse_point(cfg["x0"])
    _check(cfg["lambda"] > 0 and cfg["steps"] >= 1, "need lambda > 0 and steps >= 1")
    r0 = max(float(field.value(x0) - field.min_value), 1e-12)
    phi, _ = _phi_for(field, r0)
    run, rep = algorithms.proximal_run(field, x0, cfg["lambda"], phi, cfg["steps"])
    write_atomic(os.path.join(cfg["out"], "run.csv"), _run_csv(run))
    write_atomic(os.path.join(cfg["out"], "report.json"), json_text(rep.to_dict()))
    write_atomic(os.path.join(cfg["out"], "run.svg"),
                 svg_text(_level_curves(field, [r0, r0 / 4]), [run.Y], [run.Y[0]]))
    return rep.verdict


def cmd_gd(args, cfg):
    field = _field(cfg["field"])
    x0 = parse_point(cfg["x0"])
    _check(cfg["t"] is not None and cfg["t"] > 0, "gd needs --t > 0")
    _check(0 < cfg["beta"] <= 1, "beta must lie in (0, 1]")
    r0 = max(float(field.value(x0) - field.min_value), 1e-12)
    phi, _ = _phi_for(field, r0)
    try:
        run, rep = algorithms.gradient_run(field, x0, t=cfg["t"], beta=cfg["beta"], phi=phi,
                                           K=cfg["steps"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_atomic(os.path.join(cfg["out"], "run.csv"), _run_csv(run))
    write_atomic(os.path.join(cfg["out"], "report.json"), json_text(rep.to_dict()))
    write_atomic(os.path.join(cfg["out"], "run.svg"),
                 svg_text(_level_curves(field, [r0, r0 / 4]), [run.Y], [run.Y[0]]))
    return rep.verdict


def _grid(cfg):
    r0, n = cfg["r0"], cfg["levels"]
    _check(r0 > 0 and n >= 2, "need r0 > 0 and at least two levels")
    rmin = cfg["rmin"] if cfg["rmin"] is not None else r0 * 1e-8
    _check(0 < rmin < r0, "need 0 < rmin < r0")
    return np.geomspace(r0, rmin, n)


def cmd_profile(args, cfg):
    field = _field(cfg["field"])
    r = _grid(cfg)
    prof = analysis.slope_profile(field, r, N=cfg["directions"])
    verdict = PASS
    try:
        prof = analysis.build_phi(prof)
    except DivergentTail as exc:
        prof = exc.profile
        verdict = FAIL
    write_atomic(os.path.join(cfg["out"], "profile.csv"),
                 csv_text(["r", "s", "u", "ubar", "phi"], prof.rows()))
    write_atomic(os.path.join(cfg["out"], "profile.svg"),
                 svg_text(_level_curves(field, r[:: max(1, len(r) // 8)])))
    return verdict


def _report(cfg, name, rep):
    write_atomic(os.path.join(cfg["out"], f"{name}.json"), json_text(rep.to_dict()))
    return rep.verdict


def cmd_check(args, cfg):
    what = args.what
    field = _field(cfg["field"])
    if what == "integrability":
        r = cfg["r0"] * 2.0 ** -np.arange(cfg["levels"])
        prof = analysis.slope_profile(field, r, N=cfg["directions"])
        res = analysis.integrability_test(prof.u, r)
        verdict = PASS if res.verdict == "CONVERGENT" else (FAIL if res.verdict == "DIVERGENT" else "INCONCLUSIVE")
        write_atomic(os.path.join(cfg["out"], "integrability.json"), json_text({
            "name": "integrability", "verdict": verdict, "result": res.verdict,
            "contributions": res.contributions, "ratios": res.ratios}))
        return verdict
    r = _grid(cfg)
    try:
        prof = analysis.build_phi(analysis.slope_profile(field, r, N=cfg["directions"]))
        phi = prof
    except DivergentTail as exc:
        write_atomic(os.path.join(cfg["out"], f"{what}.json"), json_text({
            "name": what, "verdict": FAIL, "reason": "DIVERGENT_TAIL", "message": str(exc),
            "tol": cfg["tol"]}))
        return FAIL
    if what == "kl":
        lo, hi = (float(v) for v in cfg["band"].split(",")) if cfg["band"] else (r[-1], r[0])
        rep = analysis.check_kl(field, phi, band=(lo, hi), n=cfg["samples"], seed=cfg["seed"])
        return _report(cfg, "kl", rep)
    if what == "sublevel":
        pairs = list(zip(r[:-1], r[1:]))
        rep = analysis.check_sublevel_lipschitz(field, phi, pairs, N=cfg["directions"])
        return _report(cfg, "sublevel", rep)
    if what == "errorbound":
        level = cfg["r"] if cfg["r"] is not None else float(r[len(r) // 2])
        rep = analysis.check_error_bound(field, cfg["k"], level, n=cfg["samples"], r0=float(r[0]),
                                         seed=cfg["seed"], phi=phi)
        return _report(cfg, "errorbound", rep)
    if what == "talweg":
        poly, length, rep = analysis.extract_talweg(field, cfg["R"], r, N=cfg["directions"])
        write_atomic(os.path.join(cfg["out"], "talweg.svg"),
                     svg_text(_level_curves(field, r[:: max(1, len(r) // 8)]), [poly]))
        return _report(cfg, "talweg", rep)
    raise UsageError(f"unknown check {what!r}")


def cex_records(bodies, levels):
    lines = [f"kllab-cex {FORMAT_VERSION}", f"limit {fmt(bodies.limit)}",
             f"lam0 {fmt(levels.lam0)}", f"lam1 {fmt(levels.lam1)}", f"lam_inf {fmt(levels.lam_inf)}"]
    for k in range(len(bodies)):
        kind = "disk" if bodies.m[k] == 0 else "polygon-arc"
        n, m = bodies.labels[k] if bodies.labels else (int(bodies.n[k]), int(bodies.m[k]))
        lines.append(f"body {k} {kind} {n} {m} {fmt(bodies.rho[k])}")
    lam = levels.lam
    for k in range(len(bodies)):
        lines.append(f"level {k} {fmt(lam[k])} {fmt(levels.K[k])} {fmt(levels.log_gap[k])}")
    return "\n".join(lines) + "\n"


def parse_cex(text):
    lines = text.splitlines()
    if not lines or lines[0].split() != ["kllab-cex", str(FORMAT_VERSION)]:
        raise UsageError("not a kllab-cex file of a supported version")
    head, bodies, levels = {}, [], []
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "body":
            bodies.append((int(parts[1]), parts[2], int(parts[3]), int(parts[4]), float(parts[5])))
        elif parts[0] == "level":
            levels.append((int(parts[1]), float(parts[2]), float(parts[3]), float(parts[4])))
        else:
            head[parts[0]] = float(parts[1])
    return head, bodies, levels


def cmd_cex(args, cfg):
    action = args.action
    if action == "build":
        nmax = cfg["nmax"]
        _check(4 <= nmax <= 200, "nmax must lie in 4..200")
        bodies, levels = counterexample._cex_parts(nmax, 1.0, 0.5)
        out = cfg["out"]
        if args.file:
            path = args.file
        elif os.path.splitext(out)[1] and not os.path.isdir(out):
            path = out  # "--out file.txt" names the construction file itself
        else:
            path = os.path.join(out, f"cex-{nmax}.txt")
        write_atomic(path, cex_records(bodies, levels))
        return PASS
    if action == "verify":
        _check(args.file is not None, "cex verify needs --file")
        try:
            with open(args.file) as fh:
                head, recs, lv = parse_cex(fh.read())
        except OSError as exc:
            raise UsageError(str(exc)) from None
        nmax = max(r[2] for r in recs)
        bodies, levels = counterexample._cex_parts(nmax, head.get("lam0", 1.0), head.get("lam1", 0.5))
        field = counterexample.cex_field(nmax, head.get("lam0", 1.0), head.get("lam1", 0.5))
        fun = field.cex
        worst = 0.0
        for k, kind, n, m, rho in recs:
            worst = max(worst, abs(rho - bodies.rho[k]) / bodies.rho[k])
        for k, lam, K, lg in lv:
            worst = max(worst, abs(lg - levels.log_gap[k]) / max(1.0, abs(levels.log_gap[k])))
            if math.isfinite(K):
                worst = max(worst, abs(K - levels.K[k]) / K)
        # support points of every body sit on the matching level
        th = np.linspace(0.0, 2 * math.pi, 16, endpoint=False)
        coord_err = 0.0
        for k in range(len(bodies)):
            P = np.array([bodies.support_point(k, t) for t in th])
            c, _ = fun.coord(P)
            coord_err = max(coord_err, float(np.max(np.abs(c - k))))
        ok = worst <= 1e-12 and coord_err <= 1e-8
        rep = {"name": "cex_verify", "verdict": PASS if ok else FAIL,
               "record_rel_err": worst, "level_coord_err": coord_err, "bodies": len(bodies),
               "tol": 1e-12}
        write_atomic(os.path.join(cfg["out"], "cex_verify.json"), json_text(rep))
        return rep["verdict"]
    if action == "witness":
        gens = cfg["gens"]
        _check(4 <= gens <= 200, "gens must lie in 4..200")
        bodies, levels = counterexample._cex_parts(gens, 1.0, 0.5)
        w = counterexample.kl_failure_witness(levels, bodies, bodies.last)
        ps = np.asarray(w["partial_sums"])
        first = w["generations"][0]["gen_sum"]
        increasing = bool(np.all(np.diff(ps) > 0))
        # generation sums above pi^2 r / (2n) certify divergence by comparison
        harmonic_floor = all(g["ratio_asymptotic"] >= 1.0 for g in w["generations"])
        fail = increasing and harmonic_floor
        w.update({"name": "kl_failure_witness", "verdict": FAIL if fail else "INCONCLUSIVE",
                  "strictly_increasing": increasing, "harmonic_lower_bound": harmonic_floor,
                  "first_generation_sum": first, "final_over_first": float(ps[-1] / first),
                  "lam_inf": levels.lam_inf})
        write_atomic(os.path.join(cfg["out"], "witness.json"), json_text(w))
        curves = [np.array([bodies.support_point(k, t) for t in np.linspace(0, 2 * math.pi, 181)])
                  for k in range(0, len(bodies), max(1, len(bodies) // 40))]
        write_atomic(os.path.join(cfg["out"], "witness.svg"), svg_text(curves))
        return w["verdict"]
    raise UsageError(f"unknown cex action {action!r}")


# ------------------------------------------------------------------ parser
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--config", default=None, help="key=value file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--expect-fail", action="store_true",
                        help="exit 0 when a check fails and 1 when all pass")

    p = argparse.ArgumentParser(prog="kllab", description="KL inequality laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    z = sub.add_parser("zoo", parents=[common])
    z.add_argument("action", choices=["list"])

    def field_opts(q):
        q.add_argument("--field", default=None)
        q.add_argument("--x0", default=None)

    f = sub.add_parser("flow", parents=[common])
    field_opts(f)
    f.add_argument("--T", type=float, default=None)
    f.add_argument("--stop", type=float, default=None, help="stop level above min f")
    f.add_argument("--tol", type=float, default=None)

    pr = sub.add_parser("prox", parents=[common])
    field_opts(pr)
    pr.add_argument("--lambda", dest="lam", type=float, default=None)
    pr.add_argument("--steps", type=int, default=None)

    g = sub.add_parser("gd", parents=[common])
    field_opts(g)
    g.add_argument("--t", type=float, default=None)
    g.add_argument("--beta", type=float, default=None)
    g.add_argument("--steps", type=int, default=None)

    def grid_opts(q):
        q.add_argument("--field", default=None)
        q.add_argument("--r0", type=float, default=None)
        q.add_argument("--rmin", type=float, default=None)
        q.add_argument("--levels", type=int, default=None)
        q.add_argument("--directions", type=int, default=None)

    pf = sub.add_parser("profile", parents=[common])
    grid_opts(pf)

    c = sub.add_parser("check", parents=[common])
    c.add_argument("what", choices=["kl", "sublevel", "errorbound", "talweg", "integrability"])
    grid_opts(c)
    c.add_argument("--samples", type=int, default=None)
    c.add_argument("--band", default=None, help="lo,hi value band for kl")
    c.add_argument("--k", type=float, default=None)
    c.add_argument("--r", type=float, default=None)
    c.add_argument("--R", type=float, default=None)

    x = sub.add_parser("cex", parents=[common])
    x.add_argument("action", choices=["build", "verify", "witness"])
    x.add_argument("--nmax", type=int, default=None)
    x.add_argument("--gens", type=int, default=None)
    x.add_argument("--file", default=None, help="construction file to write or read")
    return p


DEFAULTS = {
    "out": ".", "seed": 0, "field": None, "x0": None, "T": None, "stop": None, "tol": 1e-10,
    "lambda": None, "steps": 30, "t": None, "beta": 0.5, "r0": 1.0, "rmin": None, "levels": 64,
    "directions": 2048, "samples": 1000, "band": None, "k": 1.0, "r": None, "R": 2.0,
    "nmax": 12, "gens": 40,
}

COMMANDS = {"zoo": cmd_zoo, "flow": cmd_flow, "prox": cmd_prox, "gd": cmd_gd,
            "profile": cmd_profile, "check": cmd_check, "cex": cmd_cex}


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        cfg = resolve(args, DEFAULTS)
        needs_field = args.command in ("flow", "prox", "gd", "profile", "check")
        _check(not needs_field or cfg["field"], "--field is required")
        _check(args.command not in ("flow", "prox", "gd") or cfg["x0"], "--x0 is required")
        _check(args.command != "prox" or cfg["lambda"] is not None, "--lambda is required")
        _check(cfg["directions"] >= 64, "directions must be at least 64")
        verdict = COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KLError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        verdict = FAIL
    failed = verdict == FAIL
    print(f"verdict: {verdict}")
    if args.expect_fail:
        return 0 if failed else 1
    return 1 if failed else 0


def main(argv=None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
