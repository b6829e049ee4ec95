"""Command-line front end: ``fcsolve {fc, augment, kernel, solve, verify, cokernel}``.

Reports are JSON with sorted keys; tables are CSV.  Exit codes: 0 success,
1 configuration error, 2 FC falsified, 3 FC inconclusive, 4 a verification
check failed.  Every failure writes a report with a ``reason`` field.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_FALSIFIED, EXIT_INCONCLUSIVE, EXIT_CHECK = 0, 1, 2, 3, 4


class ConfigError(Exception):
    """Bad command line or config file; mapped to exit code 1."""


class CommandFailure(Exception):
    def __init__(self, code: int, reason: str, report: dict | None = None):
        super().__init__(reason)
        self.code, self.reason, self.report = code, reason, report or {}


# -- configuration -----------------------------------------------------------

@dataclass
class RunConfig:
    """Everything a run depends on; written into every report."""

    command: str
    op: str | None = None
    op_file: str | None = None
    dim: int = 2
    seed: int = 0
    tol: float | None = None
    threads: int = 1
    out: str | None = None
    weight: dict = field(default_factory=lambda: {"kind": "bogovskii"})
    grid: dict = field(default_factory=dict)
    quadrature: dict = field(default_factory=dict)
    bumps: list = field(default_factory=list)
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def _load_toml(path: str) -> dict:
    import tomli

    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def build_config(args: argparse.Namespace) -> RunConfig:
    data = _load_toml(args.config) if getattr(args, "config", None) else {}
    known = {"op", "op_file", "dim", "seed", "tol", "threads", "weight", "grid", "quadrature", "bump", "options"}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    cfg = RunConfig(args.command)
    for key in ("op", "op_file", "dim", "seed", "tol", "threads"):
        if key in data:
            setattr(cfg, key, data[key])
    cfg.weight.update(data.get("weight", {}))
    cfg.grid.update(data.get("grid", {}))
    cfg.quadrature.update(data.get("quadrature", {}))
    cfg.options.update(data.get("options", {}))
    cfg.bumps = list(data.get("bump", []))
    # command-line flags override the file
    for key in ("op", "op_file", "dim", "seed", "tol", "threads", "out"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    for key in ("weight_kind", "center", "radius", "axis", "aperture", "power"):
        v = getattr(args, key, None)
        if v is not None:
            cfg.weight[{"weight_kind": "kind", "power": "p"}.get(key, key)] = v
    if not isinstance(cfg.dim, int) or cfg.dim < 1:
        raise ConfigError(f"dim must be a positive integer (got {cfg.dim!r})")
    return cfg


def _floats(text, name: str) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from exc


def make_operator(cfg: RunConfig):
    from .diffop import OperatorParseError, ThresholdError, builtin, parse_operator

    if cfg.op_file:
        try:
            P = parse_operator(Path(cfg.op_file).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"operator file not found: {cfg.op_file}") from exc
        except OperatorParseError as exc:
            raise ConfigError(f"{cfg.op_file}: {exc}") from exc
        if P.d != cfg.dim:
            raise ConfigError(f"operator file has dim {P.d}, run requested d = {cfg.dim}")
        return P
    if not cfg.op:
        raise ConfigError("an operator is required (--op NAME or --op-file PATH)")
    try:
        return builtin(cfg.op, cfg.dim)
    except ThresholdError as exc:
        raise ConfigError(str(exc)) from exc
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from exc


def make_weight(cfg: RunConfig):
    from .averaging import BogovskiiWeight, ConicWeight

    w, d = cfg.weight, cfg.dim
    kind = w.get("kind", "bogovskii")
    p = int(w.get("p", 8))
    if kind == "bogovskii":
        c = _floats(w.get("center", [0.0] * d), "center")
        if len(c) != d:
            raise ConfigError(f"weight center needs {d} coordinates")
        R = float(w.get("radius", 1.0))
        if R <= 0:
            raise ConfigError("weight radius must be positive")
        return BogovskiiWeight(tuple(c), R, p)
    if kind == "conic":
        axis = _floats(w.get("axis", [1.0] + [0.0] * (d - 1)), "axis")
        if len(axis) != d or not any(axis):
            raise ConfigError(f"conic axis needs {d} coordinates, not all zero")
        ap = w.get("aperture", 0.8)
        ap = None if ap in (None, "none", "uniform") else float(ap)
        if ap is not None and not 0 < ap <= math.pi:
            raise ConfigError("aperture must lie in (0, pi]")
        return ConicWeight(tuple(axis), ap, p)
    raise ConfigError(f"unknown weight kind {kind!r} (bogovskii or conic)")


def make_quadrature(cfg: RunConfig):
    from .solve_verify import QuadratureSpec

    q = cfg.quadrature
    try:
        spec = QuadratureSpec(int(q.get("n_radial", 24)), int(q.get("n_angular", 32)), int(q.get("levels", 3)),
                              float(q.get("tol", 1e-10)), int(q.get("n_ball", 24)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"quadrature: {exc}") from exc
    if spec.levels > 12:
        raise ConfigError("quadrature levels are capped at 12")
    return spec


def make_grid(cfg: RunConfig, default_n: int) -> np.ndarray:
    g = cfg.grid
    d = cfg.dim
    lo = _floats(g.get("lo", [-3.0] * d), "grid.lo")
    hi = _floats(g.get("hi", [3.0] * d), "grid.hi")
    n = int(g.get("n", default_n))
    if len(lo) != d or len(hi) != d or n < 1:
        raise ConfigError("grid needs lo/hi with d entries and n >= 1")
    axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


def make_bumps(cfg: RunConfig, ncomp: int):
    from .solve_verify import BumpField

    terms = []
    for n, b in enumerate(cfg.bumps):
        try:
            c = _floats(b["center"], "bump.center")
            R = float(b["radius"])
            amp = _floats(b.get("amplitude", [1.0] * ncomp), "bump.amplitude")
            p = int(b.get("p", 8))
        except KeyError as exc:
            raise ConfigError(f"bump {n + 1}: missing key {exc.args[0]!r}") from exc
        if len(c) != cfg.dim or len(amp) != ncomp or R <= 0:
            raise ConfigError(f"bump {n + 1}: need {cfg.dim} center coordinates, {ncomp} amplitudes, radius > 0")
        terms.append((c, R, amp, p))
    if not terms:
        return BumpField(cfg.dim, ncomp, ())
    fields = [BumpField.constant_bumps(cfg.dim, [(c, R, amp)], p) for c, R, amp, p in terms]
    out = fields[0]
    for f in fields[1:]:
        out = out + f
    return out


def parse_lower_order(text: str, d: int, n: int):
    """``"B=(e_1, ..., e_d)"``: one sympy expression in ``x1..xd`` per direction (n = 1),
    or one n x n nested list per direction."""
    import sympy as sp

    lhs, sep, rhs = text.partition("=")
    if not sep or lhs.strip() != "B":
        raise ConfigError(f"lower-order spec must look like 'B=(...)', got {text!r}")
    xs = sp.symbols(f"x1:{d + 1}", real=True)
    try:
        expr = sp.sympify(rhs.strip(), locals={f"x{i + 1}": xs[i] for i in range(d)})
    except (sp.SympifyError, SyntaxError, TypeError) as exc:
        raise ConfigError(f"cannot parse lower-order expression: {exc}") from exc
    entries = list(expr) if isinstance(expr, (tuple, list, sp.Tuple)) else [expr]
    if len(entries) != d:
        raise ConfigError(f"lower-order B needs {d} entries (one per direction), got {len(entries)}")
    mats = []
    for e in entries:
        M = sp.Matrix(e) if isinstance(e, (list, tuple, sp.Tuple)) else sp.Matrix([[e]])
        if M.shape != (n, n):
            raise ConfigError(f"each B_i must be {n} x {n}")
        free = M.free_symbols - set(xs)
        if free:
            raise ConfigError(f"unknown symbols in lower-order term: {sorted(map(str, free))}")
        mats.append(M)
    fns = [sp.lambdify([xs], M, "numpy") for M in mats]

    def B(x):
        return np.array([np.asarray(f(x), dtype=float) for f in fns])

    return B


# -- output ------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def dump_json(report: dict) -> str:
    return json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n"


def _write(path: str | None, text: str, stream=None) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        (stream or sys.stdout).write(text)


def _sidecar(path: str | None, suffix: str) -> str | None:
    return None if path is None else str(Path(path).with_suffix(suffix))


def _csv_text(header: list[str], rows, comments: list[str] = ()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _parallel_rows(fn, X: np.ndarray, threads: int) -> np.ndarray:
    """``fn`` on contiguous blocks of rows; results reassembled in order."""
    if threads <= 1 or len(X) < 2 * threads:
        return fn(X)
    blocks = np.array_split(np.arange(len(X)), threads)
    with ThreadPoolExecutor(threads) as ex:
        parts = list(ex.map(lambda idx: fn(X[idx]), blocks))
    return np.concatenate(parts)


# -- commands ----------------------------------------------------------------

def cmd_fc(cfg: RunConfig) -> tuple[int, dict]:
    from .diffop import adjoint_symbol
    from .fc_cert import Certified, Falsified, decide_fc

    P = make_operator(cfg)
    rng = np.random.default_rng(cfg.seed)
    N0_max = cfg.options.get("n0_max")
    verdict = decide_fc(adjoint_symbol(P), N0_max, int(cfg.options.get("trials", 500)), rng)
    rep = {"operator": P.name, "d": P.d, "r0": P.r0, "s0": P.s0, "m": list(P.m), "verdict": verdict.label}
    if isinstance(verdict, Certified):
        rep["N0"] = verdict.certificate.N0
        rep["certificate"] = verdict.certificate.dumps()
        return EXIT_OK, rep
    if isinstance(verdict, Falsified):
        rep.update(witness_xi=list(verdict.xi), witness_phi=list(verdict.phi), residual=verdict.residual,
                   exact=verdict.exact)
        return EXIT_FALSIFIED, rep
    rep.update(N0_max=verdict.N0_max, min_singular=verdict.min_singular)
    return EXIT_INCONCLUSIVE, rep


def _system(cfg: RunConfig, special: bool):
    """Augmented system from a zoo name (hand-built) or from a certificate (maximal)."""
    from .augmented import maximal_from_certificate, special_system, with_callable_B
    from .diffop import adjoint_symbol
    from .fc_cert import Certified, Falsified, decide_fc

    P = make_operator(cfg)
    if special:
        if cfg.op_file:
            raise ConfigError("special systems exist only for named zoo operators; use --maximal")
        sys_ = special_system(cfg.op, cfg.dim)
    else:
        verdict = decide_fc(adjoint_symbol(P), cfg.options.get("n0_max"), int(cfg.options.get("trials", 500)),
                            np.random.default_rng(cfg.seed))
        if isinstance(verdict, Falsified):
            raise CommandFailure(EXIT_FALSIFIED, "FC falsified; no augmented system exists",
                                 {"witness_xi": list(verdict.xi)})
        if not isinstance(verdict, Certified):
            raise CommandFailure(EXIT_INCONCLUSIVE, "FC inconclusive; refusing to build a maximal system",
                                 {"N0_max": verdict.N0_max})
        sys_ = maximal_from_certificate(P, verdict.certificate)
    lower = cfg.options.get("lower_order")
    if lower:
        pert = parse_lower_order(lower, cfg.dim, sys_.n)
        base = sys_.B_numeric()
        sys_ = with_callable_B(sys_, lambda x: base + pert(x))
    return P, sys_


def cmd_augment(cfg: RunConfig) -> tuple[int, dict]:
    from .augmented import cokernel_basis, is_completely_integrable

    P, sys_ = _system(cfg, not cfg.options.get("maximal", False))
    rng = np.random.default_rng(cfg.seed)
    pts = rng.uniform(-1, 1, (8, cfg.dim))
    ok, curv = is_completely_integrable(sys_, pts, cfg.tol or 1e-8)
    rep = {"operator": P.name, "kind": sys_.kind, "n_variables": sys_.n, "N0": sys_.N0,
           "variables": list(sys_.names), "degrees": list(sys_.degree), "curvature_max": curv,
           "completely_integrable": ok, "system": sys_.dumps() if sys_.constant else None,
           "lower_order": cfg.options.get("lower_order")}
    if not cfg.op_file:
        try:
            rep["cokernel_dim"] = cokernel_basis(cfg.op, cfg.dim).dim
        except Exception:  # no known basis for this operator
            rep["cokernel_dim"] = None
    return EXIT_OK, rep


def _kernel(cfg: RunConfig, weight, backing: str):
    from .averaging import closed_form_kernel, ode_kernel_average

    if backing == "closed_form":
        if cfg.op_file:
            raise ConfigError("closed forms exist only for named zoo operators")
        return closed_form_kernel(cfg.op, weight, cfg.dim)
    if backing != "ode":
        raise ConfigError(f"unknown kernel backing {backing!r} (ode or closed_form)")
    if cfg.op_file:
        _, sys_ = _system(cfg, False)
        return ode_kernel_average(sys_, weight)
    return ode_kernel_average(cfg.op, weight, cfg.dim)


def cmd_kernel(cfg: RunConfig) -> tuple[int, dict, str]:
    make_operator(cfg)
    weight = make_weight(cfg)
    backing = cfg.options.get("backing", "ode")
    K = _kernel(cfg, weight, backing)
    d = cfg.dim
    y = np.asarray(_floats(cfg.options.get("y", [0.0] * d), "y"))
    if len(y) != d:
        raise ConfigError(f"y needs {d} coordinates")
    X = make_grid(cfg, 21 if d == 2 else 9)
    vals, near = K.evaluate(X, y)
    oracle = None
    if cfg.options.get("oracle"):
        other = "closed_form" if backing == "ode" else "ode"
        oracle = _kernel(cfg, weight, other)
        ovals, _ = oracle.evaluate(X, y)
    header = [f"x{i + 1}" for i in range(d)] + [f"y{i + 1}" for i in range(d)]
    header += [f"K_{k + 1}_{j + 1}" for k in range(K.s0) for j in range(K.r0)]
    if oracle is not None:
        header += [f"oracle_K_{k + 1}_{j + 1}" for k in range(K.s0) for j in range(K.r0)] + ["abs_diff"]
    rows = []
    maxdiff = 0.0
    for n in np.flatnonzero(~near):
        row = list(X[n]) + list(y) + list(vals[n].ravel())
        if oracle is not None:
            diff = float(np.max(np.abs(vals[n] - ovals[n])))
            maxdiff = max(maxdiff, diff)
            row += list(ovals[n].ravel()) + [diff]
        rows.append(row)
    comments = [f"fcsolve {__version__} kernel {K.name} d={d} weight={weight.kind} backing={backing}",
                "rows: samples x with the kernel K(x, y); K_k_j is output component k, data component j"]
    rep = {"operator": K.name, "backing": backing, "weight": weight.kind, "n_samples": len(X),
           "n_near_diagonal_skipped": int(near.sum())}
    code = EXIT_OK
    if oracle is not None:
        scale = float(np.max(np.abs(ovals))) if ovals.size else 0.0
        rep.update(oracle=oracle.backing, max_abs_discrepancy=maxdiff, max_abs_oracle=scale)
        tol = cfg.tol if cfg.tol is not None else 1e-8
        rep["oracle_pass"] = maxdiff <= tol * max(1.0, scale)
        code = EXIT_OK if rep["oracle_pass"] else EXIT_CHECK
    if cfg.options.get("decay", True):
        from .averaging import decay_slopes
        theta = cfg.options.get("decay_direction")
        slopes = decay_slopes(K, y, None if theta is None else np.asarray(_floats(theta, "decay_direction")))
        expect = K.singular_exponent()
        rep["decay"] = [{"row": k + 1, "slope": float(s), "expected": e, "pass": bool(abs(s - e) <= 0.05)}
                        for k, (s, e) in enumerate(zip(slopes, expect))]
    return code, rep, _csv_text(header, rows, comments)


def _green_checks(cfg, P, sys_, kernel, weight, quad, rng, n_points: int = 3) -> dict:
    from .diffop import TestFunction, adjoint, apply
    from .solve_verify import convergence_ok, greens_convergence

    d = cfg.dim
    c = np.zeros(d) if weight.kind == "conic" else np.asarray(weight.center, float)
    out = []
    for _ in range(n_points):
        mu = c + rng.uniform(-0.3, 0.3, d)
        terms = [(J, list(mu + rng.uniform(-0.1, 0.1, d)), 0.35, {(0,) * d: float(rng.uniform(0.5, 1.5))})
                 for J in range(P.r0)]
        phi = TestFunction.gaussian(d, P.r0, terms)
        psi = apply(adjoint(P), phi)
        y = mu + rng.uniform(-0.2, 0.2, d)
        res = greens_convergence(kernel, sys_, phi, psi, y, quad)
        out.append({"y": list(y), "residuals": res})
    tol = cfg.tol if cfg.tol is not None else (1e-6 if d == 2 else 1e-5)
    worst = max(r["residuals"][-1] for r in out)
    conv = all(convergence_ok(r["residuals"], floor=tol / 10) for r in out)
    return {"samples": out, "final_max": worst, "tolerance": tol, "convergence_ok": conv,
            "pass": bool(worst <= tol and conv)}


def cmd_verify(cfg: RunConfig) -> tuple[int, dict]:
    from .augmented import special_system
    from .solve_verify import QuadratureSpec

    P = make_operator(cfg)
    if cfg.op_file:
        raise ConfigError("verify runs on named zoo operators")
    weight = make_weight(cfg)
    sys_ = special_system(cfg.op, cfg.dim)
    kernel = _kernel(cfg, weight, cfg.options.get("backing", "closed_form"))
    q = cfg.quadrature
    quad = QuadratureSpec(int(q.get("n_radial", 6)), int(q.get("n_angular", 6)), int(q.get("levels", 3)))
    rng = np.random.default_rng(cfg.seed)
    rep = {"operator": P.name, "weight": weight.kind, "backing": kernel.backing,
           "greens_identity": _green_checks(cfg, P, sys_, kernel, weight, quad, rng)}
    return (EXIT_OK if rep["greens_identity"]["pass"] else EXIT_CHECK), rep


def cmd_cokernel(cfg: RunConfig) -> tuple[int, dict]:
    from .augmented import annihilates, cokernel_basis, is_completely_integrable, special_system

    P = make_operator(cfg)
    if cfg.op_file:
        raise ConfigError("cokernel bases are tabulated for named zoo operators")
    basis = cokernel_basis(cfg.op, cfg.dim)
    sys_ = special_system(cfg.op, cfg.dim)
    ok, _ = is_completely_integrable(sys_)
    ann = [annihilates(P, Z) for Z in basis.elements]
    G = basis.gram(1.0, 16)
    rep = {"operator": P.name, "d": cfg.dim, "dim": basis.dim, "labels": basis.labels, "annihilated": ann,
           "n_variables": sys_.n, "completely_integrable": ok, "dim_equals_n_variables": basis.dim == sys_.n,
           "gram_condition_unit_ball": float(np.linalg.cond(G))}
    good = all(ann) and (not ok or basis.dim == sys_.n)
    return (EXIT_OK if good else EXIT_CHECK), rep


def cmd_solve(cfg: RunConfig) -> tuple[int, dict, str]:
    from .augmented import cokernel_basis, is_completely_integrable, special_system
    from .averaging import b_eta_closed_form
    from .solve_verify import (cone_predicate, moments, project_out_cokernel, residual_matches_beta,
                               star_hull_predicate, verify_support)

    P = make_operator(cfg)
    if cfg.op_file:
        raise ConfigError("solve runs on named zoo operators")
    weight = make_weight(cfg)
    quad = make_quadrature(cfg)
    f = make_bumps(cfg, P.r0)
    kernel = _kernel(cfg, weight, cfg.options.get("backing", "closed_form"))
    sys_ = special_system(cfg.op, cfg.dim)
    rep: dict = {"operator": P.name, "weight": weight.kind, "backing": kernel.backing,
                 "n_bumps": len(f.bumps)}
    tol = cfg.tol if cfg.tol is not None else 1e-4
    checks = []
    basis = cokernel_basis(cfg.op, cfg.dim)
    integrable, _ = is_completely_integrable(sys_)
    if cfg.options.get("project_cokernel") and not f.is_zero():
        if weight.kind != "bogovskii":
            raise ConfigError("cokernel projection applies to Bogovskii weights; conic solutions have no obstruction")
        proj = cfg.options.get("projection", {})
        centers = np.array([b.center for b in f.bumps])
        pc = _floats(proj.get("center", centers.mean(axis=0)), "projection.center")
        pr = float(proj.get("radius", max(b.radius for b in f.bumps)))
        f = project_out_cokernel(f, basis, pc, pr)
        rep["projection"] = {"center": pc, "radius": pr}
    if not f.is_zero():
        mom = moments(basis, f)
        rep["moments"] = {"labels": basis.labels, "values": mom, "max_abs": float(np.max(np.abs(mom)))}
        if cfg.options.get("project_cokernel"):
            checks.append(("moments", rep["moments"]["max_abs"] <= 1e-11))
    # solution on the output grid
    X = make_grid(cfg, 31 if cfg.dim == 2 else 11)
    from .solve_verify import apply_operator_S

    U = _parallel_rows(lambda Xb: apply_operator_S(kernel, f, Xb, quad), X, cfg.threads)
    header = [f"x{i + 1}" for i in range(cfg.dim)] + list(P.in_labels)
    table = _csv_text(header, [list(x) + list(u) for x, u in zip(X, U)],
                      [f"fcsolve {__version__} solve {P.name} d={cfg.dim} weight={weight.kind}"])
    rep["u_max"] = float(np.max(np.abs(U))) if U.size else 0.0
    if f.is_zero():
        rep["zero_data"] = True
        checks.append(("zero_solution", rep["u_max"] == 0.0))
    else:
        rng = np.random.default_rng(cfg.seed)
        # support
        if weight.kind == "conic":
            pred = cone_predicate(f.balls(), weight, margin=0.05)
        else:
            pred = star_hull_predicate(f.balls(), weight)
        far = X[~pred(X)]
        sup = verify_support(lambda x: apply_operator_S(kernel, f, x, quad), pred, far[:200], 1e-10)
        rep["support"] = sup.to_dict()
        checks.append(("support", sup.passed))
        # residual law on a check grid
        n_check = int(cfg.options.get("check_n", 8))
        lo = np.min([b.ball()[0] - b.ball()[1] for b in f.bumps], axis=0)
        hi = np.max([b.ball()[0] + b.ball()[1] for b in f.bumps], axis=0)
        axes = [np.linspace(a, b, n_check) for a, b in zip(lo, hi)]
        G = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, cfg.dim)
        if weight.kind == "bogovskii" and integrable:
            b = b_eta_closed_form(cfg.op, weight, cfg.dim)
            res = residual_matches_beta(P, kernel, b, f, G, tol, quad=quad)
        else:
            from .solve_verify import SolutionField, VerificationReport, apply_P_fd
            u = SolutionField(kernel, f, quad)
            diff = np.abs(apply_P_fd(P, u, G, 0.02, 2) - f(G).T)
            mx = float(diff.max())
            res = VerificationReport("P(Sf) = f", mx, float(np.sqrt(np.mean(diff ** 2))), tol, mx <= tol,
                                     "finite-difference P applied to the quadrature solution",
                                     {"n_points": len(G)})
        rep["residual"] = res.to_dict()
        checks.append(("residual", res.passed))
        if cfg.options.get("greens", True):
            from .solve_verify import QuadratureSpec
            gq = QuadratureSpec(6, 6, 3)
            rep["greens_identity"] = _green_checks(cfg, P, sys_, kernel, weight, gq, rng, n_points=2)
            checks.append(("greens_identity", rep["greens_identity"]["pass"]))
    rep["checks"] = {k: bool(v) for k, v in checks}
    rep["pass"] = all(v for _, v in checks)
    return (EXIT_OK if rep["pass"] else EXIT_CHECK), rep, table


# -- argument parsing --------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--op", help="zoo operator name (e.g. divergence, killing)")
    p.add_argument("--op-file", dest="op_file", help="operator description file")
    p.add_argument("--dim", type=int, help="spatial dimension d")
    p.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    p.add_argument("--tol", type=float, default=None, help="pass/fail tolerance override")
    p.add_argument("--threads", type=int, default=None, help="worker threads for grid evaluation")
    p.add_argument("--out", default=None, help="output path (report or table); stdout if omitted")


def _weight_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--weight", dest="weight_kind", choices=["bogovskii", "conic"])
    p.add_argument("--center", help="Bogovskii weight center, comma separated")
    p.add_argument("--radius", type=float, help="Bogovskii weight radius")
    p.add_argument("--axis", help="conic axis, comma separated")
    p.add_argument("--aperture", help="conic half-angle in radians, or 'uniform'")
    p.add_argument("--power", type=int, help="bump exponent p")
    p.add_argument("--backing", choices=["ode", "closed_form"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fcsolve", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fcsolve {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fc", help="decide condition (FC) by certificate search")
    _common(p)
    p.add_argument("--n0-max", dest="n0_max", type=int)
    p.add_argument("--trials", type=int)

    p = sub.add_parser("augment", help="build an augmented system and test integrability")
    _common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--special", metavar="NAME", help="hand-built system of a zoo operator")
    g.add_argument("--maximal", action="store_true", help="maximal system from the certificate")
    p.add_argument("--lower-order", dest="lower_order", help="connection perturbation, e.g. 'B=(0,x1)'")
    p.add_argument("--n0-max", dest="n0_max", type=int)

    p = sub.add_parser("kernel", help="tabulate an averaged kernel")
    _common(p)
    _weight_flags(p)
    p.add_argument("--y", help="source point y, comma separated")
    p.add_argument("--grid", help="lo,hi,n sampling box for x")
    p.add_argument("--oracle", action="store_true", help="add the other backing as oracle columns")

    p = sub.add_parser("solve", help="solve P u = f for bump data")
    _common(p)
    _weight_flags(p)
    p.add_argument("--grid", help="lo,hi,n output grid")
    p.add_argument("--project-cokernel", dest="project_cokernel", action="store_true")

    p = sub.add_parser("verify", help="weak-form Green identity with convergence study")
    _common(p)
    _weight_flags(p)

    p = sub.add_parser("cokernel", help="cokernel basis and structural checks")
    _common(p)
    return ap


def _apply_command_flags(cfg: RunConfig, args: argparse.Namespace) -> None:
    if getattr(args, "special", None):
        cfg.op = args.special
    if getattr(args, "maximal", False):
        cfg.options["maximal"] = True
    for key in ("n0_max", "trials", "lower_order", "oracle", "project_cokernel", "backing"):
        v = getattr(args, key, None)
        if v not in (None, False):
            cfg.options[key] = v
    if getattr(args, "y", None):
        cfg.options["y"] = _floats(args.y, "y")
    if getattr(args, "grid", None):
        vals = _floats(args.grid, "grid")
        if len(vals) != 3:
            raise ConfigError("--grid expects lo,hi,n")
        cfg.grid.update(lo=[vals[0]] * cfg.dim, hi=[vals[1]] * cfg.dim, n=int(vals[2]))


STATUS = {EXIT_OK: "ok", EXIT_FALSIFIED: "falsified", EXIT_INCONCLUSIVE: "inconclusive", EXIT_CHECK: "check_failed"}

COMMANDS = {"fc": cmd_fc, "augment": cmd_augment, "kernel": cmd_kernel, "solve": cmd_solve,
            "verify": cmd_verify, "cokernel": cmd_cokernel}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = getattr(args, "out", None)
    cfg = None
    try:
        cfg = build_config(args)
        _apply_command_flags(cfg, args)
        result = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        report = {"command": args.command, "status": "error", "exit_code": EXIT_CONFIG, "reason": str(exc)}
        _write(out, dump_json(report))
        print(f"fcsolve: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandFailure as exc:
        report = {"command": args.command, "status": "error", "exit_code": exc.code, "reason": exc.reason,
                  **exc.report, "config": cfg.to_dict() if cfg else None}
        _write(out, dump_json(report))
        return exc.code
    code, report, *table = result
    report = {"command": args.command, "status": STATUS[code], "exit_code": code,
              "config": cfg.to_dict(), "version": __version__, **report}
    if code == EXIT_CHECK:
        report["reason"] = "one or more verification checks exceeded tolerance"
    elif code in (EXIT_FALSIFIED, EXIT_INCONCLUSIVE):
        report["reason"] = report["verdict"]
    if table:
        _write(out, table[0])
        _write(_sidecar(out, ".json"), dump_json(report), sys.stderr if out is None else None)
    else:
        _write(out, dump_json(report))
    return code


if __name__ == "__main__":
    raise SystemExit(main())
