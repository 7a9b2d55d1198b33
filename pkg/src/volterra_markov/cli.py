"""Command-line front end.

Every subcommand reads a JSON config (``--config PATH``, or stdin when the
path is ``-`` or omitted and stdin is not a terminal), writes its outputs to
``--out DIR`` together with ``config.resolved.json`` and returns

* 0 on success,
* 2 for an invalid configuration,
* 3 for a numerical failure,
* 4 when an ``expect`` block in the config is not met.

Errors are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvalidParams, NumericalError, VolterraError
from .gram import BalanceParams, balance_check, nondegeneracy_scan
from .kernels import KernelSpec, MatrixKernelSpec, bernstein_quadrature, l2_increment_scan
from .lift import covariance_rank, lift_state
from .markovtest import conditional_mean_check, sigma_measurability_test
from .perturb import C_alpha, PerturbationKind, PerturbationSpec, apply_perturbation, marchaud_values
from .resolvents import TimeGrid, kz_kernel, pi_z, resolvent_EK, resolvent_first_kind
from .sim import ModelSpec, gaussian_fractional, rough_heston, simulate_with_perturbation, volterra_cir

SUBCOMMANDS = ("kernel-info", "gram-scan", "resolvent", "perturb", "simulate", "lift", "markov-test", "preset")
PRESETS = ("volterra-cir", "rough-heston", "gaussian-fractional", "exponential-control")


class ConfigError(InvalidParams):
    """Invalid configuration with a JSON pointer to the offending field."""

    def __init__(self, message, pointer=""):
        super().__init__(message)
        self.pointer = pointer


class GateFailure(VolterraError):
    """An ``expect`` check in the config failed."""


# ----------------------------------------------------------------------
# serialization


def _num(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def dumps(obj, indent=2, _level=0):
    """JSON with 17 significant digits for every float."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in seq) + "\n" + end + "]"
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if hasattr(obj, "value") and isinstance(obj.value, str):
        return json.dumps(obj.value)
    return _num(obj)


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj) + "\n")


def write_csv(path, header, rows):
    """Comma-separated, header row, LF endings; empty cells for missing values."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join("" if v is None else _num(v) for v in r) + "\n")


def _columns(cols):
    """Rows from ragged columns, padding with ``None``."""
    n = max(len(c) for c in cols)
    return [[c[i] if i < len(c) else None for c in cols] for i in range(n)]


# ----------------------------------------------------------------------
# config helpers


def _get(cfg, key, ptr, default=...):
    if key not in cfg:
        if default is ...:
            raise ConfigError(f"missing field {key!r}", f"{ptr}/{key}")
        return default
    return cfg[key]


def _wrap(fn, ptr, d=None):
    """Call ``fn`` and attach ``ptr`` (refined to a named field when possible) to InvalidParams."""
    try:
        return fn()
    except ConfigError:
        raise
    except InvalidParams as exc:
        field = ""
        if isinstance(d, dict):
            for k in d:
                if k in str(exc):
                    field = f"/{k}"
                    break
        raise ConfigError(str(exc), ptr + field) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed section: {exc}", ptr) from exc


def _kernel(d, ptr):
    if not isinstance(d, dict):
        raise ConfigError("kernel must be an object", ptr)
    return _wrap(lambda: KernelSpec.from_dict(d), ptr, d)


def _grid(cfg, ptr="/grid"):
    g = _get(cfg, "grid", "")
    dt, hz = _get(g, "dt", ptr), _get(g, "horizon", ptr)
    if not isinstance(dt, (int, float)) or not isinstance(hz, (int, float)) or dt <= 0 or hz <= 0:
        raise ConfigError("dt and horizon must be positive numbers", ptr)
    return _wrap(lambda: TimeGrid.from_horizon(float(hz), float(dt)), ptr)


def _model(cfg, ptr="/model"):
    m = _get(cfg, "model", "")
    if isinstance(m, dict) and "preset" in m:
        params = dict(m.get("params", {}))
        name = m["preset"]
        if "kernel" in params:
            params["kernel"] = _kernel(params["kernel"], f"{ptr}/params/kernel")
        builders = {"volterra-cir": volterra_cir, "rough-heston": rough_heston,
                    "gaussian-fractional": gaussian_fractional}
        if name not in builders:
            raise ConfigError(f"unknown preset {name!r}", f"{ptr}/preset")
        return _wrap(lambda: builders[name](**params), f"{ptr}/params", params)
    for key in ("kernel_b", "kernel_sigma"):
        for i, row in enumerate(_get(m, key, ptr)["rows"]):
            for j, (_, kd) in enumerate(row):
                _kernel(kd, f"{ptr}/{key}/rows/{i}/{j}/1")
    return _wrap(lambda: ModelSpec.from_dict(m), ptr, m)


def _perturbations(cfg, model, grid, ptr="/perturbations"):
    out, coords, specs = [], [], []
    for i, p in enumerate(cfg.get("perturbations", [])):
        spec = _wrap(lambda p=p: PerturbationSpec.from_dict(p), f"{ptr}/{i}", p)
        c = spec.coordinate
        if not 0 <= c < model.d:
            raise ConfigError("coordinate out of range", f"{ptr}/{i}/coordinate")
        base = model.kernel_sigma.entry(c, c)
        out.append(apply_perturbation(base, spec, grid))
        coords.append(c)
        specs.append(spec)
    return out, coords, specs


def _mc(cfg, ptr="/mc"):
    mc = _get(cfg, "mc", "")
    paths = _get(mc, "paths", ptr)
    if not isinstance(paths, int) or paths < 1:
        raise ConfigError("paths must be a positive integer", f"{ptr}/paths")
    seed = _get(mc, "seed", ptr)
    if not isinstance(seed, int) or seed < 0 or seed >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer", f"{ptr}/seed")
    mode = mc.get("weight_mode", "cell-average")
    if mode not in ("cell-average", "variance-exact"):
        raise ConfigError("unknown weight mode", f"{ptr}/weight_mode")
    return paths, seed, mode, bool(mc.get("retain_history", False))


def _expect(cfg, key, value):
    """Gate: ``expect[key]`` is either a value or a ``[lo, hi]`` range."""
    exp = cfg.get("expect", {})
    if key not in exp:
        return
    want = exp[key]
    if isinstance(want, list) and len(want) == 2 and all(isinstance(v, (int, float)) for v in want):
        ok = want[0] <= value <= want[1]
    else:
        ok = value == want
    if not ok:
        raise GateFailure(f"expected {key} {want!r}, got {value!r}")


# ----------------------------------------------------------------------
# subcommands


def cmd_kernel_info(cfg, out, fmt, workers):
    k = _kernel(_get(cfg, "kernel", ""), "/kernel")
    info = {
        "kernel": k.to_dict(),
        "singular": k.is_singular,
        "index": k.index,
        "growth_bound": k.growth_bound,
        "limit_at_infinity": k.limit_at_infinity(),
        "value_at_zero": None if k.is_singular else k.value_at_zero(),
    }
    T = float(cfg.get("horizon", 1.0))
    scan = l2_increment_scan(k, T)
    info["gamma_K"] = scan.gamma_K
    info["gamma_K_r2"] = scan.fit_r2
    if cfg.get("bernstein_nodes"):
        approx = bernstein_quadrature(k, int(cfg["bernstein_nodes"]), T)
        info["bernstein_max_rel_error"] = approx.max_rel_error
        info["bernstein_kernel"] = approx.kernel.to_dict()
    t = np.geomspace(1e-4 * T, T, int(cfg.get("points", 64)))
    if fmt in ("json", "both"):
        write_json(out / "kernel.json", info)
    if fmt in ("csv", "both"):
        write_csv(out / "kernel.csv", ["t", "value", "cumulative"], zip(t, k(t), k.cumulative(t)))
    _expect(cfg, "gamma_K", info["gamma_K"])
    return info


def cmd_gram_scan(cfg, out, fmt, workers):
    kd = _get(cfg, "kernels", "")
    if isinstance(kd, dict):
        mk = _wrap(lambda: MatrixKernelSpec.from_dict(kd), "/kernels")
    else:
        mk = MatrixKernelSpec.column([_kernel(d, f"/kernels/{i}") for i, d in enumerate(kd)])
    h = None
    if "h" in cfg:
        hs = cfg["h"]
        h = np.geomspace(float(hs["min"]), float(hs["max"]), int(hs.get("n", 25)))
    rep = nondegeneracy_scan(mk, h) if h is not None else nondegeneracy_scan(mk)
    res = rep.to_dict()
    verdicts = {}
    if "balance" in cfg:
        b = dict(cfg["balance"])
        b.setdefault("gamma_star", rep.fitted_gamma_star)
        verdicts = _wrap(lambda: balance_check(BalanceParams.from_dict(b)), "/balance", b).to_dict()
    res["verdicts"] = verdicts
    if fmt in ("csv", "both"):
        write_csv(out / "gram.csv", ["h", "lambda_min", "corrected"], zip(rep.h_values, rep.lambda_min, rep.corrected))
    if fmt in ("json", "both"):
        write_json(out / "gram.json", res)
    _expect(cfg, "gamma_star", rep.fitted_gamma_star)
    if verdicts:
        _expect(cfg, "balance", verdicts["verdict"])
    return res


def cmd_resolvent(cfg, out, fmt, workers):
    k = _kernel(_get(cfg, "kernel", ""), "/kernel")
    grid = _grid(cfg)
    beta = float(cfg.get("beta", 0.0))
    tab = resolvent_first_kind(k, grid)
    tab = resolvent_EK(k, beta, grid, tables=tab)
    rep = {"residual": tab.residual, "residual_all": tab.residual_all, "atom": tab.atom, "beta": beta,
           "dt": grid.dt, "horizon": grid.horizon}
    mids = (np.arange(1, grid.n_steps + 1) - 0.5) * grid.dt
    cols = [mids, tab.L0[: grid.n_steps], tab.EK[1:]]
    header = ["t", "L0", "EK"]
    if "z" in cfg:
        pi = pi_z(tab, float(cfg["z"]))
        pi = kz_kernel(tab, pi, slack=float(cfg.get("slack", 1e-2)), check=bool(cfg.get("check_bounds", True)))
        rep.update({"z": pi.z, "route_discrepancy": pi.route_discrepancy, "bound_f": pi.bound_f,
                    "bound_ratio_range": list(pi.bound_ratio_range or ()), "EK_z": pi.EK_z})
        cols += [pi.Pi, pi.dPi, pi.Kz]
        header += ["Pi", "dPi", "Kz"]
    if fmt in ("csv", "both"):
        write_csv(out / "resolvent.csv", header, _columns(cols))
    if fmt in ("json", "both"):
        write_json(out / "resolvent.json", rep)
    _expect(cfg, "residual", tab.residual)
    return rep


def cmd_perturb(cfg, out, fmt, workers):
    k = _kernel(_get(cfg, "kernel", ""), "/kernel")
    pd = _get(cfg, "perturbation", "")
    spec = _wrap(lambda: PerturbationSpec.from_dict(pd), "/perturbation", pd)
    grid = _grid(cfg)
    kp = apply_perturbation(k, spec, grid)
    rep = {"kind": spec.kind.value, "alpha": spec.alpha, "lambda_tilt": spec.lambda_tilt, "kernel": k.to_dict()}
    if spec.kind is PerturbationKind.MARCHAUD:
        t = np.geomspace(1e-6, grid.dt, 8)
        _, mr = marchaud_values(k, float(t[-1]), spec.alpha, spec.lambda_tilt, spec.z_max, return_report=True)
        rep["tail_bound_rel"] = mr["tail_bound_rel"]
        rep["z_max"] = mr["z_max"]
        rho = k.index
        if max(0.0, rho) < spec.alpha < 1 and rho != 0.0:
            c = C_alpha(rho, spec.alpha)
            rat = kp(t) / (t ** -spec.alpha * k(t)) / c
            rep["C_alpha"] = c
            rep["C_alpha_ratio_trace"] = [[float(a), float(b)] for a, b in zip(t, rat)]
    pts = np.asarray(kp.table[0]) if kp.table is not None else grid.nodes[1:]
    if fmt in ("csv", "both"):
        write_csv(out / "perturbed.csv", ["t", "value"], zip(pts, kp(pts)))
    if fmt in ("json", "both"):
        write_json(out / "perturb.json", rep)
    return rep


def _simulate(cfg, seed_override, workers, retain=None):
    model = _model(cfg)
    grid = _grid(cfg)
    paths, seed, mode, rh = _mc(cfg)
    if seed_override is not None:
        seed = seed_override
    perts, coords, specs = _perturbations(cfg, model, grid)
    ens = simulate_with_perturbation(model, grid, paths, seed, perts, weight_mode=mode,
                                     retain_history=rh if retain is None else (rh or retain),
                                     coordinates=coords, workers=workers)
    return model, grid, ens, specs


def cmd_simulate(cfg, out, fmt, workers, seed=None):
    model, grid, ens, specs = _simulate(cfg, seed, workers)
    X = ens.X
    header = ["t"] + [f"mean_x{i}" for i in range(model.d)] + [f"std_x{i}" for i in range(model.d)]
    cols = [grid.nodes] + [X[:, :, i].mean(0) for i in range(model.d)] + [X[:, :, i].std(0, ddof=1) if
                                                                           ens.n_paths > 1 else 0 * grid.nodes
                                                                           for i in range(model.d)]
    if ens.Z is not None:
        for q in range(ens.Z.shape[2]):
            header += [f"mean_z{q}", f"std_z{q}"]
            cols += [ens.Z[:, :, q].mean(0), ens.Z[:, :, q].std(0, ddof=1) if ens.n_paths > 1 else 0 * grid.nodes]
    if fmt in ("csv", "both"):
        write_csv(out / "summary.csv", header, zip(*cols))
    rep = {"n_paths": ens.n_paths, "n_steps": grid.n_steps, "dt": grid.dt, "seed": ens.seed,
           "weight_mode": ens.weight_mode, "truncated": ens.X_raw is not None,
           "terminal_mean": X[:, -1, :].mean(0).tolist()}
    if cfg.get("output", {}).get("dump"):
        ens.dump(out / "ensemble.bin")
        rep["dump"] = "ensemble.bin"
    if fmt in ("json", "both"):
        write_json(out / "simulate.json", rep)
    return rep


def cmd_lift(cfg, out, fmt, workers, seed=None):
    model, grid, ens, specs = _simulate(cfg, seed, workers, retain=True)
    lc = cfg.get("lift", {})
    rep = {}
    for p in lc.get("paths", [0]):
        for t in lc.get("times", [grid.horizon / 2]):
            st = _wrap(lambda p=p, t=t: lift_state(ens, int(p), float(t)), "/lift")
            if fmt in ("csv", "both"):
                name = f"curve_p{int(p)}_t{format(st.t, '.17g')}.csv"
                write_csv(out / name, ["x"] + [f"x{i}" for i in range(model.d)], st.to_rows())
    if ens.Z is not None:
        t = float(lc.get("rank_t", grid.horizon / 2))
        sp = covariance_rank(ens, t, n_boot=int(lc.get("boot", 500)), seed=ens.seed)
        rep = sp.to_dict()
        if fmt in ("json", "both"):
            write_json(out / "spectrum.json", rep)
        _expect(cfg, "rank", sp.rank)
    return rep


def cmd_markov_test(cfg, out, fmt, workers, seed=None):
    model, grid, ens, specs = _simulate(cfg, seed, workers)
    tc = _get(cfg, "test", "")
    t = float(_get(tc, "t", "/test"))
    zs = None
    T, inner = tc.get("T"), int(tc.get("inner", 0))
    if T is not None and inner > 0:
        chk = conditional_mean_check(model, None, None, t, float(T), int(tc.get("outer", 2000)), inner, ens.seed,
                                     dt=grid.dt, weight_mode=ens.weight_mode)
        zs = np.concatenate(([chk.z], chk.bin_z))
    rep = sigma_measurability_test(ens, t, n_bins=int(tc.get("bins", 64)), n_boot=int(tc.get("boot", 500)),
                                   seed=ens.seed, column=int(tc.get("column", 0)),
                                   epsilon=float(tc.get("epsilon", 0.02)), zscores=zs,
                                   T=None if T is None else float(T), n_inner=inner)
    res = rep.to_dict()
    if fmt in ("json", "both"):
        write_json(out / "markov.json", res)
    if fmt in ("csv", "both"):
        write_csv(out / "bins.csv", ["bin_center", "variance_share"], zip(rep.bin_centers, rep.bin_shares))
    _expect(cfg, "verdict", rep.verdict.value)
    return res


def preset_config(name):
    """Ready-to-run configs for the standard examples."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {list(PRESETS)}", "/preset")
    grid = {"dt": 2.0**-8, "horizon": 0.5}
    mc = {"paths": 100000, "seed": 1, "weight_mode": "cell-average"}
    pert = [{"kind": "MarchaudDerivative", "alpha": 0.05, "lambda_tilt": 1.0, "coordinate": 0}]
    test = {"t": 0.5, "bins": 64, "boot": 500}
    if name == "exponential-control":
        model = {"preset": "volterra-cir", "params": {"kernel": {"family": "ExpSum", "exp_terms": [[1.0, 1.0]]}}}
        return {"model": model, "grid": grid, "mc": mc, "perturbations": pert, "test": test,
                "expect": {"verdict": "MarkovConsistent"}}
    if name == "volterra-cir":
        model = {"preset": "volterra-cir", "params": {"hurst": 0.1}}
        return {"model": model, "grid": grid, "mc": mc, "perturbations": pert, "test": test,
                "expect": {"verdict": "PathDependent"}}
    if name == "rough-heston":
        pert = [dict(pert[0], coordinate=1)]
        return {"model": {"preset": "rough-heston", "params": {"hurst": 0.1}}, "grid": {"dt": 2.0**-8, "horizon": 1.0},
                "mc": {"paths": 10000, "seed": 1}, "perturbations": pert, "lift": {"paths": [0], "times": [0.5]}}
    return {"model": {"preset": "gaussian-fractional", "params": {"hurst": 0.3}},
            "grid": {"dt": 2.0**-8, "horizon": 1.0}, "mc": {"paths": 10000, "seed": 1, "weight_mode": "variance-exact"}}


COMMANDS = {
    "kernel-info": cmd_kernel_info,
    "gram-scan": cmd_gram_scan,
    "resolvent": cmd_resolvent,
    "perturb": cmd_perturb,
    "simulate": cmd_simulate,
    "lift": cmd_lift,
    "markov-test": cmd_markov_test,
}
STOCHASTIC = ("simulate", "lift", "markov-test")


# ----------------------------------------------------------------------
# entry point


def _parser():
    ap = argparse.ArgumentParser(prog="volterra-markov", description="Stochastic Volterra equation toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        if name == "preset":
            p.add_argument("name", choices=PRESETS)
        p.add_argument("--config", default=None, help="JSON config path, '-' for stdin")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides mc.seed")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--format", choices=("csv", "json", "both"), default="both")
        if name == "simulate":
            p.add_argument("--paths", type=int)
            p.add_argument("--dt", type=float)
            p.add_argument("--horizon", type=float)
            p.add_argument("--retain-history", action="store_true")
    return ap


def _load_config(path):
    try:
        if path in (None, "-"):
            if path is None and sys.stdin.isatty():
                raise ConfigError("no config given; use --config PATH or pipe JSON on stdin")
            return json.load(sys.stdin)
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _error(exc, code):
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, ConfigError) and exc.pointer:
        doc["pointer"] = exc.pointer
    sys.stderr.write(json.dumps(doc) + "\n")
    return code


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "preset":
            cfg = preset_config(args.name)
            text = dumps(cfg) + "\n"
            if args.out:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "config.json").write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
            return 0
        cfg = _load_config(args.config)
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        if args.seed is not None and (args.seed < 0 or args.seed >= 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer", "/mc/seed")
        if args.command == "simulate":
            if args.paths is not None:
                cfg.setdefault("mc", {})["paths"] = args.paths
            if args.dt is not None:
                cfg.setdefault("grid", {})["dt"] = args.dt
            if args.horizon is not None:
                cfg.setdefault("grid", {})["horizon"] = args.horizon
            if args.retain_history:
                cfg.setdefault("mc", {})["retain_history"] = True
        if args.seed is not None and args.command in STOCHASTIC:
            cfg.setdefault("mc", {})["seed"] = args.seed
        workers = args.workers or int(os.environ.get("VOLTERRA_WORKERS", "1") or 1)
        if workers < 1:
            raise ConfigError("workers must be positive")
        out = Path(args.out or cfg.get("output", {}).get("dir") or "volterra-out")
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.resolved.json", cfg)
        COMMANDS[args.command](cfg, out, args.format, workers)
        return 0
    except GateFailure as exc:
        return _error(exc, 4)
    except InvalidParams as exc:
        return _error(exc, 2)
    except NumericalError as exc:
        return _error(exc, 3)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
