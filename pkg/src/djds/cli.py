"""Command line driver: certify, plan, synthesize, simulate, report.

Every stage reads its inputs from files and writes its outputs to the
output directory. Artifacts carry the model hash so stale combinations are
rejected. Wall times go to timing files only, keeping CSVs reproducible.
"""
import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from .abstraction import (
    AbstractionParams, ShiftAbstraction, compute_Z, compute_Z_tilde, count_transitions,
    make_sigma_bound, min_epsilon, min_horizon,
)
from .errors import ConfigError, DjdsError, Infeasible, ModelFileError
from .model import HistorySegment, lipschitz_constants, load_model_file, quantize
from .simulate import SimConfig, check_config, window_grid, write_mc_csv, write_path_csv
from .stability import StabilityCertificate, check_certificate, derive_envelope, vk_search
from .synthesis import (
    SafetySpec, extract_controller, label_safe, maximal_invariant, read_controller,
    run_closed_loop, write_bitmap, write_controller, write_input_csv,
)

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


@dataclass
class PipelineConfig:
    model: str = None
    certificate: str = None
    controller: str = None
    P_file: str = None
    out: str = "out"
    h: float = None
    N: int = None
    epsilon: float = None
    eta: float = 0.0
    dt: float = None
    dq: float = 0.1
    seed: int = 0
    trials: int = 1000
    z_trials: int = 1000
    mode: str = "noiseless"
    zeta_s: object = None
    zeta0: object = None
    W_lo: object = None
    W_hi: object = None
    periods: int = 300
    sweep: list = None
    tie_break: str = "lowest"
    iterations: int = 5
    stride: int = 1

    def sim_config(self):
        if self.h is None:
            raise ConfigError("h is required")
        dt = self.dt if self.dt is not None else self.h / 100
        return SimConfig(float(dt), int(self.seed))


_FIELDS = {f.name for f in fields(PipelineConfig)}
_PATHS = {"model", "certificate", "controller", "P_file", "out"}


def load_config(path):
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ModelFileError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ModelFileError(f"cannot parse {path}: {exc}") from exc
    extra = set(doc) - {"pipeline"}
    table = doc.get("pipeline", {})
    bad = set(table) - _FIELDS
    if extra or bad:
        raise ModelFileError(f"unknown config entries: {', '.join(sorted(extra | bad))}")
    base = os.path.dirname(os.path.abspath(path))
    for k in _PATHS & set(table):
        if not os.path.isabs(table[k]):
            table[k] = os.path.join(base, table[k])
    return table


def _segment(value, n, tau, step):
    v = np.asarray(value, dtype=float).reshape(-1)
    if v.size == 1:
        v = np.full(n, v[0])
    if v.size != n:
        raise ConfigError(f"segment value needs 1 or {n} entries")
    return HistorySegment.constant(v, tau, step if tau > 0 else None)


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, ValueError) as exc:
        raise ModelFileError(f"cannot read {path}: {exc}") from exc


def _f(x):
    return repr(float(x))


# ---------------------------------------------------------------- shared loading

class _Context:
    def __init__(self, cfg):
        if not cfg.model:
            raise ConfigError("a model file is required (--model)")
        self.cfg = cfg
        self.model, self.space, self.region = load_model_file(cfg.model)
        self.hash = self.model.hash()
        os.makedirs(cfg.out, exist_ok=True)

    def certificate(self):
        path = self.cfg.certificate or os.path.join(self.cfg.out, "certificate.json")
        doc = _load_json(path)
        if doc.get("model_hash") != self.hash:
            raise ConfigError(f"{path} certifies a different model")
        return StabilityCertificate.validated(self.model, np.array(doc["P"]), np.array(doc["c"]),
                                              doc.get("tol"))

    def params(self, N=1):
        cfg = self.cfg
        sim = cfg.sim_config()
        check_config(self.model, sim, cfg.h)
        if cfg.zeta_s is None:
            raise ConfigError("zeta_s is required")
        step = window_grid(self.model.tau, sim.dt)[1] if self.model.tau > 0 else None
        zs = _segment(cfg.zeta_s, self.model.n, self.model.tau, step)
        inputs = quantize(self.space, cfg.eta)
        return AbstractionParams(float(cfg.h), int(N), zs, inputs), sim

    def safety(self, contraction):
        cfg = self.cfg
        if cfg.W_lo is None or cfg.W_hi is None:
            raise ConfigError("the comfort zone (W_lo, W_hi) is required")
        n = self.model.n
        lo = np.broadcast_to(np.asarray(cfg.W_lo, dtype=float), (n,))
        hi = np.broadcast_to(np.asarray(cfg.W_hi, dtype=float), (n,))
        return SafetySpec(lo, hi, contraction)


def _planner(ctx, cert, params, sim):
    cfg = ctx.cfg
    env = derive_envelope(cert, ctx.model.tau)
    bound = None
    if ctx.region is not None:
        bound = make_sigma_bound(cert, env, ctx.model, ctx.region, params.zeta_s,
                                 params.inputs, cfg.dq)
    _, _, Lg, Lr = lipschitz_constants(ctx.model)
    if cfg.mode == "stochastic":
        Z, Zse = compute_Z_tilde(ctx.model, params, sim, cfg.z_trials)
    elif cfg.mode == "noiseless":
        if bound is None:
            raise Infeasible("noiseless mode needs an operating region ([region] in the model file)")
        Z, Zse = compute_Z(ctx.model, params, sim), 0.0
    else:
        raise ConfigError(f"unknown mode {cfg.mode!r}")
    kw = dict(envelope=env, Z=Z, Z_stderr=Zse, Lg=Lg, Lr=Lr)
    return env, bound, kw


# ---------------------------------------------------------------- commands

def cmd_certify(cfg):
    ctx = _Context(cfg)
    model = ctx.model
    if cfg.P_file:
        doc = _load_json(cfg.P_file)
        res = check_certificate(model, np.array(doc["P"]), np.array(doc["c"]), doc.get("tol"))
        if not res:
            raise Infeasible(f"supplied certificate rejected: {res.reason} "
                             f"(min eigenvalue {res.min_eig:.3e})")
        cert = StabilityCertificate(np.array(doc["P"]), np.array(doc["c"]), res.tol, 2, res)
    else:
        cert = vk_search(model, np.eye(model.n), iterations=cfg.iterations)
    env = derive_envelope(cert, model.tau)
    Lf, Lu, Lg, Lr = lipschitz_constants(model)
    doc = dict(cert.to_dict(), model_hash=ctx.hash, envelope=env.to_dict(),
               lipschitz={"Lf": Lf, "Lu": Lu, "Lg": Lg, "Lr": Lr})
    _dump(os.path.join(cfg.out, "certificate.json"), doc)
    lines = [
        "stability certificate",
        f"model hash   {ctx.hash}",
        f"c            {' '.join(f'{v:.6g}' for v in cert.c)}",
        f"kappa        {cert.kappa:.6g}",
        f"kappa0       {cert.kappa0:.6g}",
        f"lambda(P)    [{cert.lambda_min_P:.6g}, {cert.lambda_max_P:.6g}]",
        f"beta(s,t)    {env.ratio:.6g} * exp(-{env.kappa:.6g} t) * s",
        f"gamma(s)     {env.gamma_coeff:.6g} * s^2",
        f"min eig      {cert.check.min_eig:.3e} (tol {cert.tol:.3e})",
    ]
    with open(os.path.join(cfg.out, "certify_report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return cert


PLAN_COLUMNS = ["N", "h", "mode", "eps_term", "sigma_term", "Z_term", "lhs", "epsilon",
                "quant_term", "total", "Z", "Z_stderr"]


def cmd_plan(cfg):
    ctx = _Context(cfg)
    cert = ctx.certificate()
    params, sim = ctx.params()
    env, bound, kw = _planner(ctx, cert, params, sim)
    rows = []
    if cfg.sweep:
        for N in cfg.sweep:
            rows.append(min_epsilon(ctx.model, params.with_N(int(N)), bound, cfg.mode, **kw))
    elif cfg.N is not None:
        b = min_epsilon(ctx.model, params.with_N(int(cfg.N)), bound, cfg.mode, **kw)
        if cfg.epsilon is not None and b.epsilon > cfg.epsilon:
            raise Infeasible(f"N={cfg.N} needs epsilon >= {b.epsilon:.6g} > {cfg.epsilon}")
        rows.append(b)
    elif cfg.epsilon is not None:
        _, b = min_horizon(ctx.model, params, bound, cfg.epsilon, cfg.mode, **kw)
        rows.append(b)
    else:
        raise ConfigError("plan needs N, epsilon or a sweep")
    with open(os.path.join(cfg.out, "plan.csv"), "w") as fh:
        fh.write(",".join(PLAN_COLUMNS) + "\n")
        for b in rows:
            vals = [str(b.N), _f(b.h), b.mode, *(_f(t) for t in b.terms), _f(b.lhs),
                    _f(b.epsilon), _f(b.quant_term), _f(b.total), _f(b.Z), _f(b.Z_stderr)]
            fh.write(",".join(vals) + "\n")
    _dump(os.path.join(cfg.out, "plan.json"),
          {"model_hash": ctx.hash, "mode": cfg.mode, "rows": [b.to_dict() for b in rows],
           "statistical": cfg.mode == "stochastic"})
    lines = [f"precision plan ({cfg.mode}{', statistical Z' if cfg.mode == 'stochastic' else ''})",
             f"{'N':>4} {'eps term':>12} {'sigma term':>12} {'Z term':>12} {'lhs':>12} {'epsilon':>12} {'total':>12}"]
    for b in rows:
        t = b.terms
        lines.append(f"{b.N:>4} {t[0]:12.6g} {t[1]:12.6g} {t[2]:12.6g} {b.lhs:12.6g} "
                     f"{b.epsilon:12.6g} {b.total:12.6g}")
    with open(os.path.join(cfg.out, "plan_summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return rows


STATS_COLUMNS = ["N", "states", "transitions", "controller_states", "controller_transitions",
                 "epsilon", "eps_total"]


def _write_stats(path, N, states, transitions, ctrl_states, ctrl_trans, eps, total):
    with open(path, "w") as fh:
        fh.write(",".join(STATS_COLUMNS) + "\n")
        cs = "" if ctrl_states is None else str(ctrl_states)
        ct = "" if ctrl_trans is None else str(ctrl_trans)
        fh.write(f"{N},{states},{transitions},{cs},{ct},{_f(eps)},{_f(total)}\n")


def cmd_synthesize(cfg):
    ctx = _Context(cfg)
    cert = ctx.certificate()
    params, sim = ctx.params()
    env, bound, kw = _planner(ctx, cert, params, sim)
    t0 = time.perf_counter()
    if cfg.N is not None:
        budget = min_epsilon(ctx.model, params.with_N(int(cfg.N)), bound, cfg.mode, **kw)
        if cfg.epsilon is not None:
            if budget.epsilon > cfg.epsilon:
                raise Infeasible(f"N={cfg.N} needs epsilon >= {budget.epsilon:.6g}")
            budget.epsilon = float(cfg.epsilon)
            budget.total = budget.epsilon + budget.quant_term
        N = int(cfg.N)
    elif cfg.epsilon is not None:
        N, budget = min_horizon(ctx.model, params, bound, cfg.epsilon, cfg.mode, **kw)
        budget.epsilon = float(cfg.epsilon)
        budget.total = budget.epsilon + budget.quant_term
    else:
        raise ConfigError("synthesize needs N or epsilon")
    params = params.with_N(N)
    states, transitions = count_transitions(params)
    stats_path = os.path.join(cfg.out, "stats.csv")
    _write_stats(stats_path, N, states, transitions, None, None, budget.epsilon, budget.total)
    manifest = {"model_hash": ctx.hash, "params": params.to_dict(), "dt": sim.dt,
                "input_order": params.inputs.points.tolist(), "epsilon": budget.epsilon,
                "quant_term": budget.quant_term, "total": budget.total, "mode": budget.mode,
                "terms": list(budget.terms), "states": states, "transitions": transitions,
                "statistical": budget.mode == "stochastic"}
    _dump(os.path.join(cfg.out, "manifest.json"), manifest)
    t1 = time.perf_counter()
    spec = ctx.safety(budget.total)
    spec.contracted()
    ab = ShiftAbstraction(ctx.model, params, sim)
    safe = label_safe(ab, spec)
    write_bitmap(os.path.join(cfg.out, "safe_labels.bin"), safe)
    t2 = time.perf_counter()
    inv = maximal_invariant(safe, params.q, params.N)
    ctrl = extract_controller(inv, params, spec, budget.epsilon, budget.total, ctx.hash)
    write_controller(os.path.join(cfg.out, "controller.bin"), ctrl)
    t3 = time.perf_counter()
    _write_stats(stats_path, N, states, transitions, ctrl.num_states, ctrl.num_transitions,
                 budget.epsilon, budget.total)
    _dump(os.path.join(cfg.out, "timing.json"),
          {"plan_s": t1 - t0, "abstraction_s": t2 - t1, "controller_s": t3 - t2})
    print(f"N={N} states={states} transitions={transitions} "
          f"controller_states={ctrl.num_states} controller_transitions={ctrl.num_transitions} "
          f"epsilon={budget.epsilon:.6g} total={budget.total:.6g}")
    return ctrl


def _params_from_header(head):
    from .model import QuantizedInputSet
    p = head["params"]
    zs = p["zeta_s"]
    seg = HistorySegment(np.array(zs["values"]), zs["grid_step"], zs["tau"])
    inputs = QuantizedInputSet(p["eta"], np.array(p["inputs"]))
    return AbstractionParams(p["h"], p["N"], seg, inputs, p["eta"])


def cmd_simulate(cfg):
    ctx = _Context(cfg)
    path = cfg.controller or os.path.join(cfg.out, "controller.bin")
    try:
        ctrl, head = read_controller(path, _params_from_header)
    except OSError as exc:
        raise ModelFileError(f"cannot read {path}: {exc}") from exc
    if head["model_hash"] != ctx.hash:
        raise ConfigError(f"{path} was synthesized for a different model")
    cfg.h = ctrl.params.h
    sim = cfg.sim_config()
    if cfg.zeta0 is None:
        raise ConfigError("zeta0 is required")
    zeta0 = _segment(cfg.zeta0, ctx.model.n, ctx.model.tau,
                     window_grid(ctx.model.tau, sim.dt)[1] if ctx.model.tau else None)
    ab = ShiftAbstraction(ctx.model, ctrl.params, sim)
    spec = ctrl.spec
    box = (spec.lo, spec.hi)
    res = run_closed_loop(ctx.model, ctrl, ab, zeta0, int(cfg.periods), sim, cfg.tie_break,
                          trials=int(cfg.trials), box=box, stride=int(cfg.stride))
    write_path_csv(os.path.join(cfg.out, "closed_loop_path.csv"), res.path)
    write_input_csv(os.path.join(cfg.out, "inputs.csv"), res.input_ids,
                    ctrl.params.inputs.points, ctrl.params.h)
    summary = {"model_hash": ctx.hash, "initial_state": res.initial_state.index,
               "initial_word": list(res.initial_state.word()),
               "match_distance": res.match_distance, "trials": int(cfg.trials),
               "periods": int(cfg.periods), "seed": int(cfg.seed), "dt": sim.dt,
               "eps_total": ctrl.eps_total}
    if res.distance is not None:
        write_mc_csv(os.path.join(cfg.out, "distance.csv"), res.distance)
        rms = float(np.sqrt(np.max(res.distance.estimate)))
        summary.update(max_rms_distance=rms, below_eps_total=rms < ctrl.eps_total)
        print(f"max_t sqrt(mean dist^2 to W) = {rms:.6g} (eps_total = {ctrl.eps_total:.6g})")
    _dump(os.path.join(cfg.out, "simulate_summary.json"), summary)
    return res


def cmd_report(cfg):
    out = cfg.out
    parts = ["# pipeline report", ""]
    for name, title in (("certify_report.txt", "certificate"), ("plan_summary.txt", "plan")):
        p = os.path.join(out, name)
        if os.path.exists(p):
            with open(p) as fh:
                parts += [f"## {title}", "", "```", fh.read().rstrip(), "```", ""]
    for name, title in (("stats.csv", "abstraction and controller"),
                        ("timing.json", "wall time (machine specific)"),
                        ("simulate_summary.json", "closed loop")):
        p = os.path.join(out, name)
        if os.path.exists(p):
            with open(p) as fh:
                parts += [f"## {title}", "", "```", fh.read().rstrip(), "```", ""]
    text = "\n".join(parts)
    with open(os.path.join(out, "report.md"), "w") as fh:
        fh.write(text)
    print(text)
    return text


COMMANDS = {"certify": cmd_certify, "plan": cmd_plan, "synthesize": cmd_synthesize,
            "simulate": cmd_simulate, "report": cmd_report}


def _floats(s):
    vals = [float(v) for v in str(s).split(",")]
    return vals[0] if len(vals) == 1 else vals


def build_parser():
    ap = argparse.ArgumentParser(prog="djds", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML file with a [pipeline] table")
        sp.add_argument("--model")
        sp.add_argument("--out")
        sp.add_argument("--certificate")
        sp.add_argument("--controller")
        sp.add_argument("--P-file", dest="P_file")
        sp.add_argument("--h", type=float)
        sp.add_argument("--N", type=int)
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--eta", type=float)
        sp.add_argument("--dt", type=float)
        sp.add_argument("--dq", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--trials", type=int)
        sp.add_argument("--z-trials", dest="z_trials", type=int)
        sp.add_argument("--mode", choices=["noiseless", "stochastic"])
        sp.add_argument("--zeta-s", dest="zeta_s", type=_floats)
        sp.add_argument("--zeta0", type=_floats)
        sp.add_argument("--W-lo", dest="W_lo", type=_floats)
        sp.add_argument("--W-hi", dest="W_hi", type=_floats)
        sp.add_argument("--periods", type=int)
        sp.add_argument("--sweep", type=lambda s: [int(v) for v in s.split(",")])
        sp.add_argument("--tie-break", dest="tie_break", choices=["lowest", "min-norm"])
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--stride", type=int)
    return ap


def config_from_args(args):
    values = {}
    if args.config:
        values.update(load_config(args.config))
    for k, v in vars(args).items():
        if k in _FIELDS and v is not None:
            values[k] = v
    return PipelineConfig(**values)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        COMMANDS[args.command](cfg)
    except DjdsError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
