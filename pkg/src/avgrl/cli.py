"""Command-line entry point.

Exit codes: 0 all checks pass, 1 certificate violation, 2 usage or input
error, 3 numerical or convergence failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import api, rl
from .errors import AvgRLError, ConvergenceError, NumericalError, StructuralError
from .generators import RandomMdpSpec, generate_gridworld, generate_random_mdp
from .harness import ExperimentConfig, run_experiment
from .mdp import StochasticPolicy, load_mdp, optimal_by_enumeration, optimal_by_policy_iteration, save_mdp, solve_bellman, MAX_ENUMERATION
from .regret import log_pseudo_regret_bound, loglog_slope
from .traces import read_trace, write_trace
from .transforms import aperiodicity_transform, exploration_mix

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_solve(args):
    mdp = load_mdp(args.mdp)
    if args.policy is not None:
        actions = [int(a) for a in args.policy.split(",")]
        if len(actions) != mdp.n_states:
            raise StructuralError(f"--policy needs {mdp.n_states} actions, got {len(actions)}")
        policy = StochasticPolicy.deterministic(actions, mdp.n_actions)
    elif mdp.n_actions ** mdp.n_states <= MAX_ENUMERATION:
        policy = optimal_by_enumeration(mdp).policy
    else:
        policy = optimal_by_policy_iteration(mdp, args.anchor).policy
    ev = solve_bellman(mdp, policy, args.anchor)
    result = {"gain": ev.gain, "bias": ev.bias.tolist(), "policy": policy.actions.tolist(),
              "anchor": args.anchor}
    if args.out:
        Path(args.out).write_text(json.dumps(result, sort_keys=True) + "\n")
    _emit(result)
    return EXIT_OK


def cmd_transform(args):
    mdp = load_mdp(args.mdp)
    records = []
    if args.eps is not None:
        mdp, rec = exploration_mix(mdp, args.eps)
        records.append(rec.to_dict())
    if args.kappa is not None:
        mdp, rec = aperiodicity_transform(mdp, args.kappa)
        records.append(rec.to_dict())
    if not records:
        raise StructuralError("give --eps and/or --kappa")
    save_mdp(mdp, args.out)
    sidecar = Path(str(args.out) + ".transform.json")
    sidecar.write_text(json.dumps(records, sort_keys=True, indent=2) + "\n")
    _emit({"out": str(args.out), "records": records})
    return EXIT_OK


def cmd_api_run(args):
    mdp = load_mdp(args.mdp)
    inj = api.ErrorInjector(args.eps, args.delta, args.mode, args.seed)
    if args.alpha is not None:
        trace = api.run_discounted_api(mdp, None, args.alpha, inj, args.iters)
        write_trace(args.out, trace.meta, trace.rows)
        _emit({"rescaled_bound": trace.meta["rescaled_bound"],
               "final_rescaled_error": trace.rows[-1]["rescaled_error"]})
        return EXIT_OK
    trace = api.run_api(mdp, None, inj, args.iters, args.anchor, args.evaluation)
    write_trace(args.out, trace.meta, trace.rows)
    summary = api.certificate_summary(trace)
    _emit(summary)
    return EXIT_OK if all(summary[f]["passed"] for f in api.ENFORCED) else EXIT_VIOLATION


def _features(spec, n_pairs):
    if spec == "tabular":
        return rl.FeatureMap.tabular(n_pairs)
    try:
        data = json.loads(Path(spec).read_text())
    except FileNotFoundError:
        raise StructuralError(f"no such feature file: {spec}") from None
    except json.JSONDecodeError as exc:
        raise StructuralError(f"{spec}: not valid JSON ({exc})") from exc
    if data.get("index") != "s*n_actions+a":
        raise StructuralError(f"{spec}: feature file must declare index 's*n_actions+a'")
    phi = np.array(data["phi"], dtype=float)
    if phi.ndim != 2 or phi.shape[0] != n_pairs:
        raise StructuralError(f"{spec}: expected {n_pairs} feature rows, got shape {phi.shape}")
    return rl.FeatureMap(phi)


def cmd_rl_run(args):
    mdp = load_mdp(args.mdp)
    features = _features(args.features, mdp.n_states * mdp.n_actions)
    if args.td_scale is not None:
        uniform = StochasticPolicy.uniform(mdp.n_states, mdp.n_actions)
        cfg = rl.conditioned_td_config(mdp, uniform, features, args.lam, args.td_scale)
    else:
        cfg = rl.TdConfig(args.lam, args.c1, args.c2, args.c_alpha)
    rule = rl.PolicyUpdateRule(args.rule, args.beta)
    trace = rl.run_policy_based(mdp, rule, features, cfg, args.tau, args.iters, args.seed)
    write_trace(args.out, trace.meta, trace.rows)
    report = _verify_rl(trace.meta, trace.rows)
    _emit(report)
    return EXIT_OK if report["passed"] else EXIT_VIOLATION


def _verify_api(meta, rows):
    trace = api.ApiTrace(rows=rows, meta=meta)
    summary = api.certificate_summary(trace)
    mismatched = []
    for r in rows:
        expect = api.theorem_bound(r["k"], meta["gamma"], meta["injector"]["eps"],
                                   meta["injector"]["delta"], meta["J_star"], meta["l0"])
        if "bound" in r and not abs(r["bound"] - expect) <= 1e-9 * max(1.0, abs(expect)):
            mismatched.append({"k": r["k"], "stored": r["bound"], "recomputed": expect})
        if "bound" in r and meta["J_star"] - r["gain"] > r["bound"] + 1e-9:
            mismatched.append({"k": r["k"], "gap": meta["J_star"] - r["gain"], "stored": r["bound"]})
    summary["bound_column"] = {"passed": not mismatched, "violations": len(mismatched),
                               "first": mismatched[0] if mismatched else None}
    first = {}
    for name, fn in (("theorem", api.check_theorem), ("sandwich", api.check_sandwich),
                     ("contraction", api.check_contraction)):
        v = fn(trace)
        if v:
            first[name] = v[0].__dict__
    summary["first_violation"] = first
    summary["passed"] = all(summary[f]["passed"] for f in api.ENFORCED) and not mismatched
    return summary


def _verify_rl(meta, rows):
    trace = rl.RlTrace(rows=rows, meta=meta)
    rep = rl.final_iterate_certificate(trace)
    enforced_cap = "cap_prior" if meta["rule"]["kind"] == "mirror" else "cap"
    caps = rl.cap_violations(trace, enforced_cap)
    stated_caps = rl.cap_violations(trace, "cap")
    return {
        "final_gap": rep.lhs,
        "final_rhs": rep.rhs,
        "final_rhs_stated": rep.rhs_stated,
        "final_passed": rep.passed,
        "final_stated_passed": rep.passed_stated,
        "lemma_violations": rep.lemma_violations[:1],
        "sandwich_violations": rep.sandwich_violations[:1],
        "cap_column": enforced_cap,
        "cap_violations": len(caps),
        "stated_cap_violations": len(stated_caps),
        "first_cap_violation": caps[0] if caps else None,
        "passed": rep.passed and not caps,
    }


def cmd_verify(args):
    meta, rows = read_trace(args.trace)
    kind = meta.get("algorithm")
    if kind == "api_average":
        report = _verify_api(meta, rows)
    elif kind == "policy_based":
        report = _verify_rl(meta, rows)
    elif kind == "api_discounted":
        report = {"rescaled_bound": meta["rescaled_bound"],
                  "max_rescaled_error": max(r["rescaled_error"] for r in rows), "passed": True}
    else:
        raise StructuralError(f"{args.trace}: unknown trace algorithm {kind!r}")
    _emit(report)
    return EXIT_OK if report["passed"] else EXIT_VIOLATION


def cmd_regret(args):
    out_rows = []
    for path in args.traces:
        meta, rows = read_trace(path)
        if meta.get("algorithm") != "policy_based":
            raise StructuralError(f"{path}: not a policy-based trace")
        T = meta["iterations"]
        tau = meta["tau"]
        gains = np.array([r["gain"] for r in rows[:T]])
        pseudo = float(tau * np.sum(meta["J_star"] - gains))
        bound = slack = None
        if meta["rule"]["kind"] == "mirror" and meta.get("log_gamma") is not None:
            log_omega = min(r["log_omega"] for r in rows[:T])
            lb = log_pseudo_regret_bound(tau * T, tau, meta["log_gamma"], meta["c0"], args.delta0,
                                         log_omega, args.c_hat)
            bound = math.exp(lb) if lb < 700 else math.inf
            slack = bound - pseudo
        out_rows.append({"K": tau * T, "tau": tau, "pseudo_regret": pseudo, "bound": bound, "slack": slack})
    Ks = sorted({r["K"] for r in out_rows})
    slope = None
    if len(Ks) >= 2:
        means = [np.mean([r["pseudo_regret"] for r in out_rows if r["K"] == K]) for K in Ks]
        slope = loglog_slope(Ks, means)
    lines = ["K,tau,pseudo_regret,bound,slack"]
    for r in out_rows:
        lines.append(",".join("" if r[h] is None else repr(r[h]) for h in ("K", "tau", "pseudo_regret", "bound", "slack")))
    lines.append(f"# slope,{'' if slope is None else repr(slope)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    violated = any(r["slack"] is not None and r["slack"] < 0 for r in out_rows)
    return EXIT_VIOLATION if violated else EXIT_OK


def cmd_gen(args):
    if args.kind == "random":
        if args.states is None or args.actions is None:
            raise StructuralError("random instances need --states and --actions")
        mdp = generate_random_mdp(RandomMdpSpec(args.states, args.actions, args.concentration,
                                                args.r_lo, args.r_hi, args.seed))
    else:
        if args.width is None or args.height is None:
            raise StructuralError("gridworld instances need --width and --height")
        rewards = {}
        for item in args.reward or []:
            try:
                row, col, value = item.split(",")
                rewards[(int(row), int(col))] = float(value)
            except ValueError:
                raise StructuralError(f"--reward expects ROW,COL,VALUE, got {item!r}") from None
        mdp = generate_gridworld(args.width, args.height, args.slip, rewards)
    save_mdp(mdp, args.out)
    _emit({"out": str(args.out), "n_states": mdp.n_states, "n_actions": mdp.n_actions,
           "hash": mdp.content_hash()})
    return EXIT_OK


def cmd_experiment(args):
    config = ExperimentConfig.load(args.config)
    if args.workers is not None:
        config.workers = args.workers
    manifest = run_experiment(config)
    _emit({"complete": manifest["complete"], "passed": manifest["passed"],
           "files": len(manifest["files"])})
    if not manifest["complete"]:
        return EXIT_NUMERIC
    return EXIT_OK if manifest["passed"] else EXIT_VIOLATION


def build_parser():
    p = argparse.ArgumentParser(prog="avgrl", description="Average-reward policy iteration toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="exact gain and bias of a policy (default: optimal)")
    s.add_argument("--mdp", required=True)
    s.add_argument("--policy", help="comma-separated action per state")
    s.add_argument("--anchor", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("transform", help="apply exploration mixing and/or the lazy-chain transform")
    s.add_argument("--mdp", required=True)
    s.add_argument("--eps", type=float)
    s.add_argument("--kappa", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transform)

    s = sub.add_parser("api-run", help="approximate policy iteration with injected errors")
    s.add_argument("--mdp", required=True)
    s.add_argument("--eps", type=float, default=0.0)
    s.add_argument("--delta", type=float, default=0.0)
    s.add_argument("--mode", choices=api.MODES, default="none")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--iters", type=int, default=200)
    s.add_argument("--anchor", type=int, default=0)
    s.add_argument("--evaluation", choices=("solve", "rvi"), default="solve")
    s.add_argument("--alpha", type=float, help="run the discounted variant with this discount")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_api_run)

    s = sub.add_parser("rl-run", help="policy-based loop with TD(lambda) evaluation")
    s.add_argument("--mdp", required=True)
    s.add_argument("--rule", choices=rl.RULES, default="softmax")
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--tau", type=int, default=10000)
    s.add_argument("--iters", type=int, default=10)
    s.add_argument("--lambda", dest="lam", type=float, default=0.5)
    s.add_argument("--c1", type=float, default=1.0)
    s.add_argument("--c2", type=float, default=10.0)
    s.add_argument("--c-alpha", dest="c_alpha", type=float, default=1.0)
    s.add_argument("--td-scale", dest="td_scale", type=float,
                   help="set c1 = c2 = SCALE / Delta of the uniform policy (overrides --c1/--c2)")
    s.add_argument("--features", default="tabular", help="'tabular' or a JSON feature file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rl_run)

    s = sub.add_parser("regret", help="pseudo-regret table from rl-run traces")
    s.add_argument("traces", nargs="+")
    s.add_argument("--c-hat", dest="c_hat", type=float, default=0.0)
    s.add_argument("--delta0", type=float, default=0.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_regret)

    s = sub.add_parser("verify", help="replay a trace through its certificate checks")
    s.add_argument("trace")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("gen", help="write a generated instance file")
    s.add_argument("--kind", choices=("random", "gridworld"), default="random")
    s.add_argument("--states", type=int)
    s.add_argument("--actions", type=int)
    s.add_argument("--concentration", type=float, default=1.0)
    s.add_argument("--r-lo", dest="r_lo", type=float, default=0.0)
    s.add_argument("--r-hi", dest="r_hi", type=float, default=1.0)
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--slip", type=float, default=0.0)
    s.add_argument("--reward", action="append", help="ROW,COL,VALUE (repeatable)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("experiment", help="run a JSON experiment config")
    s.add_argument("config")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ConvergenceError, NumericalError) as exc:
        print(f"avgrl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AvgRLError, OSError, KeyError, ValueError, TypeError) as exc:
        print(f"avgrl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
