"""Command-line front end: train, evaluate, oracle, verify.

Exit codes: 0 success, 1 runtime abort, 2 config error, 3 capability error
(an operation that needs an enumerable environment got one that is not).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import oracle
from .config import ConfigError, env_kwargs, load_config, to_train_config
from .envs import EnumerationCapError, make_env
from .policies import BackwardPolicy, TabularForward
from .trainer import RunAbortedError, evaluate, load_bundle, run

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_CAPABILITY = 3

VERIFY_TOL = 1e-9
POINTWISE_TOL = 1e-10
PERTURB_EPS = 0.1
PERTURB_MIN_SHIFT = 0.01


def _parser():
    p = argparse.ArgumentParser(prog="subflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", required=True, help="path to the JSON config")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="seed override")
        sp.add_argument("--verbose", action="store_true")

    sp = sub.add_parser("train", help="run the configured training workflow")
    common(sp, out_required=True)

    sp = sub.add_parser("evaluate", help="compute metrics for a checkpoint")
    common(sp)
    sp.add_argument("--ckpt", required=True, help="checkpoint file")

    sp = sub.add_parser("oracle", help="dump exact DP tables as CSV")
    common(sp)
    sp.add_argument(
        "--what",
        required=True,
        choices=["zstar", "flow", "pf", "pstar", "vdagger", "wdagger"],
    )
    sp.add_argument("--ckpt", default=None, help="optional checkpoint for policies")

    sp = sub.add_parser("verify", help="run the exact balance-condition suites")
    common(sp)
    return p


def _policies(env, args):
    """Forward/backward policies for oracle work: checkpoint if given,
    otherwise uniform tables."""
    if args.ckpt:
        bundle = load_bundle(args.ckpt, env)
        return bundle.pf, bundle.pb
    return TabularForward.uniform(env), BackwardPolicy(env)


def _dump_table(env, rows, value_name, out_dir, what):
    dims = len(env.initial_state().cells)
    header = ",".join(f"c{i}" for i in range(dims)) + f",{value_name}"
    lines = [header]
    for state, value in rows:
        lines.append(",".join(str(c) for c in state.cells) + f",{value:.17g}")
    text = "\n".join(lines) + "\n"
    if out_dir:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / f"{what}.csv").write_text(text)
    else:
        sys.stdout.write(text)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tc = to_train_config(cfg, seed=args.seed)
    progress = print if args.verbose else None
    try:
        run(tc, out_dir=args.out, progress=progress)
    except RunAbortedError as err:
        print(f"run aborted: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    env = make_env(**env_kwargs(cfg))
    row = evaluate(args.ckpt, env)
    from .trainer import METRIC_FIELDS

    print(",".join(METRIC_FIELDS))
    print(row.as_csv())
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    env = make_env(**env_kwargs(cfg))
    if not env.is_enumerable():
        print(f"{env.name} is not enumerable", file=sys.stderr)
        return EXIT_CAPABILITY
    pf, pb = _policies(env, args)
    what = args.what
    if what == "zstar":
        print(f"{np.exp(oracle.log_z_star(env)):.17g}")
        return EXIT_OK
    if what == "flow":
        table = oracle.dp_true_flow(env, pb)
        rows = [(s, v) for s, v in table.log_flow.items()]
        _dump_table(env, rows, "log_flow", args.out, what)
    elif what == "pf":
        dist = oracle.dp_forward_terminal_dist(env, pf)
        _dump_table(env, sorted(dist.probs.items(), key=lambda kv: kv[0].cells),
                    "p_forward", args.out, what)
    elif what == "pstar":
        dist = oracle.true_terminal_dist(env)
        _dump_table(env, sorted(dist.probs.items(), key=lambda kv: kv[0].cells),
                    "p_star", args.out, what)
    elif what == "vdagger":
        table = oracle.dp_v_dagger(env, pf, pb)
        _dump_table(env, list(table.values.items()), "v", args.out, what)
    elif what == "wdagger":
        table = oracle.dp_w_dagger(env, pf, pb)
        _dump_table(env, list(table.values.items()), "w", args.out, what)
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    env = make_env(**env_kwargs(cfg))
    if not env.is_enumerable():
        print(f"{env.name} is not enumerable", file=sys.stderr)
        return EXIT_CAPABILITY
    seed = cfg["seed"] if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    pb = BackwardPolicy(env)
    ok = True

    worst_v = 0.0
    for _ in range(5):
        pf = TabularForward.random(env, rng, scale=0.3)
        gap, _ = oracle.check_evaluation_balance(env, pf, pb)
        worst_v = max(worst_v, gap)
    ok &= worst_v < VERIFY_TOL
    print(f"evaluation balance (V): max pair expectation {worst_v:.3e} "
          f"{'PASS' if worst_v < VERIFY_TOL else 'FAIL'}")

    pf = TabularForward.random(env, rng, scale=0.3)
    v = oracle.dp_v_dagger(env, pf, pb)
    # the initial state heads every trajectory, so a bump there is always
    # visible in the pair expectations regardless of the policy
    state = env.initial_state()
    shift = oracle.perturbation_sensitivity(env, pf, pb, v, state, eps=PERTURB_EPS)
    detected = shift > PERTURB_MIN_SHIFT
    ok &= detected
    print(f"evaluation balance (V): perturbed value detected with shift "
          f"{shift:.3e} {'PASS' if detected else 'FAIL'}")

    pointwise, _, _ = oracle.check_flow_balance(env, pb)
    ok &= pointwise < POINTWISE_TOL
    print(f"flow balance (F): max pointwise residual {pointwise:.3e} "
          f"{'PASS' if pointwise < POINTWISE_TOL else 'FAIL'}")

    worst_f = 0.0
    for _ in range(5):
        pf = TabularForward.random(env, rng, scale=0.3)
        sol = oracle.solution_flow_table(env, pf, pb)
        exp = oracle.forward_pair_expectations(env, pf, pb, sol)
        worst_f = max(worst_f, max(abs(e) for e in exp.values()))
    ok &= worst_f < VERIFY_TOL
    print(f"flow balance (F): max solved-flow pair expectation {worst_f:.3e} "
          f"{'PASS' if worst_f < VERIFY_TOL else 'FAIL'}")

    gap_w, w = oracle.check_backward_balance(env, pb)
    ok &= gap_w < VERIFY_TOL
    print(f"backward evaluation balance (W): max pair expectation {gap_w:.3e} "
          f"{'PASS' if gap_w < VERIFY_TOL else 'FAIL'}")

    worst_w = 0.0
    lz = oracle.log_z_star(env)
    for _ in range(2):
        pf = TabularForward.random(env, rng, scale=0.3)
        table = oracle.dp_w_dagger(env, pf, pb)
        visit = oracle.state_visit_probs(env, pf)
        for s in env.enumerate_states():
            if s == env.initial_state():
                continue
            want = lz + np.log(visit[s]) - oracle.prefix_kl(env, pf, pb, s, visit)
            worst_w = max(worst_w, abs(table.values[s] - want))
    ok &= worst_w < VERIFY_TOL
    print(f"backward evaluation balance (W): max divergence-identity gap "
          f"{worst_w:.3e} {'PASS' if worst_w < VERIFY_TOL else 'FAIL'}")

    return EXIT_OK if ok else EXIT_RUNTIME


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "oracle": cmd_oracle,
        "verify": cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except EnumerationCapError as err:
        print(f"capability error: {err}", file=sys.stderr)
        return EXIT_CAPABILITY
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
