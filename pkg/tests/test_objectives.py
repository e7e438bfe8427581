import math

import numpy as np
import pytest

from subflow import oracle
from subflow.envs import Hypergrid, SequenceEnv, State
from subflow.objectives import (
    NonFiniteResidual,
    WeightScheme,
    loss_lambda_td,
    loss_weighted,
    residual_subeb,
    residual_subeb_backward,
    residual_subtb,
    subtrajectory_pairs,
)
from subflow.policies import BackwardPolicy, PolicyBundle, TabularForward, build_bundle
from subflow.sampler import sample_backward, sample_forward

from util import TableNet, ValueShim, table_bundle, traj_from_record


def make_trajs(env, pf, pb, k=16, seed=0):
    return sample_forward(env, pf, pb, k, seed=seed)


def test_pair_enumeration():
    env = Hypergrid(2, 1)
    pf = TabularForward.uniform(env)
    pb = BackwardPolicy(env)
    trajs = make_trajs(env, pf, pb, k=32, seed=1)
    for t in trajs:
        pairs = subtrajectory_pairs(t)
        n = t.n_edges
        assert len(pairs) == n * (n + 1) // 2
        if n == 1:
            assert pairs == [(0, 1)]
        if n == 3:
            assert len(pairs) == 6


def test_weight_scheme_mass_and_values():
    ws = WeightScheme(0.9)
    for n in (1, 2, 5, 11):
        _, _, w = ws.pairs_for(n)
        assert abs(w.sum() - 1.0) < 1e-12
        assert np.all(w > 0)
    i, j, w = WeightScheme(1.0).pairs_for(2)
    assert np.allclose(w, 1 / 3)
    assert sorted(zip(i, j)) == [(0, 1), (0, 2), (1, 2)]
    with pytest.raises(ValueError):
        WeightScheme(0.0)
    with pytest.raises(ValueError):
        WeightScheme(0.9, "everything")


def test_edges_only_is_db_and_full_only_is_tb():
    env = Hypergrid(3, 2)
    pb = BackwardPolicy(env)
    pf_star = oracle.optimal_forward_policy(env, pb)
    rng = np.random.default_rng(0)
    logf = {s: float(rng.standard_normal()) for s in env.enumerate_states()}
    bundle = table_bundle(env, pf_star.table, {"logf": logf})
    recs = oracle.enumerate_trajectories(env, pf=pf_star, pb=pb)
    trajs = [traj_from_record(env, r, pf_star, pb) for r in recs[:6]]
    shim = ValueShim(logf)

    rep = loss_weighted(env, bundle, trajs, "subtb", WeightScheme(0.9, "edges_only"))
    want = np.mean(
        [
            sum(
                residual_subtb(env, t, h, h + 1, shim) ** 2
                for h in range(t.n_edges)
            )
            for t in trajs
        ]
    )
    assert rep.loss == pytest.approx(want, rel=1e-12)

    rep = loss_weighted(env, bundle, trajs, "subtb", WeightScheme(0.9, "full_only"))
    want = np.mean(
        [residual_subtb(env, t, 0, t.n_edges, shim) ** 2 for t in trajs]
    )
    assert rep.loss == pytest.approx(want, rel=1e-12)


def test_subtb_residuals_vanish_at_optimum():
    env = Hypergrid(3, 2)
    pb = BackwardPolicy(env)
    flows = oracle.dp_true_flow(env, pb)
    pf_star = oracle.optimal_forward_policy(env, pb)
    shim = ValueShim(flows.log_flow)
    for rec in oracle.enumerate_trajectories(env, pf=pf_star, pb=pb):
        traj = traj_from_record(env, rec, pf_star, pb)
        for (i, j) in subtrajectory_pairs(traj):
            assert abs(residual_subtb(env, traj, i, j, shim)) < 1e-10


def test_subtb_loss_and_grads_zero_at_optimum():
    env = Hypergrid(3, 2)
    pb = BackwardPolicy(env)
    flows = oracle.dp_true_flow(env, pb)
    pf_star = oracle.optimal_forward_policy(env, pb)
    bundle = table_bundle(env, pf_star.table, {"logf": flows.log_flow})
    trajs = make_trajs(env, pf_star, pb, k=12, seed=3)
    bundle.zero_grads()
    rep = loss_weighted(env, bundle, trajs, "subtb", WeightScheme(0.9))
    assert rep.loss < 1e-20
    assert bundle.grad_norm("theta") < 1e-10
    assert bundle.grad_norm("phi") == 0.0


def test_subtb_full_pair_identity_on_shortest_trajectory():
    # immediate termination: the only pair's residual is
    # log pi_F(s_f|s0) + log F(s0) - log R(s0)
    env = Hypergrid(2, 1)
    pf = TabularForward.uniform(env)
    pb = BackwardPolicy(env)
    logf = {s: 0.4 for s in env.enumerate_states()}
    rec = next(r for r in oracle.enumerate_trajectories(env, pf=pf, pb=pb)
               if r.n_edges == 1)
    traj = traj_from_record(env, rec, pf, pb)
    got = residual_subtb(env, traj, 0, 1, ValueShim(logf))
    s0 = env.initial_state()
    want = float(pf.log_probs(s0)[env.terminate_action]) + 0.4 - env.log_reward(s0)
    assert got == pytest.approx(want, abs=1e-12)


def test_doubling_flow_shifts_terminal_pairs_only():
    env = Hypergrid(3, 2)
    pb = BackwardPolicy(env)
    pf = TabularForward.uniform(env)
    rng = np.random.default_rng(1)
    logf = {s: float(rng.standard_normal()) for s in env.enumerate_states()}
    doubled = {s: v + math.log(2) for s, v in logf.items()}
    rec = max(oracle.enumerate_trajectories(env, pf=pf, pb=pb), key=lambda r: r.n_edges)
    traj = traj_from_record(env, rec, pf, pb)
    for (i, j) in subtrajectory_pairs(traj):
        base = residual_subtb(env, traj, i, j, ValueShim(logf))
        bumped = residual_subtb(env, traj, i, j, ValueShim(doubled))
        if j == traj.n_edges:
            assert bumped - base == pytest.approx(math.log(2), abs=1e-12)
        else:
            assert bumped - base == pytest.approx(0.0, abs=1e-12)


def test_subeb_trivial_identities():
    env = Hypergrid(2, 2)
    pf = TabularForward.uniform(env)
    pb = BackwardPolicy(env)
    # find a trajectory passing s0 -> (0,1) -> (1,1): P_F of the middle edge
    # is 1/2 (two valid actions) and P_B is 1/2 (two parents)
    recs = oracle.enumerate_trajectories(env, pf=pf, pb=pb)
    rec = next(
        r
        for r in recs
        if [s.cells for s in r.states[:3]] == [(0, 0), (0, 1), (1, 1)]
    )
    traj = traj_from_record(env, rec, pf, pb)
    const = ValueShim({s: 0.7 for s in env.enumerate_states()})
    assert residual_subeb(env, traj, 1, 2, const) == pytest.approx(0.0, abs=1e-12)


def test_subeb_expectations_vanish_with_exact_values():
    env = Hypergrid(3, 2)
    pb = BackwardPolicy(env)
    rng = np.random.default_rng(2)
    pf = TabularForward.random(env, rng, scale=0.4)
    v = oracle.dp_v_dagger(env, pf, pb)
    exp = oracle.forward_pair_expectations(env, pf, pb, v.values)
    assert max(abs(e) for e in exp.values()) < 1e-9


def test_subeb_monte_carlo_pair_means():
    env = Hypergrid(3, 2)
    pb = BackwardPolicy(env)
    pf = TabularForward.uniform(env)
    v = oracle.dp_v_dagger(env, pf, pb)
    shim = ValueShim(v.values)
    n = 100_000
    trajs = sample_forward(env, pf, pb, n, seed=11)
    sums = {}
    sqs = {}
    counts = {}
    H = env.horizon_bound
    for t in trajs:
        for i in range(min(t.n_edges, H + 1)):
            for j in range(i + 1, H + 2):
                jj = min(j, t.n_edges)
                d = residual_subeb(env, t, i, jj, shim)
                sums[(i, j)] = sums.get((i, j), 0.0) + d
                sqs[(i, j)] = sqs.get((i, j), 0.0) + d * d
                counts[(i, j)] = counts.get((i, j), 0) + 1
    # every pair mean is consistent with zero (residual spreads are O(1),
    # so rare pairs carry standard errors near the 0.01 bar)
    lam_weights = {}
    for k, s in sums.items():
        c = counts[k]
        m = s / c
        sd = math.sqrt(max(sqs[k] / c - m * m, 0.0))
        assert abs(m) < max(0.01, 4.0 * sd / math.sqrt(c)), k
        lam_weights[k] = 0.9 ** (k[1] - k[0])
    # and the lambda-weighted aggregate clears the bar outright
    total_w = sum(lam_weights.values())
    agg = sum(lam_weights[k] * sums[k] / counts[k] for k in sums) / total_w
    assert abs(agg) < 0.01


def test_subeb_backward_terminal_pair_reduction():
    env = SequenceEnv(3, 2)
    pb = BackwardPolicy(env)
    pf = TabularForward.uniform(env)
    rng = np.random.default_rng(3)
    w_table = {s: float(rng.standard_normal()) for s in env.enumerate_states()}
    xs = [s for s in env.enumerate_states() if env.can_terminate(s)]
    trajs = sample_backward(env, pf, pb, xs[:4], seed=5)
    for t in trajs:
        n = t.n_edges
        got = residual_subeb_backward(env, t, n - 1, n, ValueShim(w_table))
        want = w_table[t.terminal_state] - t.log_reward
        assert got == pytest.approx(want, abs=1e-12)


def test_subeb_backward_zero_at_joint_optimum():
    env = SequenceEnv(3, 2)
    pb = BackwardPolicy(env)
    flows = oracle.dp_true_flow(env, pb)
    pf_star = oracle.optimal_forward_policy(env, pb)
    shim = ValueShim(flows.log_flow)
    xs = [s for s in env.enumerate_states() if env.can_terminate(s)]
    trajs = sample_backward(env, pf_star, pb, xs, seed=6)
    for t in trajs:
        for (i, j) in subtrajectory_pairs(t):
            assert abs(residual_subeb_backward(env, t, i, j, shim)) < 1e-10


def test_backward_expectations_vanish_with_exact_values():
    env = SequenceEnv(3, 2)
    pb = BackwardPolicy(env)
    gap, w = oracle.check_backward_balance(env, pb)
    assert gap < 1e-9


def test_loss_single_pair_arithmetic():
    env = Hypergrid(2, 1)
    pf = TabularForward.uniform(env)
    pb = BackwardPolicy(env)
    rng = np.random.default_rng(4)
    logf = {s: float(rng.standard_normal()) for s in env.enumerate_states()}
    bundle = table_bundle(env, pf.table, {"logf": logf})
    recs = oracle.enumerate_trajectories(env, pf=pf, pb=pb)
    traj = traj_from_record(env, recs[0], pf, pb)
    rep = loss_weighted(env, bundle, [traj], "subtb", WeightScheme(0.9, "full_only"))
    r = residual_subtb(env, traj, 0, traj.n_edges, ValueShim(logf))
    assert rep.loss == pytest.approx(r * r, rel=1e-12)


def test_gradient_routing():
    env = Hypergrid(3, 2)
    rng = np.random.default_rng(5)
    for kind, workflow, extra in [
        ("subeb", "online_pg", {}),
        ("subtb", "subtb", {}),
        ("subeb_backward", "offline_pg", {}),
    ]:
        bundle = build_bundle(env, workflow, hidden=6, depth=1, rng=rng,
                              backward="learned")
        trajs = make_trajs(env, bundle.pf, bundle.pb, k=6, seed=7)
        bundle.zero_grads()
        rep = loss_weighted(env, bundle, trajs, kind, WeightScheme(0.9))
        assert rep.loss >= 0.0
        zero = {n for n, h in bundle.heads.items() if np.all(h.grad == 0.0)}
        if kind == "subeb":
            assert {"pf"} <= zero and "v" not in zero and "pb" not in zero
        elif kind == "subtb":
            assert "pf" not in zero and "logf" not in zero and "pb" not in zero
        else:
            assert {"pb"} <= zero and "w" not in zero and "pf" not in zero


def test_lambda_td_routing_leaves_backward_fixed():
    env = Hypergrid(3, 2)
    rng = np.random.default_rng(6)
    bundle = build_bundle(env, "online_pg", hidden=6, depth=1, rng=rng,
                          backward="learned")
    trajs = make_trajs(env, bundle.pf, bundle.pb, k=6, seed=8)
    bundle.zero_grads()
    loss_lambda_td(env, bundle, trajs, 0.9)
    assert np.all(bundle.heads["pb"].grad == 0.0)
    assert np.all(bundle.heads["pf"].grad == 0.0)
    assert not np.all(bundle.heads["v"].grad == 0.0)


def test_lambda_td_zero_truncation_is_one_step_td():
    env = Hypergrid(3, 2)
    pf = TabularForward.uniform(env)
    pb = BackwardPolicy(env)
    rng = np.random.default_rng(7)
    v_table = {s: float(rng.standard_normal()) for s in env.enumerate_states()}
    bundle = table_bundle(env, pf.table, {"v": v_table})
    recs = oracle.enumerate_trajectories(env, pf=pf, pb=pb)
    traj = traj_from_record(env, max(recs, key=lambda r: r.n_edges), pf, pb)
    rep = loss_lambda_td(env, bundle, [traj], lam=1e-12)
    shim = ValueShim(v_table)
    n = traj.n_edges
    vals = [v_table[s] for s in traj.states[:-1]] + [0.0]
    for h in range(n):
        # one-step target: V(s_h) + (edge reward + V(s_{h+1}) - V(s_h))
        td = -residual_subeb(env, traj, h, h + 1, shim)
        assert rep.residuals[0][h] == pytest.approx(td, rel=1e-6, abs=1e-9)


def test_lambda_td_zero_loss_when_edges_balance():
    env = Hypergrid(3, 2)
    pb = BackwardPolicy(env)
    flows = oracle.dp_true_flow(env, pb)
    pf_star = oracle.optimal_forward_policy(env, pb)
    bundle = table_bundle(env, pf_star.table, {"v": flows.log_flow})
    trajs = make_trajs(env, pf_star, pb, k=8, seed=9)
    bundle.zero_grads()
    rep = loss_lambda_td(env, bundle, trajs, 0.9)
    assert rep.loss < 1e-20
    assert bundle.grad_norm("phi") < 1e-10


def test_lambda_td_expected_gradient_small_with_exact_values():
    env = Hypergrid(3, 2)
    pb = BackwardPolicy(env)
    pf = TabularForward.uniform(env)
    v = oracle.dp_v_dagger(env, pf, pb)
    bundle = table_bundle(env, pf.table, {"v": v.values})
    trajs = sample_forward(env, pf, pb, 20_000, seed=12)
    bundle.zero_grads()
    loss_lambda_td(env, bundle, trajs, 0.9)
    assert bundle.grad_norm("phi") < 0.05


def test_nonfinite_residual_reports_location():
    env = Hypergrid(3, 2)
    rng = np.random.default_rng(8)
    bundle = build_bundle(env, "subtb", hidden=4, depth=1, rng=rng)
    trajs = make_trajs(env, bundle.pf, bundle.pb, k=3, seed=10)
    trajs[1].log_pf[0] = np.nan
    with pytest.raises(NonFiniteResidual) as err:
        loss_weighted(env, bundle, trajs, "subtb", WeightScheme(0.9))
    assert err.value.traj_index == 1


def test_residual_index_validation():
    env = Hypergrid(2, 1)
    pf = TabularForward.uniform(env)
    pb = BackwardPolicy(env)
    traj = traj_from_record(env, oracle.enumerate_trajectories(env, pf=pf, pb=pb)[0],
                            pf, pb)
    shim = ValueShim({s: 0.0 for s in env.enumerate_states()})
    with pytest.raises(ValueError):
        residual_subeb(env, traj, 0, traj.n_edges + 1, shim)
    with pytest.raises(ValueError):
        residual_subeb(env, traj, 1, 1, shim)


def test_loss_weighted_empty_batch_rejected():
    env = Hypergrid(2, 1)
    bundle = build_bundle(env, "subtb", hidden=4, depth=1)
    with pytest.raises(ValueError):
        loss_weighted(env, bundle, [], "subtb", WeightScheme(0.9))
    with pytest.raises(ValueError):
        loss_weighted(env, bundle, [], "nope", WeightScheme(0.9))


def test_batched_loss_matches_single_pair_route():
    # the production batched path against the simple per-pair helpers
    env = Hypergrid(3, 2)
    rng = np.random.default_rng(13)
    pb = BackwardPolicy(env)
    pf = TabularForward.random(env, rng, scale=0.3)
    v_table = {s: float(rng.standard_normal()) for s in env.enumerate_states()}
    bundle = table_bundle(env, pf.table, {"v": v_table})
    trajs = make_trajs(env, pf, pb, k=10, seed=14)
    rep = loss_weighted(env, bundle, trajs, "subeb", WeightScheme(0.8))
    shim = ValueShim(v_table)
    ws = WeightScheme(0.8)
    want = 0.0
    for t in trajs:
        i, j, w = ws.pairs_for(t.n_edges)
        want += sum(
            wk * residual_subeb(env, t, int(ik), int(jk), shim) ** 2
            for ik, jk, wk in zip(i, j, w)
        )
    want /= len(trajs)
    assert rep.loss == pytest.approx(want, rel=1e-12)
