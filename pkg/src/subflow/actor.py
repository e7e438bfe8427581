"""Policy-gradient estimators for the forward and backward policies.

Advantages are discounted sums of TD residuals computed from the sampler's
cached log-probs; the score terms use fresh forward passes through the
policy nets. Both estimators are strictly on-policy: a batch whose cached
log-probs have drifted from the current parameters is rejected. No
importance weighting is applied anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .objectives import _edge_terms_forward, _policy_grad_upstream
from .policies import PolicyBundle, masked_log_softmax
from .sampler import Trajectory

STALENESS_TOL = 1e-9


class StalePolicyError(RuntimeError):
    """Cached sampling log-probs no longer match the current policy."""


@dataclass
class GradEstimate:
    """Monte Carlo gradient estimate, one flat vector per head."""

    grads: dict[str, np.ndarray]
    sample_count: int
    mean_abs_advantage: float

    def norm(self) -> float:
        return math.sqrt(sum(float(np.dot(g, g)) for g in self.grads.values()))


def _discounted_suffix(d: np.ndarray, gamma: float) -> np.ndarray:
    """out[h] = sum_{i >= h} gamma^(i-h) d[i]."""
    out = np.zeros_like(d)
    acc = 0.0
    for t in range(len(d) - 1, -1, -1):
        acc = d[t] + gamma * acc
        out[t] = acc
    return out


def _discounted_prefix(d: np.ndarray, gamma: float) -> np.ndarray:
    """out[h] = sum_{i <= h} gamma^(h-i) d[i]."""
    out = np.zeros_like(d)
    acc = 0.0
    for t in range(len(d)):
        acc = d[t] + gamma * acc
        out[t] = acc
    return out


def _forward_tds(traj: Trajectory, vals: np.ndarray, log_z: float) -> np.ndarray:
    r = _edge_terms_forward(traj, traj.log_pb, log_z)
    nxt = np.concatenate([vals[1:], [0.0]])
    return r + nxt - vals


def advantage_forward(env, traj: Trajectory, h: int, v_head, gamma: float,
                      log_z: float = 0.0) -> float:
    """A^gamma for the edge leaving position h: discounted TD residuals from
    h to the end of the trajectory (the last one anchored by log R(x))."""
    if not 0 <= h < traj.n_edges:
        raise ValueError(f"edge index {h} out of range")
    vals = v_head.values_many(traj.states[:-1])
    td = _forward_tds(traj, vals, log_z)
    return float(_discounted_suffix(td, gamma)[h])


def advantage_backward(env, traj: Trajectory, h: int, w_head, gamma: float) -> float:
    """Mirror advantage, accumulated from the start of the trajectory to h
    over interior edges only."""
    if not 0 <= h < traj.n_edges - 1:
        raise ValueError(f"interior edge index {h} out of range")
    vals = w_head.values_many(traj.states[:-1])
    r = traj.log_pf[:-1] - traj.log_pb[:-1]
    td = r + vals[:-1] - vals[1:]
    return float(_discounted_prefix(td, gamma)[h])


def _check_fresh(cached: np.ndarray, fresh: np.ndarray, what: str):
    drift = float(np.max(np.abs(cached - fresh))) if len(cached) else 0.0
    if drift > STALENESS_TOL:
        raise StalePolicyError(
            f"{what} drifted by {drift:.3e} since sampling; the estimator is on-policy only"
        )


def _isolated_backward(net, cache, upstream) -> np.ndarray:
    saved = net.grad.copy()
    net.grad[:] = 0.0
    net.backward_cached(cache, upstream)
    est = net.grad.copy()
    net.grad[:] = saved
    return est


def grad_actor_forward(env, bundle: PolicyBundle, trajs: list[Trajectory],
                       gamma: float) -> GradEstimate:
    """Estimator of the gradient of the exact evaluation at s0 w.r.t. theta;
    the trainer applies its negation to descend the KL surrogate."""
    if bundle.v is None:
        raise ValueError("forward actor needs the V head")
    K = len(trajs)
    enc = np.concatenate([t.encodings for t in trajs])
    states = [s for t in trajs for s in t.states[:-1]]
    actions = np.array([a for t in trajs for a in t.actions])
    logits, cache = bundle.pf.net.forward_cached(enc)
    masks = bundle.pf.action_masks(states)
    log_probs = masked_log_softmax(logits, masks)
    rows = np.arange(len(actions))
    _check_fresh(
        np.concatenate([t.log_pf for t in trajs]), log_probs[rows, actions], "log_pf"
    )
    vals_flat = bundle.v.values_many(states)
    log_z = bundle.log_z

    coef = np.zeros(len(actions))
    off = 0
    adv_mass = 0.0
    for traj in trajs:
        n = traj.n_edges
        td = _forward_tds(traj, vals_flat[off : off + n], log_z)
        adv = _discounted_suffix(td, gamma)
        coef[off : off + n] = adv
        adv_mass += float(np.abs(adv).sum())
        off += n
    upstream, _ = _policy_grad_upstream(logits, masks, rows, actions, coef / K)
    est = _isolated_backward(bundle.pf.net, cache, upstream)
    return GradEstimate(
        grads={"pf": est},
        sample_count=K,
        mean_abs_advantage=adv_mass / max(1, len(actions)),
    )


def grad_actor_backward(env, bundle: PolicyBundle, trajs: list[Trajectory],
                        gamma: float) -> GradEstimate:
    """Estimator of the gradient of the expected terminal backward
    evaluation w.r.t. phi; the trainer ascends it."""
    if bundle.w is None:
        raise ValueError("backward actor needs the W head")
    K = len(trajs)
    if not bundle.pb.learned:
        return GradEstimate(grads={}, sample_count=K, mean_abs_advantage=0.0)
    children = [s for t in trajs for s in t.states[1:-1]]
    if not children:
        return GradEstimate(grads={}, sample_count=K, mean_abs_advantage=0.0)
    enc = np.concatenate([t.encodings[1:] for t in trajs])
    actions = np.array([a for t in trajs for a in t.actions[:-1]])
    logits, cache = bundle.pb.net.forward_cached(enc)
    masks = bundle.pb.parent_masks(children)
    log_probs = masked_log_softmax(logits, masks)
    rows = np.arange(len(actions))
    _check_fresh(
        np.concatenate([t.log_pb[:-1] for t in trajs]),
        log_probs[rows, actions],
        "log_pb",
    )
    states = [s for t in trajs for s in t.states[:-1]]
    vals_flat = bundle.w.values_many(states)

    coef = np.zeros(len(actions))
    off_edges = 0
    off_states = 0
    adv_mass = 0.0
    count = 0
    for traj in trajs:
        n = traj.n_edges
        vals = vals_flat[off_states : off_states + n]
        r = traj.log_pf[:-1] - traj.log_pb[:-1]
        td = r + vals[:-1] - vals[1:]
        adv = _discounted_prefix(td, gamma)
        coef[off_edges : off_edges + n - 1] = adv
        adv_mass += float(np.abs(adv).sum())
        count += n - 1
        off_edges += n - 1
        off_states += n
    upstream, _ = _policy_grad_upstream(logits, masks, rows, actions, coef / K)
    est = _isolated_backward(bundle.pb.net, cache, upstream)
    return GradEstimate(
        grads={"pb": est},
        sample_count=K,
        mean_abs_advantage=adv_mass / max(1, count),
    )


def grad_logz(env, bundle: PolicyBundle, trajs: list[Trajectory]) -> GradEstimate:
    """Coefficient on the total-flow estimate's gradient: the batch-mean sum
    of edge rewards (which uses R(x)/Z at the terminal edge)."""
    if bundle.logz is None:
        raise ValueError("no total-flow head is active")
    log_z = bundle.log_z
    total = 0.0
    for traj in trajs:
        r = _edge_terms_forward(traj, traj.log_pb, log_z)
        total += float(r.sum())
    coef = total / len(trajs)
    return GradEstimate(
        grads={"logz": np.array([coef])},
        sample_count=len(trajs),
        mean_abs_advantage=abs(coef),
    )
