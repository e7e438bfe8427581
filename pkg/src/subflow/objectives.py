"""Balance residuals over subtrajectories and their weighted squared losses.

One batched engine serves the three residual kinds. For a realized
trajectory with n edges (states z_0 .. z_{n-1}, then the sink), a pair
(i, j) has residual

    delta = val[i] - val[j] - sum_{t in [i, j)} r_t

where ``val`` is the candidate state function with the sink slot pinned by
the terminal convention and ``r_t`` is the per-edge log target-over-forward
mass. Gradient routing respects parameter ownership: the evaluation
objectives treat the frozen policy's log-probs as constants, using the
sampler's caches, while everything that owns gradient gets a fresh forward
pass through its network.

    subtb            val = log F, sink 0, theta-side: log F, pi_F (+ pi_B)
    subeb            val = V,     sink 0, phi-side:   V (+ pi_B)
    subeb_backward   val = W,     sink log R(x), theta-side: W, pi_F

The backward kind anchors pairs that end at the sink directly to log R(x)
(the terminating edge itself carries no policy mass), matching the graded
reduction of the terminal condition E[W(x) - log R(x)] = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .policies import PolicyBundle, masked_log_softmax
from .sampler import Trajectory

KINDS = ("subtb", "subeb", "subeb_backward")


class NonFiniteResidual(RuntimeError):
    def __init__(self, traj_index, i, j):
        super().__init__(
            f"non-finite residual on trajectory {traj_index}, pair ({i}, {j})"
        )
        self.traj_index = traj_index
        self.pair = (i, j)


@dataclass
class WeightScheme:
    """Subtrajectory weights; the geometric scheme normalizes per trajectory
    so each trajectory's weights sum to one regardless of its length."""

    lam: float = 0.9
    kind: str = "subtb_geometric"

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("lambda must lie in (0, 1]")
        if self.kind not in ("subtb_geometric", "edges_only", "full_only"):
            raise ValueError(f"unknown weight scheme {self.kind!r}")

    def pairs_for(self, n_edges: int):
        return _pair_table(self.kind, self.lam, n_edges)


@lru_cache(maxsize=None)
def _pair_table(kind, lam, n):
    """(i, j, w) arrays for a trajectory with n edges; zero-weight pairs
    are dropped so edges_only reduces to DB and full_only to TB."""
    if kind == "edges_only":
        i = np.arange(n)
        return i, i + 1, np.ones(n)
    if kind == "full_only":
        return np.array([0]), np.array([n]), np.ones(1)
    i, j = np.triu_indices(n + 1, k=1)
    w = lam ** (j - i)
    return i, j, w / w.sum()


def subtrajectory_pairs(traj: Trajectory) -> list[tuple[int, int]]:
    """All (i, j) with 0 <= i < j <= n for the realized length n; the
    sink-terminated index is included as j = n."""
    n = traj.n_edges
    return [(i, j) for i in range(n) for j in range(i + 1, n + 1)]


def _edge_terms_forward(traj: Trajectory, log_pb, log_z: float) -> np.ndarray:
    """r_t = log pi_B - log pi_F, with log R - log Z - log pi_F at the end."""
    r = log_pb - traj.log_pf
    r[-1] = traj.log_reward - log_z - traj.log_pf[-1]
    return r


def _edge_terms_backward(traj: Trajectory, log_pf) -> np.ndarray:
    """Interior r_t only; the terminating pseudo-edge contributes nothing."""
    r = traj.log_pb - log_pf
    r[-1] = 0.0
    return r


def _pair_residuals(vals, end_val, r, i, j):
    csum = np.concatenate([[0.0], np.cumsum(r)])
    v = np.concatenate([vals, [end_val]])
    return v[i] - v[j] - (csum[j] - csum[i])


def residual_generic(env, traj, i, j, kind, values_fn, log_pf=None, log_pb=None,
                     log_z=0.0):
    """Single-pair residual; the batched path below is the production route."""
    n = traj.n_edges
    if not 0 <= i < j <= n:
        raise ValueError(f"pair ({i}, {j}) out of range for {n} edges")
    log_pf = traj.log_pf if log_pf is None else log_pf
    log_pb = traj.log_pb if log_pb is None else log_pb
    vals = np.array([values_fn(s) for s in traj.states[:-1]])
    if kind == "subeb_backward":
        r = traj.log_pb - log_pf
        r[-1] = 0.0
        end = traj.log_reward
    else:
        r = log_pb - log_pf
        r[-1] = traj.log_reward - log_z - log_pf[-1]
        end = 0.0
    return float(_pair_residuals(vals, end, r, np.array([i]), np.array([j]))[0])


def residual_subtb(env, traj, i, j, logf_head, log_z=0.0):
    return residual_generic(env, traj, i, j, "subtb", logf_head.value, log_z=log_z)


def residual_subeb(env, traj, i, j, v_head, log_z=0.0):
    return residual_generic(env, traj, i, j, "subeb", v_head.value, log_z=log_z)


def residual_subeb_backward(env, traj, i, j, w_head):
    return residual_generic(env, traj, i, j, "subeb_backward", w_head.value)


@dataclass
class ResidualReport:
    loss: float
    pairs: list[np.ndarray]
    residuals: list[np.ndarray]
    grad_norms: dict[str, float] = field(default_factory=dict)


def _batch_layout(trajs):
    encodings = np.concatenate([t.encodings for t in trajs])
    offsets = np.cumsum([0] + [t.n_edges for t in trajs])
    return encodings, offsets


def _policy_grad_upstream(logits, masks, rows, actions, coefs):
    """Upstream on logits for sum_k coef_k * log softmax(logits[row_k])[a_k]."""
    log_probs = masked_log_softmax(logits, masks)
    upstream = np.zeros_like(logits)
    probs = np.where(masks, np.exp(log_probs), 0.0)
    np.add.at(upstream, (rows, actions), coefs)
    upstream -= probs * np.bincount(rows, weights=coefs, minlength=logits.shape[0])[:, None]
    return upstream, log_probs


def loss_weighted(env, bundle: PolicyBundle, trajs: list[Trajectory], kind: str,
                  scheme: WeightScheme) -> ResidualReport:
    """Weighted squared residual loss over a batch, with gradients
    accumulated into the owning heads only."""
    if kind not in KINDS:
        raise ValueError(f"unknown residual kind {kind!r}")
    if not trajs:
        raise ValueError("empty batch")
    K = len(trajs)
    enc, offsets = _batch_layout(trajs)

    if kind == "subtb":
        head = bundle.logf
    elif kind == "subeb":
        head = bundle.v
    else:
        head = bundle.w
    if head is None:
        raise ValueError(f"bundle lacks the head for kind {kind!r}")

    vals_flat, val_cache = head.net.forward_cached(enc)
    vals_flat = vals_flat[:, 0]

    pf_grads = kind in ("subtb", "subeb_backward")
    pb_grads = kind in ("subtb", "subeb") and bundle.pb.learned

    # fresh forward-policy log-probs wherever pi_F carries gradient
    if pf_grads:
        pf_logits, pf_cache = bundle.pf.net.forward_cached(enc)
        pf_masks = bundle.pf.action_masks([s for t in trajs for s in t.states[:-1]])
        actions_flat = np.array([a for t in trajs for a in t.actions])
        pf_logprob_rows = masked_log_softmax(pf_logits, pf_masks)
        rows = np.arange(len(actions_flat))
        log_pf_flat = pf_logprob_rows[rows, actions_flat]
    else:
        log_pf_flat = np.concatenate([t.log_pf for t in trajs])

    if pb_grads:
        children = [s for t in trajs for s in t.states[1:-1]]
        pb_logits, pb_cache = bundle.pb.net.forward_cached(
            np.concatenate([t.encodings[1:] for t in trajs])
        )
        pb_masks = bundle.pb.parent_masks(children)
        pb_actions = np.array([a for t in trajs for a in t.actions[:-1]])
        pb_rows = np.arange(len(pb_actions))
        pb_logprob_rows = masked_log_softmax(pb_logits, pb_masks)
        log_pb_interior = pb_logprob_rows[pb_rows, pb_actions]
    else:
        log_pb_interior = None

    loss = 0.0
    val_coef = np.zeros(len(vals_flat))
    pf_coef = np.zeros(len(vals_flat)) if pf_grads else None
    pb_coef_chunks = [] if pb_grads else None
    all_pairs, all_res = [], []
    log_z = bundle.log_z
    pb_off = 0
    for k, traj in enumerate(trajs):
        n = traj.n_edges
        lo = offsets[k]
        vals = vals_flat[lo : lo + n]
        log_pf = log_pf_flat[lo : lo + n]
        if pb_grads:
            log_pb = np.concatenate([log_pb_interior[pb_off : pb_off + n - 1], [0.0]])
        else:
            log_pb = traj.log_pb
        if kind == "subeb_backward":
            r = _edge_terms_backward(traj, log_pf)
            end_val = traj.log_reward
        else:
            r = _edge_terms_forward(traj, log_pb, log_z)
            end_val = 0.0
        i, j, w = scheme.pairs_for(n)
        delta = _pair_residuals(vals, end_val, r, i, j)
        if not np.all(np.isfinite(delta)):
            bad = int(np.flatnonzero(~np.isfinite(delta))[0])
            raise NonFiniteResidual(k, int(i[bad]), int(j[bad]))
        loss += float(np.dot(w, delta**2))
        all_pairs.append(np.stack([i, j], axis=1))
        all_res.append(delta)

        # d loss / d val[k]: +2wd at i, -2wd at j (sink slot discarded)
        twd = 2.0 * w * delta
        vc = np.zeros(n + 1)
        np.add.at(vc, i, twd)
        np.add.at(vc, j, -twd)
        val_coef[lo : lo + n] += vc[:n]

        # d delta / d r_t = -1 for t in [i, j); range-add via prefix trick
        edge_coef = np.zeros(n + 1)
        np.add.at(edge_coef, i, -twd)
        np.add.at(edge_coef, j, twd)
        edge_coef = np.cumsum(edge_coef[:n])
        if kind == "subeb_backward":
            edge_coef[-1] = 0.0  # terminating pseudo-edge carries no mass
        if pf_grads:
            # d r_t / d log pi_F = -1 on every edge it covers
            pf_coef[lo : lo + n] += -edge_coef
        if pb_grads:
            pb_coef_chunks.append(edge_coef[: n - 1])
        pb_off += n - 1

    scale = 1.0 / K
    loss *= scale
    head.net.backward_cached(val_cache, (val_coef * scale)[:, None])
    if pf_grads:
        upstream, _ = _policy_grad_upstream(
            pf_logits, pf_masks, rows, actions_flat, pf_coef * scale
        )
        bundle.pf.net.backward_cached(pf_cache, upstream)
    if pb_grads and len(pb_actions):
        pb_coef = np.concatenate(pb_coef_chunks)
        upstream, _ = _policy_grad_upstream(
            pb_logits, pb_masks, pb_rows, pb_actions, pb_coef * scale
        )
        bundle.pb.net.backward_cached(pb_cache, upstream)

    return ResidualReport(
        loss=loss,
        pairs=all_pairs,
        residuals=all_res,
        grad_norms={
            "theta": bundle.grad_norm("theta"),
            "phi": bundle.grad_norm("phi"),
        },
    )


def loss_lambda_td(env, bundle: PolicyBundle, trajs: list[Trajectory],
                   lam: float) -> ResidualReport:
    """The lambda-TD critic baseline: per-state squared distance to
    lambda-decayed TD targets, targets held constant in gradients."""
    if not trajs:
        raise ValueError("empty batch")
    K = len(trajs)
    enc, offsets = _batch_layout(trajs)
    head = bundle.v
    if head is None:
        raise ValueError("lambda-TD needs the V head")
    vals_flat, cache = head.net.forward_cached(enc)
    vals_flat = vals_flat[:, 0]
    log_z = bundle.log_z

    loss = 0.0
    coef = np.zeros(len(vals_flat))
    all_pairs, all_res = [], []
    for k, traj in enumerate(trajs):
        n = traj.n_edges
        lo = offsets[k]
        vals = vals_flat[lo : lo + n]
        r = _edge_terms_forward(traj, traj.log_pb, log_z)
        nxt = np.concatenate([vals[1:], [0.0]])
        td = r + nxt - vals
        # G_h = sum_{i>=h} lam^{i-h} td_i; V^lam(s_h) = V(s_h) + G_h
        G = np.zeros(n)
        acc = 0.0
        for t in range(n - 1, -1, -1):
            acc = td[t] + lam * acc
            G[t] = acc
        if not np.all(np.isfinite(G)):
            bad = int(np.flatnonzero(~np.isfinite(G))[0])
            raise NonFiniteResidual(k, bad, bad + 1)
        loss += float(np.dot(G, G))
        coef[lo : lo + n] += -2.0 * G
        all_pairs.append(np.stack([np.arange(n), np.arange(n) + 1], axis=1))
        all_res.append(G)
    scale = 1.0 / K
    loss *= scale
    head.net.backward_cached(cache, (coef * scale)[:, None])
    return ResidualReport(
        loss=loss,
        pairs=all_pairs,
        residuals=all_res,
        grad_norms={
            "theta": bundle.grad_norm("theta"),
            "phi": bundle.grad_norm("phi"),
        },
    )
