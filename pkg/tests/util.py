"""Shared test helpers: table-backed heads and trajectory builders."""

from __future__ import annotations

import numpy as np

from subflow.envs import Env
from subflow.policies import EvalHead, ForwardPolicy, PolicyBundle
from subflow.sampler import Trajectory


class TableNet:
    """A lookup 'network' whose parameters are the table entries themselves.

    Rows are keyed by the encoded state bytes; gradients accumulate the
    upstream signal per entry, so zero residuals must produce zero grads.
    Lets exact oracle tables ride through the production loss/actor paths.
    """

    def __init__(self, env: Env, rows: dict[bytes, np.ndarray], out_width: int):
        self.env = env
        self.widths = [env.encoding_width, out_width]
        self._index = {key: i for i, key in enumerate(rows)}
        self.params = np.concatenate([rows[k] for k in rows]).astype(float)
        self.grad = np.zeros_like(self.params)
        self.out_width_ = out_width

    @classmethod
    def from_state_table(cls, env, table: dict, out_width: int):
        rows = {}
        for state, value in table.items():
            key = env.encode(state).tobytes()
            rows[key] = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(env, rows, out_width)

    @property
    def in_width(self):
        return self.widths[0]

    @property
    def out_width(self):
        return self.out_width_

    def zero_grad(self):
        self.grad[:] = 0.0

    def _rows(self, x):
        return np.array([self._index[np.asarray(r).tobytes()] for r in x])

    def forward_cached(self, x):
        rows = self._rows(x)
        w = self.out_width_
        out = np.stack([self.params[r * w : (r + 1) * w] for r in rows])
        return out, rows

    def forward_many(self, x):
        return self.forward_cached(x)[0]

    def forward(self, x):
        return self.forward_many(np.asarray(x)[None, :])[0]

    def backward_cached(self, cache, upstream):
        w = self.out_width_
        for r, u in zip(cache, np.asarray(upstream)):
            self.grad[r * w : (r + 1) * w] += u
        return np.zeros((len(cache), self.in_width))


def table_bundle(env, pf_table, heads_tables):
    """Bundle whose forward policy and eval heads are exact tables.

    ``pf_table`` maps state -> log-prob row (acts as logits: the masked
    softmax of an already-normalized row reproduces it exactly).
    ``heads_tables`` maps head name ('v', 'w', 'logf') -> state -> value.
    """
    heads = {"pf": TableNet.from_state_table(env, pf_table, env.action_count)}
    for name, table in heads_tables.items():
        heads[name] = TableNet.from_state_table(env, table, 1)
    return PolicyBundle(env, heads)


class ValueShim:
    """Minimal EvalHead stand-in for the single-pair residual helpers."""

    def __init__(self, table):
        self.table = table

    def value(self, state):
        return float(self.table[state])

    def values_many(self, states):
        return np.array([self.table[s] for s in states])


def traj_from_record(env, rec, pf, pb) -> Trajectory:
    """Build a sampler-compatible Trajectory from an enumeration record,
    with log-prob caches filled from the given policies."""
    n = rec.n_edges
    log_pf = np.array(
        [float(pf.log_probs(rec.states[t])[rec.actions[t]]) for t in range(n)]
    )
    log_pb = np.zeros(n)
    for t in range(n - 1):
        log_pb[t] = float(pb.log_parent_probs(rec.states[t + 1])[rec.actions[t]])
    x = rec.terminal_state
    return Trajectory(
        states=list(rec.states),
        actions=list(rec.actions),
        log_pf=log_pf,
        log_pb=log_pb,
        terminal_reward=env.reward(x),
        log_reward=env.log_reward(x),
        encodings=env.encode_many(rec.states[:-1]),
    )


def exact_estimator_expectation(env, pf, pb, fn):
    """Sum over all trajectories of P_F(tau) * fn(single-trajectory batch).

    ``fn`` maps a one-trajectory list to a flat gradient vector; the result
    is the exact expectation of the Monte Carlo estimator.
    """
    from subflow import oracle

    total = None
    for rec in oracle.enumerate_trajectories(env, pf=pf, pb=pb):
        traj = traj_from_record(env, rec, pf, pb)
        g = fn([traj])
        w = np.exp(rec.log_pf)
        total = w * g if total is None else total + w * g
    return total
