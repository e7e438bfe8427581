"""Trajectory samplers: on-policy forward, alpha-greedy offline, backward.

Randomness is counter-based and splittable: every trajectory draws from its
own generator keyed by (seed, stream, iteration, index), so batches are
reproducible bit-for-bit regardless of evaluation order. Policies are read
only during sampling; no parameter update may interleave with an in-flight
batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import Env, State

STREAM_FORWARD = 0
STREAM_OFFLINE = 1
STREAM_BACKWARD = 2


@dataclass
class SamplerConfig:
    batch_size: int = 128
    alpha: float = 1.0
    alpha_decay: float = 0.99
    rng_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 < self.alpha_decay <= 1.0:
            raise ValueError("alpha_decay must lie in (0, 1]")


def decay_alpha(config: SamplerConfig) -> float:
    """Exponential exploration decay; returns the updated alpha."""
    config.alpha *= config.alpha_decay
    return config.alpha


@dataclass
class Trajectory:
    """One realized path from the initial state to the sink.

    ``states`` runs s0 ... x, s_f and ``actions`` has one entry per edge,
    ending with the terminate action. ``log_pf`` caches the forward policy's
    log-probability of each realized action at sampling time; ``log_pb``
    caches the backward policy's mass of each interior edge, with 0.0 in the
    terminal slot (terminal backward mass is represented by the reward
    inside residuals, never by the policy).
    """

    states: list[State]
    actions: list[int]
    log_pf: np.ndarray
    log_pb: np.ndarray
    terminal_reward: float
    log_reward: float
    encodings: np.ndarray = field(repr=False, default=None)

    @property
    def n_edges(self) -> int:
        return len(self.actions)

    @property
    def terminal_state(self) -> State:
        return self.states[-2]


def trajectory_rng(seed: int, stream: int, iteration: int, index: int):
    ss = np.random.SeedSequence(entropy=(seed, stream, iteration, index))
    return np.random.Generator(np.random.Philox(ss))


def _draw(rng, probs):
    p = probs / probs.sum()
    idx = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return min(idx, len(p) - 1)


def validate_trajectory(env: Env, traj: Trajectory) -> None:
    """Assert the structural invariants; used on every batch in debug mode."""
    assert len(traj.states) == traj.n_edges + 1
    assert env.is_final(traj.states[-1])
    assert env.is_terminate(traj.actions[-1])
    for t, action in enumerate(traj.actions):
        assert traj.states[t + 1] == env.step(traj.states[t], action)
    assert traj.terminal_reward == env.reward(traj.terminal_state)
    assert len(traj.log_pf) == traj.n_edges and len(traj.log_pb) == traj.n_edges


def _finish(env, states_list, actions_list, logpf_list, pf, pb):
    """Assemble Trajectory objects and batch-fill the missing log-prob side."""
    trajs = []
    interior_children = []
    child_slots = []
    for k, states in enumerate(states_list):
        actions = actions_list[k]
        n = len(actions)
        x = states[-2]
        reward = env.reward(x)
        log_pb = np.zeros(n)
        for t in range(n - 1):
            interior_children.append(states[t + 1])
            child_slots.append((k, t, actions[t]))
        trajs.append(
            Trajectory(
                states=states,
                actions=actions,
                log_pf=np.asarray(logpf_list[k], dtype=float),
                log_pb=log_pb,
                terminal_reward=reward,
                log_reward=float(np.log(reward)),
                encodings=env.encode_many(states[:-1]),
            )
        )
    if interior_children:
        rows = pb.log_parent_probs_many(interior_children)
        for row, (k, t, action) in enumerate(child_slots):
            trajs[k].log_pb[t] = rows[row, action]
    return trajs


def sample_forward(env: Env, pf, pb, batch_size: int, seed: int, iteration: int = 0,
                   alpha: float = 0.0, stream: int | None = None):
    """Draw a batch of forward rollouts.

    With ``alpha`` > 0 this is the alpha-greedy offline collector: each
    transition follows a uniform policy with probability alpha and the
    forward policy otherwise, while ``log_pf`` always records the forward
    policy's log-probability of the realized action.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if stream is None:
        stream = STREAM_FORWARD if alpha == 0.0 else STREAM_OFFLINE
    rngs = [trajectory_rng(seed, stream, iteration, k) for k in range(batch_size)]
    s0 = env.initial_state()
    cur = [s0] * batch_size
    states_list = [[s0] for _ in range(batch_size)]
    actions_list = [[] for _ in range(batch_size)]
    logpf_list = [[] for _ in range(batch_size)]
    active = list(range(batch_size))
    for _ in range(env.horizon_bound + 2):
        if not active:
            break
        log_probs = pf.log_probs_many([cur[k] for k in active])
        still = []
        for row, k in enumerate(active):
            probs = np.exp(log_probs[row])
            if alpha > 0.0 and rngs[k].random() < alpha:
                uniform = (probs > 0).astype(float)
                action = _draw(rngs[k], uniform)
            else:
                action = _draw(rngs[k], probs)
            logpf_list[k].append(log_probs[row, action])
            actions_list[k].append(action)
            nxt = env.step(cur[k], action)
            states_list[k].append(nxt)
            cur[k] = nxt
            if not env.is_final(nxt):
                still.append(k)
        active = still
    if active:
        raise AssertionError("trajectory exceeded the horizon bound")
    return _finish(env, states_list, actions_list, logpf_list, pf, pb)


def sample_offline(env, pf, pb, batch_size, alpha, seed, iteration=0):
    """Alpha-greedy data collection (uniform with prob alpha, else pi_F)."""
    return sample_forward(env, pf, pb, batch_size, seed, iteration, alpha=alpha)


def sample_backward(env: Env, pf, pb, terminals: list[State], seed: int,
                    iteration: int = 0):
    """Walk each terminal state back to s0 under pi_B, then orient forward.

    ``log_pb`` is recorded at sampling time; ``log_pf`` is filled from the
    current forward policy afterwards.
    """
    rngs = [
        trajectory_rng(seed, STREAM_BACKWARD, iteration, k)
        for k in range(len(terminals))
    ]
    rev_states = []
    rev_actions = []
    rev_logpb = []
    for k, x in enumerate(terminals):
        if env.is_final(x) or not env.can_terminate(x):
            raise ValueError(f"{x} is not a legal terminating state")
        states = [x]
        actions = []
        logpb = []
        s = x
        guard = 0
        while s != env.initial_state():
            parents = env.parents(s)
            assert parents, f"state {s} has no parents before reaching s0"
            by_action = {a: p for p, a in parents}
            row = pb.log_parent_probs(s)
            probs = np.exp(row)
            action = _draw(rngs[k], probs)
            logpb.append(row[action])
            actions.append(action)
            s = by_action[action]
            states.append(s)
            guard += 1
            if guard > env.horizon_bound + 1:
                raise AssertionError("backward walk exceeded the horizon bound")
        rev_states.append(states)
        rev_actions.append(actions)
        rev_logpb.append(logpb)

    trajs = []
    for k, x in enumerate(terminals):
        states = rev_states[k][::-1]
        actions = rev_actions[k][::-1]
        log_pb = rev_logpb[k][::-1] + [0.0]
        actions.append(env.terminate_action)
        states.append(State(env.final_state().cells, x.step + 1))
        reward = env.reward(x)
        trajs.append(
            Trajectory(
                states=states,
                actions=actions,
                log_pf=np.zeros(len(actions)),
                log_pb=np.asarray(log_pb, dtype=float),
                terminal_reward=reward,
                log_reward=float(np.log(reward)),
                encodings=env.encode_many(states[:-1]),
            )
        )
    # batch-fill log_pf from the current forward policy
    flat_states = [s for traj in trajs for s in traj.states[:-1]]
    rows = pf.log_probs_many(flat_states)
    off = 0
    for traj in trajs:
        n = traj.n_edges
        for t in range(n):
            traj.log_pf[t] = rows[off + t, traj.actions[t]]
        off += n
    return trajs


def recompute_log_probs(env, pf, pb, traj: Trajectory):
    """Fresh per-edge log-probs from the current parameters."""
    log_pf = pf.log_probs_many(traj.states[:-1])
    fresh_pf = np.array(
        [log_pf[t, traj.actions[t]] for t in range(traj.n_edges)]
    )
    fresh_pb = np.zeros(traj.n_edges)
    interior = traj.states[1:-1]
    if interior:
        rows = pb.log_parent_probs_many(interior)
        for t in range(traj.n_edges - 1):
            fresh_pb[t] = rows[t, traj.actions[t]]
    return fresh_pf, fresh_pb
