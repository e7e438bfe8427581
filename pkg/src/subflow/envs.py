"""DAG environments: hypergrid and synthetic sequence design.

Environments are immutable after construction. Every operation is a pure
function of its inputs, so instances can be shared freely across threads.
States are tuples of small ints plus the number of actions taken to reach
them; the final sink state is a per-environment sentinel tuple.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_STATE_CAP = 10**6


class EnumerationCapError(RuntimeError):
    """Raised when an oracle-style enumeration would exceed the state cap."""


@dataclass(frozen=True)
class State:
    """A node of the environment DAG.

    ``cells`` uniquely identifies the state within its environment and
    ``step`` counts the actions taken from the initial state along the
    realized path (for the environments here all paths to a state have
    equal length, so the count is path-independent).
    """

    cells: tuple[int, ...]
    step: int

    def __repr__(self):
        return f"State({self.cells}, step={self.step})"


class Env:
    """Environment contract shared by the concrete DAGs.

    Actions are plain ints in ``range(action_count)``; the last index is
    always the terminating action that moves a state to the sink ``s_f``.
    """

    name: str
    action_count: int
    horizon_bound: int
    encoding_width: int

    @property
    def terminate_action(self) -> int:
        return self.action_count - 1

    def is_terminate(self, action: int) -> bool:
        return action == self.terminate_action

    def initial_state(self) -> State:
        raise NotImplementedError

    def final_state(self) -> State:
        raise NotImplementedError

    def is_final(self, state: State) -> bool:
        raise NotImplementedError

    def valid_actions(self, state: State) -> np.ndarray:
        """Boolean mask over the action alphabet; at least one entry is set."""
        raise NotImplementedError

    def can_terminate(self, state: State) -> bool:
        return bool(self.valid_actions(state)[self.terminate_action])

    def step(self, state: State, action: int) -> State:
        raise NotImplementedError

    def parents(self, state: State) -> list[tuple[State, int]]:
        """All (parent, action) pairs with step(parent, action) == state."""
        raise NotImplementedError

    def reward(self, state: State) -> float:
        raise NotImplementedError

    def log_reward(self, state: State) -> float:
        return math.log(self.reward(state))

    def encode(self, state: State) -> np.ndarray:
        return self.encode_many([state])[0]

    def encode_many(self, states: list[State]) -> np.ndarray:
        raise NotImplementedError

    def state_count(self) -> int:
        raise NotImplementedError

    def enumerate_states(self, cap: int = DEFAULT_STATE_CAP) -> list[State]:
        """All non-final states in topological order; refuses above ``cap``."""
        raise NotImplementedError

    def is_enumerable(self, cap: int = DEFAULT_STATE_CAP) -> bool:
        return self.state_count() <= cap

    def _check_not_final(self, state: State, op: str):
        if self.is_final(state):
            raise ValueError(f"{op} queried on the final state {state}")

    def _check_action(self, state: State, action: int):
        if not 0 <= action < self.action_count:
            raise ValueError(f"action {action} out of range at {state}")
        if not self.valid_actions(state)[action]:
            raise ValueError(f"invalid action {action} at state {state}")


class Hypergrid(Env):
    """D-dimensional grid of height N; any cell may stop and collect reward.

    From a cell each in-bounds coordinate increment is a valid action and
    termination is always valid, so the DAG is not graded: trajectories of
    many different lengths reach the sink.
    """

    R0 = 1e-2
    R1 = 0.5
    R2 = 2.0

    def __init__(self, height: int, dims: int):
        if height < 2 or dims < 1:
            raise ValueError("hypergrid needs height >= 2 and dims >= 1")
        self.height = height
        self.dims = dims
        self.name = f"hypergrid{height}x{dims}"
        self.action_count = dims + 1
        self.horizon_bound = dims * (height - 1)
        self.encoding_width = dims * height
        self._sf = State((-1,) * dims, -1)

    def initial_state(self):
        return State((0,) * self.dims, 0)

    def final_state(self):
        return self._sf

    def is_final(self, state):
        return state.cells[0] < 0

    def valid_actions(self, state):
        self._check_not_final(state, "valid_actions")
        mask = np.zeros(self.action_count, dtype=bool)
        for d in range(self.dims):
            mask[d] = state.cells[d] < self.height - 1
        mask[self.terminate_action] = True
        return mask

    def step(self, state, action):
        self._check_action(state, action)
        if self.is_terminate(action):
            return State(self._sf.cells, state.step + 1)
        cells = list(state.cells)
        cells[action] += 1
        return State(tuple(cells), state.step + 1)

    def parents(self, state):
        if self.is_final(state):
            term = self.terminate_action
            return [(s, term) for s in self.enumerate_states()]
        out = []
        for d in range(self.dims):
            if state.cells[d] > 0:
                cells = list(state.cells)
                cells[d] -= 1
                out.append((State(tuple(cells), state.step - 1), d))
        return out

    def reward(self, state):
        self._check_not_final(state, "reward")
        t = [abs(c / (self.height - 1) - 0.5) for c in state.cells]
        bump1 = all(0.25 < v <= 0.5 for v in t)
        bump2 = all(0.3 < v <= 0.4 for v in t)
        return self.R0 + self.R1 * bump1 + self.R2 * bump2

    def encode_many(self, states):
        idx = np.array([s.cells for s in states], dtype=np.intp)
        out = np.zeros((len(states), self.encoding_width))
        rows = np.arange(len(states))[:, None]
        cols = np.arange(self.dims)[None, :] * self.height + idx
        out[rows, cols] = 1.0
        return out

    def state_count(self):
        return self.height**self.dims

    def enumerate_states(self, cap=DEFAULT_STATE_CAP):
        n = self.state_count()
        if n > cap:
            raise EnumerationCapError(f"{self.name} has {n} states, cap is {cap}")
        cells = sorted(
            itertools.product(range(self.height), repeat=self.dims), key=sum
        )
        return [State(c, sum(c)) for c in cells]


class SequenceEnv(Env):
    """Fixed-length sequence assembly by appending or prepending blocks.

    States are length-``seq_len`` tuples whose first ``t`` slots hold block
    ids and whose remainder is padded with -1; only complete sequences may
    terminate, so the DAG is graded. When prepending a block would produce
    the same child as appending it (empty or single-repeated-block states),
    the prepend action is masked out to keep edges unique.

    The reward is a synthetic multimodal score: a base level plus Gaussian
    bumps in Hamming distance around a set of anchor sequences, raised to
    the exponent ``beta``.
    """

    def __init__(
        self,
        seq_len: int,
        alphabet: int,
        beta: float = 3.0,
        score_base: float = 0.05,
        bump_width: float | None = None,
    ):
        if seq_len < 1 or alphabet < 2:
            raise ValueError("sequence env needs seq_len >= 1 and alphabet >= 2")
        if beta <= 0:
            raise ValueError("beta must be positive")
        self.seq_len = seq_len
        self.alphabet = alphabet
        self.beta = beta
        self.score_base = score_base
        self.bump_width = bump_width if bump_width is not None else max(1.0, seq_len / 4)
        self.name = f"sequence{seq_len}x{alphabet}"
        self.action_count = 2 * alphabet + 1
        self.horizon_bound = seq_len
        self.encoding_width = seq_len * (alphabet + 1)
        self._sf = State((alphabet,) * seq_len, -1)
        D, M = seq_len, alphabet
        self._anchors = [
            (0,) * D,
            (M - 1,) * D,
            tuple((0 if i % 2 == 0 else M - 1) for i in range(D)),
        ]

    def initial_state(self):
        return State((-1,) * self.seq_len, 0)

    def final_state(self):
        return self._sf

    def is_final(self, state):
        return state.cells[0] == self.alphabet

    @staticmethod
    def _length(state):
        return state.step

    def valid_actions(self, state):
        self._check_not_final(state, "valid_actions")
        t = self._length(state)
        mask = np.zeros(self.action_count, dtype=bool)
        if t == self.seq_len:
            mask[self.terminate_action] = True
            return mask
        mask[: self.alphabet] = True
        if t > 0:
            filled = state.cells[:t]
            for b in range(self.alphabet):
                if any(c != b for c in filled):
                    mask[self.alphabet + b] = True
        return mask

    def step(self, state, action):
        self._check_action(state, action)
        if self.is_terminate(action):
            return State(self._sf.cells, state.step + 1)
        t = self._length(state)
        pad = (-1,) * (self.seq_len - t - 1)
        filled = state.cells[:t]
        if action < self.alphabet:
            cells = filled + (action,) + pad
        else:
            cells = (action - self.alphabet,) + filled + pad
        return State(cells, state.step + 1)

    def parents(self, state):
        if self.is_final(state):
            term = self.terminate_action
            return [
                (s, term)
                for s in self.enumerate_states()
                if self._length(s) == self.seq_len
            ]
        t = self._length(state)
        if t == 0:
            return []
        filled = state.cells[:t]
        pad = (-1,) * (self.seq_len - t + 1)
        out = [(State(filled[:-1] + pad, t - 1), filled[-1])]
        prepend_parent = State(filled[1:] + pad, t - 1)
        prepend_action = self.alphabet + filled[0]
        if self.valid_actions(prepend_parent)[prepend_action]:
            out.append((prepend_parent, prepend_action))
        return out

    def score(self, cells: tuple[int, ...]) -> float:
        total = self.score_base
        for anchor in self._anchors:
            d = sum(a != b for a, b in zip(cells, anchor))
            total += math.exp(-(d * d) / (2 * self.bump_width**2))
        return total

    def reward(self, state):
        self._check_not_final(state, "reward")
        if self._length(state) != self.seq_len:
            raise ValueError(f"reward queried on non-terminating state {state}")
        return self.score(state.cells) ** self.beta

    def encode_many(self, states):
        width = self.alphabet + 1
        idx = np.array(
            [[c if c >= 0 else self.alphabet for c in s.cells] for s in states],
            dtype=np.intp,
        )
        out = np.zeros((len(states), self.encoding_width))
        rows = np.arange(len(states))[:, None]
        cols = np.arange(self.seq_len)[None, :] * width + idx
        out[rows, cols] = 1.0
        return out

    def state_count(self):
        M = self.alphabet
        return sum(M**t for t in range(self.seq_len + 1))

    def enumerate_states(self, cap=DEFAULT_STATE_CAP):
        n = self.state_count()
        if n > cap:
            raise EnumerationCapError(f"{self.name} has {n} states, cap is {cap}")
        out = []
        for t in range(self.seq_len + 1):
            pad = (-1,) * (self.seq_len - t)
            for filled in itertools.product(range(self.alphabet), repeat=t):
                # unreachable duplicates do not exist: every fill is reachable
                out.append(State(filled + pad, t))
        return out


def make_env(kind: str, **kwargs) -> Env:
    if kind == "hypergrid":
        return Hypergrid(height=kwargs["height"], dims=kwargs["dims"])
    if kind == "sequence":
        return SequenceEnv(
            seq_len=kwargs["seq_len"],
            alphabet=kwargs["alphabet"],
            beta=kwargs.get("beta", 3.0),
        )
    raise ValueError(f"unknown environment kind: {kind}")
