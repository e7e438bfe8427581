"""Policy heads over environment actions and their evaluation functions.

The forward policy is a masked softmax over action logits; the backward
policy is a distribution over the parents of a state, indexed by the action
that leads from the parent to it (that map is one-to-one in both
environments). Terminal backward mass is never parameterized: residuals and
edge rewards substitute the terminal reward per the evaluation-function
convention, optionally scaled down by the learnable total flow.
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np

from .envs import Env, State
from .nets import Adam, Mlp, ScalarParam, load_params, save_params

NEG_INF = -np.inf

# parameter-set membership: theta moves with the forward policy, phi with the
# backward policy and its evaluation head
OWNERS = {
    "pf": "theta",
    "logf": "theta",
    "w": "theta",
    "logz": "theta",
    "v": "phi",
    "pb": "phi",
}


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-softmax restricted to masked-in entries; others come out -inf."""
    z = np.where(mask, logits, NEG_INF)
    zmax = np.max(z, axis=-1, keepdims=True)
    lse = zmax + np.log(np.sum(np.exp(z - zmax), axis=-1, keepdims=True))
    return np.where(mask, z - lse, NEG_INF)


class ForwardPolicy:
    """pi_F(. | s): masked softmax over the action alphabet."""

    def __init__(self, env: Env, net: Mlp):
        if net.out_width != env.action_count:
            raise ValueError("forward policy net must emit one logit per action")
        self.env = env
        self.net = net

    def action_masks(self, states) -> np.ndarray:
        return np.array([self.env.valid_actions(s) for s in states])

    def log_probs_many(self, states) -> np.ndarray:
        logits = self.net.forward_many(self.env.encode_many(states))
        return masked_log_softmax(logits, self.action_masks(states))

    def log_probs(self, state: State) -> np.ndarray:
        return self.log_probs_many([state])[0]


class TabularForward:
    """Forward policy stored as an explicit table; used by the oracles."""

    def __init__(self, env: Env, table: dict[State, np.ndarray]):
        self.env = env
        self.table = table

    @classmethod
    def from_logits(cls, env, logit_fn):
        table = {}
        for s in env.enumerate_states():
            mask = env.valid_actions(s)
            table[s] = masked_log_softmax(np.asarray(logit_fn(s), float), mask)
        return cls(env, table)

    @classmethod
    def uniform(cls, env):
        return cls.from_logits(env, lambda s: np.zeros(env.action_count))

    @classmethod
    def random(cls, env, rng, scale=1.0):
        return cls.from_logits(
            env, lambda s: scale * rng.standard_normal(env.action_count)
        )

    def log_probs(self, state):
        return self.table[state]

    def log_probs_many(self, states):
        return np.array([self.table[s] for s in states])


class BackwardPolicy:
    """pi_B(. | s'): uniform over parents, or a masked softmax head."""

    def __init__(self, env: Env, net: Mlp | None = None):
        if net is not None and net.out_width != env.action_count:
            raise ValueError("backward policy net must emit one logit per action")
        self.env = env
        self.net = net

    @property
    def learned(self):
        return self.net is not None

    def parent_masks(self, states) -> np.ndarray:
        masks = np.zeros((len(states), self.env.action_count), dtype=bool)
        for i, s in enumerate(states):
            for _, action in self.env.parents(s):
                masks[i, action] = True
        return masks

    def log_parent_probs_many(self, states) -> np.ndarray:
        masks = self.parent_masks(states)
        if self.net is None:
            counts = masks.sum(axis=1, keepdims=True)
            out = np.full(masks.shape, NEG_INF)
            np.copyto(out, -np.log(counts), where=masks)
            return out
        logits = self.net.forward_many(self.env.encode_many(states))
        return masked_log_softmax(logits, masks)

    def log_parent_probs(self, state: State) -> np.ndarray:
        return self.log_parent_probs_many([state])[0]

    def log_prob(self, child: State, parent: State) -> float:
        """log pi_B(parent | child); rejects pairs that are not an edge."""
        for p, action in self.env.parents(child):
            if p == parent:
                return float(self.log_parent_probs(child)[action])
        raise ValueError(f"{parent} is not a parent of {child}")


class TabularBackward:
    """Backward policy as an explicit table over parent actions."""

    def __init__(self, env: Env, table: dict[State, np.ndarray]):
        self.env = env
        self.table = table
        self.learned = False

    @classmethod
    def random(cls, env, rng, scale=1.0):
        table = {}
        for s in env.enumerate_states():
            parents = env.parents(s)
            if not parents:
                continue
            mask = np.zeros(env.action_count, dtype=bool)
            for _, action in parents:
                mask[action] = True
            logits = scale * rng.standard_normal(env.action_count)
            table[s] = masked_log_softmax(logits, mask)
        return cls(env, table)

    def log_parent_probs(self, state):
        return self.table[state]

    def log_parent_probs_many(self, states):
        return np.array([self.table[s] for s in states])

    def log_prob(self, child, parent):
        for p, action in self.env.parents(child):
            if p == parent:
                return float(self.log_parent_probs(child)[action])
        raise ValueError(f"{parent} is not a parent of {child}")


class EvalHead:
    """Scalar state function: V (phi-owned), W or log F (theta-owned)."""

    KINDS = ("v", "w", "logf")

    def __init__(self, env: Env, net: Mlp, kind: str):
        if kind not in self.KINDS:
            raise ValueError(f"unknown eval head kind {kind!r}")
        if net.out_width != 1:
            raise ValueError("eval head net must be scalar-valued")
        self.env = env
        self.net = net
        self.kind = kind

    def values_many(self, states) -> np.ndarray:
        return self.net.forward_many(self.env.encode_many(states))[:, 0]

    def value(self, state: State) -> float:
        return float(self.values_many([state])[0])


def edge_reward_forward(env, pf, pb, state, action, log_z=0.0, terminal_reward=None):
    """log of target-over-forward mass for one edge of a trajectory.

    Terminal edges substitute the terminal reward (scaled by the total-flow
    estimate when one is active) for the backward mass.
    """
    log_pf = float(pf.log_probs(state)[action])
    if env.is_terminate(action):
        if terminal_reward is None:
            raise ValueError("terminal edge needs the terminal reward")
        return math.log(terminal_reward) - log_z - log_pf
    if terminal_reward is not None:
        raise ValueError("terminal reward supplied on an interior edge")
    child = env.step(state, action)
    return float(pb.log_parent_probs(child)[action]) - log_pf


def edge_reward_backward(env, pf, pb, state, action):
    """Mirror edge reward for backward policies; interior edges only."""
    if env.is_terminate(action):
        raise ValueError("backward edge rewards are undefined on terminal edges")
    child = env.step(state, action)
    log_pb = float(pb.log_parent_probs(child)[action])
    return float(pf.log_probs(state)[action]) - log_pb


CKPT_MAGIC = b"SFCKPT"
CKPT_VERSION = 1


class PolicyBundle:
    """Everything the trainer optimizes, with parameter-set bookkeeping."""

    def __init__(self, env: Env, heads: dict):
        self.env = env
        self.heads = dict(heads)
        self.pf = ForwardPolicy(env, self.heads["pf"])
        pb_net = self.heads.get("pb")
        self.pb = BackwardPolicy(env, pb_net)
        self.v = EvalHead(env, self.heads["v"], "v") if "v" in self.heads else None
        self.w = EvalHead(env, self.heads["w"], "w") if "w" in self.heads else None
        self.logf = (
            EvalHead(env, self.heads["logf"], "logf") if "logf" in self.heads else None
        )
        self.logz = self.heads.get("logz")

    @property
    def log_z(self) -> float:
        return self.logz.value if self.logz is not None else 0.0

    def owner(self, name: str) -> str:
        return OWNERS[name]

    def heads_of(self, owner: str):
        return {n: h for n, h in self.heads.items() if OWNERS[n] == owner}

    def zero_grads(self, owner: str | None = None):
        for name, head in self.heads.items():
            if owner is None or OWNERS[name] == owner:
                head.zero_grad()

    def grad_norm(self, owner: str) -> float:
        total = 0.0
        for head in self.heads_of(owner).values():
            total += float(np.dot(head.grad, head.grad))
        return math.sqrt(total)

    def params_of(self, owner: str) -> np.ndarray:
        heads = self.heads_of(owner)
        if not heads:
            return np.zeros(0)
        return np.concatenate([heads[n].params for n in sorted(heads)])

    def make_optimizers(self, lr_theta: float, lr_phi: float) -> dict:
        lrs = {"theta": lr_theta, "phi": lr_phi}
        return {
            name: Adam(head.params.size, lr=lrs[OWNERS[name]])
            for name, head in self.heads.items()
        }

    def save(self, path):
        meta = {
            "env": self.env.name,
            "encoding_width": self.env.encoding_width,
            "action_count": self.env.action_count,
            "heads": {n: list(h.widths) for n, h in sorted(self.heads.items())},
        }
        header = json.dumps(meta, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<BI", CKPT_VERSION, len(header)))
            fh.write(header)
            for name in sorted(self.heads):
                blob = save_params(self.heads[name])
                fh.write(struct.pack("<I", len(blob)))
                fh.write(blob)

    @staticmethod
    def read_meta(path) -> dict:
        with open(path, "rb") as fh:
            magic = fh.read(len(CKPT_MAGIC))
            if magic != CKPT_MAGIC:
                raise ValueError(f"{path} is not a checkpoint")
            version, hlen = struct.unpack("<BI", fh.read(5))
            if version != CKPT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            return json.loads(fh.read(hlen).decode())

    def load(self, path):
        meta = PolicyBundle.read_meta(path)
        if meta["encoding_width"] != self.env.encoding_width or meta[
            "action_count"
        ] != self.env.action_count:
            raise ValueError(
                f"checkpoint {path} was written for environment {meta['env']}, "
                f"incompatible with {self.env.name}"
            )
        if set(meta["heads"]) != set(self.heads):
            raise ValueError(
                f"checkpoint heads {sorted(meta['heads'])} do not match "
                f"bundle heads {sorted(self.heads)}"
            )
        with open(path, "rb") as fh:
            fh.read(len(CKPT_MAGIC))
            _, hlen = struct.unpack("<BI", fh.read(5))
            fh.read(hlen)
            for name in sorted(self.heads):
                (blen,) = struct.unpack("<I", fh.read(4))
                load_params(fh.read(blen), self.heads[name])


def build_bundle(
    env: Env,
    workflow: str,
    hidden: int = 256,
    depth: int = 4,
    backward: str = "uniform",
    use_logz: bool = False,
    rng: np.random.Generator | None = None,
    activation: str = "leaky_relu",
) -> PolicyBundle:
    """Construct the heads a workflow needs, seeded from ``rng``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    widths = [env.encoding_width] + [hidden] * depth

    def mlp(out):
        return Mlp(widths + [out], activation=activation, rng=rng)

    heads = {"pf": mlp(env.action_count)}
    if backward == "learned":
        heads["pb"] = mlp(env.action_count)
    elif backward != "uniform":
        raise ValueError(f"unknown backward policy mode {backward!r}")
    if workflow == "online_pg":
        heads["v"] = mlp(1)
        if use_logz:
            heads["logz"] = ScalarParam(0.0)
    elif workflow == "offline_pg":
        heads["w"] = mlp(1)
    elif workflow == "subtb":
        heads["logf"] = mlp(1)
    else:
        raise ValueError(f"unknown workflow {workflow!r}")
    return PolicyBundle(env, heads)
