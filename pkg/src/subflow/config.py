"""Config files: a single JSON document validated with field-path errors.

The full schema with defaults lives in SCHEMA below and is documented in the
README. ``load_config`` fails fast with the dotted path of the offending key
so the CLI can exit before any work starts.
"""

from __future__ import annotations

import json
from pathlib import Path

from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


# section -> key -> (type, default); REQUIRED means no default
REQUIRED = object()

SCHEMA = {
    "seed": (int, 0),
    "env": {
        "kind": (str, REQUIRED),
        "height": (int, None),
        "dims": (int, None),
        "seq_len": (int, None),
        "alphabet": (int, None),
        "beta": (float, 3.0),
    },
    "policy": {
        "backward": (str, "uniform"),
        "hidden": (int, 256),
        "depth": (int, 4),
        "use_logz": (bool, False),
    },
    "sampler": {
        "batch": (int, 128),
        "alpha0": (float, 1.0),
        "alpha_decay": (float, 0.99),
    },
    "objective": {
        "kind": (str, None),
        "lambda": (float, 0.9),
        "weights": (str, "subtb_geometric"),
    },
    "actor": {
        "gamma": (float, 0.99),
        "lr": (float, 1e-3),
    },
    "train": {
        "workflow": (str, "online_pg"),
        "iterations": (int, 1000),
        "metric_every": (int, 20),
        "lr_phi": (float, 5e-3),
    },
}

ENV_KEYS = {
    "hypergrid": ("height", "dims"),
    "sequence": ("seq_len", "alphabet"),
}


def _coerce(path, want, value):
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is int and isinstance(value, bool):
        raise ConfigError(path, "expected an integer, got a boolean")
    if not isinstance(value, want):
        raise ConfigError(path, f"expected {want.__name__}, got {type(value).__name__}")
    return value


def validate_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    out = {}
    for key, spec in SCHEMA.items():
        if isinstance(spec, dict):
            section = raw.get(key, {})
            if not isinstance(section, dict):
                raise ConfigError(key, "expected an object")
            for extra in set(section) - set(spec):
                raise ConfigError(f"{key}.{extra}", "unknown key")
            parsed = {}
            for name, (want, default) in spec.items():
                path = f"{key}.{name}"
                if name in section:
                    parsed[name] = _coerce(path, want, section[name])
                elif default is REQUIRED:
                    raise ConfigError(path, "missing required key")
                else:
                    parsed[name] = default
            out[key] = parsed
        else:
            want, default = spec
            if key in raw:
                out[key] = _coerce(key, want, raw[key])
            elif default is REQUIRED:
                raise ConfigError(key, "missing required key")
            else:
                out[key] = default
    for extra in set(raw) - set(SCHEMA):
        raise ConfigError(extra, "unknown key")

    kind = out["env"]["kind"]
    if kind not in ENV_KEYS:
        raise ConfigError("env.kind", f"must be one of {sorted(ENV_KEYS)}")
    for name in ENV_KEYS[kind]:
        if out["env"][name] is None:
            raise ConfigError(f"env.{name}", f"required for env.kind={kind}")

    workflow = out["train"]["workflow"]
    objective = out["objective"]["kind"]
    if objective is None:
        objective = {"online_pg": "subeb", "offline_pg": "subeb", "subtb": "subtb"}[
            workflow
        ]
        out["objective"]["kind"] = objective
    if workflow == "online_pg" and objective not in ("subeb", "lambda_td"):
        raise ConfigError(
            "objective.kind", "online_pg supports 'subeb' or 'lambda_td'"
        )
    if workflow == "subtb" and objective != "subtb":
        raise ConfigError("objective.kind", "the subtb workflow requires 'subtb'")
    if out["policy"]["backward"] not in ("uniform", "learned"):
        raise ConfigError("policy.backward", "must be 'uniform' or 'learned'")
    return out


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found")
    except json.JSONDecodeError as err:
        raise ConfigError(str(path), f"invalid JSON: {err}")
    return validate_config(raw)


def env_kwargs(cfg: dict) -> dict:
    env = cfg["env"]
    if env["kind"] == "hypergrid":
        return {"kind": "hypergrid", "height": env["height"], "dims": env["dims"]}
    return {
        "kind": "sequence",
        "seq_len": env["seq_len"],
        "alphabet": env["alphabet"],
        "beta": env["beta"],
    }


def to_train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        workflow=cfg["train"]["workflow"],
        env=env_kwargs(cfg),
        iterations=cfg["train"]["iterations"],
        batch_size=cfg["sampler"]["batch"],
        seed=cfg["seed"] if seed is None else seed,
        metric_every=cfg["train"]["metric_every"],
        objective=cfg["objective"]["kind"],
        lam=cfg["objective"]["lambda"],
        weights=cfg["objective"]["weights"],
        gamma=cfg["actor"]["gamma"],
        lr_theta=cfg["actor"]["lr"],
        lr_phi=cfg["train"]["lr_phi"],
        alpha0=cfg["sampler"]["alpha0"],
        alpha_decay=cfg["sampler"]["alpha_decay"],
        hidden=cfg["policy"]["hidden"],
        depth=cfg["policy"]["depth"],
        backward=cfg["policy"]["backward"],
        use_logz=cfg["policy"]["use_logz"],
    )
