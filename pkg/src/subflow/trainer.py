"""Training workflows: online policy-gradient, offline policy-gradient, and
the value-based subtrajectory-balance baseline.

A run owns one policy bundle and one Adam state per head; within an
iteration exactly one parameter set is written at a time, in the listing
order of the workflow. Runs are deterministic given the seed (wall-clock
timing aside) and append a metrics row every ``metric_every`` iterations to
an in-memory log and, when a run directory is given, to ``metrics.csv``
alongside config snapshot and checkpoints.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import oracle
from .actor import grad_actor_backward, grad_actor_forward, grad_logz
from .envs import Env, make_env
from .objectives import NonFiniteResidual, WeightScheme, loss_lambda_td, loss_weighted
from .policies import PolicyBundle, build_bundle
from .sampler import SamplerConfig, decay_alpha, sample_backward, sample_forward

WORKFLOWS = ("online_pg", "offline_pg", "subtb")
MAX_CONSECUTIVE_SKIPS = 10


class RunAbortedError(RuntimeError):
    """More than MAX_CONSECUTIVE_SKIPS iterations produced non-finite losses."""


@dataclass
class TrainConfig:
    workflow: str
    env: dict
    iterations: int = 1000
    batch_size: int = 128
    seed: int = 0
    metric_every: int = 20
    objective: str = "subeb"
    lam: float = 0.9
    weights: str = "subtb_geometric"
    gamma: float = 0.99
    lr_theta: float = 1e-3
    lr_phi: float = 5e-3
    alpha0: float = 1.0
    alpha_decay: float = 0.99
    hidden: int = 256
    depth: int = 4
    backward: str = "uniform"
    use_logz: bool = False
    update_theta: bool = True
    update_phi: bool = True

    def __post_init__(self):
        if self.workflow not in WORKFLOWS:
            raise ValueError(f"unknown workflow {self.workflow!r}")
        if self.iterations < 1 or self.metric_every < 1:
            raise ValueError("iterations and metric_every must be >= 1")

    def make_env(self) -> Env:
        return make_env(**self.env)


METRIC_FIELDS = (
    "iteration",
    "loss_critic",
    "grad_norm_actor",
    "d_tv",
    "d_jsd",
    "mode_accuracy",
    "mean_reward",
    "alpha",
    "wall_clock_ms",
)


@dataclass
class MetricsRow:
    iteration: int
    loss_critic: float
    grad_norm_actor: float | None
    d_tv: float | None
    d_jsd: float | None
    mode_accuracy: float | None
    mean_reward: float
    alpha: float | None
    wall_clock_ms: int

    def as_csv(self) -> str:
        cells = []
        for name in METRIC_FIELDS:
            v = getattr(self, name)
            if v is None:
                cells.append("")
            elif isinstance(v, int):
                cells.append(str(v))
            else:
                cells.append(format(float(v), ".17g"))
        return ",".join(cells)


def smooth(series, window: int):
    """Sliding-window mean of length ``window`` (shorter at the start)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    out = []
    for i in range(len(series)):
        lo = max(0, i - window + 1)
        chunk = series[lo : i + 1]
        out.append(sum(chunk) / len(chunk))
    return out


@dataclass
class TrainResult:
    config: TrainConfig
    bundle: PolicyBundle
    metrics: list[MetricsRow]
    run_dir: Path | None = None
    skipped_iterations: int = 0


class _RunDir:
    def __init__(self, path, config: TrainConfig):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.mkdir(parents=True, exist_ok=True)
            snapshot = json.dumps(asdict(config), indent=2, sort_keys=True)
            (self.path / "config.json").write_text(snapshot + "\n")
            self._metrics = open(self.path / "metrics.csv", "a")
            if self._metrics.tell() == 0:
                self._metrics.write(",".join(METRIC_FIELDS) + "\n")
        else:
            self._metrics = None

    def log(self, row: MetricsRow):
        if self._metrics is not None:
            self._metrics.write(row.as_csv() + "\n")
            self._metrics.flush()

    def checkpoint(self, bundle, iteration):
        if self.path is not None:
            bundle.save(self.path / f"ckpt_{iteration}.bin")

    def close(self):
        if self._metrics is not None:
            self._metrics.close()


def _distribution_metrics(env, bundle):
    if not env.is_enumerable():
        return None, None, None
    pf_dist = oracle.dp_forward_terminal_dist(env, bundle.pf)
    p_star = oracle.true_terminal_dist(env)
    rewards = {x: env.reward(x) for x in p_star.probs}
    return (
        oracle.metric_tv(pf_dist, p_star),
        oracle.metric_jsd(pf_dist, p_star),
        oracle.metric_mode_accuracy(pf_dist, p_star, rewards),
    )


def _adam_steps(bundle, opts, names):
    for name in names:
        if name in bundle.heads:
            head = bundle.heads[name]
            opts[name].step(head.params, head.grad)


def run(config: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    """Execute the configured workflow for ``iterations`` steps."""
    env = config.make_env()
    init_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 9)))
    bundle = build_bundle(
        env,
        config.workflow,
        hidden=config.hidden,
        depth=config.depth,
        backward=config.backward,
        use_logz=config.use_logz,
        rng=init_rng,
    )
    opts = bundle.make_optimizers(config.lr_theta, config.lr_phi)
    scheme = WeightScheme(config.lam, config.weights)
    sampler_cfg = SamplerConfig(
        batch_size=config.batch_size,
        alpha=config.alpha0,
        alpha_decay=config.alpha_decay,
        rng_seed=config.seed,
    )
    rundir = _RunDir(out_dir, config)
    metrics: list[MetricsRow] = []
    t0 = time.monotonic()
    skipped = 0
    consecutive = 0
    offline = config.workflow != "online_pg"
    try:
        for it in range(1, config.iterations + 1):
            try:
                loss, actor_norm, batch_reward = _iteration(
                    env, bundle, opts, config, scheme, sampler_cfg, it
                )
                consecutive = 0
            except (NonFiniteResidual, FloatingPointError) as err:
                skipped += 1
                consecutive += 1
                if progress:
                    progress(f"iteration {it} skipped: {err}")
                if consecutive > MAX_CONSECUTIVE_SKIPS:
                    raise RunAbortedError(
                        f"{consecutive} consecutive non-finite iterations"
                    ) from err
                continue
            if it % config.metric_every == 0 or it == config.iterations:
                d_tv, d_jsd, ma = _distribution_metrics(env, bundle)
                row = MetricsRow(
                    iteration=it,
                    loss_critic=loss,
                    grad_norm_actor=actor_norm,
                    d_tv=d_tv,
                    d_jsd=d_jsd,
                    mode_accuracy=ma,
                    mean_reward=batch_reward,
                    alpha=sampler_cfg.alpha if offline else None,
                    wall_clock_ms=int((time.monotonic() - t0) * 1000),
                )
                metrics.append(row)
                rundir.log(row)
                rundir.checkpoint(bundle, it)
                if progress:
                    progress(f"iter {it}: loss={loss:.4g} d_tv={d_tv}")
    finally:
        rundir.close()
    return TrainResult(config, bundle, metrics, rundir.path, skipped)


def _iteration(env, bundle, opts, config, scheme, sampler_cfg, it):
    if config.workflow == "online_pg":
        return _step_online(env, bundle, opts, config, scheme, it)
    if config.workflow == "offline_pg":
        return _step_offline(env, bundle, opts, config, scheme, sampler_cfg, it)
    return _step_subtb(env, bundle, opts, config, scheme, sampler_cfg, it)


def _step_online(env, bundle, opts, config, scheme, it):
    trajs = sample_forward(
        env, bundle.pf, bundle.pb, config.batch_size, config.seed, iteration=it
    )
    # critic first (phi), then the actor sees the post-update evaluation
    bundle.zero_grads("phi")
    if config.objective == "lambda_td":
        report = loss_lambda_td(env, bundle, trajs, config.lam)
    else:
        report = loss_weighted(env, bundle, trajs, "subeb", scheme)
    if config.update_phi:
        _adam_steps(bundle, opts, ("v", "pb"))

    bundle.zero_grads("theta")
    estimate = grad_actor_forward(env, bundle, trajs, config.gamma)
    bundle.pf.net.grad -= estimate.grads["pf"]
    if bundle.logz is not None:
        zg = grad_logz(env, bundle, trajs)
        bundle.logz.grad -= zg.grads["logz"]
    if config.update_theta:
        _adam_steps(bundle, opts, ("pf", "logz"))
    reward = float(np.mean([t.terminal_reward for t in trajs]))
    return report.loss, estimate.norm(), reward


def _step_offline(env, bundle, opts, config, scheme, sampler_cfg, it):
    pool = sample_forward(
        env,
        bundle.pf,
        bundle.pb,
        config.batch_size,
        config.seed,
        iteration=it,
        alpha=sampler_cfg.alpha,
    )
    terminals = [t.terminal_state for t in pool]
    trajs = sample_backward(env, bundle.pf, bundle.pb, terminals, config.seed, iteration=it)

    bundle.zero_grads("theta")
    report = loss_weighted(env, bundle, trajs, "subeb_backward", scheme)
    if config.update_theta:
        _adam_steps(bundle, opts, ("w", "pf"))

    bundle.zero_grads("phi")
    estimate = grad_actor_backward(env, bundle, trajs, config.gamma)
    if "pb" in estimate.grads:
        bundle.pb.net.grad -= estimate.grads["pb"]
    if config.update_phi:
        _adam_steps(bundle, opts, ("pb",))
    decay_alpha(sampler_cfg)
    reward = float(np.mean([t.terminal_reward for t in trajs]))
    return report.loss, estimate.norm(), reward


def _step_subtb(env, bundle, opts, config, scheme, sampler_cfg, it):
    trajs = sample_forward(
        env,
        bundle.pf,
        bundle.pb,
        config.batch_size,
        config.seed,
        iteration=it,
        alpha=sampler_cfg.alpha,
    )
    bundle.zero_grads()
    report = loss_weighted(env, bundle, trajs, "subtb", scheme)
    if config.update_theta:
        _adam_steps(bundle, opts, ("pf", "logf"))
    if config.update_phi:
        _adam_steps(bundle, opts, ("pb",))
    decay_alpha(sampler_cfg)
    reward = float(np.mean([t.terminal_reward for t in trajs]))
    return report.loss, None, reward


def evaluate(ckpt_path, env: Env, sample_size: int = 1024, seed: int = 0) -> MetricsRow:
    """Load a checkpoint and compute distribution metrics against the target.

    Enumerable environments get exact DP metrics and the exact expected
    reward under the learned terminal distribution; larger ones fall back to
    a sampled mean reward.
    """
    bundle = load_bundle(ckpt_path, env)
    if env.is_enumerable():
        d_tv, d_jsd, ma = _distribution_metrics(env, bundle)
        pf_dist = oracle.dp_forward_terminal_dist(env, bundle.pf)
        mean_reward = sum(p * env.reward(x) for x, p in pf_dist.probs.items())
    else:
        d_tv = d_jsd = ma = None
        trajs = sample_forward(env, bundle.pf, bundle.pb, sample_size, seed)
        mean_reward = float(np.mean([t.terminal_reward for t in trajs]))
    return MetricsRow(
        iteration=0,
        loss_critic=math.nan,
        grad_norm_actor=None,
        d_tv=d_tv,
        d_jsd=d_jsd,
        mode_accuracy=ma,
        mean_reward=float(mean_reward),
        alpha=None,
        wall_clock_ms=0,
    )


def load_bundle(ckpt_path, env: Env) -> PolicyBundle:
    """Rebuild a bundle with the architecture recorded in the checkpoint."""
    from .nets import Mlp, ScalarParam

    meta = PolicyBundle.read_meta(ckpt_path)
    if meta["encoding_width"] != env.encoding_width or meta[
        "action_count"
    ] != env.action_count:
        raise ValueError(
            f"checkpoint {ckpt_path} was written for {meta['env']}, "
            f"incompatible with {env.name}"
        )
    heads = {}
    for name, widths in meta["heads"].items():
        if name == "logz":
            heads[name] = ScalarParam(0.0)
        else:
            heads[name] = Mlp(widths)
    bundle = PolicyBundle(env, heads)
    bundle.load(ckpt_path)
    return bundle


def worker_count() -> int:
    cap = os.environ.get("SUBFLOW_THREADS")
    if cap is not None:
        return max(1, int(cap))
    return max(1, min(4, os.cpu_count() or 1))


def _run_single_threaded(config, out_dir):
    # worker processes share the cores; one BLAS thread each avoids thrash
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(1):
            return run(config, out_dir)
    except ImportError:
        return run(config, out_dir)


def run_many(configs: list[TrainConfig], out_dirs=None) -> list[TrainResult]:
    """Run independent configs in parallel worker processes, capped by the
    SUBFLOW_THREADS environment variable."""
    out_dirs = out_dirs or [None] * len(configs)
    workers = min(worker_count(), len(configs))
    if workers <= 1:
        return [run(c, d) for c, d in zip(configs, out_dirs)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_run_single_threaded, c, d)
            for c, d in zip(configs, out_dirs)
        ]
        return [f.result() for f in futures]
