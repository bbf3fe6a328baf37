"""Multi-stage training: curriculum bucketing, adaptive timesteps, T2I mixing.

Timestep sampling is adaptive: [0,1] is split into 32 bins, each bin keeps an
exponential moving average of the squared gradient norm observed when it was
sampled, and the categorical over bins tracks those impact scores with a
probability floor so no bin starves. Draws carry importance weight
(1/B)/p[bin], which multiplies the loss to keep the uniform-timestep
expectation unbiased.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import flow
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .model import VelocityNet
from .rng import Rng
from .toydata import plan_buckets

log = logging.getLogger(__name__)

EMBED_PREFIX = "emb."   # embedding tables are shared across dim classes


class TimestepDistribution:
    """Learned categorical over timestep bins with importance weights."""

    def __init__(self, bins: int = 32, floor_frac: float = 0.25, decay: float = 0.99):
        self.bins = bins
        self.floor = floor_frac / bins
        self.decay = decay
        self.impact = np.zeros(bins)
        self.probs = np.full(bins, 1.0 / bins)

    def weight(self, b: int) -> float:
        return (1.0 / self.bins) / self.probs[b]

    def draw(self, rng: Rng, n: int):
        """n draws: (timesteps, importance weights, bin indices)."""
        gen = rng.next()
        bins = gen.choice(self.bins, size=n, p=self.probs)
        t = (bins + gen.uniform(size=n)) / self.bins
        return t, (1.0 / self.bins) / self.probs[bins], bins

    def update(self, b: int, grad_norm_sq: float) -> "TimestepDistribution":
        """Fold one observed squared gradient norm into bin ``b``."""
        if grad_norm_sq < 0:
            raise ContractError("grad_norm_sq must be nonnegative")
        self.impact[b] = self.decay * self.impact[b] + (1.0 - self.decay) * grad_norm_sq
        base = np.maximum(self.impact, 1e-12)
        base = base / base.sum()
        # convex mix with uniform: respects the floor and still sums to one
        self.probs = self.floor + (1.0 - self.bins * self.floor) * base
        return self


def sample_timestep(dist: TimestepDistribution, rng: Rng):
    """One draw: (t, importance weight, bin index)."""
    t, w, b = dist.draw(rng, 1)
    return float(t[0]), float(w[0]), int(b[0])


def update_timestep_dist(dist: TimestepDistribution, b: int,
                         grad_norm_sq: float) -> TimestepDistribution:
    return dist.update(b, grad_norm_sq)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment updates, beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def update(self, key: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        m = self.m.get(key)
        if m is None:
            m = self.m[key] = np.zeros_like(value)
            self.v[key] = np.zeros_like(value)
            self.t[key] = 0
        v = self.v[key]
        self.t[key] += 1
        t = self.t[key]
        m *= self.b1
        m += (1 - self.b1) * grad
        v *= self.b2
        v += (1 - self.b2) * grad * grad
        step = m / ((1 - self.b1 ** t) * (np.sqrt(v / (1 - self.b2 ** t)) + self.eps))
        return value - self.lr * step


def apply_grads(nets: dict[int, VelocityNet], dim: int, grads: dict[str, np.ndarray],
                opt: Adam) -> None:
    """One optimizer step on the dim-class net; shared embeddings update everywhere."""
    net = nets[dim]
    for name in net.params:
        g = grads.get(name)
        if g is None:
            continue
        shared = name.startswith(EMBED_PREFIX)
        key = name if shared else f"{dim}:{name}"
        new = Tensor(opt.update(key, net.params[name].array, g))
        if shared:
            for other in nets.values():
                if name in other.params:
                    other.params[name] = new
        else:
            net.params[name] = new


# ---------------------------------------------------------------------------
# stage configuration
# ---------------------------------------------------------------------------

STAGES = ("pretrain", "finetune")


@dataclass(frozen=True)
class StageConfig:
    stage: str
    steps: int
    learning_rate: float = 1e-3
    token_budget: int = 256
    t2i_mix_fraction: float = 0.0
    quality_floor: float = 0.0
    reward_lambdas: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if not 0.0 <= self.t2i_mix_fraction <= 1.0:
            raise ConfigError("t2i_mix_fraction must be in [0,1]")
        if not 0.0 <= self.quality_floor <= 1.0:
            raise ConfigError("quality_floor must be in [0,1]")
        if len(self.reward_lambdas) != 3 or any(l < 0 for l in self.reward_lambdas):
            raise ConfigError("reward_lambdas must be three nonnegative values")


_STAGE_KEYS = {"stage", "steps", "learning_rate", "token_budget",
               "t2i_mix_fraction", "quality_floor", "reward_lambdas", "seed"}


def stage_config_from_dict(d: dict) -> StageConfig:
    unknown = set(d) - _STAGE_KEYS
    if unknown:
        raise ConfigError(f"unknown stage config keys: {sorted(unknown)}")
    if "stage" not in d or "steps" not in d:
        raise ConfigError("stage config needs at least 'stage' and 'steps'")
    kwargs = dict(d)
    if "reward_lambdas" in kwargs:
        kwargs["reward_lambdas"] = tuple(float(x) for x in kwargs["reward_lambdas"])
    try:
        return StageConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def rewards_from_lambdas(lambdas, t_gate: float = flow.T_REWARD_DEFAULT):
    ids = ("identity_preserve", "structure_preserve", "style_preserve")
    return tuple(flow.RewardSpec(i, float(l), t_gate) for i, l in zip(ids, lambdas))


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def train_stage(nets, dataset, cfg: StageConfig, dist: TimestepDistribution, *,
                t_reward: float = flow.T_REWARD_DEFAULT,
                heldout=None, eval_every: int = 0, eval_fn=None):
    """Run one stage; returns (nets, metrics log as a list of dicts).

    ``nets`` may be a single VelocityNet or a dim -> net mapping sharing
    embedding tables. Batches are dimension-homogeneous and cycle in
    curriculum order (low dims first). One timestep is drawn per optimizer
    step; its importance weight multiplies the loss and the observed squared
    gradient norm feeds back into the distribution.
    """
    single = isinstance(nets, VelocityNet)
    by_dim = {nets.dim: nets} if single else dict(nets)

    data = list(dataset)
    if cfg.stage == "finetune":
        data = [p for p in data if p.quality >= cfg.quality_floor]
    if not data:
        raise ContractError("dataset is empty after quality filtering")
    missing = {p.dim for p in data} - set(by_dim)
    if missing:
        raise ContractError(f"no network for dims {sorted(missing)}")

    metrics: list[dict] = []
    if cfg.steps == 0:
        return nets, metrics

    batches = plan_buckets(data, cfg.token_budget)
    if not batches:
        raise ContractError(
            "dataset too small to fill one batch at this token budget")
    rng = Rng(cfg.seed)
    opt = Adam(cfg.learning_rate)
    specs = rewards_from_lambdas(cfg.reward_lambdas, t_gate=t_reward)
    t2i_batches = 0

    for step in range(cfg.steps):
        batch = batches[step % len(batches)]
        dim = batch[0].dim
        net = by_dim[dim]
        b = len(batch)

        force_t2i = bool(rng.next().uniform() < cfg.t2i_mix_fraction)
        t2i_batches += force_t2i
        t, w, tbin = sample_timestep(dist, rng)
        eps = rng.next().standard_normal((b, dim))

        res = flow.batch_loss(net, batch, np.full(b, t), eps, reward_specs=specs,
                              t_weights=np.full(b, w), rng=rng,
                              force_drop_image=force_t2i)
        grad_norm_sq = float(sum(np.sum(g * g) for g in res.grads.values()))
        apply_grads(by_dim, dim, res.grads, opt)
        dist.update(tbin, grad_norm_sq)

        rec = {"step": step, "stage": cfg.stage, "loss": res.loss,
               "fm_term": res.fm_term,
               "reward_terms": {k: v["value"] for k, v in res.breakdown.items()},
               "bin": tbin, "weight": w}
        if eval_every and eval_fn is not None and (step + 1) % eval_every == 0:
            rec["eval"] = eval_fn(by_dim if not single else nets)
        metrics.append(rec)

    log.info("stage %s done: %d steps, %d t2i batches", cfg.stage, cfg.steps, t2i_batches)
    metrics.append({"step": cfg.steps, "stage": cfg.stage, "summary": True,
                    "t2i_batches": t2i_batches,
                    "bin_impacts": [float(x) for x in dist.impact]})
    return nets, metrics


def run_stages(nets, dataset, stage_cfgs, dist: TimestepDistribution | None = None, **kw):
    """Run pretrain/finetune sequences; finetune floors may not relax."""
    dist = dist or TimestepDistribution()
    floor = None
    all_metrics = []
    for cfg in stage_cfgs:
        if cfg.stage == "finetune" and floor is not None and cfg.quality_floor < floor:
            raise ConfigError("finetune quality_floor below the pretrain stage's")
        floor = max(floor or 0.0, cfg.quality_floor)
        nets, metrics = train_stage(nets, dataset, cfg, dist, **kw)
        all_metrics.extend(metrics)
    return nets, all_metrics, dist


# ---------------------------------------------------------------------------
# importance-weighting diagnostics
# ---------------------------------------------------------------------------

def unbiasedness_check(net: VelocityNet, dataset, dist: TimestepDistribution,
                       n_draws: int, rng: Rng, grad_probe_draws: int = 200) -> dict:
    """Compare weighted-adaptive and uniform timestep loss estimators.

    Both estimators target the same quantity (the uniform-timestep expected
    flow-matching loss on a frozen net); the report carries their means,
    standard errors, and the variance ratio of the per-draw estimates. A
    small gradient probe reports the same ratio for gradient norms.
    """
    if not dataset:
        raise ContractError("dataset must be nonempty")
    data = list(dataset)

    def per_record_losses(t_arr, idx):
        batch = [data[i] for i in idx]
        x1 = np.stack([p.target.values for p in batch])
        x0 = np.stack([p.source.values for p in batch])
        eps = rng.next().standard_normal(x1.shape)
        x_t = (1.0 - t_arr)[:, None] * x1 + t_arr[:, None] * eps
        v = net.predict(x_t, x0, [p.meta for p in batch],
                        [p.instruction for p in batch], t_arr)
        return ((v - (eps - x1)) ** 2).mean(axis=1)

    def collect(adaptive: bool, n: int):
        vals = np.empty(n)
        chunk = 512
        for s in range(0, n, chunk):
            m = min(chunk, n - s)
            idx = rng.next().integers(len(data), size=m)
            if adaptive:
                t, w, _ = dist.draw(rng, m)
                vals[s:s + m] = per_record_losses(t, idx) * w
            else:
                t = rng.next().uniform(size=m)
                vals[s:s + m] = per_record_losses(t, idx)
        return vals

    weighted = collect(True, n_draws)
    uniform = collect(False, n_draws)

    def grad_norms(adaptive: bool, n: int):
        out = np.empty(n)
        for i in range(n):
            idx = [int(rng.next().integers(len(data)))]
            batch = [data[j] for j in idx]
            if adaptive:
                t, w, _ = dist.draw(rng, 1)
            else:
                t, w = rng.next().uniform(size=1), np.ones(1)
            eps = rng.next().standard_normal((1, batch[0].dim))
            res = flow.batch_loss(net, batch, t, eps, t_weights=w)
            out[i] = np.sqrt(sum(np.sum(g * g) for g in res.grads.values()))
        return out

    gw = grad_norms(True, grad_probe_draws)
    gu = grad_norms(False, grad_probe_draws)

    def se(x):
        return float(x.std(ddof=1) / np.sqrt(len(x)))

    report = {
        "n_draws": n_draws,
        "weighted_mean": float(weighted.mean()), "weighted_se": se(weighted),
        "uniform_mean": float(uniform.mean()), "uniform_se": se(uniform),
        "loss_variance_ratio": float(weighted.var(ddof=1) / uniform.var(ddof=1)),
        "grad_norm_variance_ratio": float(gw.var(ddof=1) / gu.var(ddof=1)),
    }
    report["combined_se"] = float(np.hypot(report["weighted_se"], report["uniform_se"]))
    report["mean_gap_in_se"] = float(
        abs(report["weighted_mean"] - report["uniform_mean"]) / report["combined_se"])
    return report
