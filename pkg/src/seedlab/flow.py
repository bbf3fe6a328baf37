"""Rectified-flow interpolation, the reward-augmented training loss, and samplers.

Training regresses the network onto the straight-line velocity: with
x_t = (1-t) x1 + t * eps, the exact time derivative (toward noise) is
eps - x1, so t=0 sits on the data and t=1 on the noise. Sampling integrates
the learned field backward from t=1 to t=0 with explicit Euler steps.

The loss has two parts: the flow-matching MSE, and gated preservation
rewards evaluated on the endpoint estimate x1_hat = x_t - t * v. A reward is
active only when its preserve-tag is present on the record and the timestep
is small enough for the endpoint estimate to be trustworthy; inactive
rewards contribute exactly zero loss and zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, backward, grad_for
from .errors import ContractError, ShapeError
from .model import CondBatch, VelocityNet
from .rng import Rng
from .toydata import block_slice

PRESERVE_BLOCK = {"identity_preserve": 0, "structure_preserve": 1, "style_preserve": 2}

T_REWARD_DEFAULT = 0.5

# CFG dropout: mutually exclusive per-record events.
P_DROP_BOTH = 0.05
P_DROP_IMAGE = 0.10
P_DROP_TEXT = 0.10


@dataclass(frozen=True)
class FlowPoint:
    """A point on the straight path between a sample and its noise draw."""

    x_t: np.ndarray
    t: float
    eps: np.ndarray


@dataclass(frozen=True)
class RewardSpec:
    """One gated preservation reward: a block MSE against the source."""

    id: str
    weight: float
    t_gate: float = T_REWARD_DEFAULT

    def __post_init__(self):
        if self.id not in PRESERVE_BLOCK:
            raise ContractError(f"unknown reward id {self.id!r}")
        if self.weight < 0:
            raise ContractError("reward weight must be nonnegative")

    def active(self, tags, t: float) -> bool:
        return self.id in tags and t <= self.t_gate


def default_rewards(lam: float = 0.1, t_gate: float = T_REWARD_DEFAULT) -> tuple:
    return tuple(RewardSpec(rid, lam, t_gate) for rid in
                 ("identity_preserve", "structure_preserve", "style_preserve"))


@dataclass(frozen=True)
class SamplerConfig:
    steps: int
    w_i: float = 1.0
    w_t: float = 1.0
    mode: str = "teacher_cfg"
    noise_source: str = "fresh"

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.w_i < 1.0 or self.w_t < 1.0:
            raise ContractError("guidance scales must be >= 1")
        if self.mode not in ("teacher_cfg", "student_distilled"):
            raise ContractError(f"unknown sampler mode {self.mode!r}")
        if self.noise_source not in ("fresh", "unified_reference"):
            raise ContractError(f"unknown noise source {self.noise_source!r}")

    @property
    def evals_per_step(self) -> int:
        return 3 if self.mode == "teacher_cfg" else 1


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------

def interpolate(x1: np.ndarray, eps: np.ndarray, t: float) -> FlowPoint:
    """x_t = (1-t) x1 + t eps. t=0 recovers the sample, t=1 the noise."""
    x1 = np.asarray(x1, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x1.shape != eps.shape:
        raise ShapeError(f"x1 {x1.shape} and eps {eps.shape} differ")
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t must be in [0,1], got {t}")
    return FlowPoint(x_t=(1.0 - t) * x1 + t * eps, t=float(t), eps=eps)


def target_velocity(x1: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return np.asarray(eps, dtype=np.float64) - np.asarray(x1, dtype=np.float64)


def estimate_x1(x_t: np.ndarray, t, v_hat: np.ndarray) -> np.ndarray:
    """Endpoint estimate x1_hat = x_t - t v; exact when v is the true velocity."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ContractError("t must be in [0,1]")
    scale = t if t.ndim == 0 else t[:, None]
    return np.asarray(x_t, dtype=np.float64) - scale * np.asarray(v_hat, dtype=np.float64)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossResult:
    loss: float
    grads: dict[str, np.ndarray]
    fm_term: float
    reward_term: float
    breakdown: dict[str, dict] = field(default_factory=dict)
    drop_image: np.ndarray | None = None
    drop_text: np.ndarray | None = None


def _cfg_dropout(b: int, rng: Rng | None):
    if rng is None:
        return np.zeros(b), np.zeros(b)
    u = rng.next().uniform(size=b)
    both = u < P_DROP_BOTH
    img = (u >= P_DROP_BOTH) & (u < P_DROP_BOTH + P_DROP_IMAGE)
    txt = (u >= P_DROP_BOTH + P_DROP_IMAGE) & (u < P_DROP_BOTH + P_DROP_IMAGE + P_DROP_TEXT)
    return (both | img).astype(np.float64), (both | txt).astype(np.float64)


def batch_loss(net: VelocityNet, batch, t_draws, eps_draws, *, reward_specs=(),
               t_weights=None, rng: Rng | None = None,
               force_drop_image: bool = False) -> LossResult:
    """Shared loss core: flow-matching MSE plus gated rewards, with gradients.

    Per-record weights are the product of each record's importance weight and
    the supplied timestep importance weight; both terms are weighted so the
    estimator stays unbiased under non-uniform timestep sampling.
    """
    if not batch:
        raise ContractError("batch must be nonempty")
    dims = {p.dim for p in batch}
    if len(dims) != 1:
        raise ContractError(f"batch must be dimension-homogeneous, got dims {sorted(dims)}")
    b = len(batch)
    x1 = np.stack([p.target.values for p in batch])
    x0 = np.stack([p.source.values for p in batch])
    t = np.asarray(t_draws, dtype=np.float64).reshape(b)
    eps = np.asarray(eps_draws, dtype=np.float64).reshape(b, -1)
    if eps.shape != x1.shape:
        raise ShapeError(f"eps shape {eps.shape}, expected {x1.shape}")
    w_rec = np.array([p.weight for p in batch])
    w_t = np.ones(b) if t_weights is None else np.asarray(t_weights, dtype=np.float64).reshape(b)
    w = (w_rec * w_t).reshape(b, 1)

    drop_img, drop_txt = _cfg_dropout(b, rng)

    x_t = (1.0 - t)[:, None] * x1 + t[:, None] * eps
    v_tgt = eps - x1

    g = Graph()
    cb = CondBatch.from_records([p.meta for p in batch], [p.instruction for p in batch])
    v = net.velocity_nodes(g, x_t, None if force_drop_image else x0, drop_img,
                           cb, t, drop_txt)

    fm = g.reduce_mean(g.mul(g.sq_err(v, g.constant(v_tgt)), g.constant(w)))
    loss_node = fm

    breakdown: dict[str, dict] = {}
    dim = x1.shape[1]
    blen = dim // 4
    rmask = np.zeros((b, dim))
    for spec in reward_specs:
        active = np.array([spec.active(batch[r].meta.tags, t[r]) for r in range(b)])
        breakdown[spec.id] = {"weight": spec.weight, "active_records": int(active.sum()),
                              "value": 0.0}
        if spec.weight == 0.0 or not active.any():
            continue
        cols = block_slice(dim, PRESERVE_BLOCK[spec.id])
        rmask[np.where(active)[0][:, None], np.arange(cols.start, cols.stop)[None, :]] += (
            spec.weight / blen)

    reward_term = 0.0
    if rmask.any():
        xhat = g.add(g.constant(x_t), g.mul(v, g.constant(-t.reshape(b, 1))))
        rnode = g.reduce_sum(g.mul(g.sq_err(xhat, g.constant(x0)),
                                   g.constant(rmask * w / b)))
        loss_node = g.add(fm, rnode)
        reward_term = float(rnode.value)
        xhat_v = xhat.value
        for spec in reward_specs:
            if breakdown[spec.id]["active_records"] == 0 or spec.weight == 0.0:
                continue
            cols = block_slice(dim, PRESERVE_BLOCK[spec.id])
            act = np.array([spec.active(batch[r].meta.tags, t[r]) for r in range(b)])
            mse = ((xhat_v[:, cols] - x0[:, cols]) ** 2).mean(axis=1)
            breakdown[spec.id]["value"] = float(
                (w[:, 0] * act * spec.weight * mse).sum() / b)

    grads_raw = backward(g, loss_node)
    grads = {name: grad_for(grads_raw, node) for name, node in g.param_nodes.items()}
    for name, tensor in net.params.items():
        if name not in grads:
            grads[name] = np.zeros(tensor.shape)
    return LossResult(loss=float(loss_node.value), grads=grads,
                      fm_term=float(fm.value), reward_term=reward_term,
                      breakdown=breakdown, drop_image=drop_img, drop_text=drop_txt)


def fm_loss(net: VelocityNet, batch, t_draws, eps_draws, *, t_weights=None,
            rng: Rng | None = None) -> LossResult:
    """Plain flow-matching loss (no rewards); see :func:`batch_loss`."""
    return batch_loss(net, batch, t_draws, eps_draws, reward_specs=(),
                      t_weights=t_weights, rng=rng)


def reward_loss(x0: np.ndarray, x_hat1: np.ndarray, tags, t: float,
                reward_specs) -> tuple[float, dict]:
    """Single-record reward total plus a per-reward breakdown."""
    x0 = np.asarray(x0, dtype=np.float64)
    x_hat1 = np.asarray(x_hat1, dtype=np.float64)
    if x0.shape != x_hat1.shape:
        raise ShapeError(f"x0 {x0.shape} and x_hat1 {x_hat1.shape} differ")
    dim = x0.shape[0]
    total = 0.0
    breakdown = {}
    for spec in reward_specs:
        active = spec.active(tags, t)
        value = 0.0
        if active:
            cols = block_slice(dim, PRESERVE_BLOCK[spec.id])
            value = spec.weight * float(((x0[cols] - x_hat1[cols]) ** 2).mean())
            total += value
        breakdown[spec.id] = {"active": active, "value": value}
    return total, breakdown


class UniformTimesteps:
    """Trivial timestep sampler: t ~ U(0,1), all importance weights 1."""

    def draw(self, rng: Rng, n: int):
        t = rng.next().uniform(size=n)
        return t, np.ones(n), np.zeros(n, dtype=np.int64)


def joint_loss(net: VelocityNet, batch, reward_specs, timestep_sampler,
               rng: Rng) -> LossResult:
    """Full training loss: flow matching plus gated rewards.

    Timesteps, noise draws, and CFG dropout all come from ``rng``; the
    sampler's importance weights multiply each record's loss so the
    estimator matches the uniform-timestep expectation.
    """
    b = len(batch)
    t, w_t, _bins = timestep_sampler.draw(rng, b)
    eps = rng.next().standard_normal((b, batch[0].dim))
    return batch_loss(net, batch, t, eps, reward_specs=reward_specs,
                      t_weights=w_t, rng=rng)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def guided_velocity(net, x: np.ndarray, x0: np.ndarray, metas, instrs, t,
                    w_i, w_t) -> np.ndarray:
    """Dual classifier-free guidance, three evaluations.

    Composed as v_cc + (w_i - 1)(v_cu - v_uu) + (w_t - 1)(v_cc - v_cu) so that
    at w_i = w_t = 1 the result is bitwise the fully-conditioned evaluation.
    Scales may be scalars or per-record arrays; ``t`` likewise.
    """
    b = len(x)
    ones = np.ones(b)
    zeros = np.zeros(b)
    v_uu = net.predict(x, x0, metas, instrs, t, drop_image=ones, drop_text=ones)
    v_cu = net.predict(x, x0, metas, instrs, t, drop_image=zeros, drop_text=ones)
    v_cc = net.predict(x, x0, metas, instrs, t, drop_image=zeros, drop_text=zeros)
    wi = np.asarray(w_i, dtype=np.float64)
    wt = np.asarray(w_t, dtype=np.float64)
    if wi.ndim:
        wi = wi.reshape(b, 1)
    if wt.ndim:
        wt = wt.reshape(b, 1)
    return v_cc + (wi - 1.0) * (v_cu - v_uu) + (wt - 1.0) * (v_cc - v_cu)


def sample(net, x0, metas, instrs, cfg: SamplerConfig, rng: Rng,
           noise_ref=None, start_noise=None) -> tuple[np.ndarray, int]:
    """Euler-integrate from t=1 to t=0; returns (endpoints, evals per record).

    The teacher combines three evaluations per step (dual CFG); the student
    makes one, with the guidance scales supplied as embeddings. With
    ``noise_source="unified_reference"`` integration starts from the
    reference noise predicted for each record instead of a fresh draw;
    ``start_noise`` overrides the starting point explicitly.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    b, dim = x0.shape
    if cfg.mode == "student_distilled" and not getattr(net, "guidance", False):
        raise ContractError("student sampling needs a network with guidance embeddings")

    if start_noise is not None:
        x = np.array(start_noise, dtype=np.float64).reshape(b, dim)
    elif cfg.noise_source == "unified_reference":
        if noise_ref is None:
            raise ContractError("unified_reference sampling needs a noise reference network")
        x = noise_ref.predict_eps(x0, metas, instrs)
    else:
        x = rng.next().standard_normal((b, dim))

    evals = 0
    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        t = 1.0 - k * dt
        if cfg.mode == "teacher_cfg":
            v = guided_velocity(net, x, x0, metas, instrs, t, cfg.w_i, cfg.w_t)
            evals += 3
        else:
            v = net.predict(x, x0, metas, instrs, t, w_i=cfg.w_i, w_t=cfg.w_t)
            evals += 1
        x = x - dt * v
    return x, evals
