"""Teacher-to-student compression: guidance distillation, unified noise
reference, and few-step trajectory distillation.

Three stages, run in order against a frozen teacher:

1. ``train_noise_ref`` fits a small predictor of a per-record reference
   noise. For each record, several candidate noise draws are pushed through
   the teacher's full sampler and the one whose endpoint best reconstructs
   the ground-truth target becomes the regression label. The frozen
   predictor then gives every record its own starting noise, so few-step
   trajectories stop competing for the same Gaussian paths.
2. ``distill_cfg`` teaches a guidance-embedding student to reproduce the
   teacher's 3-evaluation guided velocity in a single forward pass, across
   log-uniform draws of both guidance scales.
3. ``distill_fewstep`` partitions [0,1] into the student's step grid and
   regresses each one-Euler-step transition onto the teacher's fine-grained
   transition over the same segment, sharing the reference noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import flow
from .autodiff import Graph, Tensor, backward, grad_for
from .checkpoint import serialize
from .errors import ContractError
from .model import CondBatch, VelocityNet, condition_nodes, trunk_nodes
from .rng import Rng
from .toydata import ALL_TAGS, OP_KINDS, TASK_LABELS
from .trainer import Adam

log = logging.getLogger(__name__)

TEACHER_STEPS = 75
SUMMARY_LEN = len(TASK_LABELS) + len(ALL_TAGS) + len(OP_KINDS) + 4


@dataclass(frozen=True)
class DistillConfig:
    w_i_range: tuple = (1.0, 4.0)
    w_t_range: tuple = (1.0, 6.0)
    student_steps: int = 8
    cfg_iters: int = 4000
    fewstep_iters: int = 3000
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        for lo, hi in (self.w_i_range, self.w_t_range):
            if not (1.0 <= lo <= hi):
                raise ContractError(f"bad guidance range [{lo}, {hi}]")
        if self.student_steps not in (4, 8):
            raise ContractError("student_steps must be 4 or 8")
        if self.student_steps > TEACHER_STEPS:
            raise ContractError("student cannot take more steps than the teacher")


def param_checksum(params: dict[str, Tensor]) -> str:
    """Stable digest of a parameter collection (frozen-teacher assertions)."""
    import hashlib
    return hashlib.sha256(serialize(params)).hexdigest()


def cond_summary(metas, instrs) -> np.ndarray:
    """Compact (B, 18) conditioning summary for the noise-reference net."""
    b = len(metas)
    out = np.zeros((b, SUMMARY_LEN))
    nt, ng = len(TASK_LABELS), len(ALL_TAGS)
    for i, (m, ins) in enumerate(zip(metas, instrs)):
        out[i, TASK_LABELS.index(m.task_label)] = 1.0
        for t in m.tags:
            out[i, nt + ALL_TAGS.index(t)] = 1.0
        out[i, nt + ng + OP_KINDS.index(ins.op_kind)] = 1.0
        out[i, nt + ng + len(OP_KINDS):] = ins.params
    return out


@dataclass
class NoiseRefNet:
    """Two-layer predictor of the per-record reference noise."""

    dim: int
    hidden: int
    params: dict[str, Tensor]

    def predict_eps(self, x0, metas, instrs) -> np.ndarray:
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        inp = np.concatenate([x0, cond_summary(metas, instrs)], axis=1)
        p = self.params
        h = inp @ p["nr.0.w"].array + p["nr.0.b"].array
        x2 = h * h
        h = 0.5 * h * (1.0 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * x2 * h)))
        return h @ p["nr.1.w"].array + p["nr.1.b"].array


def init_noise_ref(dim: int, rng: Rng, hidden: int = 64) -> NoiseRefNet:
    gen = rng.next()
    fan0 = dim + SUMMARY_LEN
    params = {
        "nr.0.w": Tensor(gen.normal(0.0, 1.0 / np.sqrt(fan0), (fan0, hidden))),
        "nr.0.b": Tensor(np.zeros(hidden)),
        "nr.1.w": Tensor(gen.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, dim))),
        "nr.1.b": Tensor(np.zeros(dim)),
    }
    return NoiseRefNet(dim=dim, hidden=hidden, params=params)


def _noise_ref_step(net: NoiseRefNet, inp: np.ndarray, target: np.ndarray,
                    opt: Adam) -> float:
    g = Graph()
    h = g.add(g.matmul(g.constant(inp), g.param("nr.0.w", net.params["nr.0.w"])),
              g.param("nr.0.b", net.params["nr.0.b"]))
    h = g.gelu(h)
    out = g.add(g.matmul(h, g.param("nr.1.w", net.params["nr.1.w"])),
                g.param("nr.1.b", net.params["nr.1.b"]))
    loss = g.reduce_mean(g.sq_err(out, g.constant(target)))
    grads = backward(g, loss)
    for name, node in g.param_nodes.items():
        net.params[name] = Tensor(opt.update(name, net.params[name].array,
                                             grad_for(grads, node)))
    return float(loss.value)


def pick_reference_noise(teacher, pairs, rng: Rng, candidates: int = 8,
                         teacher_steps: int = TEACHER_STEPS) -> np.ndarray:
    """Best-of-n noise per record: the draw whose teacher endpoint lands closest
    to the ground-truth target."""
    n = len(pairs)
    dim = pairs[0].dim
    x0 = np.stack([p.source.values for p in pairs])
    x1 = np.stack([p.target.values for p in pairs])
    metas = [p.meta for p in pairs]
    instrs = [p.instruction for p in pairs]
    eps = rng.next().standard_normal((candidates, n, dim))
    cfg = flow.SamplerConfig(steps=teacher_steps, mode="teacher_cfg")
    errs = np.empty((candidates, n))
    for c in range(candidates):
        out, _ = flow.sample(teacher, x0, metas, instrs, cfg, rng, start_noise=eps[c])
        errs[c] = np.linalg.norm(out - x1, axis=1)
    best = errs.argmin(axis=0)
    return eps[best, np.arange(n)]


def train_noise_ref(teacher, dataset, rng: Rng, *, candidates: int = 8,
                    epochs: int = 60, batch: int = 64, lr: float = 2e-3,
                    teacher_steps: int = TEACHER_STEPS):
    """Fit the reference-noise predictor against best-of-n teacher endpoints.

    Returns (frozen NoiseRefNet, per-epoch train MSE history).
    """
    if not dataset:
        raise ContractError("dataset must be nonempty")
    pairs = list(dataset)
    dim = pairs[0].dim
    targets = pick_reference_noise(teacher, pairs, rng, candidates, teacher_steps)
    inp = np.concatenate([np.stack([p.source.values for p in pairs]),
                          cond_summary([p.meta for p in pairs],
                                       [p.instruction for p in pairs])], axis=1)
    net = init_noise_ref(dim, rng)
    opt = Adam(lr)
    history = []
    n = len(pairs)
    for _ in range(epochs):
        order = rng.next().permutation(n)
        losses = []
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            losses.append(_noise_ref_step(net, inp[idx], targets[idx], opt))
        history.append(float(np.mean(losses)))
    return net, history


# ---------------------------------------------------------------------------
# CFG distillation
# ---------------------------------------------------------------------------

def _student_step(student: VelocityNet, x_t, x0, cb: CondBatch, t, w_i, w_t,
                  target, opt: Adam) -> float:
    b = x_t.shape[0]
    g = Graph()
    cond = condition_nodes(g, student, cb, t, np.zeros(b), w_i=w_i, w_t=w_t)
    v = trunk_nodes(g, student, g.constant(x_t), x0, np.zeros(b), cond)
    loss = g.reduce_mean(g.sq_err(v, g.constant(target)))
    grads = backward(g, loss)
    for name, node in g.param_nodes.items():
        student.params[name] = Tensor(opt.update(name, student.params[name].array,
                                                 grad_for(grads, node)))
    return float(loss.value)


def _log_uniform(gen, lo: float, hi: float, n: int) -> np.ndarray:
    return np.exp(gen.uniform(np.log(lo), np.log(hi), size=n))


def distill_cfg(teacher, student: VelocityNet, dataset, cfg: DistillConfig):
    """Train the student to emit the teacher's guided velocity in one pass.

    Guidance scales are drawn log-uniformly from the configured ranges and
    fed to the student as embeddings; the teacher stays frozen (asserted by
    checksum). Returns (student, history of running MSE).
    """
    if not student.guidance:
        raise ContractError("student network lacks guidance embeddings")
    pairs = list(dataset)
    if not pairs:
        raise ContractError("dataset must be nonempty")
    before = param_checksum(teacher.params)
    rng = Rng(cfg.seed)
    opt = Adam(cfg.lr)
    dim = pairs[0].dim
    history = []
    for it in range(cfg.cfg_iters):
        gen = rng.next()
        idx = gen.integers(len(pairs), size=cfg.batch)
        batch = [pairs[i] for i in idx]
        x1 = np.stack([p.target.values for p in batch])
        x0 = np.stack([p.source.values for p in batch])
        metas = [p.meta for p in batch]
        instrs = [p.instruction for p in batch]
        t = gen.uniform(size=cfg.batch)
        eps = gen.standard_normal((cfg.batch, dim))
        x_t = (1.0 - t)[:, None] * x1 + t[:, None] * eps
        w_i = _log_uniform(gen, *cfg.w_i_range, cfg.batch)
        w_t = _log_uniform(gen, *cfg.w_t_range, cfg.batch)
        target = flow.guided_velocity(teacher, x_t, x0, metas, instrs, t, w_i, w_t)
        mse = _student_step(student, x_t, x0, CondBatch.from_records(metas, instrs),
                            t, w_i, w_t, target, opt)
        if (it + 1) % 100 == 0:
            history.append({"iter": it + 1, "mse": mse})
    if param_checksum(teacher.params) != before:
        raise ContractError("teacher parameters changed during distillation")
    return student, history


def velocity_match_report(teacher, student: VelocityNet, heldout, rng: Rng,
                          w_i_range=(1.0, 4.0), w_t_range=(1.0, 6.0),
                          draws: int = 512) -> dict:
    """Held-out MSE between student and teacher guided velocities across the
    guidance ranges, normalized by the mean squared teacher velocity."""
    pairs = list(heldout)
    dim = pairs[0].dim
    gen = rng.next()
    idx = gen.integers(len(pairs), size=draws)
    batch = [pairs[i] for i in idx]
    x1 = np.stack([p.target.values for p in batch])
    x0 = np.stack([p.source.values for p in batch])
    metas = [p.meta for p in batch]
    instrs = [p.instruction for p in batch]
    t = gen.uniform(size=draws)
    eps = gen.standard_normal((draws, dim))
    x_t = (1.0 - t)[:, None] * x1 + t[:, None] * eps
    w_i = _log_uniform(gen, *w_i_range, draws)
    w_t = _log_uniform(gen, *w_t_range, draws)
    v_teacher = flow.guided_velocity(teacher, x_t, x0, metas, instrs, t, w_i, w_t)
    v_student = student.predict(x_t, x0, metas, instrs, t, w_i=w_i, w_t=w_t)
    mse = float(((v_student - v_teacher) ** 2).mean())
    ref = float((v_teacher ** 2).mean())
    return {"mse": mse, "teacher_velocity_sq": ref, "relative": mse / ref,
            "draws": draws}


# ---------------------------------------------------------------------------
# few-step trajectory distillation
# ---------------------------------------------------------------------------

def distill_fewstep(teacher, student: VelocityNet, noise_ref, dataset,
                    cfg: DistillConfig):
    """Segment-consistency distillation onto the teacher's fine trajectory.

    [0,1] is split into the student's step grid. For a segment
    [t_lo, t_hi], the start point is the reference-noise interpolation at
    t_hi; the teacher integrates the segment with ~TEACHER_STEPS/steps Euler
    sub-steps and the student's single-step velocity is regressed onto the
    segment-mean velocity. Returns (student, history).
    """
    if not student.guidance:
        raise ContractError("student network lacks guidance embeddings")
    pairs = list(dataset)
    if not pairs:
        raise ContractError("dataset must be nonempty")
    before = param_checksum(teacher.params)
    rng = Rng(cfg.seed + 1)
    opt = Adam(cfg.lr)
    steps = cfg.student_steps
    sub = max(1, round(TEACHER_STEPS / steps))
    dt = 1.0 / steps
    history = []
    for it in range(cfg.fewstep_iters):
        gen = rng.next()
        idx = gen.integers(len(pairs), size=cfg.batch)
        batch = [pairs[i] for i in idx]
        x1 = np.stack([p.target.values for p in batch])
        x0 = np.stack([p.source.values for p in batch])
        metas = [p.meta for p in batch]
        instrs = [p.instruction for p in batch]
        eps_ref = noise_ref.predict_eps(x0, metas, instrs)
        k = gen.integers(steps, size=cfg.batch)
        t_hi = 1.0 - k * dt
        w_i = _log_uniform(gen, *cfg.w_i_range, cfg.batch)
        w_t = _log_uniform(gen, *cfg.w_t_range, cfg.batch)

        x_start = (1.0 - t_hi)[:, None] * x1 + t_hi[:, None] * eps_ref
        x = x_start
        for j in range(sub):
            t_cur = t_hi - j * (dt / sub)
            v = flow.guided_velocity(teacher, x, x0, metas, instrs, t_cur, w_i, w_t)
            x = x - (dt / sub) * v
        v_target = (x_start - x) / dt

        mse = _student_step(student, x_start, x0,
                            CondBatch.from_records(metas, instrs),
                            t_hi, w_i, w_t, v_target, opt)
        if (it + 1) % 100 == 0:
            history.append({"iter": it + 1, "mse": mse})
    if param_checksum(teacher.params) != before:
        raise ContractError("teacher parameters changed during distillation")
    return student, history
