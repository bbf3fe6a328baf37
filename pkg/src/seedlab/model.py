"""Conditional velocity network with meta-info and guidance embeddings.

The network is a 3-hidden-layer MLP (width 256, tanh-gelu, layer norm) whose
input is concat(x_t, x0-or-zeros, condition vector). The condition vector is
assembled from independent embedding tables:

    [ task(32) | tags(32) | instruction(10) | timestep(32) | gI(16) | gT(16) ]
      '----------- text segment (74) -----------'           '-- student only --'

* task labels index a 4x32 table; tags are multi-hot rows summed through a
  4x32 table; the instruction is its op one-hot plus raw params.
* dropping the text condition replaces the whole text segment with one
  learned null vector, identically for every instruction.
* dropping the image condition zeroes the x0 slot of the trunk input.
* guidance scales (student mode only) pass through a fixed sinusoidal basis
  and a learned projection, the same pattern as the timestep embedding.

The final layer is zero-initialized so a fresh network predicts zero
velocity everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Node, Tensor
from .errors import ContractError, ShapeError
from .rng import Rng
from .toydata import ALL_TAGS, OP_KINDS, TASK_LABELS, Instruction, MetaInfo

N_TASKS = len(TASK_LABELS)
N_TAGS = len(ALL_TAGS)
N_OPS = len(OP_KINDS)
INSTR_LEN = N_OPS + 4

_T_FREQS = 10.0 ** np.linspace(0.0, 3.0, 32)      # timestep sinusoidal basis (64 features)
_G_FREQS = 10.0 ** np.linspace(-1.0, 0.8, 8)      # guidance sinusoidal basis (16 features)


@dataclass
class VelocityNet:
    """Parameters plus sizing for one sample-dimension class."""

    dim: int
    width: int
    emb_dim: int
    guid_dim: int
    guidance: bool
    params: dict[str, Tensor]
    init_seed: tuple = (0, 0)
    hidden_layers: int = 3

    @property
    def text_len(self) -> int:
        return 2 * self.emb_dim + INSTR_LEN

    @property
    def cond_len(self) -> int:
        n = self.text_len + self.emb_dim
        return n + 2 * self.guid_dim if self.guidance else n

    @property
    def input_len(self) -> int:
        return 2 * self.dim + self.cond_len

    def predict(self, x_t, x0, metas, instrs, t, *, drop_image=False,
                drop_text=False, w_i=None, w_t=None) -> np.ndarray:
        """Inference forward over a batch; see module docstring for semantics."""
        g = Graph()
        xt = np.asarray(x_t, dtype=np.float64)
        single = xt.ndim == 1
        xt = np.atleast_2d(xt)
        b = xt.shape[0]
        cb = CondBatch.from_records(metas, instrs)
        cond = condition_nodes(g, self, cb, _as_vec(t, b), _as_vec(drop_text, b),
                               w_i=w_i, w_t=w_t, trainable=False)
        out = trunk_nodes(g, self, g.constant(xt), x0, _as_vec(drop_image, b),
                          cond, trainable=False)
        v = out.value
        return v[0].copy() if single else v

    def velocity_nodes(self, g: Graph, x_t: np.ndarray, x0, drop_image: np.ndarray,
                       cb: "CondBatch", t: np.ndarray, drop_text: np.ndarray,
                       w_i=None, w_t=None) -> Node:
        """Trainable forward on an existing tape; the loss functions' hook."""
        cond = condition_nodes(g, self, cb, t, drop_text, w_i=w_i, w_t=w_t)
        return trunk_nodes(g, self, g.constant(x_t), x0, drop_image, cond)


@dataclass
class CondBatch:
    """Vectorized per-record conditioning inputs."""

    labels: np.ndarray     # (B,) int task-label index
    tags_hot: np.ndarray   # (B, 4) multi-hot
    instr_enc: np.ndarray  # (B, 10) op one-hot + params

    @classmethod
    def from_records(cls, metas, instrs) -> "CondBatch":
        metas = [metas] if isinstance(metas, MetaInfo) else list(metas)
        instrs = [instrs] if isinstance(instrs, Instruction) else list(instrs)
        b = len(metas)
        labels = np.array([TASK_LABELS.index(m.task_label) for m in metas], dtype=np.int64)
        tags = np.zeros((b, N_TAGS))
        for i, m in enumerate(metas):
            for t in m.tags:
                tags[i, ALL_TAGS.index(t)] = 1.0
        enc = np.zeros((b, INSTR_LEN))
        for i, ins in enumerate(instrs):
            enc[i, OP_KINDS.index(ins.op_kind)] = 1.0
            enc[i, N_OPS:] = ins.params
        return cls(labels, tags, enc)


def _as_vec(x, b: int) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return np.full(b, float(arr)) if arr.ndim == 0 else arr


def _sin_features(x: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    phase = np.outer(x, freqs)
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


def init_net(dim_class: int, rng: Rng, *, guidance: bool = False, width: int = 256,
             emb_dim: int = 32, guid_dim: int = 16) -> VelocityNet:
    """Fresh network: scaled-normal trunk, zero final layer, 0.02-std embeddings."""
    if dim_class not in (8, 16, 32, 64):
        raise ContractError(f"dim_class must be one of (8, 16, 32, 64), got {dim_class}")
    init_seed = (rng.seed, rng.counter)
    gen = rng.next()
    net = VelocityNet(dim=dim_class, width=width, emb_dim=emb_dim, guid_dim=guid_dim,
                      guidance=guidance, params={}, init_seed=init_seed)
    p: dict[str, Tensor] = {}
    sizes = [net.input_len] + [width] * net.hidden_layers
    for i in range(net.hidden_layers):
        fan_in = sizes[i]
        p[f"trunk.{i}.w"] = Tensor(gen.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, width)))
        p[f"trunk.{i}.b"] = Tensor(np.zeros(width))
        p[f"ln.{i}.g"] = Tensor(np.ones(width))
        p[f"ln.{i}.b"] = Tensor(np.zeros(width))
    p[f"trunk.{net.hidden_layers}.w"] = Tensor(np.zeros((width, dim_class)))
    p[f"trunk.{net.hidden_layers}.b"] = Tensor(np.zeros(dim_class))
    p["emb.task"] = Tensor(gen.normal(0.0, 0.02, (N_TASKS, emb_dim)))
    p["emb.tag"] = Tensor(gen.normal(0.0, 0.02, (N_TAGS, emb_dim)))
    p["emb.tproj"] = Tensor(gen.normal(0.0, 0.02, (2 * _T_FREQS.size, emb_dim)))
    p["emb.null"] = Tensor(gen.normal(0.0, 0.02, (1, net.text_len)))
    if guidance:
        p["emb.gi_proj"] = Tensor(gen.normal(0.0, 0.02, (2 * _G_FREQS.size, guid_dim)))
        p["emb.gt_proj"] = Tensor(gen.normal(0.0, 0.02, (2 * _G_FREQS.size, guid_dim)))
    net.params = p
    return net


def condition_nodes(g: Graph, net: VelocityNet, cb: CondBatch, t: np.ndarray,
                    drop_text: np.ndarray, w_i=None, w_t=None,
                    trainable: bool = True) -> Node:
    """Assemble the (B, cond_len) condition matrix on the tape."""
    b = cb.labels.shape[0]
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ContractError("timesteps must lie in [0, 1]")
    par = g.param if trainable else (lambda name, v: g.constant(v))
    task_e = g.embed(par("emb.task", net.params["emb.task"]), cb.labels)
    tag_e = g.matmul(g.constant(cb.tags_hot), par("emb.tag", net.params["emb.tag"]))
    text = g.concat([task_e, tag_e, g.constant(cb.instr_enc)], axis=1)

    drop = np.asarray(drop_text, dtype=np.float64).reshape(b, 1)
    if drop.any():
        null_row = g.matmul(g.constant(np.ones((b, 1))),
                            par("emb.null", net.params["emb.null"]))
        text = g.add(g.mul(text, g.constant(1.0 - drop)),
                     g.mul(null_row, g.constant(drop)))

    t_e = g.matmul(g.constant(_sin_features(t, _T_FREQS)),
                   par("emb.tproj", net.params["emb.tproj"]))
    parts = [text, t_e]

    if net.guidance:
        if w_i is None or w_t is None:
            raise ContractError("student network needs guidance scales w_i and w_t")
        wi = _as_vec(w_i, b)
        wt = _as_vec(w_t, b)
        parts.append(g.matmul(g.constant(_sin_features(wi, _G_FREQS)),
                              par("emb.gi_proj", net.params["emb.gi_proj"])))
        parts.append(g.matmul(g.constant(_sin_features(wt, _G_FREQS)),
                              par("emb.gt_proj", net.params["emb.gt_proj"])))
    elif w_i is not None or w_t is not None:
        raise ContractError("guidance scales supplied to a network without guidance embeddings")
    return g.concat(parts, axis=1)


def trunk_nodes(g: Graph, net: VelocityNet, x_t: Node, x0, drop_image: np.ndarray,
                cond: Node, trainable: bool = True) -> Node:
    """Run the MLP trunk; ``x0`` may be None/absent (pure generation)."""
    b, d = x_t.shape
    if d != net.dim:
        raise ShapeError(f"network is for dim {net.dim}, got inputs of dim {d}")
    if x0 is None:
        x0_in = np.zeros((b, d))
    else:
        x0_in = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        if x0_in.shape != (b, d):
            raise ShapeError(f"x0 shape {x0_in.shape} does not match x_t {(b, d)}")
        keep = 1.0 - np.asarray(drop_image, dtype=np.float64).reshape(b, 1)
        x0_in = x0_in * keep
    par = g.param if trainable else (lambda name, v: g.constant(v))
    h = g.concat([x_t, g.constant(x0_in), cond], axis=1)
    for i in range(net.hidden_layers):
        z = g.add(g.matmul(h, par(f"trunk.{i}.w", net.params[f"trunk.{i}.w"])),
                  par(f"trunk.{i}.b", net.params[f"trunk.{i}.b"]))
        h = g.layer_norm(g.gelu(z), par(f"ln.{i}.g", net.params[f"ln.{i}.g"]),
                         par(f"ln.{i}.b", net.params[f"ln.{i}.b"]))
    i = net.hidden_layers
    return g.add(g.matmul(h, par(f"trunk.{i}.w", net.params[f"trunk.{i}.w"])),
                 par(f"trunk.{i}.b", net.params[f"trunk.{i}.b"]))


def assemble_input(net: VelocityNet, x_t, x0, metas, instrs, t, *, drop_image=0.0,
                   drop_text=0.0, w_i=None, w_t=None) -> np.ndarray:
    """The (B, input_len) trunk input matrix: concat(x_t, masked x0, condition).

    Float-path helper for calibration and the quantization simulator, which
    run the trunk themselves.
    """
    g = Graph()
    xt = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    b, d = xt.shape
    cond = condition_nodes(g, net, CondBatch.from_records(metas, instrs),
                           _as_vec(t, b), _as_vec(drop_text, b),
                           w_i=w_i, w_t=w_t, trainable=False)
    if x0 is None:
        x0_in = np.zeros((b, d))
    else:
        keep = 1.0 - _as_vec(drop_image, b).reshape(b, 1)
        x0_in = np.atleast_2d(np.asarray(x0, dtype=np.float64)) * keep
    return np.concatenate([xt, x0_in, cond.value], axis=1)


def encode_condition(net: VelocityNet, meta: MetaInfo, instr: Instruction, t: float,
                     drop_image: bool = False, drop_text: bool = False,
                     w_i: float | None = None, w_t: float | None = None) -> np.ndarray:
    """Single-record condition vector.

    ``drop_image`` does not enter the vector; it is forwarded to the trunk
    input assembly, where it zeroes the x0 slot.
    """
    del drop_image
    g = Graph()
    cond = condition_nodes(g, net, CondBatch.from_records(meta, instr),
                           np.array([float(t)]), np.array([float(drop_text)]),
                           w_i=w_i, w_t=w_t, trainable=False)
    return cond.value[0].copy()


def forward(net: VelocityNet, x_t, x0, cond) -> np.ndarray:
    """Velocity for precomputed condition vectors (inference contract).

    Accepts single vectors or batches; ``x0=None`` means the image condition
    is absent.
    """
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    c = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    if c.shape != (x.shape[0], net.cond_len):
        raise ShapeError(f"condition shape {c.shape}, expected {(x.shape[0], net.cond_len)}")
    g = Graph()
    b = x.shape[0]
    drop = np.zeros(b) if x0 is not None else np.ones(b)
    out = trunk_nodes(g, net, g.constant(x), x0, drop, g.constant(c), trainable=False)
    v = out.value
    return v[0].copy() if single else v


def init_family(dims, rng: Rng, **kw) -> dict[int, VelocityNet]:
    """One net per dim class, all sharing the same embedding-table tensors."""
    nets: dict[int, VelocityNet] = {}
    shared = None
    for d in sorted(set(dims)):
        net = init_net(d, rng, **kw)
        if shared is None:
            shared = {k: v for k, v in net.params.items() if k.startswith("emb.")}
        else:
            net.params.update(shared)
        nets[d] = net
    return nets


def student_from_teacher(teacher: VelocityNet, rng: Rng) -> VelocityNet:
    """Guidance-capable copy of a teacher, warm-started to match it.

    Teacher weights fill the matching input rows of the first layer; the new
    guidance rows start at zero, so before distillation the student computes
    exactly the teacher's conditioned forward regardless of the scales fed in.
    """
    if teacher.guidance:
        raise ContractError("teacher already has guidance embeddings")
    student = init_net(teacher.dim, rng, guidance=True, width=teacher.width,
                       emb_dim=teacher.emb_dim, guid_dim=teacher.guid_dim)
    p = dict(student.params)
    for name, tensor in teacher.params.items():
        if name == "trunk.0.w":
            w = np.zeros((student.input_len, student.width))
            w[:teacher.input_len] = tensor.array
            p[name] = Tensor(w)
        else:
            p[name] = tensor
    student.params = p
    return student


def model_card(net: VelocityNet) -> dict:
    return {
        "dim": net.dim,
        "width": net.width,
        "hidden_layers": net.hidden_layers,
        "emb_dim": net.emb_dim,
        "guid_dim": net.guid_dim,
        "guidance": net.guidance,
        "init_seed": list(net.init_seed),
        "cond_len": net.cond_len,
        "param_names": sorted(net.params),
    }


def net_from_params(params: dict[str, Tensor]) -> VelocityNet:
    """Rebuild a network around checkpointed parameters, inferring sizes."""
    hidden = 0
    while f"trunk.{hidden + 1}.w" in params:
        hidden += 1
    if hidden == 0 or "emb.task" not in params:
        raise ContractError("parameter collection is not a velocity network")
    dim = params[f"trunk.{hidden}.w"].shape[1]
    return VelocityNet(
        dim=dim,
        width=params["trunk.0.w"].shape[1],
        emb_dim=params["emb.task"].shape[1],
        guid_dim=params["emb.gi_proj"].shape[1] if "emb.gi_proj" in params else 16,
        guidance="emb.gi_proj" in params,
        params=dict(params),
        hidden_layers=hidden,
    )
