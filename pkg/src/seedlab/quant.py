"""Post-training quantization of the trunk GEMMs, with a MAC cost model.

Pipeline: collect calibration activations, migrate activation outliers into
the weights (offline smoothing), search granularity/clip/smoothing per
sensitive layer by calibration output MSE, then fine-tune the log-scales
with a straight-through rounding surrogate. Inference runs simulated integer
matmuls (symmetric, round-half-even, 32-bit accumulation) and reports
arithmetic cost in weighted multiply-accumulates:

    float32 MAC = 1.0      int8 MAC = 0.25      int4 MAC = 0.125

Only the trunk GEMMs are quantized and costed; condition assembly is small
and stays in float.
"""

from __future__ import annotations

import base64
import time
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .errors import ContractError
from .model import VelocityNet, assemble_input

QMAX = {8: 127, 4: 7}
MAC_WEIGHT = {32: 1.0, 8: 0.25, 4: 0.125}
GRANULARITIES = ("per_tensor", "per_channel", "per_group")
GROUP_SIZE = 32
CLIP_RATIOS = (1.0, 0.9, 0.8, 0.7)
ALPHA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
SENSITIVE_REL_MSE = 1e-3

_LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class QuantScheme:
    """Everything needed to run one layer in integers."""

    bits: int
    granularity: str
    clip_ratio: float
    alpha: float | None         # smoothing exponent; None = no migration
    smooth: np.ndarray          # per-input-channel migration factors
    weight_scales: np.ndarray   # (1,1), (1,out) or (groups,out)
    act_scale: float

    def __post_init__(self):
        if self.bits not in QMAX:
            raise ContractError(f"bits must be one of {sorted(QMAX)}")
        if self.granularity not in GRANULARITIES:
            raise ContractError(f"unknown granularity {self.granularity!r}")
        if np.any(self.weight_scales <= 0) or self.act_scale <= 0:
            raise ContractError("quantization scales must be positive")


# ---------------------------------------------------------------------------
# quantize / dequantize
# ---------------------------------------------------------------------------

def _group_rows(n_rows: int) -> np.ndarray:
    return np.arange(n_rows) // GROUP_SIZE


def _calc_scales(x: np.ndarray, bits: int, granularity: str, clip_ratio: float):
    qmax = QMAX[bits]
    if granularity == "per_tensor":
        m = np.array([[np.abs(x).max()]])
    elif granularity == "per_channel":
        m = np.abs(x).max(axis=0, keepdims=True)
    else:
        groups = _group_rows(x.shape[0])
        m = np.stack([np.abs(x[groups == g]).max(axis=0)
                      for g in range(groups[-1] + 1)])
    return np.maximum(clip_ratio * m, 1e-12) / qmax


def _expand_scales(scales: np.ndarray, n_rows: int, granularity: str) -> np.ndarray:
    if granularity == "per_group":
        return scales[_group_rows(n_rows)]
    return scales  # (1,1) and (1,out) broadcast over rows


def quantize(x: np.ndarray, scheme: QuantScheme):
    """Symmetric round-to-nearest-even quantization of a 2-D tensor.

    Scales are computed from ``x`` itself with the scheme's granularity and
    clip ratio; values beyond the clip range saturate. Returns (q, scales).
    """
    x = np.asarray(x, dtype=np.float64)
    scales = _calc_scales(x, scheme.bits, scheme.granularity, scheme.clip_ratio)
    s = _expand_scales(scales, x.shape[0], scheme.granularity)
    qmax = QMAX[scheme.bits]
    q = np.clip(np.rint(x / s), -qmax, qmax).astype(np.int32)
    return q, scales


def dequantize(q: np.ndarray, scales: np.ndarray, granularity: str = "per_tensor"):
    return q.astype(np.float64) * _expand_scales(scales, q.shape[0], granularity)


def quantize_acts(x: np.ndarray, act_scale: float, bits: int) -> np.ndarray:
    qmax = QMAX[bits]
    return np.clip(np.rint(x / act_scale), -qmax, qmax).astype(np.int32)


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------

def smooth(w: np.ndarray, act_channel_max: np.ndarray, alpha: float):
    """Outlier migration: s_j = max|X_j|^a / max|W_.j|^(1-a).

    Activations are divided by s and the weight rows multiplied by s, so the
    float product is unchanged. Channels with a zero maximum keep s_j = 1.
    Returns (w_scaled, s).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must be in [0,1]")
    ax = np.asarray(act_channel_max, dtype=np.float64)
    wx = np.abs(w).max(axis=1)
    s = np.ones_like(ax)
    ok = (ax > 0) & (wx > 0)
    s[ok] = ax[ok] ** alpha / wx[ok] ** (1.0 - alpha)
    return w * s[:, None], s


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def _gelu_np(x):
    x2 = x * x
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x2 * x)))


def _layer_norm_np(x, gain, bias):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + _LN_EPS) * gain + bias


def trunk_layers(net: VelocityNet) -> list[str]:
    return [f"trunk.{i}" for i in range(net.hidden_layers + 1)]


def trunk_float_forward(net: VelocityNet, inp: np.ndarray, record=None) -> np.ndarray:
    """Plain numpy trunk forward, optionally recording each GEMM's input."""
    h = inp
    p = net.params
    for i in range(net.hidden_layers):
        if record is not None:
            record.setdefault(f"trunk.{i}", []).append(h)
        z = h @ p[f"trunk.{i}.w"].array + p[f"trunk.{i}.b"].array
        h = _layer_norm_np(_gelu_np(z), p[f"ln.{i}.g"].array, p[f"ln.{i}.b"].array)
    i = net.hidden_layers
    if record is not None:
        record.setdefault(f"trunk.{i}", []).append(h)
    return h @ p[f"trunk.{i}.w"].array + p[f"trunk.{i}.b"].array


@dataclass
class CalibSet:
    """Recorded per-layer GEMM inputs from forward passes over held-out pairs."""

    activations: dict[str, np.ndarray]
    weights: dict[str, np.ndarray]
    seed: int
    n: int

    def channel_max(self, layer: str) -> np.ndarray:
        return np.abs(self.activations[layer]).max(axis=0)


def collect_calibration(net: VelocityNet, pairs, rng, n: int = 256,
                        w_i=None, w_t=None) -> CalibSet:
    """Record trunk activations over ``n`` forward passes at random timesteps."""
    if not pairs:
        raise ContractError("calibration needs at least one pair")
    seed = rng.seed
    gen = rng.next()
    idx = gen.integers(len(pairs), size=n)
    batch = [pairs[i] for i in idx]
    x1 = np.stack([p.target.values for p in batch])
    x0 = np.stack([p.source.values for p in batch])
    t = gen.uniform(size=n)
    eps = gen.standard_normal(x1.shape)
    x_t = (1.0 - t)[:, None] * x1 + t[:, None] * eps
    kw = {}
    if net.guidance:
        kw = {"w_i": np.full(n, 1.5) if w_i is None else w_i,
              "w_t": np.full(n, 2.0) if w_t is None else w_t}
    inp = assemble_input(net, x_t, x0, [p.meta for p in batch],
                         [p.instruction for p in batch], t, **kw)
    record: dict[str, list] = {}
    trunk_float_forward(net, inp, record=record)
    acts = {k: np.concatenate(v, axis=0) for k, v in record.items()}
    weights = {k: net.params[f"{k}.w"].array for k in trunk_layers(net)}
    return CalibSet(activations=acts, weights=weights, seed=seed, n=n)


# ---------------------------------------------------------------------------
# scheme construction and search
# ---------------------------------------------------------------------------

def build_scheme(w: np.ndarray, x_calib: np.ndarray, bits: int, granularity: str,
                 clip_ratio: float, alpha: float | None) -> QuantScheme:
    """Pin every scale in a scheme from the calibration activations.

    ``alpha=None`` disables outlier migration entirely (identity factors).
    """
    if alpha is None:
        w_s, s = w, np.ones(w.shape[0])
    else:
        w_s, s = smooth(w, np.abs(x_calib).max(axis=0), alpha)
    wscales = _calc_scales(w_s, bits, granularity, clip_ratio)
    xs = x_calib / s
    qmax = QMAX[bits]
    act_scale = float(max(clip_ratio * np.abs(xs).max(), 1e-12) / qmax)
    return QuantScheme(bits=bits, granularity=granularity, clip_ratio=clip_ratio,
                       alpha=alpha, smooth=s, weight_scales=wscales,
                       act_scale=act_scale)


def qmatmul(x: np.ndarray, w: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Simulated integer GEMM: quantize both operands, accumulate, dequantize."""
    w_s = w * scheme.smooth[:, None]
    xs = x / scheme.smooth
    qmax = QMAX[scheme.bits]
    qx = quantize_acts(xs, scheme.act_scale, scheme.bits)
    s_rows = _expand_scales(scheme.weight_scales, w.shape[0], scheme.granularity)
    qw = np.clip(np.rint(w_s / s_rows), -qmax, qmax).astype(np.int64)
    qx = qx.astype(np.int64)
    if scheme.granularity == "per_group":
        groups = _group_rows(w.shape[0])
        out = np.zeros((x.shape[0], w.shape[1]))
        for gidx in range(groups[-1] + 1):
            rows = groups == gidx
            acc = qx[:, rows] @ qw[rows]
            _assert_i32(acc)
            out += acc * (scheme.act_scale * scheme.weight_scales[gidx])
        return out
    acc = qx @ qw
    _assert_i32(acc)
    return acc * (scheme.act_scale * scheme.weight_scales)


def _assert_i32(acc: np.ndarray) -> None:
    if acc.size and max(abs(int(acc.max())), abs(int(acc.min()))) >= 2**31:
        raise ContractError("integer accumulator exceeded 32 bits")


def layer_output_mse(w: np.ndarray, x_calib: np.ndarray, scheme: QuantScheme) -> float:
    y_ref = x_calib @ w
    y_q = qmatmul(x_calib, w, scheme)
    return float(((y_q - y_ref) ** 2).mean())


def candidate_grid(bits: int):
    return [(g, c, a) for g in GRANULARITIES for c in CLIP_RATIOS for a in ALPHA_GRID]


def search_scheme(w: np.ndarray, x_calib: np.ndarray, bits: int = 8,
                  candidates=None) -> QuantScheme:
    """Exhaustive candidate search minimizing calibration output MSE.

    Ties break toward the earlier candidate in enumeration order.
    """
    if candidates is None:
        candidates = candidate_grid(bits)
    if not candidates:
        raise ContractError("candidate set must be nonempty")
    best, best_mse = None, None
    for gran, clip, alpha in candidates:
        scheme = build_scheme(w, x_calib, bits, gran, clip, alpha)
        mse = layer_output_mse(w, x_calib, scheme)
        if best_mse is None or mse < best_mse:
            best, best_mse = scheme, mse
    return best


def is_sensitive(w: np.ndarray, x_calib: np.ndarray, bits: int = 8) -> bool:
    """Sensitive = plain per-tensor quantization already distorts the output."""
    scheme = build_scheme(w, x_calib, bits, "per_tensor", 1.0, None)
    ref = float(((x_calib @ w) ** 2).mean())
    if ref == 0.0:
        return False
    return layer_output_mse(w, x_calib, scheme) / ref > SENSITIVE_REL_MSE


# ---------------------------------------------------------------------------
# PTQ fine-tuning of the scales
# ---------------------------------------------------------------------------

def _ste_grads(w: np.ndarray, x: np.ndarray, scheme: QuantScheme):
    """Gradients of calibration MSE w.r.t. log act scale and log weight scales.

    Straight-through surrogate: d(s*q)/ds = q - u inside the clip range and
    sign(u)*qmax outside, with u the pre-rounding ratio.
    """
    qmax = QMAX[scheme.bits]
    w_s = w * scheme.smooth[:, None]
    xs = x / scheme.smooth

    ux = xs / scheme.act_scale
    qx = np.clip(np.rint(ux), -qmax, qmax)
    xq = qx * scheme.act_scale
    s_rows = _expand_scales(scheme.weight_scales, w.shape[0], scheme.granularity)
    uw = w_s / s_rows
    qw = np.clip(np.rint(uw), -qmax, qmax)
    wq = qw * s_rows

    y = xq @ wq
    y_ref = xs @ w_s
    n = y.size
    dy = 2.0 * (y - y_ref) / n

    dxq = dy @ wq.T
    dxq_dsa = np.where(np.abs(ux) < qmax, qx - ux, np.sign(ux) * qmax)
    g_log_sa = float((dxq * dxq_dsa).sum()) * scheme.act_scale

    dwq = xq.T @ dy
    dwq_dsw = np.where(np.abs(uw) < qmax, qw - uw, np.sign(uw) * qmax)
    contrib = dwq * dwq_dsw
    if scheme.granularity == "per_tensor":
        g_sw = np.array([[contrib.sum()]])
    elif scheme.granularity == "per_channel":
        g_sw = contrib.sum(axis=0, keepdims=True)
    else:
        groups = _group_rows(w.shape[0])
        g_sw = np.stack([contrib[groups == gi].sum(axis=0)
                         for gi in range(groups[-1] + 1)])
    g_log_sw = g_sw * scheme.weight_scales
    mse = float(((y - y_ref) ** 2).mean())
    return mse, g_log_sa, g_log_sw


def ptq_finetune_layer(w: np.ndarray, x_calib: np.ndarray, scheme: QuantScheme,
                       iters: int = 100, lr: float = 0.05):
    """Descend the log-scales; never ends worse than it starts.

    A proposal that regresses the calibration MSE is rejected; the step size
    halves and retries from the best point, so the recorded MSE history is
    non-increasing and an already-optimal scheme is returned unchanged.
    """
    best = scheme
    best_mse = layer_output_mse(w, x_calib, scheme)
    history = [best_mse]
    halvings = 0
    for _ in range(iters):
        cur, g_sa, g_sw = _ste_grads(w, x_calib, best)
        # descend log-MSE so the step size is invariant to the error scale
        norm = lr / max(cur, 1e-18)
        cand = dc_replace(
            best,
            act_scale=float(best.act_scale * np.exp(-norm * g_sa)),
            weight_scales=best.weight_scales * np.exp(-norm * g_sw),
        )
        mse = layer_output_mse(w, x_calib, cand)
        if mse <= best_mse:
            best, best_mse = cand, mse
            history.append(mse)
        else:
            halvings += 1
            lr *= 0.5
            if halvings >= 6:
                break
    return best, history


def ptq_finetune(schemes: dict[str, QuantScheme], calib: CalibSet,
                 iters: int = 100) -> dict[str, QuantScheme]:
    """Per-layer scale fine-tuning against the calibration set."""
    out = {}
    for layer, scheme in schemes.items():
        out[layer], _ = ptq_finetune_layer(calib.weights[layer],
                                           calib.activations[layer], scheme, iters)
    return out


# ---------------------------------------------------------------------------
# quantized network execution and cost accounting
# ---------------------------------------------------------------------------

def trunk_macs(net: VelocityNet) -> dict[str, int]:
    """Per-record multiply-accumulates of each trunk GEMM."""
    out = {}
    for i, layer in enumerate(trunk_layers(net)):
        w = net.params[f"trunk.{i}.w"]
        out[layer] = int(w.shape[0] * w.shape[1])
    return out


class QuantizedNet:
    """Drop-in ``predict`` wrapper running the trunk in simulated integers."""

    def __init__(self, net: VelocityNet, schemes: dict[str, QuantScheme]):
        missing = [l for l in trunk_layers(net) if l not in schemes]
        if missing:
            raise ContractError(f"no quantization scheme for layers: {missing}")
        self.net = net
        self.schemes = schemes
        self.guidance = net.guidance
        self.dim = net.dim
        self.records = 0
        self.evals = 0
        self.wall_clock = 0.0

    def predict(self, x_t, x0, metas, instrs, t, *, drop_image=0.0,
                drop_text=0.0, w_i=None, w_t=None) -> np.ndarray:
        t0 = time.perf_counter()
        inp = assemble_input(self.net, x_t, x0, metas, instrs, t,
                             drop_image=drop_image, drop_text=drop_text,
                             w_i=w_i, w_t=w_t)
        p = self.net.params
        h = inp
        for i in range(self.net.hidden_layers):
            z = qmatmul(h, p[f"trunk.{i}.w"].array, self.schemes[f"trunk.{i}"])
            z = z + p[f"trunk.{i}.b"].array
            h = _layer_norm_np(_gelu_np(z), p[f"ln.{i}.g"].array, p[f"ln.{i}.b"].array)
        i = self.net.hidden_layers
        out = qmatmul(h, p[f"trunk.{i}.w"].array, self.schemes[f"trunk.{i}"])
        out = out + p[f"trunk.{i}.b"].array
        self.records += inp.shape[0]
        self.evals += 1
        self.wall_clock += time.perf_counter() - t0
        return out

    def cost_report(self) -> dict:
        macs = trunk_macs(self.net)
        float_macs = sum(macs.values()) * self.records
        weighted = sum(m * MAC_WEIGHT[self.schemes[l].bits]
                       for l, m in macs.items()) * self.records
        return {
            "float_macs": int(float_macs),
            "weighted_macs": float(weighted),
            "eval_counts": int(self.evals),
            "record_forwards": int(self.records),
            "wall_clock_ms": self.wall_clock * 1e3,
        }


def qforward(net: VelocityNet, schemes: dict[str, QuantScheme], x_t, x0, metas,
             instrs, t, **kw):
    """One quantized forward pass; returns (velocities, cost report)."""
    qnet = QuantizedNet(net, schemes)
    out = qnet.predict(x_t, x0, metas, instrs, t, **kw)
    return out, qnet.cost_report()


def quantize_net(net: VelocityNet, calib: CalibSet, bits: int = 8,
                 finetune_iters: int = 100) -> tuple[dict[str, QuantScheme], dict]:
    """Full PTQ pipeline: sensitivity check, search where needed, fine-tune.

    Insensitive layers keep the plain per-tensor scheme; sensitive layers get
    the exhaustive granularity/clip/smoothing search. Returns
    (schemes, per-layer report).
    """
    schemes: dict[str, QuantScheme] = {}
    report: dict[str, dict] = {}
    for layer in trunk_layers(net):
        w = calib.weights[layer]
        x = calib.activations[layer]
        sensitive = is_sensitive(w, x, bits)
        if sensitive:
            scheme = search_scheme(w, x, bits)
        else:
            scheme = build_scheme(w, x, bits, "per_tensor", 1.0, None)
        mse0 = layer_output_mse(w, x, scheme)
        scheme, history = ptq_finetune_layer(w, x, scheme, iters=finetune_iters)
        report[layer] = {
            "sensitive": bool(sensitive),
            "granularity": scheme.granularity,
            "clip_ratio": scheme.clip_ratio,
            "alpha": scheme.alpha,
            "search_mse": mse0,
            "final_mse": history[-1],
        }
        schemes[layer] = scheme
    return schemes, report


# ---------------------------------------------------------------------------
# scheme table serialization
# ---------------------------------------------------------------------------

def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.asarray(a, dtype="<f4").tobytes()).decode("ascii")

def _unb64(s: str, shape) -> np.ndarray:
    a = np.frombuffer(base64.b64decode(s), dtype="<f4").astype(np.float64)
    return a.reshape(shape)


def schemes_to_json(schemes: dict[str, QuantScheme]) -> dict:
    out = {}
    for layer, s in schemes.items():
        out[layer] = {
            "bits": s.bits,
            "granularity": s.granularity,
            "clip_ratio": s.clip_ratio,
            "alpha": None if s.alpha is None else float(s.alpha),
            "scales": _b64(s.weight_scales),
            "scales_shape": list(s.weight_scales.shape),
            "act_scale": s.act_scale,
            "smooth": _b64(s.smooth),
            "group_size": GROUP_SIZE,
        }
    return out


def schemes_from_json(doc: dict) -> dict[str, QuantScheme]:
    out = {}
    for layer, d in doc.items():
        out[layer] = QuantScheme(
            bits=int(d["bits"]), granularity=d["granularity"],
            clip_ratio=float(d["clip_ratio"]),
            alpha=None if d["alpha"] is None else float(d["alpha"]),
            smooth=_unb64(d["smooth"], -1),
            weight_scales=_unb64(d["scales"], tuple(d["scales_shape"])),
            act_scale=float(d["act_scale"]),
        )
    return out
