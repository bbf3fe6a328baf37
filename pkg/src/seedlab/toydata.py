"""Synthetic editing pairs with analytically known ground truth.

Samples are block-structured vectors standing in for images: four contiguous
blocks (identity, structure, style, content) of dim/4 entries each. Edit
operators act on named blocks, so every preservation claim ("the identity
block survived") is an exact arithmetic assertion rather than a perceptual
judgment.

Four generators mirror heterogeneous data sources, each with its own bias:

* ``synthesized``    - correct edit plus Gaussian leakage on one un-instructed
                       block (the unintended-change bias of generated data)
* ``specialist``     - clean single-block edits of varying quality
* ``traditional_op`` - exact deterministic edits, quality 1.0
* ``video_frames``   - two perturbations of a shared latent, no instruction
                       until re-captioning runs
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import ContractError
from .features import cosine, feature_map
from .rng import Rng

log = logging.getLogger(__name__)

DATA_FORMAT_VERSION = 1

DIMS = (8, 16, 32, 64)
BLOCKS = ("identity", "structure", "style", "content")

OP_KINDS = ("shift_content", "rotate_structure", "swap_style",
            "change_identity", "global_restyle", "identity_noop")
EDIT_OPS = OP_KINDS[:5]
SINGLE_BLOCK_OPS = ("shift_content", "rotate_structure", "swap_style", "change_identity")
INVERTIBLE_OPS = ("shift_content", "rotate_structure", "swap_style")

TASK_LABELS = ("default_edit", "specialist", "traditional_op", "video_pair")
SOURCE_KINDS = ("synthesized", "specialist", "traditional_op", "video_frames")
TASK_LABEL_FOR_SOURCE = {
    "synthesized": "default_edit",
    "specialist": "specialist",
    "traditional_op": "traditional_op",
    "video_frames": "video_pair",
}

PRESERVE_TAGS = ("identity_preserve", "structure_preserve", "style_preserve")
ALL_TAGS = ("local_edit",) + PRESERVE_TAGS

# Block touched by each single-block op; global_restyle touches all but identity.
OP_BLOCK = {
    "shift_content": 3,
    "rotate_structure": 1,
    "swap_style": 2,
    "change_identity": 0,
}

SIGMA_LEAK = 0.1     # leakage std on one un-instructed block of synthesized pairs
TAU_TAG = 1e-3       # max-norm tolerance for preservation tags
THETA_SIM = 0.8      # default feature-cosine keep threshold
THETA_CHANGE = 2.0   # default max block-displacement keep threshold

VALUE_BOUND = 4.0


def block_slice(dim: int, index: int) -> slice:
    w = dim // 4
    return slice(index * w, (index + 1) * w)


@dataclass(frozen=True, eq=False)
class ToySample:
    """Block-structured stand-in for an image."""

    dim: int
    values: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, ToySample) and self.dim == other.dim
                and np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.dim, self.values.tobytes()))

    def __post_init__(self):
        if self.dim not in DIMS:
            raise ContractError(f"sample dim must be one of {DIMS}, got {self.dim}")
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ContractError(f"sample needs {self.dim} values, got shape {v.shape}")
        if np.any(np.abs(v) > VALUE_BOUND):
            raise ContractError(f"sample values exceed [-{VALUE_BOUND}, {VALUE_BOUND}]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def block(self, index: int) -> np.ndarray:
        return self.values[block_slice(self.dim, index)]


@dataclass(frozen=True, eq=False)
class Instruction:
    """Structured edit request: an operator plus a fixed-length parameter vector."""

    op_kind: str
    params: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __eq__(self, other):
        return (isinstance(other, Instruction) and self.op_kind == other.op_kind
                and np.array_equal(self.params, other.params))

    def __hash__(self):
        return hash((self.op_kind, self.params.tobytes()))

    def __post_init__(self):
        if self.op_kind not in OP_KINDS:
            raise ContractError(f"unknown op_kind {self.op_kind!r}")
        p = np.zeros(4)
        raw = np.asarray(self.params, dtype=np.float64).reshape(-1)
        p[:raw.size] = raw[:4]
        if not np.all(np.isfinite(p)):
            raise ContractError("instruction params must be finite")
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    def direction(self, dim: int) -> np.ndarray | None:
        """Unit edit direction in feature space; None when the op is a no-op.

        Derived from the op applied to a fixed probe sample, so it depends
        only on (op_kind, params, dim) and is cached.
        """
        return _direction(self.op_kind, tuple(self.params), dim)

    def inverse(self) -> "Instruction | None":
        """Exact inverse instruction, or None for non-invertible ops."""
        if self.op_kind == "shift_content":
            return Instruction("shift_content", -self.params)
        if self.op_kind == "rotate_structure":
            return Instruction("rotate_structure", -self.params)
        if self.op_kind == "swap_style":
            return Instruction("swap_style", self.params)
        return None


@dataclass(frozen=True)
class MetaInfo:
    """Conditioning side-channel: data-source label plus computed edit tags."""

    task_label: str
    tags: frozenset
    source_kind: str

    def __post_init__(self):
        if self.task_label not in TASK_LABELS:
            raise ContractError(f"unknown task_label {self.task_label!r}")
        if self.source_kind not in SOURCE_KINDS:
            raise ContractError(f"unknown source_kind {self.source_kind!r}")
        bad = set(self.tags) - set(ALL_TAGS)
        if bad:
            raise ContractError(f"unknown tags {sorted(bad)}")
        object.__setattr__(self, "tags", frozenset(self.tags))


@dataclass(frozen=True)
class EditPair:
    """The atomic training record: (source, target, instruction, meta)."""

    source: ToySample
    target: ToySample
    instruction: Instruction
    meta: MetaInfo
    quality: float = 1.0
    weight: float = 1.0

    def __post_init__(self):
        if self.source.dim != self.target.dim:
            raise ContractError("source and target dims differ")
        if not 0.0 <= self.quality <= 1.0:
            raise ContractError(f"quality must be in [0,1], got {self.quality}")

    @property
    def dim(self) -> int:
        return self.source.dim


# ---------------------------------------------------------------------------
# exact edit operators
# ---------------------------------------------------------------------------

def apply_instruction(values: np.ndarray, instr: Instruction) -> np.ndarray:
    """The analytic editor: returns the exactly edited vector."""
    dim = values.shape[0]
    out = np.array(values, dtype=np.float64)
    p = instr.params
    kind = instr.op_kind
    if kind == "identity_noop":
        return out
    if kind == "shift_content":
        out[block_slice(dim, 3)] += p[0]
        return out
    if kind == "rotate_structure":
        s = block_slice(dim, 1)
        blk = out[s].reshape(-1, 2)
        c, sn = np.cos(p[0]), np.sin(p[0])
        out[s] = (blk @ np.array([[c, sn], [-sn, c]])).reshape(-1)
        return out
    if kind == "swap_style":
        s = block_slice(dim, 2)
        blk = out[s]
        half = blk.size // 2
        out[s] = np.concatenate([blk[half:], blk[:half]])
        return out
    if kind == "change_identity":
        s = block_slice(dim, 0)
        k = np.arange(out[s].size)
        out[s] = p[k % 4]
        return out
    if kind == "global_restyle":
        a, b = p[0], p[1]
        for i in (1, 2, 3):
            s = block_slice(dim, i)
            out[s] = a * out[s] + b
        return out
    raise ContractError(f"unknown op_kind {kind!r}")


@lru_cache(maxsize=4096)
def _direction(op_kind: str, params: tuple, dim: int) -> np.ndarray | None:
    probe = np.linspace(-1.5, 1.5, dim)
    edited = apply_instruction(probe, Instruction(op_kind, np.array(params)))
    fm = feature_map(dim)
    delta = fm.project(edited) - fm.project(probe)
    norm = np.linalg.norm(delta)
    if norm < 1e-12:
        return None
    d = delta / norm
    d.flags.writeable = False
    return d


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _draw_instruction(gen: np.random.Generator, op_kind: str) -> Instruction:
    if op_kind == "shift_content":
        delta = gen.choice([-1.0, 1.0]) * gen.uniform(0.5, 1.5)
        return Instruction("shift_content", [delta])
    if op_kind == "rotate_structure":
        theta = gen.choice([-1.0, 1.0]) * gen.uniform(0.3, 1.2)
        return Instruction("rotate_structure", [theta])
    if op_kind == "swap_style":
        return Instruction("swap_style")
    if op_kind == "change_identity":
        return Instruction("change_identity", gen.uniform(-2.0, 2.0, size=4))
    if op_kind == "global_restyle":
        a = gen.uniform(0.6, 1.4)
        b = gen.choice([-1.0, 1.0]) * gen.uniform(0.2, 1.0)
        return Instruction("global_restyle", [a, b])
    raise ContractError(f"cannot draw parameters for {op_kind!r}")


def _meta_for(source_kind: str, src: ToySample, tgt: ToySample) -> MetaInfo:
    return MetaInfo(
        task_label=TASK_LABEL_FOR_SOURCE[source_kind],
        tags=compute_tags_values(src.values, tgt.values, TAU_TAG),
        source_kind=source_kind,
    )


def gen_pairs(source_kind: str, n: int, dims, rng: Rng,
              op_kinds=None) -> list[EditPair]:
    """Generate ``n`` editing pairs from one source kind.

    Record i draws from counter ``base + i``, so generation is
    order-independent and safely parallel. ``op_kinds`` optionally restricts
    which edit operators the generator may pick.
    """
    if source_kind not in SOURCE_KINDS:
        raise ContractError(f"unknown source_kind {source_kind!r}")
    if n <= 0:
        raise ContractError("n must be positive")
    dims = sorted(set(int(d) for d in dims))
    if not dims or not set(dims) <= set(DIMS):
        raise ContractError(f"dims must be a nonempty subset of {DIMS}")

    if op_kinds is None:
        allowed = SINGLE_BLOCK_OPS if source_kind == "specialist" else EDIT_OPS
    else:
        allowed = tuple(op_kinds)
        bad = set(allowed) - set(EDIT_OPS)
        if bad:
            raise ContractError(f"op_kinds not generable: {sorted(bad)}")
        if source_kind == "specialist":
            allowed = tuple(k for k in allowed if k in SINGLE_BLOCK_OPS)
            if not allowed:
                raise ContractError("specialist source supports single-block ops only")

    base = rng.reserve(n)
    pairs = []
    for i in range(n):
        gen = rng.at(base + i)
        dim = int(gen.choice(dims))
        if source_kind == "video_frames":
            latent = gen.uniform(-2.0, 2.0, size=dim)
            src_v = np.clip(latent + gen.normal(0.0, 0.12, size=dim), -VALUE_BOUND, VALUE_BOUND)
            tgt_v = np.clip(latent + gen.normal(0.0, 0.12, size=dim), -VALUE_BOUND, VALUE_BOUND)
            src, tgt = ToySample(dim, src_v), ToySample(dim, tgt_v)
            pairs.append(EditPair(src, tgt, Instruction("identity_noop"),
                                  _meta_for(source_kind, src, tgt),
                                  quality=float(gen.uniform(0.5, 0.9))))
            continue

        instr = _draw_instruction(gen, str(gen.choice(allowed)))
        src_v = gen.uniform(-2.0, 2.0, size=dim)
        tgt_v = apply_instruction(src_v, instr)
        if source_kind == "synthesized":
            touched = {0} if instr.op_kind == "change_identity" else (
                {1, 2, 3} if instr.op_kind == "global_restyle" else {OP_BLOCK[instr.op_kind]})
            leak_block = int(gen.choice(sorted(set(range(4)) - touched)))
            s = block_slice(dim, leak_block)
            tgt_v[s] = np.clip(tgt_v[s] + gen.normal(0.0, SIGMA_LEAK, size=dim // 4),
                               -VALUE_BOUND, VALUE_BOUND)
            quality = float(gen.uniform(0.5, 0.95))
        elif source_kind == "specialist":
            quality = float(gen.uniform(0.7, 1.0))
        else:  # traditional_op: exact by construction
            quality = 1.0
        src, tgt = ToySample(dim, src_v), ToySample(dim, tgt_v)
        pairs.append(EditPair(src, tgt, instr, _meta_for(source_kind, src, tgt),
                              quality=quality))
    return pairs


# ---------------------------------------------------------------------------
# annotation
# ---------------------------------------------------------------------------

def _candidate_fits(src: np.ndarray, tgt: np.ndarray, dim: int):
    """Least-squares fit of every operator hypothesis; yields (residual, instr)."""
    def resid(instr):
        return float(np.sum((tgt - apply_instruction(src, instr)) ** 2))

    yield resid(Instruction("identity_noop")), Instruction("identity_noop")

    delta = float(np.mean(tgt[block_slice(dim, 3)] - src[block_slice(dim, 3)]))
    instr = Instruction("shift_content", [delta])
    yield resid(instr), instr

    s = block_slice(dim, 1)
    a = src[s].reshape(-1, 2)
    b = tgt[s].reshape(-1, 2)
    num = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    den = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    theta = float(np.arctan2(num, den)) if (num != 0.0 or den != 0.0) else 0.0
    instr = Instruction("rotate_structure", [theta])
    yield resid(instr), instr

    instr = Instruction("swap_style")
    yield resid(instr), instr

    idb = tgt[block_slice(dim, 0)]
    params = np.zeros(4)
    k = np.arange(idb.size)
    for j in range(4):
        sel = idb[k % 4 == j]
        params[j] = float(sel.mean()) if sel.size else 0.0
    instr = Instruction("change_identity", params)
    yield resid(instr), instr

    cols = np.r_[block_slice(dim, 1), block_slice(dim, 2), block_slice(dim, 3)]
    v, w = src[cols], tgt[cols]
    var = float(np.var(v))
    if var > 1e-12:
        a_fit = float(np.cov(v, w, bias=True)[0, 1] / var)
        b_fit = float(np.mean(w) - a_fit * np.mean(v))
    else:
        a_fit, b_fit = 1.0, float(np.mean(w - v))
    instr = Instruction("global_restyle", [a_fit, b_fit])
    yield resid(instr), instr


def recaption(pair: EditPair) -> Instruction:
    """Recover the instruction from the pair itself.

    Step 1 measures per-block differences; step 2 least-squares-fits every
    operator hypothesis against the full pair and keeps the best one. An
    exactly identical pair maps to ``identity_noop``.
    """
    src, tgt = pair.source.values, pair.target.values
    best_r, best = None, None
    for r, instr in _candidate_fits(src, tgt, pair.dim):
        if best_r is None or r < best_r - 1e-15:
            best_r, best = r, instr
    return best


def recaption_dataset(pairs) -> list[EditPair]:
    """Overwrite every pair's instruction with its re-captioned one."""
    return [replace(p, instruction=recaption(p)) for p in pairs]


def compute_tags_values(src: np.ndarray, tgt: np.ndarray, tau: float = TAU_TAG) -> frozenset:
    dim = src.shape[0]
    diffs = [float(np.max(np.abs(tgt[block_slice(dim, i)] - src[block_slice(dim, i)])))
             for i in range(4)]
    tags = {PRESERVE_TAGS[i] for i in range(3) if diffs[i] < tau}
    if sum(d >= tau for d in diffs) <= 1:
        tags.add("local_edit")
    return frozenset(tags)


def compute_tags(pair: EditPair, tau: float = TAU_TAG) -> frozenset:
    """Preservation tags: tag present iff its block moved less than ``tau``."""
    if tau <= 0:
        raise ContractError("tau must be positive")
    return compute_tags_values(pair.source.values, pair.target.values, tau)


def filter_pair(pair: EditPair, theta_sim: float = THETA_SIM,
                theta_change: float = THETA_CHANGE):
    """Coarse keep/drop: feature cosine and per-block displacement gates.

    Returns (keep, reason) where reason is "ok", "similarity" or
    "displacement"; similarity is checked first.
    """
    if not 0.0 <= theta_sim <= 1.0:
        raise ContractError("theta_sim must be in [0,1]")
    if theta_change <= 0.0:
        raise ContractError("theta_change must be positive")
    fm = feature_map(pair.dim)
    sim = cosine(fm.project(pair.source.values), fm.project(pair.target.values))
    if sim < theta_sim:
        return False, "similarity"
    disp = max(float(np.linalg.norm(pair.target.block(i) - pair.source.block(i)))
               for i in range(4))
    if disp > theta_change:
        return False, "displacement"
    return True, "ok"


# ---------------------------------------------------------------------------
# augmentation / resampling / bucketing
# ---------------------------------------------------------------------------

def _pair_key(p: EditPair):
    return (p.source.values.tobytes(), p.target.values.tobytes(),
            p.instruction.op_kind, p.instruction.params.tobytes())


def augment_reverse(dataset) -> list[EditPair]:
    """Append the backward edit for every pair with an exactly invertible op.

    Reversals already present are not duplicated, so the operation is its own
    closure: applying it twice equals applying it once.
    """
    if not dataset:
        raise ContractError("dataset must be nonempty")
    seen = {_pair_key(p) for p in dataset}
    out = list(dataset)
    for p in dataset:
        inv = p.instruction.inverse()
        if inv is None:
            continue
        rev = EditPair(p.target, p.source, inv, p.meta, quality=p.quality, weight=p.weight)
        key = _pair_key(rev)
        if key not in seen:
            seen.add(key)
            out.append(rev)
    return out


def importance_resample(dataset, class_weights: dict, rng: Rng, n: int | None = None):
    """Resample with replacement toward per-op-kind target frequencies.

    Each output record carries weight = target frequency / source frequency
    of its op kind, so downstream losses can reweight records per class.
    """
    if not dataset:
        raise ContractError("dataset must be nonempty")
    if any(w <= 0 for w in class_weights.values()):
        raise ContractError("class weights must be positive")
    counts: dict[str, list] = {}
    for i, p in enumerate(dataset):
        counts.setdefault(p.instruction.op_kind, []).append(i)
    present = {k: w for k, w in class_weights.items() if k in counts}
    missing = set(class_weights) - set(present)
    if missing:
        log.warning("weighted op kinds absent from dataset, renormalizing: %s",
                    sorted(missing))
    if not present:
        raise ContractError("no weighted op kind present in dataset")
    kinds = sorted(present)
    total = sum(present[k] for k in kinds)
    target = {k: present[k] / total for k in kinds}
    source = {k: len(counts[k]) / len(dataset) for k in kinds}

    n = len(dataset) if n is None else int(n)
    gen = rng.next()
    kind_draws = gen.choice(len(kinds), size=n, p=[target[k] for k in kinds])
    out = []
    for kd in kind_draws:
        k = kinds[int(kd)]
        rec = dataset[counts[k][int(gen.integers(len(counts[k])))]]
        out.append(replace(rec, weight=target[k] / source[k]))
    return out


def plan_buckets(dataset, token_budget: int) -> list[list[EditPair]]:
    """Dimension-homogeneous batches under a token budget, low dims first.

    Batch size for a bucket is floor(budget / dim); a partial tail per bucket
    is dropped so every emitted batch is full.
    """
    if not dataset:
        raise ContractError("dataset must be nonempty")
    max_dim = max(p.dim for p in dataset)
    if token_budget < max_dim:
        raise ContractError(
            f"token_budget {token_budget} below largest record dim {max_dim}")
    buckets: dict[int, list] = {}
    for p in dataset:
        buckets.setdefault(p.dim, []).append(p)
    batches = []
    for dim in sorted(buckets):
        size = token_budget // dim
        recs = buckets[dim]
        for i in range(0, len(recs) - size + 1, size):
            batches.append(recs[i:i + size])
    return batches


# ---------------------------------------------------------------------------
# serialization: line-delimited JSON with fixed field order, 17-digit floats
# ---------------------------------------------------------------------------

def _f(x: float) -> str:
    return format(float(x), ".17g")


def _farr(a) -> str:
    return "[" + ",".join(_f(v) for v in a) + "]"


def record_to_line(p: EditPair) -> str:
    tags = ",".join(f'"{t}"' for t in sorted(p.meta.tags))
    return ("{" + f'"dim":{p.dim},'
            f'"source":{_farr(p.source.values)},'
            f'"target":{_farr(p.target.values)},'
            f'"op_kind":"{p.instruction.op_kind}",'
            f'"params":{_farr(p.instruction.params)},'
            f'"task_label":"{p.meta.task_label}",'
            f'"tags":[{tags}],'
            f'"source_kind":"{p.meta.source_kind}",'
            f'"quality":{_f(p.quality)},'
            f'"weight":{_f(p.weight)}' + "}")


def record_from_line(line: str) -> EditPair:
    d = json.loads(line)
    dim = int(d["dim"])
    return EditPair(
        source=ToySample(dim, np.array(d["source"])),
        target=ToySample(dim, np.array(d["target"])),
        instruction=Instruction(d["op_kind"], np.array(d["params"])),
        meta=MetaInfo(d["task_label"], frozenset(d["tags"]), d["source_kind"]),
        quality=float(d["quality"]),
        weight=float(d["weight"]),
    )


def write_dataset(pairs, path, seed: int | None = None) -> None:
    pairs = list(pairs)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in pairs:
            f.write(record_to_line(p) + "\n")
    counts: dict[str, int] = {}
    for p in pairs:
        counts[p.meta.source_kind] = counts.get(p.meta.source_kind, 0) + 1
    manifest = {
        "generator_version": DATA_FORMAT_VERSION,
        "seed": seed,
        "records": len(pairs),
        "source_kind_counts": {k: counts[k] for k in sorted(counts)},
    }
    with open(str(path) + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_dataset(path) -> list[EditPair]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(record_from_line(line))
    return out
