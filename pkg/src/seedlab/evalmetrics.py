"""Evaluation metrics, 0-5 score calibration, rates, and guidance sweeps.

All metrics live in the fixed random-projection feature space so they are
pure functions of (inputs, pinned seeds). Raw metrics:

* consistency  - cosine of feature projections restricted to the blocks the
  record's preserve-tags claim (all blocks when untagged)
* direction    - cosine between the output's feature displacement and the
  instruction's canonical direction
* oracle error - RMS distance to the analytic ground-truth edit

The 0-5 scores use documented piecewise-linear calibrations, each monotone
in its raw metric:

    instruction_response = 5 * clip(1 - oracle_error / 2, 0, 1)
    image_consistency    = 5 * clip((consistency + 1) / 2, 0, 1)
    quality              = 5 * (fraction of output entries inside [-4, 4])

Records whose metric is degenerate (zero feature vector, zero edit) are
excluded from means and rates and counted separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flow
from .errors import ContractError
from .features import cosine, feature_map
from .rng import Rng
from .toydata import VALUE_BOUND, apply_instruction, block_slice

PRESERVE_COLS = {"identity_preserve": 0, "structure_preserve": 1, "style_preserve": 2}

CSV_HEADER = ("w_image,w_text,consistency,direction,oracle_error,"
              "evals_per_record,records,degenerate")


def endpoint_error(x_out: np.ndarray, x_true: np.ndarray) -> float:
    """RMS-per-entry distance between an output and its analytic target."""
    x_out = np.asarray(x_out, dtype=np.float64)
    return float(np.linalg.norm(x_out - x_true) / np.sqrt(x_out.shape[-1]))


def consistency_score(x0: np.ndarray, x_out: np.ndarray, tags) -> tuple[float, bool]:
    """Feature cosine over tag-preserved blocks; (0, True) when degenerate."""
    x0 = np.asarray(x0, dtype=np.float64)
    x_out = np.asarray(x_out, dtype=np.float64)
    if x0.shape != x_out.shape:
        raise ContractError("consistency_score needs equal shapes")
    dim = x0.shape[0]
    blocks = sorted(PRESERVE_COLS[t] for t in tags if t in PRESERVE_COLS)
    fm = feature_map(dim)
    if blocks:
        cols = np.concatenate([np.arange(block_slice(dim, b).start,
                                         block_slice(dim, b).stop) for b in blocks])
        fa, fb = fm.project_blocks(x0, cols), fm.project_blocks(x_out, cols)
    else:
        fa, fb = fm.project(x0), fm.project(x_out)
    if np.linalg.norm(fa) == 0.0 or np.linalg.norm(fb) == 0.0:
        return 0.0, True
    return cosine(fa, fb), False


def direction_score(x0: np.ndarray, x_out: np.ndarray, instr) -> tuple[float, bool]:
    """Cosine between the realized feature displacement and the instruction
    direction; degenerate for no-op instructions or unedited outputs."""
    x0 = np.asarray(x0, dtype=np.float64)
    x_out = np.asarray(x_out, dtype=np.float64)
    dim = x0.shape[0]
    d = instr.direction(dim)
    fm = feature_map(dim)
    delta = fm.project(x_out) - fm.project(x0)
    if d is None or np.linalg.norm(delta) == 0.0:
        return 0.0, True
    return cosine(delta, d), False


@dataclass(frozen=True)
class EvalRecord:
    pair_id: int
    consistency: float
    direction: float
    oracle_error: float
    scores: tuple          # (instruction_response, image_consistency, quality)
    degenerate: frozenset  # metric names that came back degenerate


def calibrate_scores(oracle_err: float, consistency: float,
                     in_range_frac: float) -> tuple:
    resp = 5.0 * min(max(1.0 - oracle_err / 2.0, 0.0), 1.0)
    cons = 5.0 * min(max((consistency + 1.0) / 2.0, 0.0), 1.0)
    qual = 5.0 * min(max(in_range_frac, 0.0), 1.0)
    return (resp, cons, qual)


def evaluate_output(pair_id: int, pair, x_out: np.ndarray) -> EvalRecord:
    x0 = pair.source.values
    x_true = apply_instruction(x0, pair.instruction)
    cons, cons_deg = consistency_score(x0, x_out, pair.meta.tags)
    direc, dir_deg = direction_score(x0, x_out, pair.instruction)
    err = endpoint_error(x_out, x_true)
    in_range = float(np.mean(np.abs(x_out) <= VALUE_BOUND))
    deg = set()
    if cons_deg:
        deg.add("consistency")
    if dir_deg:
        deg.add("direction")
    return EvalRecord(pair_id=pair_id, consistency=cons, direction=direc,
                      oracle_error=err,
                      scores=calibrate_scores(err, cons, in_range),
                      degenerate=frozenset(deg))


def evaluate_outputs(pairs, outputs) -> list[EvalRecord]:
    return [evaluate_output(i, p, o) for i, (p, o) in enumerate(zip(pairs, outputs))]


def rates(records, usable_threshold: float = 3.0,
          satisfied_threshold: float = 4.5) -> dict:
    """Usability/satisfaction percentages over non-degenerate records."""
    records = list(records)
    if not records:
        raise ContractError("rates need at least one record")
    scored = [r for r in records if not r.degenerate]
    n_deg = len(records) - len(scored)
    if not scored:
        return {"usability": 0.0, "satisfaction": 0.0, "scored": 0,
                "degenerate": n_deg}
    mins = np.array([min(r.scores) for r in scored])
    return {
        "usability": float(100.0 * np.mean(mins >= usable_threshold)),
        "satisfaction": float(100.0 * np.mean(mins >= satisfied_threshold)),
        "scored": len(scored),
        "degenerate": n_deg,
    }


# ---------------------------------------------------------------------------
# guidance trade-off sweep
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".6g")


def sweep_cfg(net, testset, w_i_grid, w_t_grid, rng: Rng, *, steps: int = 75,
              mode: str = "teacher_cfg", noise_source: str = "fresh",
              noise_ref=None) -> str:
    """One CSV row per (w_i, w_t): mean metrics over the test set.

    Degenerate records are excluded from the means and reported in the last
    column. Row order follows the grids; the header and 6-significant-digit
    formatting are stable.
    """
    pairs = list(testset)
    if not pairs or not len(list(w_i_grid)) or not len(list(w_t_grid)):
        raise ContractError("sweep needs a nonempty test set and nonempty grids")
    x0 = np.stack([p.source.values for p in pairs])
    metas = [p.meta for p in pairs]
    instrs = [p.instruction for p in pairs]
    lines = [CSV_HEADER]
    for w_i in w_i_grid:
        for w_t in w_t_grid:
            cfg = flow.SamplerConfig(steps=steps, w_i=float(w_i), w_t=float(w_t),
                                     mode=mode, noise_source=noise_source)
            out, evals = flow.sample(net, x0, metas, instrs, cfg, Rng(rng.seed),
                                     noise_ref=noise_ref)
            recs = evaluate_outputs(pairs, out)
            cons = [r.consistency for r in recs if "consistency" not in r.degenerate]
            dirs = [r.direction for r in recs if "direction" not in r.degenerate]
            errs = [r.oracle_error for r in recs]
            n_deg = sum(1 for r in recs if r.degenerate)
            lines.append(",".join([
                _fmt(w_i), _fmt(w_t),
                _fmt(np.mean(cons)) if cons else "nan",
                _fmt(np.mean(dirs)) if dirs else "nan",
                _fmt(np.mean(errs)),
                str(evals), str(len(pairs)), str(n_deg),
            ]))
    return "\n".join(lines) + "\n"
