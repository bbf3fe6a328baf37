import numpy as np
import pytest

from seedlab import toydata as td
from seedlab.errors import ContractError
from seedlab.features import cosine, feature_map
from seedlab.rng import Rng


def shift_pairs(n=8, source="traditional_op", seed=3, dims=(8,)):
    return td.gen_pairs(source, n, dims, Rng(seed), op_kinds=["shift_content"])


# -- generation --------------------------------------------------------------

def test_traditional_shift_is_exact():
    p = shift_pairs(1)[0]
    delta = p.instruction.params[0]
    assert np.array_equal(p.target.block(3), p.source.block(3) + delta)
    for b in range(3):
        assert np.array_equal(p.target.block(b), p.source.block(b))
    assert p.quality == 1.0


def test_synthesized_leaks_exactly_one_uninstructed_block():
    pairs = td.gen_pairs("synthesized", 200, [8], Rng(5), op_kinds=["shift_content"])
    for p in pairs:
        resid = [float(np.max(np.abs(p.target.block(b) - p.source.block(b))))
                 for b in range(3)]  # un-instructed blocks for shift_content
        assert sum(r > 0 for r in resid) == 1


def test_synthesized_leak_rms_near_sigma():
    pairs = td.gen_pairs("synthesized", 1000, [8], Rng(6), op_kinds=["shift_content"])
    sq = []
    for p in pairs:
        for b in range(3):
            d = p.target.block(b) - p.source.block(b)
            if np.any(d):
                sq.extend((d ** 2).tolist())
    rms = float(np.sqrt(np.mean(sq)))
    assert abs(rms - td.SIGMA_LEAK) < 0.03


def test_video_pairs_start_as_noop():
    pairs = td.gen_pairs("video_frames", 10, [8, 16], Rng(7))
    for p in pairs:
        assert p.instruction.op_kind == "identity_noop"
        assert p.meta.task_label == "video_pair"


def test_specialist_quality_range():
    pairs = td.gen_pairs("specialist", 100, [8], Rng(8))
    assert all(0.7 <= p.quality <= 1.0 for p in pairs)
    assert all(p.instruction.op_kind in td.SINGLE_BLOCK_OPS for p in pairs)


def test_gen_rejects_bad_inputs():
    with pytest.raises(ContractError):
        td.gen_pairs("traditional_op", 0, [8], Rng(0))
    with pytest.raises(ContractError):
        td.gen_pairs("traditional_op", 1, [], Rng(0))
    with pytest.raises(ContractError):
        td.gen_pairs("traditional_op", 1, [7], Rng(0))


def test_generation_is_counter_parallel():
    a = td.gen_pairs("synthesized", 5, [8], Rng(11))
    b = td.gen_pairs("synthesized", 5, [8], Rng(11))
    for x, y in zip(a, b):
        assert np.array_equal(x.target.values, y.target.values)


# -- recaption ---------------------------------------------------------------

def test_recaption_recovers_rotation():
    src = Rng(1).next().uniform(-2, 2, 8)
    instr = td.Instruction("rotate_structure", [0.5])
    pair = td.EditPair(td.ToySample(8, src),
                       td.ToySample(8, td.apply_instruction(src, instr)),
                       instr, td.MetaInfo("traditional_op", frozenset(), "traditional_op"))
    rec = td.recaption(pair)
    assert rec.op_kind == "rotate_structure"
    assert abs(rec.params[0] - 0.5) < 1e-6


def test_recaption_identity_pair_is_noop():
    s = td.ToySample(8, np.linspace(-1, 1, 8))
    pair = td.EditPair(s, s, td.Instruction("shift_content", [1.0]),
                       td.MetaInfo("default_edit", frozenset(), "synthesized"))
    assert td.recaption(pair).op_kind == "identity_noop"


def test_recaption_beats_leakage():
    pairs = td.gen_pairs("synthesized", 1000, [8, 16], Rng(21))
    hits = sum(td.recaption(p).op_kind == p.instruction.op_kind for p in pairs)
    assert hits / len(pairs) >= 0.99


def test_recaption_dataset_overwrites():
    pairs = td.gen_pairs("video_frames", 5, [8], Rng(31))
    recap = td.recaption_dataset(pairs)
    assert all(r.instruction == td.recaption(p) for p, r in zip(pairs, recap))


# -- tags --------------------------------------------------------------------

def test_tags_exact_shift():
    p = shift_pairs(1)[0]
    assert td.compute_tags(p) == frozenset(
        {"identity_preserve", "structure_preserve", "style_preserve", "local_edit"})


def test_tags_global_restyle():
    src = Rng(2).next().uniform(-2, 2, 8)
    instr = td.Instruction("global_restyle", [1.3, 0.5])
    tags = td.compute_tags_values(src, td.apply_instruction(src, instr))
    assert tags <= {"identity_preserve"}


def test_tags_change_identity():
    src = Rng(3).next().uniform(-2, 2, 8)
    instr = td.Instruction("change_identity", [1.0, -1.0, 0.3, 0.4])
    tags = td.compute_tags_values(src, td.apply_instruction(src, instr))
    assert "identity_preserve" not in tags


def test_tags_idempotent_and_pure():
    for p in td.gen_pairs("synthesized", 20, [8], Rng(4)):
        t1 = td.compute_tags(p)
        t2 = td.compute_tags(p)
        assert t1 == t2 == p.meta.tags


# -- filtering ---------------------------------------------------------------

def test_filter_identity_pair_kept():
    s = td.ToySample(8, np.linspace(-1, 1, 8))
    pair = td.EditPair(s, s, td.Instruction("identity_noop"),
                       td.MetaInfo("video_pair", frozenset(), "video_frames"))
    assert td.filter_pair(pair) == (True, "ok")


def test_filter_antipodal_dropped_for_similarity():
    v = np.linspace(-1, 1, 8)
    pair = td.EditPair(td.ToySample(8, v), td.ToySample(8, -v),
                       td.Instruction("identity_noop"),
                       td.MetaInfo("video_pair", frozenset(), "video_frames"))
    keep, reason = td.filter_pair(pair, theta_sim=0.5)
    assert not keep and reason == "similarity"


def test_filter_matches_bruteforce_on_video_corpus():
    pairs = td.gen_pairs("video_frames", 1000, [8], Rng(41))
    kept = sum(td.filter_pair(p, 0.8, 2.0)[0] for p in pairs)
    brute = 0
    for p in pairs:
        fm = feature_map(8)
        sim = cosine(fm.project(p.source.values), fm.project(p.target.values))
        disp = max(np.linalg.norm(p.target.block(b) - p.source.block(b))
                   for b in range(4))
        brute += (sim >= 0.8) and (disp <= 2.0)
    assert kept == brute
    assert 0 < kept  # the corpus is not degenerate


# -- reverse augmentation ----------------------------------------------------

def test_augment_reverse_shift():
    data = shift_pairs(4)
    out = td.augment_reverse(data)
    assert len(out) == 8
    for fwd, rev in zip(data, out[4:]):
        assert rev.instruction.op_kind == "shift_content"
        assert rev.instruction.params[0] == -fwd.instruction.params[0]
        assert np.array_equal(rev.source.values, fwd.target.values)


def test_augment_reverse_skips_noninvertible():
    pairs = td.gen_pairs("traditional_op", 6, [8], Rng(51), op_kinds=["change_identity"])
    assert td.augment_reverse(pairs) == pairs


def test_augment_reverse_roundtrip_within_1e9():
    pairs = td.gen_pairs("traditional_op", 100, [8, 16], Rng(61))
    for p in td.augment_reverse(pairs):
        inv = p.instruction.inverse()
        if inv is None:
            continue
        back = td.apply_instruction(td.apply_instruction(p.source.values,
                                                         p.instruction), inv)
        assert np.abs(back - p.source.values).max() < 1e-9


def test_augment_reverse_is_idempotent_closure():
    pairs = td.gen_pairs("traditional_op", 50, [8], Rng(71))
    once = td.augment_reverse(pairs)
    twice = td.augment_reverse(once)
    assert len(twice) == len(once)
    for a, b in zip(once, twice):
        assert np.array_equal(a.source.values, b.source.values)


# -- importance resampling ---------------------------------------------------

def test_resample_uniform_weights_preserve_frequencies():
    pairs = []
    for kind in ("shift_content", "rotate_structure"):
        pairs += td.gen_pairs("traditional_op", 200, [8], Rng(81), op_kinds=[kind])
    out = td.importance_resample(pairs, {"shift_content": 1.0, "rotate_structure": 1.0},
                                 Rng(82), n=10000)
    freq = np.mean([p.instruction.op_kind == "shift_content" for p in out])
    assert abs(freq - 0.5) < 0.02
    assert all(p.weight == 1.0 for p in out)


def test_resample_nine_to_one():
    pairs = []
    for kind in ("shift_content", "rotate_structure"):
        pairs += td.gen_pairs("traditional_op", 200, [8], Rng(83), op_kinds=[kind])
    out = td.importance_resample(pairs, {"shift_content": 9.0, "rotate_structure": 1.0},
                                 Rng(84), n=10000)
    freq = np.mean([p.instruction.op_kind == "shift_content" for p in out])
    assert abs(freq - 0.9) < 0.05 * 0.9
    shift = [p for p in out if p.instruction.op_kind == "shift_content"][0]
    assert shift.weight == pytest.approx(0.9 / 0.5)


def test_resample_single_class():
    pairs = shift_pairs(50)
    out = td.importance_resample(pairs, {"shift_content": 2.0}, Rng(85))
    assert len(out) == 50
    assert all(p.weight == 1.0 and p.instruction.op_kind == "shift_content"
               for p in out)


def test_resample_warns_on_missing_class(caplog):
    pairs = shift_pairs(10)
    with caplog.at_level("WARNING"):
        out = td.importance_resample(
            pairs, {"shift_content": 1.0, "swap_style": 5.0}, Rng(86))
    assert "swap_style" in caplog.text
    assert all(p.instruction.op_kind == "shift_content" for p in out)


# -- bucket planning ---------------------------------------------------------

def test_buckets_budget_64_dims_8_16():
    pairs = (td.gen_pairs("traditional_op", 16, [8], Rng(91)) +
             td.gen_pairs("traditional_op", 8, [16], Rng(92)))
    batches = td.plan_buckets(pairs, 64)
    assert [len(b) for b in batches] == [8, 8, 4, 4]
    dims = [b[0].dim for b in batches]
    assert dims == sorted(dims)
    for b in batches:
        assert len({p.dim for p in b}) == 1


def test_buckets_single_record():
    pairs = td.gen_pairs("traditional_op", 1, [64], Rng(93))
    batches = td.plan_buckets(pairs, 64)
    assert len(batches) == 1 and len(batches[0]) == 1


def test_buckets_budget_too_small():
    pairs = td.gen_pairs("traditional_op", 1, [64], Rng(94))
    with pytest.raises(ContractError):
        td.plan_buckets(pairs, 32)


def test_buckets_recount_oracle():
    rng = Rng(95)
    pairs = []
    for d in (8, 16, 32):
        pairs += td.gen_pairs("traditional_op", 333 + d, [d], rng)
    budget = 128
    batches = td.plan_buckets(pairs, budget)
    seen = 0
    for b in batches:
        dim = b[0].dim
        assert len(b) == budget // dim
        assert len(b) * dim <= budget
        seen += len(b)
    expected = sum((sum(p.dim == d for p in pairs) // (budget // d)) * (budget // d)
                   for d in (8, 16, 32))
    assert seen == expected


# -- serialization -----------------------------------------------------------

def test_dataset_roundtrip_and_manifest(tmp_path):
    pairs = td.gen_pairs("synthesized", 30, [8, 16], Rng(96))
    path = tmp_path / "d.jsonl"
    td.write_dataset(pairs, path, seed=96)
    back = td.read_dataset(path)
    assert len(back) == 30
    for a, b in zip(pairs, back):
        assert np.array_equal(a.source.values, b.source.values)
        assert np.array_equal(a.target.values, b.target.values)
        assert a.instruction == b.instruction
        assert a.meta == b.meta
        assert a.quality == b.quality and a.weight == b.weight
    import json
    manifest = json.loads((tmp_path / "d.jsonl.manifest.json").read_text())
    assert manifest["records"] == 30
    assert manifest["seed"] == 96
    assert manifest["source_kind_counts"] == {"synthesized": 30}


def test_dataset_bytes_deterministic(tmp_path):
    for name in ("a", "b"):
        td.write_dataset(td.gen_pairs("video_frames", 20, [8], Rng(97)),
                         tmp_path / name, seed=97)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_float_serialization_has_17_digits():
    p = shift_pairs(1)[0]
    line = td.record_to_line(p)
    import json
    d = json.loads(line)
    assert d["source"] == list(p.source.values)  # .17g round-trips exactly


# -- instruction direction ---------------------------------------------------

def test_direction_is_unit_and_cached():
    instr = td.Instruction("shift_content", [1.0])
    d1 = instr.direction(8)
    assert d1 is td.Instruction("shift_content", [1.0]).direction(8)
    assert np.linalg.norm(d1) == pytest.approx(1.0)


def test_direction_noop_is_none():
    assert td.Instruction("identity_noop").direction(8) is None


def test_sample_value_bound_enforced():
    with pytest.raises(ContractError):
        td.ToySample(8, np.full(8, 5.0))
