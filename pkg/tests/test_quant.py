import numpy as np
import pytest

from seedlab import quant
from seedlab.errors import ContractError
from seedlab.model import init_net
from seedlab.rng import Rng
from seedlab.toydata import gen_pairs

gen = np.random.default_rng(2024)


def scheme_for(x, bits=8, gran="per_tensor", clip=1.0):
    scales = quant._calc_scales(x, bits, gran, clip)
    return quant.QuantScheme(bits=bits, granularity=gran, clip_ratio=clip,
                             alpha=0.0, smooth=np.ones(x.shape[0]),
                             weight_scales=scales, act_scale=1.0)


# -- quantize / dequantize ---------------------------------------------------

def test_quantize_zeros_roundtrip_exact():
    x = np.zeros((4, 4))
    s = scheme_for(np.ones((4, 4)))
    q, scales = quant.quantize(x, s)
    assert np.array_equal(q, np.zeros((4, 4), dtype=np.int32))


def test_int8_roundtrip_error_bounded_by_half_scale():
    x = gen.uniform(-3, 3, (16, 16))
    x[0, 0] = 3.0
    x[0, 1] = -3.0  # span the range
    s = scheme_for(x)
    q, scales = quant.quantize(x, s)
    back = quant.dequantize(q, scales, "per_tensor")
    scale = float(scales[0, 0])
    assert scale == pytest.approx(3.0 / 127)
    assert np.abs(back - x).max() <= scale / 2 + 1e-15


def test_roundtrip_bound_exhaustive_int8_grid():
    for trial in range(25):
        x = np.random.default_rng(trial).uniform(-2, 2, (8, 8))
        for gran in quant.GRANULARITIES:
            s = scheme_for(x, gran=gran)
            q, scales = quant.quantize(x, s)
            back = quant.dequantize(q, scales, gran)
            full = quant._expand_scales(scales, 8, gran)
            assert np.all(np.abs(back - x) <= np.broadcast_to(full, x.shape) / 2 + 1e-15)


def test_int4_range():
    x = gen.uniform(-1, 1, (4, 4))
    s = scheme_for(x, bits=4)
    q, _ = quant.quantize(x, s)
    assert q.max() <= 7 and q.min() >= -7


def test_clipping_saturates():
    x = np.array([[10.0, -10.0, 0.5, -0.5]]).T @ np.ones((1, 2))
    s = scheme_for(x, clip=0.5)
    q, scales = quant.quantize(x, s)
    assert q.max() == 127 and q.min() == -127


def test_per_channel_beats_per_tensor_mse():
    w = gen.normal(size=(32, 16)) * (10.0 ** gen.uniform(-2, 1, 16))
    mses = {}
    for gran in ("per_tensor", "per_channel"):
        s = scheme_for(w, gran=gran)
        q, scales = quant.quantize(w, s)
        back = quant.dequantize(q, scales, gran)
        mses[gran] = ((back - w) ** 2).mean()
    assert mses["per_channel"] <= mses["per_tensor"]


# -- smoothing ---------------------------------------------------------------

def test_smooth_alpha_zero_normalizes_rows():
    w = gen.normal(size=(8, 6)) * 3.0
    w_s, s = quant.smooth(w, np.ones(8), 0.0)
    assert np.allclose(np.abs(w_s).max(axis=1), 1.0)


def test_smooth_uniform_maxima_gives_uniform_factors():
    w = np.ones((5, 4))
    _, s = quant.smooth(w, np.full(5, 2.0), 0.5)
    assert np.allclose(s, s[0])


def test_smooth_zero_channel_keeps_unit_factor():
    w = np.ones((3, 2))
    _, s = quant.smooth(w, np.array([1.0, 0.0, 1.0]), 0.5)
    assert s[1] == 1.0


def test_smooth_preserves_float_product():
    w = gen.normal(size=(24, 12))
    x = gen.normal(size=(50, 24)) * (10.0 ** gen.uniform(-1, 2, 24))
    w_s, s = quant.smooth(w, np.abs(x).max(axis=0), 0.5)
    y1 = x @ w
    y2 = (x / s) @ w_s
    denom = np.maximum(np.abs(y1), 1e-9)
    assert (np.abs(y2 - y1) / denom).max() <= 1e-6


def test_smoothing_halves_outlier_mse():
    # one activation channel carries 50x outliers
    x = gen.normal(size=(256, 16))
    x[:, 3] *= 50.0
    w = gen.normal(size=(16, 8))
    plain = quant.build_scheme(w, x, 8, "per_tensor", 1.0, None)
    smoothed = quant.build_scheme(w, x, 8, "per_tensor", 1.0, 0.5)
    mse_plain = quant.layer_output_mse(w, x, plain)
    mse_smooth = quant.layer_output_mse(w, x, smoothed)
    assert mse_plain >= 2.0 * mse_smooth


# -- search ------------------------------------------------------------------

def test_search_single_candidate_returned():
    w = gen.normal(size=(16, 8))
    x = gen.normal(size=(64, 16))
    s = quant.search_scheme(w, x, candidates=[("per_tensor", 0.9, 0.5)])
    assert (s.granularity, s.clip_ratio, s.alpha) == ("per_tensor", 0.9, 0.5)


def test_search_matches_bruteforce():
    w = gen.normal(size=(16, 8)) * (10.0 ** gen.uniform(-1, 1, 8))
    x = gen.normal(size=(64, 16))
    cands = [("per_tensor", 1.0, 0.0), ("per_channel", 0.9, 0.5),
             ("per_group", 0.8, 1.0)]
    picked = quant.search_scheme(w, x, candidates=cands)
    best = min(cands, key=lambda c: quant.layer_output_mse(
        w, x, quant.build_scheme(w, x, 8, *c)))
    assert (picked.granularity, picked.clip_ratio, picked.alpha) == best


def test_search_prefers_per_channel_for_spread_columns():
    w = gen.normal(size=(16, 8)) * (10.0 ** np.linspace(-2, 1, 8))
    x = gen.normal(size=(64, 16))
    cands = [("per_tensor", 1.0, 0.0), ("per_channel", 1.0, 0.0)]
    assert quant.search_scheme(w, x, candidates=cands).granularity == "per_channel"


def test_search_empty_candidates_rejected():
    with pytest.raises(ContractError):
        quant.search_scheme(np.ones((4, 4)), np.ones((4, 4)), candidates=[])


# -- PTQ fine-tuning ---------------------------------------------------------

def _exact_layer():
    """Weights and activations already exact integer multiples of the scales."""
    sw = 0.01
    w = (gen.integers(-127, 128, size=(16, 8)) * sw).astype(np.float64)
    sa = 0.02
    x = (gen.integers(-127, 128, size=(64, 16)) * sa).astype(np.float64)
    scheme = quant.QuantScheme(bits=8, granularity="per_tensor", clip_ratio=1.0,
                               alpha=0.0, smooth=np.ones(16),
                               weight_scales=np.array([[sw]]), act_scale=sa)
    return w, x, scheme


def test_ptq_optimal_scales_unchanged():
    w, x, scheme = _exact_layer()
    before = quant.layer_output_mse(w, x, scheme)
    assert before < 1e-20
    tuned, hist = quant.ptq_finetune_layer(w, x, scheme, iters=10)
    assert quant.layer_output_mse(w, x, tuned) <= before + 1e-10


def test_ptq_recovers_perturbed_scales():
    w = gen.normal(size=(32, 16))
    x = gen.normal(size=(128, 32))
    good = quant.build_scheme(w, x, 8, "per_tensor", 1.0, None)
    mse_good = quant.layer_output_mse(w, x, good)
    from dataclasses import replace
    bad = replace(good, weight_scales=good.weight_scales * 2.0,
                  act_scale=good.act_scale * 2.0)
    mse_bad = quant.layer_output_mse(w, x, bad)
    tuned, hist = quant.ptq_finetune_layer(w, x, bad, iters=300)
    mse_tuned = hist[-1]
    assert mse_bad - mse_tuned >= 0.9 * (mse_bad - mse_good)
    assert all(b <= a + 1e-18 for a, b in zip(hist, hist[1:]))  # non-increasing


def test_ptq_finetune_never_regresses():
    w = gen.normal(size=(16, 8))
    x = gen.normal(size=(64, 16))
    scheme = quant.build_scheme(w, x, 8, "per_channel", 0.8, 0.5)
    before = quant.layer_output_mse(w, x, scheme)
    tuned, _ = quant.ptq_finetune_layer(w, x, scheme, iters=50)
    assert quant.layer_output_mse(w, x, tuned) <= before


# -- quantized network execution ----------------------------------------------

def _calibrated_net():
    net = init_net(8, Rng(31))
    from seedlab.autodiff import Tensor
    g2 = np.random.default_rng(7)
    net.params["trunk.3.w"] = Tensor(g2.normal(0, 0.1, (256, 8)))
    pairs = gen_pairs("traditional_op", 64, [8], Rng(33), op_kinds=["shift_content"])
    calib = quant.collect_calibration(net, pairs, Rng(35), n=64)
    return net, pairs, calib


def test_qforward_missing_scheme_rejected():
    net, pairs, calib = _calibrated_net()
    schemes, _ = quant.quantize_net(net, calib, finetune_iters=5)
    del schemes["trunk.2"]
    with pytest.raises(ContractError):
        quant.QuantizedNet(net, schemes)


def test_all_int8_weighted_cost_is_quarter():
    net, pairs, calib = _calibrated_net()
    schemes, _ = quant.quantize_net(net, calib, finetune_iters=5)
    qnet = quant.QuantizedNet(net, schemes)
    p = pairs[:4]
    out, report = quant.qforward(net, schemes, np.zeros((4, 8)),
                                 np.stack([q.source.values for q in p]),
                                 [q.meta for q in p], [q.instruction for q in p],
                                 0.5)
    assert report["weighted_macs"] == 0.25 * report["float_macs"]
    assert report["eval_counts"] == 1


def test_quantized_output_close_to_float():
    net, pairs, calib = _calibrated_net()
    schemes, _ = quant.quantize_net(net, calib, finetune_iters=20)
    qnet = quant.QuantizedNet(net, schemes)
    p = pairs[:16]
    x_t = Rng(37).next().standard_normal((16, 8))
    x0 = np.stack([q.source.values for q in p])
    metas = [q.meta for q in p]
    instrs = [q.instruction for q in p]
    vq = qnet.predict(x_t, x0, metas, instrs, 0.5)
    vf = net.predict(x_t, x0, metas, instrs, 0.5)
    rel = ((vq - vf) ** 2).mean() / max((vf ** 2).mean(), 1e-12)
    assert rel < 1e-2


def test_scheme_json_roundtrip():
    net, pairs, calib = _calibrated_net()
    schemes, _ = quant.quantize_net(net, calib, finetune_iters=5)
    doc = quant.schemes_to_json(schemes)
    back = quant.schemes_from_json(doc)
    for layer, s in schemes.items():
        b = back[layer]
        assert (b.bits, b.granularity, b.clip_ratio) == (s.bits, s.granularity,
                                                         s.clip_ratio)
        assert np.allclose(b.weight_scales, s.weight_scales, rtol=1e-6)


def test_calibration_reproducible():
    net, pairs, _ = _calibrated_net()
    a = quant.collect_calibration(net, pairs, Rng(41), n=32)
    b = quant.collect_calibration(net, pairs, Rng(41), n=32)
    for k in a.activations:
        assert np.array_equal(a.activations[k], b.activations[k])
