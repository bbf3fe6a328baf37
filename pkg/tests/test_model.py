import numpy as np
import pytest

from seedlab.autodiff import Graph, backward, grad_for
from seedlab.checkpoint import serialize
from seedlab.errors import ContractError, ShapeError
from seedlab.model import (CondBatch, condition_nodes, encode_condition, forward,
                           init_family, init_net, model_card, net_from_params,
                           student_from_teacher, trunk_nodes)
from seedlab.rng import Rng
from seedlab.toydata import Instruction, MetaInfo

from oracles import max_rel_grad_err

META = MetaInfo("default_edit", frozenset({"identity_preserve", "local_edit"}),
                "synthesized")
INSTR = Instruction("shift_content", [0.7])


def small_net(seed=1, guidance=False):
    return init_net(8, Rng(seed), guidance=guidance, width=32)


def test_encode_condition_deterministic():
    net = small_net()
    a = encode_condition(net, META, INSTR, 0.3)
    b = encode_condition(net, META, INSTR, 0.3)
    assert np.array_equal(a, b)
    assert a.shape == (net.cond_len,)


def test_drop_text_collapses_instructions():
    net = small_net()
    other = Instruction("rotate_structure", [0.4])
    a = encode_condition(net, META, INSTR, 0.3, drop_text=True)
    b = encode_condition(net, META, other, 0.3, drop_text=True)
    assert np.array_equal(a[:net.text_len], b[:net.text_len])


def test_null_text_collapse_is_bitwise_on_outputs():
    net = init_net(8, Rng(3))
    x_t = Rng(4).next().standard_normal((3, 8))
    x0 = Rng(5).next().standard_normal((3, 8))
    va = net.predict(x_t, x0, [META] * 3, [INSTR] * 3, 0.4, drop_text=True)
    vb = net.predict(x_t, x0, [META] * 3,
                     [Instruction("global_restyle", [1.2, 0.3])] * 3, 0.4,
                     drop_text=True)
    assert np.array_equal(va, vb)


def test_guidance_scales_change_only_their_segment():
    net = small_net(guidance=True)
    a = encode_condition(net, META, INSTR, 0.3, w_i=1.5, w_t=2.0)
    b = encode_condition(net, META, INSTR, 0.3, w_i=3.0, w_t=2.0)
    seg = net.text_len + net.emb_dim
    assert np.array_equal(a[:seg], b[:seg])
    assert not np.array_equal(a[seg:seg + net.guid_dim], b[seg:seg + net.guid_dim])
    assert np.array_equal(a[seg + net.guid_dim:], b[seg + net.guid_dim:])


def test_guidance_scales_on_plain_net_rejected():
    net = small_net()
    with pytest.raises(ContractError):
        encode_condition(net, META, INSTR, 0.3, w_i=2.0, w_t=2.0)


def test_fresh_net_outputs_zero():
    net = init_net(8, Rng(7))
    v = net.predict(Rng(8).next().standard_normal((4, 8)),
                    Rng(9).next().standard_normal((4, 8)),
                    [META] * 4, [INSTR] * 4, 0.5)
    assert np.array_equal(v, np.zeros((4, 8)))


def test_same_seed_bit_identical_params():
    assert serialize(init_net(8, Rng(11)).params) == serialize(init_net(8, Rng(11)).params)


def test_trunk_weight_std_matches_fan_in():
    net = init_net(8, Rng(13))
    w = net.params["trunk.1.w"].array  # 256x256: 65k entries
    assert abs(w.std() * np.sqrt(w.shape[0]) - 1.0) < 0.1


def test_batch_matches_stacked_singles():
    net = small_net(17)
    _train_a_little(net)
    x_t = Rng(18).next().standard_normal((2, 8))
    x0 = Rng(19).next().standard_normal((2, 8))
    both = net.predict(x_t, x0, [META] * 2, [INSTR] * 2, 0.3)
    singles = np.stack([net.predict(x_t[i], x0[i], META, INSTR, 0.3)
                        for i in range(2)])
    assert np.allclose(both, singles, atol=1e-10)


def _train_a_little(net):
    # nudge params off their zero-init so outputs are nontrivial
    gen = np.random.default_rng(0)
    from seedlab.autodiff import Tensor
    i = net.hidden_layers
    net.params[f"trunk.{i}.w"] = Tensor(gen.normal(0, 0.05, net.params[f"trunk.{i}.w"].shape))
    net.params[f"trunk.{i}.b"] = Tensor(gen.normal(0, 0.05, net.params[f"trunk.{i}.b"].shape))


def test_forward_shape_contracts():
    net = small_net()
    cond = encode_condition(net, META, INSTR, 0.2)
    out = forward(net, np.zeros(8), np.zeros(8), cond)
    assert out.shape == (8,)
    with pytest.raises(ShapeError):
        forward(net, np.zeros((1, 4)), None, cond)
    with pytest.raises(ShapeError):
        forward(net, np.zeros((1, 8)), None, cond[:-2])


def test_forward_gradients_match_finite_differences():
    net = small_net(23)
    _train_a_little(net)
    x_t = Rng(24).next().standard_normal((2, 8))
    x0 = Rng(25).next().standard_normal((2, 8))
    cb = CondBatch.from_records([META] * 2, [INSTR] * 2)
    t = np.array([0.2, 0.7])

    def f(params):
        from seedlab.model import VelocityNet
        probe = VelocityNet(dim=net.dim, width=net.width, emb_dim=net.emb_dim,
                            guid_dim=net.guid_dim, guidance=False, params=params)
        g = Graph()
        out = probe.velocity_nodes(g, x_t, x0, np.zeros(2), cb, t, np.ones(2))
        loss = g.reduce_mean(out)
        grads = backward(g, loss)
        return float(loss.value), {k: grad_for(grads, n)
                                   for k, n in g.param_nodes.items()}

    rng = np.random.default_rng(77)
    err = max_rel_grad_err(f, dict(net.params), h=1e-5, coords_per_param=6, rng=rng)
    assert err < 1e-4


def test_student_warm_start_matches_teacher():
    teacher = init_net(8, Rng(31))
    _train_a_little(teacher)
    student = student_from_teacher(teacher, Rng(32))
    x_t = Rng(33).next().standard_normal((3, 8))
    x0 = Rng(34).next().standard_normal((3, 8))
    vt = teacher.predict(x_t, x0, [META] * 3, [INSTR] * 3, 0.4)
    vs = student.predict(x_t, x0, [META] * 3, [INSTR] * 3, 0.4, w_i=2.5, w_t=4.0)
    assert np.allclose(vt, vs, atol=1e-12)
    assert student.guidance
    with pytest.raises(ContractError):
        student_from_teacher(student, Rng(35))


def test_family_shares_embedding_tables():
    nets = init_family([8, 16], Rng(41), width=32)
    assert nets[8].params["emb.task"] is nets[16].params["emb.task"]
    assert nets[8].params["trunk.0.w"] is not nets[16].params["trunk.0.w"]


def test_net_from_params_reconstructs():
    net = small_net(43, guidance=True)
    back = net_from_params(dict(net.params))
    assert (back.dim, back.width, back.guidance) == (8, 32, True)
    card = model_card(back)
    assert card["cond_len"] == net.cond_len


def test_timestep_out_of_range_rejected():
    net = small_net()
    with pytest.raises(ContractError):
        encode_condition(net, META, INSTR, 1.5)
