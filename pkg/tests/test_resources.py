import numpy as np
import pytest

from conftest import data_path, enum_config
from micronas.autodiff import Tensor, grad_check, softmax
from micronas.hw_proxy import load_profiles
from micronas.resources import (
    KB,
    Budget,
    ResourceReport,
    check_budget,
    discrete_resources,
    expected_resources,
    layer_ops,
    layer_param_bytes,
    node_working_bytes,
)
from micronas.supernet import enumerate_architectures, one_hot, parse_architecture, parse_backbone_config


def single_node(kind_cfg, input_shape):
    net = parse_backbone_config({"input_shape": list(input_shape), "layers": [kind_cfg]})
    node = net.nodes[1]
    return net, node


def conv_ops_oracle(ho, wo, cout, kh, kw, cin):
    ops = 0
    for _ in range(ho * wo * cout):
        for _ in range(kh * kw * cin):
            ops += 2
    return ops


def random_z(net, rng):
    return {d.id: Tensor(rng.dirichlet(np.ones(d.num_options))) for d in net.decisions}


# -- per-layer costs ------------------------------------------------------------------


def test_one_mac_is_two_ops():
    _, node = single_node({"kind": "Conv2D", "kernel": [1, 1], "channels": {"fixed": 1}}, (1, 1, 1))
    assert layer_ops(node, (1, 1, 1), (1, 1, 1)) == 2


def test_kws_stem_conv_ops():
    _, node = single_node({"kind": "Conv2D", "kernel": [10, 4], "channels": {"fixed": 140}}, (49, 10, 1))
    ops = layer_ops(node, (49, 10, 1), (49, 10, 140))
    assert ops == 5_488_000 == conv_ops_oracle(49, 10, 140, 10, 4, 1)


def test_dense_param_bytes():
    _, node = single_node({"kind": "FullyConnected", "channels": {"fixed": 12}}, (196, 1, 1))
    assert layer_param_bytes(node, (196,), (12,), 8) == 2_400
    assert layer_param_bytes(node, (196,), (12,), 4) == 1_224
    assert layer_ops(node, (196,), (12,)) == 2 * 196 * 12
    with pytest.raises(ValueError):
        layer_param_bytes(node, (196,), (12,), 16)


def test_pooling_counts_zero_ops():
    net = parse_backbone_config({"input_shape": [4, 4, 3], "layers": [{"kind": "AvgPool", "kernel": [2, 2], "stride": 2}]})
    assert discrete_resources(net).total_ops == 0


def test_node_working_bytes_examples():
    assert node_working_bytes([(10,)], (5,), 8) == 15
    assert node_working_bytes([(49, 10, 1)], (49, 10, 140), 8) == 69_090
    assert node_working_bytes([(100,), (100,)], (100,), 8) == 300
    assert node_working_bytes([(10,)], (5,), 4) == 8
    with pytest.raises(ValueError):
        node_working_bytes([(10,)], (5,), 2)


def test_addskip_working_memory_in_report():
    cfg = {
        "input_shape": [10, 10, 1],
        "layers": [
            {"kind": "Conv2D", "name": "a", "kernel": [1, 1], "channels": {"fixed": 1}},
            {"kind": "Conv2D", "name": "b", "kernel": [1, 1], "channels": {"fixed": 1}},
            {"kind": "AddSkip", "name": "add", "inputs": ["a", "b"]},
        ],
    }
    rep = discrete_resources(parse_backbone_config(cfg))
    add = next(n for n in rep.nodes if n.op == "add")
    assert add.working_bytes == 300 and add.ops == 0


# -- reports ---------------------------------------------------------------------------


def test_report_totals_equal_sum_of_nodes(kws_m):
    rep = discrete_resources(kws_m)
    assert rep.total_ops == sum(n.ops for n in rep.nodes)
    assert rep.param_bytes == sum(n.param_bytes for n in rep.nodes)
    assert rep.peak_working_bytes == max(n.working_bytes for n in rep.nodes)
    assert next(n for n in rep.nodes if n.id == rep.peak_node_id).working_bytes == rep.peak_working_bytes


def test_kws_m_stem_and_ops(kws_m):
    rep = discrete_resources(kws_m)
    assert rep.nodes[0].ops == 5_488_000 and rep.nodes[0].working_bytes == 69_090
    assert abs(rep.total_ops / 30.6e6 - 1) <= 0.05


def test_kws_s_ops():
    rep = discrete_resources(parse_architecture(data_path("kws_s.json")))
    assert abs(rep.total_ops / 16.4e6 - 1) <= 0.05


def test_kws_m_flash_ratio(kws_m):
    ratio = discrete_resources(kws_m).param_bytes / (163 * KB)
    assert 0.6 <= ratio <= 1.0


def test_four_bit_weights_shrink_flash(kws_m):
    r8 = discrete_resources(kws_m, weight_bits=8)
    r4 = discrete_resources(kws_m, weight_bits=4, activation_bits=4)
    assert r4.param_bytes < r8.param_bytes
    assert r4.peak_working_bytes < r8.peak_working_bytes
    assert r4.total_ops == r8.total_ops


def test_report_json_round_trip(kws_m):
    rep = discrete_resources(kws_m)
    assert ResourceReport.from_dict(rep.to_dict()) == rep


def test_per_layer_oracle_matches_materialized_graph(enum_supernet):
    for sel in enumerate_architectures(enum_supernet):
        rep = discrete_resources(enum_supernet, sel)
        shapes = {n.id: tuple(n.output_shape) for n in rep.nodes}
        shapes["input"] = enum_supernet.input_shape
        ops = 0
        for entry in rep.nodes:
            node = enum_supernet.node(entry.id)
            src = node.inputs[0]
            while src not in shapes:  # absent choice nodes pass their present input through
                src = next(i for i in enum_supernet.node(src).inputs if i in shapes or enum_supernet.node(i).op == "choice")
            ops += layer_ops(node, shapes[src], shapes[entry.id])
        assert ops == rep.total_ops


# -- budgets ---------------------------------------------------------------------------------


def _report(ops, flash, sram):
    return ResourceReport(total_ops=ops, param_bytes=flash, peak_working_bytes=sram, peak_node_id=None)


def test_budget_effective_limits():
    b = Budget(flash_bytes=512 * KB, sram_bytes=128 * KB, max_ops=10)
    assert b.effective_sram == 128 * KB - 4 * KB - 34 * KB
    assert b.effective_flash == 512 * KB - 37 * KB
    with pytest.raises(ValueError):
        Budget(sram_bytes=0)


def test_budget_exactly_at_limits_passes():
    b = Budget(flash_bytes=512 * KB, sram_bytes=128 * KB, max_ops=1000)
    chk = check_budget(_report(1000, b.effective_flash, b.effective_sram), b)
    assert chk.passed and chk.margins == {"flash": 0, "sram": 0, "ops": 0}


def test_budget_one_byte_over_sram_fails():
    b = Budget(flash_bytes=512 * KB, sram_bytes=128 * KB, max_ops=1000)
    chk = check_budget(_report(10, 1, b.effective_sram + 1), b)
    assert not chk.passed and chk.margins["sram"] == -1 and chk.violated == ["sram"]


def test_budget_unset_constraints_ignored():
    chk = check_budget(_report(10**12, 10**12, 10**12), Budget())
    assert chk.passed and chk.margins == {}


def test_kws_s_fits_small_mcu(kws_s):
    prof = load_profiles()["stm32f446re"]
    chk = check_budget(discrete_resources(kws_s), Budget(flash_bytes=prof.flash_bytes, sram_bytes=prof.sram_bytes))
    assert chk.passed, chk.margins


# -- expected resources ----------------------------------------------------------------------


def test_vertex_consistency(enum_supernet):
    for sel in enumerate_architectures(enum_supernet):
        exp = expected_resources(enum_supernet, one_hot(enum_supernet, sel)).values()
        rep = discrete_resources(enum_supernet, sel)
        assert exp == {"flash": rep.param_bytes, "sram": rep.peak_working_bytes, "ops": rep.total_ops}


def test_vertex_consistency_four_bit(enum_supernet):
    for sel in list(enumerate_architectures(enum_supernet))[::5]:
        exp = expected_resources(enum_supernet, one_hot(enum_supernet, sel), 4, 4).values()
        rep = discrete_resources(enum_supernet, sel, 4, 4)
        assert exp == {"flash": rep.param_bytes, "sram": rep.peak_working_bytes, "ops": rep.total_ops}


def test_uniform_two_widths_is_mean_size():
    cfg = {
        "input_shape": [6, 6, 1],
        "layers": [
            {"kind": "Conv2D", "name": "c", "kernel": [3, 3], "channels": {"options": [4, 8]}},
            {"kind": "GlobalAvgPool"},
            {"kind": "FullyConnected", "channels": {"fixed": 2}},
        ],
    }
    net = parse_backbone_config(cfg)
    a = discrete_resources(net, {"c.width": 0}).param_bytes
    b = discrete_resources(net, {"c.width": 1}).param_bytes
    assert expected_resources(net, {"c.width": Tensor([0.5, 0.5])}).size.item() == pytest.approx((a + b) / 2)


def test_empty_decision_supernet(kws_m):
    rep = discrete_resources(kws_m)
    exp = expected_resources(kws_m, {}).values()
    assert exp == {"flash": rep.param_bytes, "sram": rep.peak_working_bytes, "ops": rep.total_ops}


def test_unnormalized_row_rejected(enum_supernet):
    z = one_hot(enum_supernet, {d.id: 0 for d in enum_supernet.decisions})
    z["stem.width"] = Tensor([0.5, 0.5, 0.1])
    with pytest.raises(ValueError):
        expected_resources(enum_supernet, z)


@pytest.mark.parametrize("seed", range(10))
def test_linear_and_convex_in_each_row(enum_supernet, seed):
    rng = np.random.default_rng(seed)
    base = random_z(enum_supernet, rng)
    d = enum_supernet.decisions[seed % len(enum_supernet.decisions)]
    z1, z2 = dict(base), dict(base)
    z1[d.id] = Tensor(rng.dirichlet(np.ones(d.num_options)))
    z2[d.id] = Tensor(rng.dirichlet(np.ones(d.num_options)))
    lam = rng.uniform()
    zm = dict(base)
    zm[d.id] = Tensor(lam * z1[d.id].data + (1 - lam) * z2[d.id].data)
    f1, f2, fm = (expected_resources(enum_supernet, z).values() for z in (z1, z2, zm))
    for k in ("flash", "ops"):
        assert fm[k] == pytest.approx(lam * f1[k] + (1 - lam) * f2[k], rel=1e-12)
    assert fm["sram"] <= lam * f1["sram"] + (1 - lam) * f2["sram"] + 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_monotone_toward_wider(enum_supernet, seed):
    rng = np.random.default_rng(seed)
    z = random_z(enum_supernet, rng)
    widths = [d for d in enum_supernet.decisions if d.kind == "width"]
    d = widths[seed % len(widths)]
    before = expected_resources(enum_supernet, z).values()
    row = z[d.id].data.copy()
    shift = row[0] * rng.uniform()
    row[0] -= shift
    row[-1] += shift
    z[d.id] = Tensor(row)
    after = expected_resources(enum_supernet, z).values()
    assert after["flash"] >= before["flash"] - 1e-9
    assert after["ops"] >= before["ops"] - 1e-9


@pytest.mark.parametrize("key", ["flash", "ops", "sram"])
def test_gradients_match_finite_differences(enum_supernet, key):
    # perturb logits so every probe stays on the simplex
    rng = np.random.default_rng(7)
    logits = {d.id: Tensor(rng.normal(size=d.num_options), requires_grad=True) for d in enum_supernet.decisions}

    def z():
        return {k: softmax(v) for k, v in logits.items()}

    node_vals = sorted(v.item() for v in expected_resources(enum_supernet, z()).node_working.values())
    assert node_vals[-1] - node_vals[-2] > 1.0  # away from a max tie
    rep = grad_check(lambda: expected_resources(enum_supernet, z()).as_dict()[key], logits, tolerance=1e-5, eps=1e-4)
    assert rep.passed, rep.summary()


def test_batch_normalization_does_not_change_costs():
    a = parse_backbone_config(enum_config("affine"))
    b = parse_backbone_config(enum_config("batch"))
    sel = {d.id: 1 for d in a.decisions}
    assert discrete_resources(a, sel) == discrete_resources(b, sel)
