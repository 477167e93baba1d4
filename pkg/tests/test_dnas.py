import json

import numpy as np
import pytest

from conftest import tiny_config
from micronas.autodiff import Tensor, grad_check, softmax, softmax_cross_entropy
from micronas.dnas import (
    DivergenceError,
    FinetuneConfig,
    SearchConfig,
    SearchResult,
    cosine_lr,
    discretize,
    finetune,
    geometric_tau,
    init_alpha,
    penalty_terms,
    relax_decisions,
    run_search,
    total_objective,
    train_network,
    train_search,
)
from micronas.resources import Budget, check_budget, discrete_resources, expected_resources
from micronas.supernet import build_supernet, materialize, one_hot, parse_backbone_config
from micronas.tasks import LabeledDataset, gen_synthetic_spectrogram_task


def two_width_net(widths=(4, 8), input_shape=(4, 4, 1)):
    return parse_backbone_config(
        {
            "input_shape": list(input_shape),
            "layers": [
                {"kind": "Conv2D", "name": "c", "kernel": [3, 3], "channels": {"options": list(widths)}},
                {"kind": "GlobalAvgPool", "name": "gap"},
                {"kind": "FullyConnected", "name": "fc", "channels": {"fixed": 2}},
            ],
        }
    )


def separable_task(n=200, seed=0, shape=(6, 5)):
    rng = np.random.default_rng(seed)
    pattern = rng.normal(size=shape)
    y = rng.integers(0, 2, size=n)
    x = (2 * y - 1)[:, None, None] * pattern + 0.3 * rng.normal(size=(n, *shape))
    ds = LabeledDataset(x[..., None], y, "train", 2)
    cut = n * 3 // 4
    return (LabeledDataset(ds.features[:cut], y[:cut], "train", 2), LabeledDataset(ds.features[cut:], y[cut:], "test", 2))


def linear_net(shape=(6, 5), normalization="affine"):
    return parse_backbone_config(
        {
            "input_shape": [*shape, 1],
            "normalization": normalization,
            "layers": [
                {"kind": "Conv2D", "kernel": [3, 3], "channels": {"fixed": 4}},
                {"kind": "FullyConnected", "channels": {"fixed": 2}},
            ],
        }
    )


# -- relaxation ------------------------------------------------------------------------


def test_low_temperature_saturates():
    z = relax_decisions({"d": Tensor([10.0, 0.0, 0.0])}, 0.1)
    np.testing.assert_allclose(z["d"].data, [1.0, 0.0, 0.0], atol=1e-4)


def test_uniform_alpha_gives_uniform_z():
    z = relax_decisions({"d": Tensor(np.zeros(4))}, 2.0)
    np.testing.assert_allclose(z["d"].data, 0.25)


def test_gumbel_rows_sum_to_one_and_need_rng():
    rng = np.random.default_rng(0)
    z = relax_decisions({"a": Tensor(np.zeros(3)), "b": Tensor([1.0, -1.0])}, 0.7, True, rng)
    for v in z.values():
        assert v.data.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        relax_decisions({"a": Tensor(np.zeros(3))}, 1.0, True)
    with pytest.raises(ValueError):
        relax_decisions({"a": Tensor(np.zeros(3))}, 0.0)


@pytest.mark.parametrize("gumbel", [False, True])
def test_relaxation_gradient(gumbel):
    alpha = {"d": Tensor(np.array([0.3, -0.4, 1.1]), requires_grad=True)}

    def loss():
        z = relax_decisions(alpha, 0.8, gumbel, np.random.default_rng(3))  # same noise every probe
        return (z["d"] * z["d"]).sum()

    rep = grad_check(loss, alpha, tolerance=1e-4)
    assert rep.passed, rep.summary()


# -- objective ---------------------------------------------------------------------------


def test_under_budget_objective_is_task_loss():
    task = Tensor(0.731)
    exp = {"flash": Tensor(10.0), "sram": Tensor(5.0), "ops": Tensor(99.0)}
    b = Budget(max_ops=100, sram_bytes=100 * 1024, flash_bytes=1024 * 1024)
    out = total_objective(task, exp, b, {"size": 3.0, "mem": 2.0, "ops": 1.0})
    assert out.item() == task.item()
    assert all(t.item() == 0.0 for t in penalty_terms(exp, b, {"size": 3.0, "mem": 2.0, "ops": 1.0}).values())


def test_double_ops_penalty_is_one():
    terms = penalty_terms({"ops": Tensor(200.0)}, Budget(max_ops=100), {"size": 0, "mem": 0, "ops": 1.0})
    assert terms["ops"].item() == 1.0


def test_missing_budget_with_lambda():
    with pytest.raises(ValueError, match="ops"):
        total_objective(Tensor(0.0), {"ops": Tensor(1.0)}, None, {"ops": 1.0})
    with pytest.raises(ValueError):
        SearchConfig(lambda_mem=1.0, budget=Budget(max_ops=10))


def test_penalty_gradient_matches_finite_differences(tiny_supernet):
    rng = np.random.default_rng(4)
    logits = {d.id: Tensor(rng.normal(size=d.num_options), requires_grad=True) for d in tiny_supernet.decisions}
    z0 = {k: softmax(v) for k, v in logits.items()}
    vals = expected_resources(tiny_supernet, z0).values()
    # budgets well below the current values keep every hinge active and away from its kink
    b = Budget(flash_bytes=int(vals["flash"] * 0.5) + 37 * 1024, sram_bytes=int(vals["sram"] * 0.5) + 38 * 1024,
               max_ops=int(vals["ops"] * 0.5))
    lambdas = {"size": 1.0, "mem": 0.5, "ops": 2.0}

    def loss():
        z = {k: softmax(v) for k, v in logits.items()}
        return total_objective(Tensor(0.0), expected_resources(tiny_supernet, z), b, lambdas)

    rep = grad_check(loss, logits, tolerance=1e-4)
    assert rep.passed, rep.summary()


# -- schedules -------------------------------------------------------------------------------


def test_schedules():
    assert cosine_lr(0, 100, 0.1, 1e-4) == 0.1
    assert cosine_lr(99, 100, 0.1, 1e-4) == pytest.approx(1e-4)
    lrs = [cosine_lr(s, 50, 0.1, 1e-4) for s in range(50)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert geometric_tau(0, 10, 5.0, 0.5) == 5.0
    assert geometric_tau(9, 10, 5.0, 0.5) == pytest.approx(0.5)
    assert geometric_tau(3, 10, 5.0, 0.5) / geometric_tau(2, 10, 5.0, 0.5) == pytest.approx(0.1 ** (1 / 9))


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(lr_start=1e-5, lr_end=1e-3)
    with pytest.raises(ValueError):
        SearchConfig(tau_start=0.5, tau_end=1.0)
    with pytest.raises(ValueError):
        SearchConfig(lambda_ops=-1.0, budget=Budget(max_ops=10))
    with pytest.raises(ValueError):
        FinetuneConfig(epochs=-1)


# -- discretize --------------------------------------------------------------------------------


def test_discretize_examples():
    assert discretize({"d": Tensor([0.2, 5.0])}) == {"d": 1}
    net = two_width_net((64, 128))
    assert net.decisions[0].options[discretize({"c.width": Tensor([1.5, 1.5])}, net)["c.width"]] == 64
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(size=3)
        assert discretize({"d": a}) == discretize({"d": a + rng.normal() * 100})


# -- search ---------------------------------------------------------------------------------------


def tiny_train(n=64, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.normal(size=(n, 6, 5, 1)), rng.integers(0, 3, size=n), "train", 3)


def test_zero_epochs_leaves_parameters(tiny_supernet):
    model = build_supernet(tiny_supernet, seed=1)
    before = {k: v.data.copy() for k, v in model.params.items()}
    state = train_search(model, tiny_train(), SearchConfig(epochs=0))
    assert all(np.array_equal(before[k], v.data) for k, v in state.model.params.items())
    assert all(np.all(a.data == 0) for a in state.alpha.values()) and state.history == []


def test_huge_ops_penalty_picks_narrow_width():
    net = two_width_net()
    data = LabeledDataset(np.zeros((64, 4, 4, 1)), np.arange(64) % 2, "train", 2)
    # zero inputs and zero conv biases: both widths give identical task loss
    model = build_supernet(net, seed=0)
    losses = [softmax_cross_entropy(model(data.features, one_hot(net, {"c.width": k})), data.labels).item() for k in (0, 1)]
    assert losses[0] == losses[1]
    narrow_ops = discrete_resources(net, {"c.width": 0}).total_ops
    cfg = SearchConfig(epochs=3, lambda_ops=1e6, budget=Budget(max_ops=narrow_ops), seed=0)
    state = train_search(model, data, cfg)
    assert discretize(state.alpha, net) == {"c.width": 0}


def test_search_is_deterministic(tiny_supernet):
    cfg = SearchConfig(epochs=2, lambda_ops=1.0, budget=Budget(max_ops=2000), lr_start=0.05, seed=7)
    a = train_search(tiny_supernet, tiny_train(), cfg)
    b = train_search(tiny_supernet, tiny_train(), cfg)
    for k in a.alpha:
        assert a.alpha[k].data.tobytes() == b.alpha[k].data.tobytes()
    assert json.dumps(a.history) == json.dumps(b.history)
    c = train_search(tiny_supernet, tiny_train(), SearchConfig(**{**cfg.__dict__, "seed": 8}))
    assert any(a.alpha[k].data.tobytes() != c.alpha[k].data.tobytes() for k in a.alpha)


def test_history_fields_and_convex_expectations():
    net = two_width_net()
    lo = discrete_resources(net, {"c.width": 0})
    hi = discrete_resources(net, {"c.width": 1})
    rng = np.random.default_rng(0)
    data = LabeledDataset(rng.normal(size=(48, 4, 4, 1)), rng.integers(0, 2, size=48), "train", 2)
    state = train_search(net, data, SearchConfig(epochs=4, lr_start=0.1, budget=Budget(max_ops=lo.total_ops)))
    assert len(state.history) == 4
    for e in state.history:
        assert {"epoch", "tau", "lr", "loss", "task_loss", "penalty", "expected", "selection", "argmax_budget_passed"} <= set(e)
        assert lo.total_ops <= e["expected"]["ops"] <= hi.total_ops
        assert lo.param_bytes <= e["expected"]["flash"] <= hi.param_bytes
        assert e["penalty"] == pytest.approx(0.0, abs=1e-12)


def test_divergence_reports_epoch_and_step(tiny_supernet):
    with pytest.raises(DivergenceError) as info:
        train_search(tiny_supernet, tiny_train(), SearchConfig(epochs=3, lr_start=1e150, lr_end=1e150, gumbel_noise=False))
    assert info.value.epoch >= 0 and info.value.step >= 0 and "epoch" in str(info.value)


# -- finetune ------------------------------------------------------------------------------------------


def test_finetune_separable_task():
    train, test = separable_task()
    model = build_supernet(linear_net(), seed=0)
    res = finetune(model, train, test, FinetuneConfig(epochs=10, lr_start=0.05, lr_end=1e-4))
    assert res.accuracy > 0.95
    assert res.model.quant is not None and model.quant is None


def test_quantization_gap_small():
    train, test = gen_synthetic_spectrogram_task(4, 80, (16, 8), seed=1, noise=0.6)
    net = parse_backbone_config(
        {
            "input_shape": [16, 8, 1],
            "normalization": "batch",
            "layers": [
                {"kind": "Conv2D", "kernel": [5, 3], "channels": {"fixed": 8}},
                {"kind": "DepthwiseSeparableBlock", "kernel": [3, 3], "stride": 2, "channels": {"fixed": 8}},
                {"kind": "AvgPool", "kernel": [8, 1]},
                {"kind": "FullyConnected", "channels": {"fixed": 4}},
            ],
        }
    )
    base = dict(epochs=12, lr_start=0.1, lr_end=1e-4)
    q = finetune(build_supernet(net, seed=0), train, test, FinetuneConfig(**base))
    f = finetune(build_supernet(net, seed=0), train, test, FinetuneConfig(**base, weight_bits=None))
    assert f.accuracy > 0.8
    assert abs(q.accuracy - f.accuracy) < 0.02


def test_finetune_of_converged_network_is_stationary():
    train, test = separable_task(seed=2)
    model = build_supernet(linear_net(), seed=0)
    first = finetune(model, train, test, FinetuneConfig(epochs=10, lr_start=0.05, lr_end=1e-4))
    again = finetune(first.model, train, test, FinetuneConfig(epochs=3, lr_start=1e-3, lr_end=1e-5))
    assert abs(again.accuracy - first.accuracy) < 0.01


def test_finetune_rejects_supernet(tiny_supernet):
    with pytest.raises(ValueError):
        finetune(build_supernet(tiny_supernet), tiny_train(), tiny_train(), FinetuneConfig(epochs=0))


def test_train_network_zero_epochs():
    model = build_supernet(linear_net())
    before = {k: v.data.copy() for k, v in model.params.items()}
    assert train_network(model, separable_task()[0], FinetuneConfig(epochs=0)) == []
    assert all(np.array_equal(before[k], v.data) for k, v in model.params.items())


# -- end to end -------------------------------------------------------------------------------------------


def test_run_search_result_consistency(tmp_path):
    net = parse_backbone_config(tiny_config("batch"))
    rng = np.random.default_rng(0)
    x = rng.normal(size=(60, 6, 5, 1))
    y = rng.integers(0, 3, size=60)
    train, test = LabeledDataset(x[:40], y[:40], "train", 3), LabeledDataset(x[40:], y[40:], "test", 3)
    budget = Budget(max_ops=3000)
    res = run_search(net, train, test, SearchConfig(epochs=2, lambda_ops=1.0, budget=budget, seed=3),
                     FinetuneConfig(epochs=1))
    assert res.report == discrete_resources(net, res.selection)
    assert res.budget_check == check_budget(res.report, budget)
    assert res.architecture["normalization"] == "batch"
    assert len(res.search_history) == 2 and len(res.finetune_history) == 1
    back = SearchResult.from_dict(json.loads(res.to_json()))
    assert back.selection == res.selection and back.report == res.report and back.budget_check == res.budget_check


def test_materialized_selection_inherits_search_weights(tiny_supernet):
    state = train_search(tiny_supernet, tiny_train(), SearchConfig(epochs=1, gumbel_noise=False))
    sel = discretize(state.alpha, tiny_supernet)
    disc, _ = materialize(state.model, sel)
    x = tiny_train(8, seed=1).features
    np.testing.assert_allclose(disc(x).data, state.model(x, one_hot(tiny_supernet, sel)).data, atol=1e-6)
    assert init_alpha(tiny_supernet).keys() == state.alpha.keys()
