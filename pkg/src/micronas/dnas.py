"""Differentiable architecture search: relax, penalise, train, discretise, finetune."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources as _res

import jsonschema
import numpy as np

from .autodiff import NonFiniteError, Tensor, relu, softmax, softmax_cross_entropy
from .resources import (
    Budget,
    BudgetCheck,
    ResourceReport,
    check_budget,
    discrete_resources,
    expected_resources,
)
from .supernet import (
    ArchSelection,
    QuantConfig,
    Supernet,
    SupernetModel,
    build_supernet,
    materialize,
)
from .tasks import LabeledDataset, evaluate_accuracy

# Recipe tuned on the reference toy task (bundled toy_kws.json backbone).
REFERENCE_SEARCH = dict(epochs=20, batch_size=32, lr_start=0.1, lr_end=1e-4, weight_decay=1e-3, alpha_lr_scale=1.0)
REFERENCE_FINETUNE = dict(epochs=20, batch_size=32, lr_start=0.1, lr_end=1e-4, weight_decay=1e-3)

# penalty weight name -> budget limit key
PENALTY_KEYS = {"size": "flash", "mem": "sram", "ops": "ops"}


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, step: int, detail: str = ""):
        self.epoch, self.step = epoch, step
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}" + (f": {detail}" if detail else ""))


@dataclass
class SearchConfig:
    epochs: int = 10
    batch_size: int = 32
    lr_start: float = 0.01
    lr_end: float = 1e-5
    weight_decay: float = 1e-3
    tau_start: float = 5.0
    tau_end: float = 0.5
    lambda_size: float = 0.0
    lambda_mem: float = 0.0
    lambda_ops: float = 0.0
    budget: Budget | None = None
    gumbel_noise: bool = True
    seed: int = 0
    alpha_lr_scale: float = 1.0
    weight_bits: int = 8
    activation_bits: int = 8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if not self.tau_start >= self.tau_end > 0:
            raise ValueError("need tau_start >= tau_end > 0")
        if min(self.lambda_size, self.lambda_mem, self.lambda_ops, self.weight_decay, self.alpha_lr_scale) < 0:
            raise ValueError("penalty weights, weight decay and alpha_lr_scale must be non-negative")
        _require_budget(self.lambdas, self.budget)

    @property
    def lambdas(self) -> dict[str, float]:
        return {"size": self.lambda_size, "mem": self.lambda_mem, "ops": self.lambda_ops}


@dataclass
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 32
    lr_start: float = 0.01
    lr_end: float = 1e-5
    weight_decay: float = 1e-3
    weight_bits: int | None = 8  # None trains in float
    activation_bits: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")


# ---------------------------------------------------------------------------
# relaxation and objective
# ---------------------------------------------------------------------------


def init_alpha(supernet: Supernet) -> dict[str, Tensor]:
    return {d.id: Tensor(np.zeros(d.num_options), requires_grad=True) for d in supernet.decisions}


def relax_decisions(alpha: dict[str, Tensor], tau: float, gumbel_noise: bool = False, rng=None) -> dict[str, Tensor]:
    """z = softmax((alpha + g) / tau) per decision, with g ~ Gumbel(0, 1) when enabled."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if gumbel_noise and rng is None:
        raise ValueError("gumbel noise needs an rng")
    z = {}
    for key in sorted(alpha):
        a = alpha[key]
        if gumbel_noise:
            u = rng.uniform(np.finfo(float).tiny, 1.0, size=a.shape)
            a = a + Tensor(-np.log(-np.log(u)))
        z[key] = softmax(a * (1.0 / tau))
    return z


def _require_budget(lambdas: dict[str, float], budget: Budget | None):
    for name, lam in lambdas.items():
        if lam == 0:
            continue
        if budget is None or PENALTY_KEYS[name] not in budget.limits():
            raise ValueError(f"lambda_{name} > 0 needs a {PENALTY_KEYS[name]} budget")
        if budget.limits()[PENALTY_KEYS[name]] <= 0:
            raise ValueError(f"effective {PENALTY_KEYS[name]} budget is not positive")


def penalty_terms(expected: dict[str, Tensor], budget: Budget | None, lambdas: dict[str, float]) -> dict[str, Tensor]:
    """lambda_r * max(0, R_r / B_r - 1) for every penalised resource."""
    _require_budget(lambdas, budget)
    limits = budget.limits() if budget is not None else {}
    out = {}
    for name, lam in lambdas.items():
        if lam == 0:
            continue
        key = PENALTY_KEYS[name]
        ratio = expected[key] * (1.0 / limits[key]) - 1.0
        out[name] = relu(ratio) * lam
    return out


def total_objective(task_loss: Tensor, expected, budget: Budget | None, lambdas: dict[str, float]) -> Tensor:
    if hasattr(expected, "as_dict"):
        expected = expected.as_dict()
    expected = {k: v if isinstance(v, Tensor) else Tensor(float(v)) for k, v in expected.items()}
    total = task_loss
    for term in penalty_terms(expected, budget, lambdas).values():
        total = total + term
    return total


def cosine_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    if total_steps <= 1:
        return lr_start
    frac = step / (total_steps - 1)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * frac))


def geometric_tau(epoch: int, epochs: int, tau_start: float, tau_end: float) -> float:
    if epochs <= 1:
        return tau_start
    return tau_start * (tau_end / tau_start) ** (epoch / (epochs - 1))


def discretize(alpha: dict, supernet: Supernet | None = None) -> ArchSelection:
    """Per-decision argmax; ties go to the lower index, which is the lower-resource option."""
    sel = {}
    for key, a in alpha.items():
        v = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=float)
        sel[key] = int(np.flatnonzero(v == v.max())[0])
    sel = ArchSelection(sel)
    return supernet.check_selection(sel) if supernet is not None else sel


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _sgd_step(params, lr: float, weight_decay: float = 0.0):
    for p in params:
        if p.grad is None:
            continue
        g = p.grad if weight_decay == 0 else p.grad + weight_decay * p.data
        p.data = p.data - lr * g


def _finite(t: Tensor, epoch: int, step: int):
    if not np.all(np.isfinite(t.data)):
        raise DivergenceError(epoch, step)


@dataclass
class SearchState:
    model: SupernetModel
    alpha: dict[str, Tensor]
    history: list[dict] = field(default_factory=list)


def train_search(
    supernet: Supernet | SupernetModel,
    train: LabeledDataset,
    config: SearchConfig,
    alpha: dict[str, Tensor] | None = None,
    log=None,
) -> SearchState:
    """Joint single-level gradient descent on weights and architecture logits."""
    model = supernet if isinstance(supernet, SupernetModel) else build_supernet(supernet, seed=config.seed)
    net = model.supernet
    alpha = alpha if alpha is not None else init_alpha(net)
    rng = np.random.default_rng([config.seed, 17])
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    theta = model.parameters()
    state = SearchState(model, alpha)
    step = 0
    for epoch in range(config.epochs):
        tau = geometric_tau(epoch, config.epochs, config.tau_start, config.tau_end)
        sums = {"loss": 0.0, "task_loss": 0.0, "penalty": 0.0}
        n_batches = 0
        for xb, yb in train.batches(config.batch_size, rng):
            lr = cosine_lr(step, total_steps, config.lr_start, config.lr_end)
            try:
                z = relax_decisions(alpha, tau, config.gumbel_noise, rng)
                logits = model(xb, z)
                task = softmax_cross_entropy(logits, yb)
                exp = expected_resources(net, z, config.weight_bits, config.activation_bits)
                loss = total_objective(task, exp, config.budget, config.lambdas)
                _finite(loss, epoch, step)
                model.zero_grad()
                for a in alpha.values():
                    a.zero_grad()
                loss.backward()
            except NonFiniteError as exc:
                raise DivergenceError(epoch, step, str(exc)) from None
            _sgd_step(theta, lr, config.weight_decay)
            _sgd_step(alpha.values(), lr * config.alpha_lr_scale)
            sums["loss"] += loss.item()
            sums["task_loss"] += task.item()
            sums["penalty"] += loss.item() - task.item()
            n_batches += 1
            step += 1
        z_eval = relax_decisions(alpha, tau, False)
        exp = expected_resources(net, z_eval, config.weight_bits, config.activation_bits).values()
        sel = discretize(alpha, net)
        report = discrete_resources(net, sel, config.weight_bits, config.activation_bits)
        entry = {
            "epoch": epoch,
            "tau": tau,
            "lr": cosine_lr(max(step - 1, 0), total_steps, config.lr_start, config.lr_end),
            **{k: v / max(n_batches, 1) for k, v in sums.items()},
            "expected": exp,
            "selection": dict(sel),
            "argmax_budget_passed": check_budget(report, config.budget).passed if config.budget else None,
        }
        state.history.append(entry)
        if log is not None:
            log(entry)
    return state


@dataclass
class FinetuneResult:
    model: SupernetModel
    accuracy: float
    history: list[dict]


def train_network(model: SupernetModel, train: LabeledDataset, config: FinetuneConfig, test: LabeledDataset | None = None, log=None) -> list[dict]:
    """Plain cross-entropy training of a discrete network (no decisions)."""
    rng = np.random.default_rng([config.seed, 23])
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total = steps_per_epoch * config.epochs
    weights = [t for k, t in model.params.items() if ".wq_" not in k and ".aq_" not in k]
    ranges = [t for k, t in model.params.items() if ".wq_" in k or ".aq_" in k]
    history, step = [], 0
    for epoch in range(config.epochs):
        running, n = 0.0, 0
        for xb, yb in train.batches(config.batch_size, rng):
            lr = cosine_lr(step, total, config.lr_start, config.lr_end)
            try:
                loss = softmax_cross_entropy(model(xb), yb)
                _finite(loss, epoch, step)
                model.zero_grad()
                loss.backward()
            except NonFiniteError as exc:
                raise DivergenceError(epoch, step, str(exc)) from None
            _sgd_step(weights, lr, config.weight_decay)
            _sgd_step(ranges, lr)
            running += loss.item()
            n += 1
            step += 1
        entry = {"epoch": epoch, "loss": running / max(n, 1)}
        if test is not None:
            entry["accuracy"] = evaluate_accuracy(model, test)
        history.append(entry)
        if log is not None:
            log(entry)
    return history


def finetune(model: SupernetModel, train: LabeledDataset, test: LabeledDataset, config: FinetuneConfig, log=None) -> FinetuneResult:
    """Train a discrete network with fake quantisation (unless disabled) and report held-out accuracy.

    Weight decay is not applied to quantiser ranges.
    """
    if model.supernet.decisions:
        raise ValueError("finetune expects a materialised network without decisions")
    model = model.copy()
    if config.weight_bits is not None:
        model.quant = None
        calib = train.features[: min(len(train), 256)]
        model.enable_quantization(QuantConfig(config.weight_bits, config.activation_bits), calib)
    history = train_network(model, train, config, test, log)
    return FinetuneResult(model, evaluate_accuracy(model, test), history)


def train_from_scratch(supernet: Supernet, train, test, config: FinetuneConfig, seed: int | None = None) -> FinetuneResult:
    """Fresh initialisation of a discrete architecture followed by ``finetune``."""
    model = build_supernet(supernet, seed=config.seed if seed is None else seed)
    return finetune(model, train, test, config)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class SearchResult:
    selection: ArchSelection
    report: ResourceReport
    budget_check: BudgetCheck | None
    architecture: dict
    search_history: list[dict]
    finetune_history: list[dict]
    accuracy: float | None
    seed: int
    alpha: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "selection": dict(self.selection),
            "report": self.report.to_dict(),
            "budget_check": self.budget_check.to_dict() if self.budget_check else None,
            "architecture": self.architecture,
            "search_history": self.search_history,
            "finetune_history": self.finetune_history,
            "accuracy": self.accuracy,
            "seed": self.seed,
            "alpha": self.alpha,
        }

    def to_json(self) -> str:
        doc = self.to_dict()
        jsonschema.validate(doc, search_result_schema())
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchResult":
        jsonschema.validate(d, search_result_schema())
        bc = d["budget_check"]
        return cls(
            ArchSelection(d["selection"]),
            ResourceReport.from_dict(d["report"]),
            BudgetCheck(**bc) if bc else None,
            d["architecture"],
            d["search_history"],
            d["finetune_history"],
            d["accuracy"],
            d["seed"],
            d.get("alpha", {}),
        )


def search_result_schema() -> dict:
    return json.loads(_res.files("micronas").joinpath("schemas", "search_result.schema.json").read_text())


def run_search(
    supernet: Supernet,
    train: LabeledDataset,
    test: LabeledDataset,
    config: SearchConfig,
    finetune_config: FinetuneConfig | None = None,
    log=None,
) -> SearchResult:
    """Search, discretise, materialise with inherited weights and finetune."""
    state = train_search(supernet, train, config, log=log)
    sel = discretize(state.alpha, supernet)
    report = discrete_resources(supernet, sel, config.weight_bits, config.activation_bits)
    check = check_budget(report, config.budget) if config.budget else None
    discrete, doc = materialize(state.model, sel)
    ft_hist, acc = [], None
    if finetune_config is not None:
        ft = finetune(discrete, train, test, finetune_config, log=log)
        ft_hist, acc = ft.history, ft.accuracy
    return SearchResult(
        sel, report, check, doc, state.history, ft_hist, acc, config.seed,
        {k: [float(x) for x in v.data] for k, v in state.alpha.items()},
    )
