"""Op count, parameter bytes and peak working memory for supernets.

Two entry points share the same per-layer cost functions:

* :func:`discrete_resources` evaluates one architecture exactly.
* :func:`expected_resources` takes relaxed decision weights and returns
  differentiable expectations; at one-hot weights both agree exactly.

One multiply-accumulate counts as two ops. Pooling, additions and activations
count zero ops. Biases are stored at 32 bits whatever the weight width.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from micronas.autodiff import Tensor, stack
from micronas.supernet import (
    ChannelExpr,
    Node,
    Supernet,
    evaluate_expr,
    expr_decisions,
    expr_marginal,
)

KB = 1024
BIAS_BITS = 32
DEPLOY_BITS = (8, 4)
JOINT_ENUM_CAP = 4096


# ---------------------------------------------------------------------------
# per-layer costs
# ---------------------------------------------------------------------------


def _numel(shape) -> int:
    return int(np.prod(shape))


def layer_ops(node: Node, in_shape: tuple[int, ...], out_shape: tuple[int, ...]) -> int:
    """Ops of one primitive node given concrete input/output shapes."""
    if node.op == "conv":
        kh, kw = node.kernel
        return 2 * _numel(out_shape) * kh * kw * in_shape[-1]
    if node.op == "dwconv":
        kh, kw = node.kernel
        return 2 * _numel(out_shape) * kh * kw
    if node.op == "dense":
        return 2 * _numel(in_shape) * out_shape[-1]
    return 0


def layer_param_counts(node: Node, in_shape, out_shape) -> tuple[int, int]:
    """``(weights, biases)`` of a node; folded normalisation adds nothing."""
    cout = out_shape[-1]
    if node.op == "conv":
        kh, kw = node.kernel
        return kh * kw * in_shape[-1] * cout, cout
    if node.op == "dwconv":
        kh, kw = node.kernel
        return kh * kw * cout, cout
    if node.op == "dense":
        return _numel(in_shape) * cout, cout
    return 0, 0


def layer_param_bytes(node: Node, in_shape, out_shape, weight_bits: int = 8) -> int:
    if weight_bits not in DEPLOY_BITS:
        raise ValueError(f"weight_bits must be one of {DEPLOY_BITS}, got {weight_bits}")
    weights, biases = layer_param_counts(node, in_shape, out_shape)
    return -(-weights * weight_bits // 8) + biases * BIAS_BITS // 8


def tensor_bytes(shape, activation_bits: int = 8) -> int:
    return -(-_numel(shape) * activation_bits // 8)


def node_working_bytes(in_shapes, out_shape, activation_bits: int = 8) -> int:
    """Bytes of all inputs plus the output, assumed simultaneously live."""
    if activation_bits not in DEPLOY_BITS:
        raise ValueError(f"activation_bits must be one of {DEPLOY_BITS}, got {activation_bits}")
    return sum(tensor_bytes(s, activation_bits) for s in in_shapes) + tensor_bytes(out_shape, activation_bits)


# ---------------------------------------------------------------------------
# reports and budgets
# ---------------------------------------------------------------------------


@dataclass
class NodeReport:
    id: str
    op: str
    ops: int
    param_bytes: int
    input_bytes: list[int]
    output_bytes: int
    working_bytes: int
    output_shape: list[int]


@dataclass
class ResourceReport:
    total_ops: int
    param_bytes: int
    peak_working_bytes: int
    peak_node_id: str | None
    weight_bits: int = 8
    activation_bits: int = 8
    nodes: list[NodeReport] = field(default_factory=list)

    @property
    def mops(self) -> float:
        return self.total_ops / 1e6

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ResourceReport":
        d = dict(d)
        d["nodes"] = [NodeReport(**n) for n in d.get("nodes", [])]
        return cls(**d)


@dataclass
class Budget:
    """Device limits; ``None`` leaves a constraint unchecked.

    The effective SRAM left for activations is ``sram_bytes`` minus the
    interpreter overhead and the persistent buffers; the effective flash is
    ``flash_bytes`` minus the interpreter code and any graph metadata.
    """

    flash_bytes: int | None = None
    sram_bytes: int | None = None
    max_ops: int | None = None
    interpreter_sram_overhead: int = 4 * KB
    interpreter_flash_overhead: int = 37 * KB
    persistent_buffer_bytes: int = 34 * KB
    graph_metadata_bytes: int = 0

    def __post_init__(self):
        for name in ("flash_bytes", "sram_bytes", "max_ops"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def effective_sram(self) -> int | None:
        if self.sram_bytes is None:
            return None
        return self.sram_bytes - self.interpreter_sram_overhead - self.persistent_buffer_bytes

    @property
    def effective_flash(self) -> int | None:
        if self.flash_bytes is None:
            return None
        return self.flash_bytes - self.interpreter_flash_overhead - self.graph_metadata_bytes

    def limits(self) -> dict[str, int]:
        """Resource name -> limit the raw model quantity is compared against."""
        out = {}
        if self.flash_bytes is not None:
            out["flash"] = self.effective_flash
        if self.sram_bytes is not None:
            out["sram"] = self.effective_sram
        if self.max_ops is not None:
            out["ops"] = self.max_ops
        return out


@dataclass
class BudgetCheck:
    passed: bool
    margins: dict[str, int]
    violated: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


def report_quantities(report: ResourceReport) -> dict[str, int]:
    return {"flash": report.param_bytes, "sram": report.peak_working_bytes, "ops": report.total_ops}


def check_budget(report: ResourceReport, budget: Budget) -> BudgetCheck:
    """Signed margins (limit - usage); the limit itself is inclusive."""
    usage = report_quantities(report)
    margins = {name: int(limit - usage[name]) for name, limit in budget.limits().items()}
    violated = [name for name, m in margins.items() if m < 0]
    return BudgetCheck(passed=not violated, margins=margins, violated=violated)


# ---------------------------------------------------------------------------
# discrete evaluation
# ---------------------------------------------------------------------------


def discrete_resources(
    supernet: Supernet, selection=None, weight_bits: int = 8, activation_bits: int = 8
) -> ResourceReport:
    selection = supernet.check_selection(selection or {})
    shapes = {}
    for node in supernet.nodes:
        shapes[node.id] = supernet.tensor_shape(node, evaluate_expr(node.out_channels, selection))
    entries = []
    for node in supernet.nodes:
        if not node.is_compute or not supernet.present(node, selection):
            continue
        in_shapes = [shapes[i] for i in node.inputs]
        out_shape = shapes[node.id]
        entries.append(
            NodeReport(
                id=node.id,
                op=node.op,
                ops=layer_ops(node, in_shapes[0], out_shape),
                param_bytes=layer_param_bytes(node, in_shapes[0], out_shape, weight_bits),
                input_bytes=[tensor_bytes(s, activation_bits) for s in in_shapes],
                output_bytes=tensor_bytes(out_shape, activation_bits),
                working_bytes=node_working_bytes(in_shapes, out_shape, activation_bits),
                output_shape=list(out_shape),
            )
        )
    peak = max(entries, key=lambda e: e.working_bytes, default=None)
    return ResourceReport(
        total_ops=sum(e.ops for e in entries),
        param_bytes=sum(e.param_bytes for e in entries),
        peak_working_bytes=peak.working_bytes if peak else 0,
        peak_node_id=peak.id if peak else None,
        weight_bits=weight_bits,
        activation_bits=activation_bits,
        nodes=entries,
    )


# ---------------------------------------------------------------------------
# relaxed (expected) evaluation
# ---------------------------------------------------------------------------


@dataclass
class ExpectedResources:
    size: Tensor  # parameter bytes
    ops: Tensor
    working: Tensor  # peak working bytes
    node_working: dict[str, Tensor]
    peak_node_id: str | None

    def as_dict(self) -> dict[str, Tensor]:
        return {"flash": self.size, "sram": self.working, "ops": self.ops}

    def values(self) -> dict[str, float]:
        return {k: v.item() for k, v in self.as_dict().items()}


def _check_rows(supernet: Supernet, z: dict[str, Tensor], tol: float = 1e-6):
    for d in supernet.decisions:
        if d.id not in z:
            raise ValueError(f"missing decision weights for {d.id!r}")
        row = z[d.id].data
        if row.shape != (d.num_options,):
            raise ValueError(f"decision {d.id!r} needs {d.num_options} weights")
        if abs(row.sum() - 1.0) > tol or np.any(row < -tol):
            raise ValueError(f"decision {d.id!r} weights are not a distribution (sum {row.sum():.8f})")


def _expectation(fn, exprs: list[ChannelExpr], presence, z, memo) -> Tensor:
    """E[fn(channels...) * 1{present}] under independent categorical decisions.

    When the expressions and the presence conditions involve disjoint decision
    sets the marginals factorise; otherwise the shared decisions are
    enumerated jointly.
    """
    sets = [expr_decisions(e) for e in exprs] + [frozenset(d for d, _ in presence)]
    union = frozenset().union(*sets)
    if sum(len(s) for s in sets) == len(union):
        margs = [expr_marginal(e, z, memo) for e in exprs]
        table = np.zeros([len(sup) for sup, _ in margs])
        for idx in itertools.product(*(range(len(sup)) for sup, _ in margs)):
            table[idx] = fn(*(margs[i][0][j] for i, j in enumerate(idx)))
        result = Tensor(table)
        for _, probs in reversed(margs):
            lead = result.shape[:-1]
            result = (result.reshape(-1, probs.shape[0]) @ probs.reshape(-1, 1)).reshape(lead)
        for d, k in presence:
            result = result * z[d][k]
        return result
    ids = sorted(union)
    sizes = [z[d].shape[0] for d in ids]
    if int(np.prod(sizes)) > JOINT_ENUM_CAP:
        raise ValueError(f"joint expectation over {ids} exceeds {JOINT_ENUM_CAP} assignments")
    total = Tensor(0.0)
    for combo in itertools.product(*(range(s) for s in sizes)):
        sel = dict(zip(ids, combo))
        if not all(sel[d] == k for d, k in presence):
            continue
        value = fn(*(evaluate_expr(e, sel) for e in exprs))
        if value == 0:
            continue
        weight = z[ids[0]][combo[0]]
        for d, k in zip(ids[1:], combo[1:]):
            weight = weight * z[d][k]
        total = total + weight * float(value)
    return total


def expected_resources(
    supernet: Supernet, z: dict[str, Tensor], weight_bits: int = 8, activation_bits: int = 8
) -> ExpectedResources:
    """Decision-weighted size, ops and peak working memory, differentiable in ``z``."""
    _check_rows(supernet, z)
    memo: dict = {}
    nodes = supernet.node_map
    size_terms, ops_terms, working = [], [], {}
    for node in supernet.nodes:
        if not node.is_compute:
            continue
        srcs = [nodes[i] for i in node.inputs]
        in_expr, out_expr = srcs[0].out_channels, node.out_channels

        def shape_of(n, c):
            return supernet.tensor_shape(n, c)

        if node.has_params:
            size_terms.append(
                _expectation(
                    lambda a, b, n=node, s=srcs[0]: layer_param_bytes(n, shape_of(s, a), shape_of(n, b), weight_bits),
                    [in_expr, out_expr], node.presence, z, memo,
                )
            )
            ops_terms.append(
                _expectation(
                    lambda a, b, n=node, s=srcs[0]: layer_ops(n, shape_of(s, a), shape_of(n, b)),
                    [in_expr, out_expr], node.presence, z, memo,
                )
            )
        parts = [
            _expectation(lambda c, s=s: tensor_bytes(shape_of(s, c), activation_bits), [s.out_channels], node.presence, z, memo)
            for s in srcs
        ]
        parts.append(
            _expectation(lambda c: tensor_bytes(shape_of(node, c), activation_bits), [out_expr], node.presence, z, memo)
        )
        acc = parts[0]
        for p in parts[1:]:
            acc = acc + p
        working[node.id] = acc

    def total(terms):
        if not terms:
            return Tensor(0.0)
        return stack(terms).sum()

    if working:
        ids = list(working)
        stacked = stack([working[i] for i in ids])
        peak = stacked.max()
        peak_id = ids[int(np.argmax(stacked.data))]
    else:
        peak, peak_id = Tensor(0.0), None
    return ExpectedResources(size=total(size_terms), ops=total(ops_terms), working=peak, node_working=working, peak_node_id=peak_id)
