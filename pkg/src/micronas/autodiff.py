"""Dense-tensor reverse-mode automatic differentiation on top of numpy.

Activations are batch-major and channels-last (NHWC). Every op returns a new
:class:`Tensor` holding a closure that pushes the output gradient back to its
parents; :meth:`Tensor.backward` walks the recorded graph in reverse
topological order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
VALID_ELEMENT_BITS = (32, 8, 4)


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass produces NaN or Inf."""


@dataclass(frozen=True)
class TensorShape:
    """Dimensions plus the element bit-width used for memory accounting."""

    dims: tuple[int, ...]
    element_bits: int = 32

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims:
            raise ValueError("TensorShape needs at least one dimension")
        if any(d <= 0 for d in dims):
            raise ValueError(f"dimensions must be positive, got {dims}")
        if self.element_bits not in VALID_ELEMENT_BITS:
            raise ValueError(f"element_bits must be one of {VALID_ELEMENT_BITS}")
        object.__setattr__(self, "dims", dims)

    @property
    def numel(self) -> int:
        return int(np.prod(self.dims))

    @property
    def nbytes(self) -> int:
        return -(-self.numel * self.element_bits // 8)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        arr = np.array(data, dtype=DTYPE) if op == "leaf" else np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values produced by '{op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- graph plumbing ---------------------------------------------------
    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + g

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Gradients add onto whatever is already stored; callers reset between
        optimisation steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        out = _make(self.data + other.data, (self, other), "add")
        out._backward = lambda g: ((self, _unbroadcast(g, self.shape)), (other, _unbroadcast(g, other.shape)))
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _make(-self.data, (self,), "neg")
        out._backward = lambda g: ((self, -g),)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = _make(self.data * other.data, (self, other), "mul")
        out._backward = lambda g: (
            (self, _unbroadcast(g * other.data, self.shape)),
            (other, _unbroadcast(g * self.data, other.shape)),
        )
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = _make(self.data / other.data, (self, other), "div")
        out._backward = lambda g: (
            (self, _unbroadcast(g / other.data, self.shape)),
            (other, _unbroadcast(-g * self.data / other.data**2, other.shape)),
        )
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        out = _make(self.data**exponent, (self,), "pow")
        out._backward = lambda g: ((self, g * exponent * self.data ** (exponent - 1)),)
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        out = _make(self.data @ other.data, (self, other), "matmul")
        out._backward = lambda g: ((self, g @ other.data.T), (other, self.data.T @ g))
        return out

    def __getitem__(self, idx):
        out = _make(self.data[idx], (self,), "getitem")

        def _bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return ((self, full),)

        out._backward = _bw
        return out

    # -- reductions / reshapes -------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")

        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return ((self, np.broadcast_to(g, self.shape).copy()),)

        out._backward = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,), "reshape")
        out._backward = lambda g: ((self, g.reshape(self.shape)),)
        return out

    def max(self):
        """Maximum over all entries; the gradient goes to the first maximal entry."""
        flat = self.data.reshape(-1)
        i = int(np.argmax(flat))
        out = _make(flat[i], (self,), "max")

        def _bw(g):
            full = np.zeros(flat.shape, dtype=DTYPE)
            full[i] = g
            return ((self, full.reshape(self.shape)),)

        out._backward = _bw
        return out

    def exp(self):
        out = _make(np.exp(self.data), (self,), "exp")
        out._backward = lambda g: ((self, g * out.data),)
        return out

    def log(self):
        out = _make(np.log(self.data), (self,), "log")
        out._backward = lambda g: ((self, g / self.data),)
        return out


def _make(data, parents: tuple, op: str) -> Tensor:
    return Tensor(data, requires_grad=any(p.requires_grad for p in parents), _parents=parents, op=op)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after all of its parents."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def stack(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _make(np.stack([t.data for t in tensors]), tuple(tensors), "stack")
    out._backward = lambda g: tuple((t, g[i]) for i, t in enumerate(tensors))
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out = _make(np.where(take_a, a.data, b.data), (a, b), "maximum")
    out._backward = lambda g: (
        (a, _unbroadcast(np.where(take_a, g, 0.0), a.shape)),
        (b, _unbroadcast(np.where(take_a, 0.0, g), b.shape)),
    )
    return out


def relu(x: Tensor) -> Tensor:
    """max(0, x) with derivative 0 at exactly 0."""
    pos = x.data > 0
    out = _make(np.where(pos, x.data, 0.0), (x,), "relu")
    out._backward = lambda g: ((x, np.where(pos, g, 0.0)),)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = _make(p, (x,), "softmax")

    def _bw(g):
        return ((x, p * (g - (g * p).sum(axis=axis, keepdims=True))),)

    out._backward = _bw
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(logsum - shifted[np.arange(n), labels])
    out = _make(loss, (logits,), "softmax_cross_entropy")

    def _bw(g):
        p = np.exp(shifted - logsum[:, None])
        p[np.arange(n), labels] -= 1.0
        return ((logits, g * p / n),)

    out._backward = _bw
    return out


def weighted_sum(inputs: Sequence[Tensor], weights: Tensor) -> Tensor:
    """sum_k weights[k] * inputs[k] over equally shaped inputs."""
    weights = as_tensor(weights)
    if weights.shape != (len(inputs),):
        raise ValueError(f"need {len(inputs)} weights, got shape {weights.shape}")
    shape = inputs[0].shape
    if any(t.shape != shape for t in inputs):
        raise ValueError("weighted_sum inputs must share one shape")
    w = weights.data
    acc = w[0] * inputs[0].data
    for k in range(1, len(inputs)):
        acc = acc + w[k] * inputs[k].data
    out = _make(acc, (*inputs, weights), "weighted_sum")

    def _bw(g):
        grads = [(t, g * w[k]) for k, t in enumerate(inputs)]
        grads.append((weights, np.array([np.sum(g * t.data) for t in inputs])))
        return tuple(grads)

    out._backward = _bw
    return out


def channel_mask(x: Tensor, active_channels: int) -> Tensor:
    """Zero every channel at index >= ``active_channels`` (last axis)."""
    c = x.shape[-1]
    if not 0 < active_channels <= c:
        raise ValueError(f"active_channels must be in (0, {c}], got {active_channels}")
    if active_channels == c:
        return x
    mask = np.zeros(c)
    mask[:active_channels] = 1.0
    out = _make(x.data * mask, (x,), "channel_mask")
    out._backward = lambda g: ((x, g * mask),)
    return out


def affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``x * scale + shift``; stands in for a folded normalisation layer."""
    return x * scale + shift


BN_EPS = 1e-5


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = BN_EPS) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalise each channel (last axis) with batch statistics, then scale and shift.

    Returns the output with the batch mean and (biased) variance so callers
    can keep running estimates.
    """
    axes = tuple(range(x.ndim - 1))
    m = x.data.size // x.shape[-1]
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = _make(xhat * scale.data + shift.data, (x, scale, shift), "batch_norm")

    def _bw(g):
        dxhat = g * scale.data
        dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        return ((x, dx), (scale, (g * xhat).sum(axis=axes)), (shift, g.sum(axis=axes)))

    out._backward = _bw
    return out, mean, var


def batch_norm_inference(x: Tensor, scale: Tensor, shift: Tensor, mean, var, eps: float = BN_EPS) -> Tensor:
    inv = 1.0 / np.sqrt(np.asarray(var) + eps)
    return (x - Tensor(mean)) * Tensor(inv) * scale + shift


# ---------------------------------------------------------------------------
# convolution / pooling / dense
# ---------------------------------------------------------------------------


def _out_and_pad(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if k > size:
            raise ValueError(f"window {k} larger than input {size}")
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: str) -> tuple[int, int]:
    return _out_and_pad(h, kh, stride, padding)[0], _out_and_pad(w, kw, stride, padding)[0]


def _patches(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(n, ho, wo, kh, kw, c), strides=(s0, s1 * stride, s2 * stride, s1, s2, s3), writeable=False
    )


def _fold(dpatches: np.ndarray, padded_shape, stride: int, ho: int, wo: int) -> np.ndarray:
    dxp = np.zeros(padded_shape, dtype=DTYPE)
    kh, kw = dpatches.shape[3:5]
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += dpatches[
                :, :, :, i, j, :
            ]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: str = "same", groups: int = 1) -> Tensor:
    """2-D convolution, NHWC input and weight laid out ``(kh, kw, C_in/groups, C_out)``.

    ``groups == C_in`` with ``C_out == C_in`` is a depthwise convolution.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects a 4-D NHWC input and a 4-D weight")
    n, h, w, c_in = x.shape
    kh, kw, cg, c_out = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ValueError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if cg != c_in // groups:
        raise ValueError(f"weight expects {cg} channels per group, input gives {c_in // groups}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match C_out={c_out}")
    ho, pt, pb = _out_and_pad(h, kh, stride, padding)
    wo, pl, pr = _out_and_pad(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = _patches(xp, kh, kw, stride, ho, wo)
    wd = weight.data
    depthwise = groups == c_in and c_out == c_in
    if groups == 1:
        y = np.tensordot(cols, wd, axes=([3, 4, 5], [0, 1, 2]))
    elif depthwise:
        y = np.einsum("nhwijc,ijc->nhwc", cols, wd[:, :, 0, :], optimize=True)
    else:
        og = c_out // groups
        cols_g = cols.reshape(n, ho, wo, kh, kw, groups, cg)
        wg = wd.reshape(kh, kw, cg, groups, og)
        y = np.einsum("nhwijgc,ijcgo->nhwgo", cols_g, wg, optimize=True).reshape(n, ho, wo, c_out)
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(y, parents, "conv2d")

    def _bw(g):
        if groups == 1:
            dw = np.tensordot(cols, g, axes=([0, 1, 2], [0, 1, 2]))
            dcols = np.tensordot(g, wd, axes=([3], [3]))
        elif depthwise:
            dw = np.einsum("nhwijc,nhwc->ijc", cols, g, optimize=True)[:, :, None, :]
            dcols = g[:, :, :, None, None, :] * wd[:, :, 0, :]
        else:
            og = c_out // groups
            cols_g = cols.reshape(n, ho, wo, kh, kw, groups, cg)
            gg = g.reshape(n, ho, wo, groups, og)
            wg = wd.reshape(kh, kw, cg, groups, og)
            dw = np.einsum("nhwijgc,nhwgo->ijcgo", cols_g, gg, optimize=True).reshape(wd.shape)
            dcols = np.einsum("nhwgo,ijcgo->nhwijgc", gg, wg, optimize=True).reshape(cols.shape)
        dxp = _fold(dcols, xp.shape, stride, ho, wo)
        dx = dxp[:, pt : pt + h, pl : pl + w, :]
        grads = [(x, dx), (weight, dw)]
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 1, 2))))
        return tuple(grads)

    out._backward = _bw
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Affine map ``x @ weight + bias``; inputs with more than two dims are flattened."""
    if x.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"dense: input width {x.shape[-1]} vs weight rows {weight.shape[0]}")
    y = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValueError("dense: bias shape mismatch")
        y = y + bias
    return y


def avg_pool2d(x: Tensor, window: tuple[int, int], stride: int, padding: str = "valid") -> Tensor:
    """Average pooling; with ``same`` padding, padded cells are excluded from the mean."""
    n, h, w, c = x.shape
    kh, kw = window
    ho, pt, pb = _out_and_pad(h, kh, stride, padding)
    wo, pl, pr = _out_and_pad(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    ones = np.pad(np.ones((1, h, w, 1)), ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    counts = _patches(ones, kh, kw, stride, ho, wo).sum(axis=(3, 4))
    y = _patches(xp, kh, kw, stride, ho, wo).sum(axis=(3, 4)) / counts
    out = _make(y, (x,), "avg_pool2d")

    def _bw(g):
        share = np.broadcast_to((g / counts)[:, :, :, None, None, :], (n, ho, wo, kh, kw, c))
        dxp = _fold(share, xp.shape, stride, ho, wo)
        return ((x, dxp[:, pt : pt + h, pl : pl + w, :]),)

    out._backward = _bw
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over height and width, keeping an NHWC ``(N, 1, 1, C)`` layout."""
    return x.mean(axis=(1, 2), keepdims=True)


# ---------------------------------------------------------------------------
# fake quantisation
# ---------------------------------------------------------------------------


def quant_grid(bits: int, range_min: float, range_max: float, symmetric: bool):
    """Return ``(scale, zero_point, qmin, qmax)`` for an integer grid.

    Symmetric grids are signed with ``qmin = -qmax``; asymmetric grids are
    unsigned with a zero point nudged so 0.0 is exactly representable.
    """
    if bits not in (4, 8):
        raise ValueError(f"fake_quant supports 4 or 8 bits, got {bits}")
    if not range_min < range_max:
        raise ValueError(f"degenerate quantisation range [{range_min}, {range_max}]")
    if symmetric:
        qmax = 2 ** (bits - 1) - 1
        scale = max(abs(range_min), abs(range_max)) / qmax
        return scale, 0, -qmax, qmax
    qmax = 2**bits - 1
    scale = (range_max - range_min) / qmax
    zero_point = int(np.clip(np.round(-range_min / scale), 0, qmax))
    return scale, zero_point, 0, qmax


def fake_quant(x: Tensor, bits: int, range_min: Tensor, range_max: Tensor, symmetric: bool = False) -> Tensor:
    """Quantise-dequantise with round-half-to-even and a straight-through estimator.

    Gradients pass unchanged to ``x`` where the value lies inside the
    representable range and are routed to the range endpoints where the value
    was clamped.
    """
    range_min, range_max = as_tensor(range_min), as_tensor(range_max)
    scale, zp, qmin, qmax = quant_grid(bits, float(range_min.data), float(range_max.data), symmetric)
    q = np.clip(np.round(x.data / scale) + zp, qmin, qmax)
    y = (q - zp) * scale
    lo, hi = (qmin - zp) * scale, (qmax - zp) * scale
    below, above = x.data < lo, x.data > hi
    out = _make(y, (x, range_min, range_max), "fake_quant")

    def _bw(g):
        gx = np.where(below | above, 0.0, g)
        if symmetric:
            # both endpoints collapse onto the shared magnitude
            mag_grad = np.sum(g[above]) - np.sum(g[below])
            big_max = abs(float(range_max.data)) >= abs(float(range_min.data))
            gmin = np.array(0.0 if big_max else -mag_grad)
            gmax = np.array(mag_grad if big_max else 0.0)
        else:
            gmin, gmax = np.array(np.sum(g[below])), np.array(np.sum(g[above]))
        return ((x, gx), (range_min, gmin), (range_max, gmax))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    ste_approximate: bool = False
    worst: str | None = None
    passed: bool | None = None

    def summary(self) -> str:
        if self.ste_approximate:
            return "graph contains fake_quant (straight-through); exact check skipped"
        status = "pass" if self.passed else "FAIL"
        return f"{status}: worst {self.worst} rel err {self.errors.get(self.worst, 0.0):.3g} (tol {self.tolerance:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def numeric_gradient(loss_fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-3) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn().item()
        flat[i] = orig - eps
        down = loss_fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def grad_check(
    loss_fn: Callable[[], Tensor], params: dict[str, Tensor], tolerance: float = 1e-4, eps: float = 1e-3
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call. Graphs containing ``fake_quant`` are reported as
    straight-through approximations and are not checked.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if any(node.op == "fake_quant" for node in topological_order(loss)):
        return GradCheckReport(errors={}, tolerance=tolerance, ste_approximate=True)
    loss.backward()
    errors = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[name] = relative_error(analytic, numeric_gradient(loss_fn, p, eps))
    worst = max(errors, key=errors.get) if errors else None
    passed = all(e <= tolerance for e in errors.values())
    return GradCheckReport(errors=errors, tolerance=tolerance, worst=worst, passed=passed)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
