"""Dense float tensors with a tape-based reverse-mode autodiff.

Only the operations the segmentation networks need are provided. Every op
takes and returns :class:`Tensor` values; when a :class:`Tape` is active and
any input requires a gradient, the op appends an entry holding a closure
that maps the output gradient to input gradients.

Tensors are 32-bit by default. Passing ``dtype=np.float64`` explicitly is
supported so that finite-difference oracles can run at higher precision;
every op preserves the dtype of its inputs.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946

_node_ids = itertools.count()
_active_tapes: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class Tensor:
    """N-dimensional array of reals plus autodiff bookkeeping.

    Args:
        data: Anything convertible by ``np.asarray``.
        requires_grad: Whether gradients should flow to this tensor.
        dtype: Storage precision, float32 unless an oracle asks for float64.
        name: Optional label used in diagnostics and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are recorded.
    ``backward`` replays the record in reverse, visiting each entry once,
    and stores gradients on the leaf tensors (``Tensor.grad``).
    """

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        self.entries.append(TapeEntry(op, inputs, output, backward))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> dict[int, np.ndarray]:
        """Propagate ``grad`` (default 1 for a scalar loss) back to the leaves.

        Returns the mapping node_id -> gradient for every node that received
        one. Leaves that require grad get their ``.grad`` overwritten.
        """
        if grad is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs an explicit grad for non-scalar output of shape {list(loss.shape)}")
            grad = np.ones_like(loss.data)
        grad = np.asarray(grad, dtype=loss.dtype)
        if grad.shape != loss.shape:
            raise ShapeError(f"upstream grad shape {list(grad.shape)} does not match output shape {list(loss.shape)}")

        grads: dict[int, np.ndarray] = {loss.node_id: grad}
        produced = {entry.output.node_id for entry in self.entries}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self.entries):
            g_out = grads.get(entry.output.node_id)
            if g_out is None:
                continue
            in_grads = entry.backward(g_out)
            for tensor, g in zip(entry.inputs, in_grads):
                if g is None or not tensor.requires_grad:
                    continue
                if g.shape != tensor.shape:
                    raise ShapeError(f"{entry.op} backward produced {list(g.shape)} for input {list(tensor.shape)}")
                prev = grads.get(tensor.node_id)
                grads[tensor.node_id] = g if prev is None else prev + g
                if tensor.node_id not in produced:
                    leaves[tensor.node_id] = tensor
        for node_id, tensor in leaves.items():
            tensor.grad = grads[node_id]
        if loss.node_id not in produced and loss.requires_grad:
            loss.grad = grad
        return grads


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    if requires and _active_tapes:
        _active_tapes[-1].record(op, inputs, out, backward)
    return out


def _need(t: Tensor) -> bool:
    return t.requires_grad


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _im2col3x3(x: np.ndarray) -> np.ndarray:
    """Channel-major patches: rows are (c, ky, kx), columns are (n, y, x)."""
    n, c, h, w = x.shape
    xp = np.zeros((c, n, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, 3, 3, n, h, w), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = xp[:, :, ky:ky + h, kx:kx + w]
    return cols.reshape(c * 9, n * h * w)


def _col2im3x3(gcols: np.ndarray, n: int, c: int, h: int, w: int) -> np.ndarray:
    gcols = gcols.reshape(c, 3, 3, n, h, w)
    gxp = np.zeros((c, n, h + 2, w + 2), dtype=gcols.dtype)
    for ky in range(3):
        for kx in range(3):
            gxp[:, :, ky:ky + h, kx:kx + w] += gcols[:, ky, kx]
    return np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution with zero "same" padding.

    Kernels must be ``[F, C, 3, 3]`` or ``[F, C, 1, 1]``; the output keeps
    the input's spatial size.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got input {list(x.shape)} and kernel {list(kernel.shape)}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c or (kh, kw) not in ((3, 3), (1, 1)):
        raise ShapeError(f"conv2d shape mismatch: input {list(x.shape)} vs kernel {list(kernel.shape)}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d bias {list(bias.shape)} does not match kernel {list(kernel.shape)}")

    wmat = kernel.data.reshape(f, c * kh * kw)
    if kh == 3:
        cols = _im2col3x3(x.data)
    else:
        cols = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
    out_mat = wmat @ cols
    out_mat += bias.data[:, None]
    out = np.ascontiguousarray(out_mat.reshape(f, n, h, w).transpose(1, 0, 2, 3))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * h * w)
        gx = gw = gb = None
        if _need(kernel):
            gw = (gmat @ cols.T).reshape(kernel.shape)
        if _need(bias):
            gb = gmat.sum(axis=1)
        if _need(x):
            gcols = wmat.T @ gmat
            if kh == 3:
                gx = _col2im3x3(gcols, n, c, h, w)
            else:
                gx = np.ascontiguousarray(gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
        return gx, gw, gb

    return _record("conv2d", (x, kernel, bias), out, backward)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first cell in row-major order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-d input, got {list(x.shape)}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {list(x.shape)}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _record("maxpool2d", (x,), out, backward)


def upsample2d(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2d expects a 4-d input, got {list(x.shape)}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record("upsample2d", (x,), out, backward)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def selu(x: Tensor) -> Tensor:
    xd = x.data
    neg = xd <= 0
    expm = np.expm1(np.minimum(xd, 0))
    scale = xd.dtype.type(SELU_SCALE)
    sa = xd.dtype.type(SELU_SCALE * SELU_ALPHA)
    out = np.where(neg, sa * expm, scale * xd)

    def backward(g):
        return (g * np.where(neg, sa * (expm + 1), scale),)

    return _record("selu", (x,), out.astype(xd.dtype, copy=False), backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data.dtype.type(0))

    def backward(g):
        return (g * pos,)

    return _record("relu", (x,), out, backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype, copy=False)

    def backward(g):
        return (g * out * (1 - out),)

    return _record("sigmoid", (x,), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {list(a.shape)} vs {list(b.shape)}")

    def backward(g):
        return g, g

    return _record("add", (a, b), a.data + b.data, backward)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis (axis 1), ``a`` first."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 4):
        raise ShapeError(f"concat expects two 2-d or two 4-d inputs, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ShapeError(f"concat batch/spatial mismatch: {list(a.shape)} vs {list(b.shape)}")
    ca = a.shape[1]

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _record("concat", (a, b), np.concatenate([a.data, b.data], axis=1), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype),)

    return _record("global_avg_pool", (x,), x.data.mean(axis=(2, 3)), backward)


def global_max_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]; ties route the gradient to the first maximum."""
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)

    def backward(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        return (gx.reshape(x.shape),)

    return _record("global_max_pool", (x,), np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0], backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """[N, D] @ [K, D]^T + [K] -> [N, K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {list(x.shape)} vs weight {list(weight.shape)}")

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _record("linear", (x, weight, bias), x.data @ weight.data.T + bias.data, backward)


# ---------------------------------------------------------------------------
# Batch normalisation
# ---------------------------------------------------------------------------


class BatchNormState:
    """Running statistics for one batchnorm layer."""

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps
        self.updates = 0
        self._warned = False


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalisation over (N, H, W).

    In ``train`` mode batch statistics are used and the running averages are
    updated as ``running = momentum * running + (1 - momentum) * batch``.
    In ``infer`` mode the running statistics are used.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm params {list(gamma.shape)}/{list(beta.shape)} do not match input {list(x.shape)}")
    xd = x.data
    dt = xd.dtype.type
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)

    if mode == "infer":
        if state.updates == 0 and not state._warned:
            logger.warning("batchnorm used in infer mode before any train step; using initial running stats")
            state._warned = True
        inv = (1 / np.sqrt(state.running_var.astype(xd.dtype) + dt(state.eps))).reshape(1, c, 1, 1)
        xhat = (xd - state.running_mean.astype(xd.dtype).reshape(1, c, 1, 1)) * inv
        out = g4 * xhat + b4

        def backward(g):
            gx = g * g4 * inv if _need(x) else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _record("batchnorm", (x, gamma, beta), out, backward)

    m = n * h * w
    mean = xd.mean(axis=(0, 2, 3))
    centered = xd - mean.reshape(1, c, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv = 1 / np.sqrt(var + dt(state.eps))
    xhat = centered * inv.reshape(1, c, 1, 1)
    out = g4 * xhat + b4

    mom = state.momentum
    state.running_mean = (mom * state.running_mean + (1 - mom) * mean).astype(np.float32)
    state.running_var = (mom * state.running_var + (1 - mom) * var).astype(np.float32)
    state.updates += 1

    def backward(g):
        sum_g = g.sum(axis=(0, 2, 3))
        sum_gx = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if _need(x):
            scale = (gamma.data * inv / m).reshape(1, c, 1, 1)
            gx = scale * (m * g - sum_g.reshape(1, c, 1, 1) - xhat * sum_gx.reshape(1, c, 1, 1))
        return gx, sum_gx, sum_g

    return _record("batchnorm", (x, gamma, beta), out, backward)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst: Optional[tuple[int, tuple[int, ...]]] = None
    message: str = ""


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-3,
    h: float = 1e-3,
    seed: int = 0,
    wrt: Optional[Sequence[int]] = None,
    analytic_dtype=np.float32,
) -> GradCheckResult:
    """Compare an op's backward rule with central finite differences.

    The op is wrapped into the scalar ``sum(R * op(*inputs))`` with a fixed
    random projection ``R``. The analytic gradient runs at ``analytic_dtype``;
    the finite differences always run in float64.

    Args:
        op: Callable taking Tensors and returning a Tensor.
        inputs: Input arrays; every one listed in ``wrt`` is differentiated.
        tolerance: Pass threshold on the max relative error.
        h: Central-difference step.
        wrt: Indices of inputs to check (default: all).

    Returns:
        GradCheckResult with the max over all checked entries of
        ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    base = [np.asarray(a, dtype=np.float64) for a in inputs]

    with Tape() as tape:
        ts = [Tensor(a, requires_grad=i in wrt, dtype=analytic_dtype) for i, a in enumerate(base)]
        out = op(*ts)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    tape.backward(out, proj.astype(out.dtype))

    def scalar(arrays) -> float:
        o = op(*[Tensor(a, dtype=np.float64) for a in arrays])
        return float(np.sum(proj * o.data))

    worst_err, worst_loc = 0.0, None
    for i in wrt:
        analytic = ts[i].grad
        if analytic is None:
            analytic = np.zeros_like(base[i])
        analytic = analytic.astype(np.float64)
        if not np.all(np.isfinite(analytic)):
            loc = tuple(int(v) for v in np.argwhere(~np.isfinite(analytic))[0])
            return GradCheckResult(False, float("inf"), (i, loc), f"non-finite analytic gradient for input {i} at {loc}")
        arrays = [a.copy() for a in base]
        for idx in np.ndindex(base[i].shape):
            orig = arrays[i][idx]
            arrays[i][idx] = orig + h
            fp = scalar(arrays)
            arrays[i][idx] = orig - h
            fm = scalar(arrays)
            arrays[i][idx] = orig
            numeric = (fp - fm) / (2 * h)
            if not np.isfinite(numeric):
                return GradCheckResult(False, float("inf"), (i, idx), f"non-finite numeric gradient for input {i} at {idx}")
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst_err:
                worst_err, worst_loc = err, (i, idx)
    passed = worst_err < tolerance
    msg = f"max relative error {worst_err:.3g}" + (f" at input {worst_loc[0]} index {worst_loc[1]}" if worst_loc else "")
    return GradCheckResult(passed, worst_err, worst_loc, msg)
