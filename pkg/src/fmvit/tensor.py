"""Dense-tensor core: NCHW float32 values, the operator set the blocks need,
and a reverse-mode gradient tape for desk-scale training.

Conventions
-----------
* Feature maps are rank-4 (N, C, H, W), stored float32, row-major.
* Convolution is cross-correlation (no kernel flip) with "same" zero padding
  p = (K - 1) // 2 per side; stride-2 convs keep the same padding (halving).
* Contractions (conv, matmul) and reductions (softmax denominators, BN stats)
  accumulate in float64; results are stored back at the input precision.
  float64 end to end is available by feeding float64 data (used by the
  finite-difference gradient checks).
* Every public op validates that its output is finite and raises
  NumericError otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, SpecError, TapeError

DEFAULT_DTYPE = np.float32


# ---------------------------------------------------------------------------
# values


class Tensor:
    """Immutable-by-convention dense array value.

    ``requires_grad`` marks a trainable leaf; intermediate results are linked
    to the ambient GradTape (if one is active) rather than to each other.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def dims(self):
        return tuple(self.data.shape)

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result_dtype(*arrays) -> np.dtype:
    """float64 if any operand is float64, else float32."""
    for a in arrays:
        if a is not None and a.dtype == np.float64:
            return np.float64
    return np.float32


def _finish(arr, op: str, dtype) -> Tensor:
    with np.errstate(over="ignore", invalid="ignore"):
        out = arr.astype(dtype, copy=False)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    return Tensor(out)


# ---------------------------------------------------------------------------
# convolution geometry


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 2-d convolution."""

    in_channels: int
    out_channels: int
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise SpecError("channel counts must be positive")
        if self.kernel_h % 2 == 0 or self.kernel_w % 2 == 0:
            raise SpecError(f"kernel sizes must be odd, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise SpecError("stride must be >= 1")
        if self.groups < 1:
            raise SpecError("groups must be >= 1")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise SpecError(
                f"groups={self.groups} must divide in={self.in_channels} and out={self.out_channels}"
            )

    @property
    def padding(self):
        """"Same" padding per side, derived from the kernel size."""
        return (self.kernel_h - 1) // 2, (self.kernel_w - 1) // 2

    @property
    def weight_shape(self):
        return (
            self.out_channels,
            self.in_channels // self.groups,
            self.kernel_h,
            self.kernel_w,
        )

    def out_hw(self, h: int, w: int):
        ph, pw = self.padding
        return (
            (h + 2 * ph - self.kernel_h) // self.stride + 1,
            (w + 2 * pw - self.kernel_w) // self.stride + 1,
        )

    def with_kernel(self, kernel_h: int, kernel_w: int) -> "ConvSpec":
        return ConvSpec(
            self.in_channels, self.out_channels, kernel_h, kernel_w, self.stride, self.groups, self.has_bias
        )


# ---------------------------------------------------------------------------
# gradient tape


class GradTape:
    """Ordered record of operations for one reverse pass.

    Use as a context manager; ops executed inside record themselves when any
    input is trainable or already on the tape. A tape is confined to a single
    thread of execution.
    """

    def __init__(self):
        self.nodes = []          # (out_id, parents, backward_fn)
        self._tracked = set()    # ids of tensors produced on this tape
        self._watched = []       # trainable leaves, in first-seen order
        self._watched_ids = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def watch(self, tensor: Tensor):
        if id(tensor) not in self._watched_ids:
            self._watched_ids.add(id(tensor))
            self._watched.append(tensor)
            self._tracked.add(id(tensor))  # ops on a watched leaf record

    def tracks(self, tensor: Tensor) -> bool:
        return tensor.requires_grad or id(tensor) in self._tracked

    def record(self, out: Tensor, parents, backward_fn):
        for p in parents:
            if p.requires_grad:
                self.watch(p)
        self._tracked.add(id(out))
        self.nodes.append((id(out), parents, backward_fn))


_TAPE_STACK: list[GradTape] = []


def active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _maybe_record(out: Tensor, parents, backward_fn_builder):
    """Record onto the ambient tape when any parent participates.

    backward_fn_builder is called lazily so saved state is only kept when a
    tape is actually listening.
    """
    tape = active_tape()
    if tape is None:
        return
    if not any(tape.tracks(p) for p in parents):
        return
    tape.record(out, list(parents), backward_fn_builder())


def backward(tape: GradTape, loss: Tensor) -> dict:
    """Reverse pass over a recorded tape.

    Returns a map from every watched trainable leaf to its gradient; leaves
    the loss does not reach get zeros.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be scalar-shaped, got {loss.shape}")
    if id(loss) not in tape._tracked and not loss.requires_grad:
        raise TapeError("loss was not recorded on this tape")
    grads = {id(loss): np.ones_like(loss.data, dtype=loss.data.dtype)}
    for out_id, parents, backward_fn in reversed(tape.nodes):
        g_out = grads.pop(out_id, None)
        if g_out is None:
            continue
        parent_grads = backward_fn(g_out)
        for p, g in zip(parents, parent_grads):
            if g is None:
                continue
            pid = id(p)
            if pid in grads:
                grads[pid] = grads[pid] + g
            else:
                grads[pid] = g
    result = {}
    for leaf in tape._watched:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        result[id(leaf)] = Tensor(np.asarray(g, dtype=leaf.data.dtype))
    return result


# ---------------------------------------------------------------------------
# convolution


def _pad_nchw(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(xp, kh, kw, stride, ho, wo):
    """(N, C, Hp, Wp) -> (N, C, kh, kw, ho, wo) by strided slicing."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def _conv_forward_raw(x, w, b, spec: ConvSpec, want_cols: bool = False):
    """Direct grouped convolution with float64 accumulation.

    Returns (out, cols) with cols shaped (N, G, Cg*kh*kw, L) when requested
    (for the backward pass), else (out, None).
    """
    n, cin, h, wdt = x.shape
    g = spec.groups
    cout = spec.out_channels
    kh, kw = spec.kernel_h, spec.kernel_w
    ph, pw = spec.padding
    s = spec.stride
    ho, wo = spec.out_hw(h, wdt)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv output would be empty for input {h}x{wdt} with kernel {kh}x{kw}")

    xp = _pad_nchw(x, ph, pw)
    acc = np.float64

    if not want_cols and kh == 1 and kw == 1:
        # 1x1 fast path: pure grouped matmul, no column buffer
        xs = x[:, :, ::s, ::s] if s > 1 else x
        l = ho * wo
        xg = xs.reshape(n, g, cin // g, l).astype(acc, copy=False)
        wg = w.reshape(g, cout // g, cin // g).astype(acc, copy=False)
        out = np.matmul(wg[None], xg)
        out = out.reshape(n, cout, ho, wo)
        cols = None
    elif not want_cols and g == cin == cout:
        # depthwise fast path: weighted slice accumulation
        out = np.zeros((n, cout, ho, wo), dtype=acc)
        wd = w.astype(acc, copy=False)
        for i in range(kh):
            for j in range(kw):
                out += wd[:, 0, i, j][None, :, None, None] * xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
        cols = None
    else:
        cols = _im2col(xp, kh, kw, s, ho, wo).reshape(n, g, (cin // g) * kh * kw, ho * wo)
        wg = w.reshape(g, cout // g, (cin // g) * kh * kw).astype(acc, copy=False)
        out = np.matmul(wg[None], cols.astype(acc, copy=False))
        out = out.reshape(n, cout, ho, wo)

    if b is not None:
        out = out + b.astype(acc, copy=False)[None, :, None, None]
    return out, (cols if want_cols else None)


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Grouped 2-d cross-correlation with "same" zero padding."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} != expected {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")

    tape = active_tape()
    parents = [x, weight] + ([bias] if bias is not None else [])
    recording = tape is not None and any(tape.tracks(p) for p in parents)

    raw, cols = _conv_forward_raw(
        x.data, weight.data, bias.data if bias is not None else None, spec, want_cols=recording
    )
    dtype = _result_dtype(x.data, weight.data)
    out = _finish(raw, "conv2d", dtype)

    if recording:
        n, cin, h, wdt = x.shape
        g, s = spec.groups, spec.stride
        kh, kw = spec.kernel_h, spec.kernel_w
        ph, pw = spec.padding
        ho, wo = spec.out_hw(h, wdt)
        cout = spec.out_channels
        has_bias = bias is not None
        w_saved = weight.data

        def backward_fn(g_out):
            go = g_out.reshape(n, g, cout // g, ho * wo).astype(np.float64, copy=False)
            wg = w_saved.reshape(g, cout // g, (cin // g) * kh * kw).astype(np.float64, copy=False)
            # dW: sum over batch of g_out @ cols^T
            dw = np.einsum("ngol,ngkl->gok", go, cols.astype(np.float64, copy=False))
            dw = dw.reshape(cout, cin // g, kh, kw)
            # dX: scatter w^T @ g_out back through the column map
            dcols = np.matmul(np.swapaxes(wg, 1, 2)[None], go)
            dcols = dcols.reshape(n, cin, kh, kw, ho, wo)
            dxp = np.zeros((n, cin, h + 2 * ph, wdt + 2 * pw), dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, i, j]
            dx = dxp[:, :, ph : ph + h, pw : pw + wdt]
            grads = [dx.astype(x.dtype, copy=False), dw.astype(w_saved.dtype, copy=False)]
            if has_bias:
                grads.append(g_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(g_out.dtype, copy=False))
            return grads

        tape.record(out, parents, backward_fn)
    return out


def conv2d_oracle(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Brute-force direct convolution (independent verification path).

    Triple-loop over output positions and kernel taps in float64; deliberately
    shares no code with conv2d.
    """
    xd = x.data.astype(np.float64)
    wd = weight.data.astype(np.float64)
    n, cin, h, wdt = xd.shape
    cout = spec.out_channels
    g = spec.groups
    cg_in = cin // g
    cg_out = cout // g
    kh, kw = spec.kernel_h, spec.kernel_w
    ph, pw = spec.padding
    s = spec.stride
    ho, wo = spec.out_hw(h, wdt)
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for ni in range(n):
        for oc in range(cout):
            grp = oc // cg_out
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ic in range(cg_in):
                        for ky in range(kh):
                            iy = oy * s + ky - ph
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(kw):
                                ix = ox * s + kx - pw
                                if ix < 0 or ix >= wdt:
                                    continue
                                acc += xd[ni, grp * cg_in + ic, iy, ix] * wd[oc, ic, ky, kx]
                    out[ni, oc, oy, ox] = acc
    if bias is not None:
        out += bias.data.astype(np.float64)[None, :, None, None]
    return Tensor(out.astype(_result_dtype(x.data, weight.data)))


# ---------------------------------------------------------------------------
# pooling


def avg_pool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Arithmetic-mean pooling, no padding."""
    if window < 1 or stride < 1:
        raise SpecError("window and stride must be >= 1")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    acc = np.zeros((n, c, ho, wo), dtype=np.float64)
    for i in range(window):
        for j in range(window):
            acc += x.data[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    out = _finish(acc / (window * window), "avg_pool2d", x.dtype)

    def builder():
        def backward_fn(g_out):
            dx = np.zeros((n, c, h, w), dtype=np.float64)
            gshare = g_out.astype(np.float64, copy=False) / (window * window)
            for i in range(window):
                for j in range(window):
                    dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gshare
            return [dx.astype(x.dtype, copy=False)]

        return backward_fn

    _maybe_record(out, [x], builder)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean, (N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    out = _finish(x.data.mean(axis=(2, 3), dtype=np.float64), "global_avg_pool", x.dtype)

    def builder():
        def backward_fn(g_out):
            dx = np.broadcast_to(g_out[:, :, None, None] / (h * w), (n, c, h, w))
            return [dx.astype(x.dtype)]

        return backward_fn

    _maybe_record(out, [x], builder)
    return out


# ---------------------------------------------------------------------------
# normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    training: bool = False,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes by batch statistics (biased variance) and updates
    the running buffers in place with the configured momentum.
    """
    n, c, h, w = x.shape
    for name, v in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if v.shape != (c,):
            raise ShapeError(f"{name} length {v.shape} != channel count {c}")
    if np.any(running_var < 0):
        raise SpecError("running_var must be non-negative")

    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        var = xd.astype(np.float64).var(axis=(0, 2, 3))
        running_mean[...] = (1 - momentum) * running_mean + momentum * mean.astype(running_mean.dtype)
        running_var[...] = (1 - momentum) * running_var + momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)

    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * invstd[None, :, None, None]
    raw = xhat * gamma.data.astype(np.float64)[None, :, None, None] + beta.data.astype(np.float64)[None, :, None, None]
    out = _finish(raw, "batch_norm", _result_dtype(xd, gamma.data))

    def builder():
        m = n * h * w
        g64 = gamma.data.astype(np.float64)

        def backward_fn(g_out):
            go = g_out.astype(np.float64, copy=False)
            dgamma = (go * xhat).sum(axis=(0, 2, 3))
            dbeta = go.sum(axis=(0, 2, 3))
            if training:
                gg = go * (g64 * invstd)[None, :, None, None]
                dx = gg - gg.mean(axis=(0, 2, 3), keepdims=True) - xhat * (gg * xhat).mean(axis=(0, 2, 3), keepdims=True)
            else:
                dx = go * (g64 * invstd)[None, :, None, None]
            return [
                dx.astype(x.dtype, copy=False),
                dgamma.astype(gamma.dtype, copy=False),
                dbeta.astype(beta.dtype, copy=False),
            ]

        return backward_fn

    _maybe_record(out, [x, gamma, beta], builder)
    return out


# ---------------------------------------------------------------------------
# elementwise / shape ops


def relu(x: Tensor) -> Tensor:
    out = _finish(np.maximum(x.data, 0), "relu", x.dtype)

    def builder():
        mask = x.data > 0

        def backward_fn(g_out):
            return [np.where(mask, g_out, 0)]

        return backward_fn

    _maybe_record(out, [x], builder)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = _finish(a.data + b.data, "add", _result_dtype(a.data, b.data))

    def builder():
        def backward_fn(g_out):
            return [g_out, g_out]

        return backward_fn

    _maybe_record(out, [a, b], builder)
    return out


def scale(x: Tensor, s: float) -> Tensor:
    out = _finish(x.data * s, "scale", x.dtype)

    def builder():
        def backward_fn(g_out):
            return [g_out * s]

        return backward_fn

    _maybe_record(out, [x], builder)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def builder():
        orig = x.shape

        def backward_fn(g_out):
            return [g_out.reshape(orig)]

        return backward_fn

    _maybe_record(out, [x], builder)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    out = Tensor(np.transpose(x.data, axes))

    def builder():
        inv = np.argsort(axes)

        def backward_fn(g_out):
            return [np.transpose(g_out, inv)]

        return backward_fn

    _maybe_record(out, [x], builder)
    return out


def concat_channels(tensors) -> Tensor:
    """Stack along C, preserving order; inputs must agree on N, H, W."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels needs at least one input")
    ref = tensors[0].shape
    for t in tensors:
        if t.data.ndim != 4 or (t.shape[0],) + t.shape[2:] != (ref[0],) + ref[2:]:
            raise ShapeError(f"concat inputs disagree on N/H/W: {t.shape} vs {ref}")
    out = _finish(
        np.concatenate([t.data for t in tensors], axis=1),
        "concat_channels",
        _result_dtype(*[t.data for t in tensors]),
    )

    def builder():
        splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

        def backward_fn(g_out):
            return np.split(g_out, splits, axis=1)

        return backward_fn

    _maybe_record(out, tensors, builder)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Reference matrix product on the last two axes; leading axes must match."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least rank 2")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shapes do not conform: {a.shape} @ {b.shape}")
    raw = np.matmul(a.data.astype(np.float64, copy=False), b.data.astype(np.float64, copy=False))
    out = _finish(raw, "matmul", _result_dtype(a.data, b.data))

    def builder():
        def backward_fn(g_out):
            go = g_out.astype(np.float64, copy=False)
            ga = np.matmul(go, np.swapaxes(b.data, -1, -2).astype(np.float64, copy=False))
            gb = np.matmul(np.swapaxes(a.data, -1, -2).astype(np.float64, copy=False), go)
            return [ga.astype(a.dtype, copy=False), gb.astype(b.dtype, copy=False)]

        return backward_fn

    _maybe_record(out, [a, b], builder)
    return out


def softmax_lastdim(x: Tensor) -> Tensor:
    """Shifted softmax along the last axis; rows sum to 1."""
    xd = x.data.astype(np.float64, copy=False)
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _finish(y, "softmax_lastdim", x.dtype)

    def builder():
        def backward_fn(g_out):
            go = g_out.astype(np.float64, copy=False)
            dot = (go * y).sum(axis=-1, keepdims=True)
            return [((go - dot) * y).astype(x.dtype, copy=False)]

        return backward_fn

    _maybe_record(out, [x], builder)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: x @ weight.T + bias; weight is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in {weight.shape[1]}")
    raw = np.matmul(x.data.astype(np.float64, copy=False), weight.data.T.astype(np.float64, copy=False))
    if bias is not None:
        raw = raw + bias.data.astype(np.float64)
    out = _finish(raw, "linear", _result_dtype(x.data, weight.data))

    def builder():
        def backward_fn(g_out):
            go = g_out.astype(np.float64, copy=False)
            dx = np.matmul(go, weight.data.astype(np.float64, copy=False))
            flat_g = go.reshape(-1, go.shape[-1])
            flat_x = x.data.reshape(-1, x.shape[-1]).astype(np.float64, copy=False)
            dw = flat_g.T @ flat_x
            grads = [dx.astype(x.dtype, copy=False), dw.astype(weight.dtype, copy=False)]
            if bias is not None:
                grads.append(flat_g.sum(axis=0).astype(bias.dtype, copy=False))
            return grads

        return backward_fn

    parents = [x, weight] + ([bias] if bias is not None else [])
    _maybe_record(out, parents, builder)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype).reshape(()))

    def builder():
        shp = x.shape

        def backward_fn(g_out):
            return [np.full(shp, float(g_out), dtype=x.dtype)]

        return backward_fn

    _maybe_record(out, [x], builder)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = _finish(a.data * b.data, "mul", _result_dtype(a.data, b.data))

    def builder():
        def backward_fn(g_out):
            return [g_out * b.data, g_out * a.data]

        return backward_fn

    _maybe_record(out, [a, b], builder)
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; labels are integer class indices."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    z = logits.data.astype(np.float64, copy=False)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    nll = lse - z[np.arange(n), labels]
    out = _finish(np.asarray(nll.mean()).reshape(()), "cross_entropy", logits.dtype)

    def builder():
        probs = np.exp(z - zmax)
        probs /= probs.sum(axis=1, keepdims=True)

        def backward_fn(g_out):
            d = probs.copy()
            d[np.arange(n), labels] -= 1.0
            return [(d * (float(g_out) / n)).astype(logits.dtype, copy=False)]

        return backward_fn

    _maybe_record(out, [logits], builder)
    return out


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_grad(f, x: Tensor, step: float = 1e-3) -> Tensor:
    """Central-difference gradient estimate of a scalar function, per element."""
    if step <= 0:
        raise SpecError("step must be positive")
    base = x.data
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    for idx in range(base.size):
        orig = base.reshape(-1)[idx]
        base.reshape(-1)[idx] = orig + step
        fp = _eval_scalar(f, x)
        base.reshape(-1)[idx] = orig - step
        fm = _eval_scalar(f, x)
        base.reshape(-1)[idx] = orig
        flat[idx] = (fp - fm) / (2 * step)
    if not np.all(np.isfinite(grad)):
        raise NumericError("finite_diff_grad produced non-finite values")
    return Tensor(grad.astype(x.dtype))


def _eval_scalar(f, x: Tensor) -> float:
    v = f(x)
    if isinstance(v, Tensor):
        v = v.item()
    v = float(v)
    if not np.isfinite(v):
        raise NumericError("function returned a non-finite value during finite differencing")
    return v
