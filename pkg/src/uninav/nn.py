"""Small numpy neural-network engine for the Q-network.

Activations are kept channels-last (batch, height, width, channels); shapes
reported to callers use the channels-first convention (C, H, W).  Every layer
implements ``forward`` (caching what backward needs) and ``backward``
(accumulating parameter gradients into ``grads`` and returning the input
gradient).
"""
from __future__ import annotations

import copy
import math
import os
import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp

CHECK_FINITE = bool(os.environ.get("UNINAV_CHECK_FINITE"))


def _check(name: str, a: np.ndarray) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values in {name}")


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    params: list[np.ndarray] = []
    grads: list[np.ndarray] = []

    def zero_grad(self) -> None:
        for g in self.grads:
            g[...] = 0

    def drop_cache(self) -> None:
        for attr in ("_cache", "_mask", "_x", "_shape"):
            self.__dict__.pop(attr, None)


class Conv2D(Layer):
    """Odd-kernel convolution, stride 1, zero 'same' padding.

    The padded input is flattened to rows of channels; every kernel tap is
    then a contiguous row-shifted slice, so each tap is one matmul and no
    im2col copy is needed.  Outputs computed at padding positions are dropped.
    """

    def __init__(self, in_ch: int, out_ch: int, rng, kernel: int = 3, dtype=np.float32):
        if kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.k = kernel
        self.in_ch, self.out_ch = in_ch, out_ch
        fan_in = kernel * kernel * in_ch
        self.W = he_uniform(rng, (kernel, kernel, in_ch, out_ch), fan_in, dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.params = [self.W, self.b]
        self.grads = [np.zeros_like(self.W), np.zeros_like(self.b)]
        self.need_input_grad = True

    def out_shape(self, shape):
        c, h, w = shape
        return self.out_ch, h, w

    def _layout(self, shape):
        n, h, w, _ = shape
        p = self.k // 2
        hp, wp = h + 2 * p, w + 2 * p
        margin = p * wp + p
        taps = [(i, j, (i - p) * wp + (j - p)) for i in range(self.k) for j in range(self.k)]
        return p, hp, wp, margin, n * hp * wp, taps

    def forward(self, x, cache=True):
        n, h, w, c = x.shape
        p, hp, wp, margin, rows, taps = self._layout(x.shape)
        flat = np.zeros((rows + 2 * margin, c), dtype=x.dtype)
        flat[margin:margin + rows].reshape(n, hp, wp, c)[:, p:p + h, p:p + w] = x
        out = np.empty((rows, self.out_ch), dtype=x.dtype)
        tmp = np.empty_like(out)
        for t, (i, j, off) in enumerate(taps):
            src = flat[margin + off:margin + off + rows]
            if t == 0:
                np.matmul(src, self.W[i, j], out=out)
            else:
                np.matmul(src, self.W[i, j], out=tmp)
                out += tmp
        out += self.b
        if cache:
            self._cache = (flat, x.shape)
        return out.reshape(n, hp, wp, self.out_ch)[:, p:p + h, p:p + w]

    def backward(self, dy):
        flat, shape = self._cache
        n, h, w, c = shape
        p, hp, wp, margin, rows, taps = self._layout(shape)
        dfull = np.zeros((n, hp, wp, self.out_ch), dtype=dy.dtype)
        dfull[:, p:p + h, p:p + w] = dy
        dfull = dfull.reshape(rows, self.out_ch)
        gW = self.grads[0]
        for i, j, off in taps:
            gW[i, j] += flat[margin + off:margin + off + rows].T @ dfull
        self.grads[1] += dfull.sum(axis=0)
        if not self.need_input_grad:
            return None
        dflat = np.zeros_like(flat)
        for i, j, off in taps:
            dflat[margin + off:margin + off + rows] += dfull @ self.W[i, j].T
        return dflat[margin:margin + rows].reshape(n, hp, wp, c)[:, p:p + h, p:p + w]


class ReLU(Layer):
    def __init__(self):
        self.params, self.grads = [], []

    def out_shape(self, shape):
        return shape

    def forward(self, x, cache=True):
        if cache:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dy):
        return dy * self._mask


def _pool_axis(x, axis, size, stride):
    n_out = (x.shape[axis] - size) // stride + 1
    idx = [slice(None)] * x.ndim
    acc = None
    for d in range(size):
        idx[axis] = slice(d, d + stride * (n_out - 1) + 1, stride)
        acc = x[tuple(idx)].copy() if acc is None else acc + x[tuple(idx)]
    return acc


def _unpool_axis(dy, axis, length, size, stride):
    shape = list(dy.shape)
    shape[axis] = length
    out = np.zeros(shape, dtype=dy.dtype)
    n_out = dy.shape[axis]
    idx = [slice(None)] * dy.ndim
    for d in range(size):
        idx[axis] = slice(d, d + stride * (n_out - 1) + 1, stride)
        out[tuple(idx)] += dy
    return out


class AvgPool2D(Layer):
    """Per-channel average pooling, valid windows."""

    def __init__(self, size: int = 5, stride: int = 3):
        self.size, self.stride = size, stride
        self.params, self.grads = [], []

    def out_shape(self, shape):
        c, h, w = shape
        oh = (h - self.size) // self.stride + 1
        ow = (w - self.size) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"pool window {self.size} does not fit input {h}x{w}")
        return c, oh, ow

    def forward(self, x, cache=True):
        if cache:
            self._shape = x.shape
        y = _pool_axis(_pool_axis(x, 1, self.size, self.stride), 2, self.size, self.stride)
        return y / (self.size * self.size)

    def backward(self, dy):
        _, h, w, _ = self._shape
        g = _unpool_axis(dy / (self.size * self.size), 2, w, self.size, self.stride)
        return _unpool_axis(g, 1, h, self.size, self.stride)


class SparseConvBlock(Layer):
    """Conv2D + ReLU + AvgPool2D fused for a mostly-zero input.

    Only positions whose receptive field touches a non-zero input differ from
    the bias, so the convolution is evaluated there alone and every other
    position contributes ``relu(bias)`` to its pooling windows.  Produces the
    same values as the three dense layers in sequence; it has no input
    gradient, so it can only be the first layer of a network.
    """

    def __init__(self, conv: Conv2D, pool: AvgPool2D):
        if conv.k != 3:
            raise ValueError("sparse block supports 3x3 kernels")
        self.conv, self.pool = conv, pool
        self.params, self.grads = conv.params, conv.grads

    def out_shape(self, shape):
        return self.pool.out_shape(self.conv.out_shape(shape))

    def _windows(self, n, h, w, bi, yi, xi, dtype):
        size, stride = self.pool.size, self.pool.stride
        oh = (h - size) // stride + 1
        ow = (w - size) // stride + 1
        rows, cols = [], []
        t = np.arange(len(bi))
        for dr in range(-(-size // stride)):
            wr = yi // stride - dr
            okr = (wr >= 0) & (wr < oh) & (wr * stride + size > yi)
            for dc in range(-(-size // stride)):
                wc = xi // stride - dc
                ok = okr & (wc >= 0) & (wc < ow) & (wc * stride + size > xi)
                rows.append(((bi * oh + wr) * ow + wc)[ok])
                cols.append(t[ok])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        data = np.ones(len(rows), dtype=dtype)
        return sp.csr_matrix((data, (rows, cols)), shape=(n * oh * ow, len(bi))), oh, ow

    def forward(self, x, cache=True):
        n, h, w, c = x.shape
        conv = self.conv
        nz = x[..., 0] != 0
        for k in range(1, c):
            nz |= x[..., k] != 0
        touched = np.zeros((n, h + 2, w + 2), dtype=bool)
        for i in range(3):
            for j in range(3):
                touched[:, i:i + h, j:j + w] |= nz
        bi, yi, xi = np.nonzero(touched[:, 1:h + 1, 1:w + 1])
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0))).reshape(-1, c)
        taps = np.array([i * (w + 2) + j for i in range(3) for j in range(3)])
        corner = (bi * (h + 2) + yi) * (w + 2) + xi
        cols = xp.take(corner[:, None] + taps, axis=0).reshape(len(bi), 9 * c)
        pre = cols @ conv.W.reshape(-1, conv.out_ch) + conv.b
        base = np.maximum(conv.b, 0)
        S, oh, ow = self._windows(n, h, w, bi, yi, xi, x.dtype)
        scale = x.dtype.type(1.0 / (self.pool.size * self.pool.size))
        pooled = np.empty((n * oh * ow, conv.out_ch), dtype=x.dtype)
        pooled[...] = base
        pooled += S @ ((np.maximum(pre, 0) - base) * scale)
        self.rows = np.flatnonzero(np.diff(S.indptr))  # output positions that differ from relu(b)
        if cache:
            self._cache = (cols, pre > 0, S[self.rows])
        return pooled.reshape(n, oh, ow, conv.out_ch)

    def backward(self, dy):
        dflat = dy.reshape(-1, self.conv.out_ch)
        return self.backward_rows(dflat[self.rows], dflat.sum(axis=0))

    def backward_rows(self, d_rows, d_total):
        """Backward from the output gradient at ``self.rows`` plus its sum over
        every output position; all other rows only reach the bias."""
        cols, mask, S = self._cache
        conv = self.conv
        d_rows = d_rows.astype(S.dtype, copy=False)
        g = (S.T @ d_rows) * S.dtype.type(1.0 / (self.pool.size * self.pool.size))
        dpre = g * mask
        self.grads[0] += (cols.T @ dpre).reshape(conv.W.shape)
        untouched = d_total - g.sum(axis=0)
        self.grads[1] += (conv.b > 0) * untouched + dpre.sum(axis=0)
        return None


def _dilate3(mask):
    n, h, w = mask.shape
    out = np.zeros((n, h + 2, w + 2), dtype=bool)
    for i in range(3):
        for j in range(3):
            out[:, i:i + h, j:j + w] |= mask
    return out[:, 1:h + 1, 1:w + 1]


class SparseStem(Layer):
    """First sparse block followed by the second 3x3 convolution.

    The block output equals the constant ``relu(b1)`` except at a few
    positions, so the second convolution is split into the convolution of
    that constant field (one sample, shared by the batch) plus the
    convolution of the deviations, evaluated only next to them.  Backward
    needs the block's input gradient only at its deviating positions and in
    total, never as a dense map.  Returns the second convolution's
    pre-activation.
    """

    def __init__(self, block: SparseConvBlock, conv: Conv2D):
        if conv.k != 3:
            raise ValueError("sparse stem supports 3x3 kernels")
        self.block, self.conv = block, conv
        conv.need_input_grad = False
        self.params = block.params + conv.params
        self.grads = block.grads + conv.grads

    def out_shape(self, shape):
        return self.conv.out_shape(self.block.out_shape(shape))

    def drop_cache(self) -> None:
        super().drop_cache()
        self.block.drop_cache()
        self.conv.drop_cache()

    @staticmethod
    def _patches(a, flat_idx, offsets):
        n, h, w, c = a.shape
        ap = np.pad(a, ((0, 0), (1, 1), (1, 1), (0, 0))).reshape(-1, c)
        b, rem = np.divmod(flat_idx, h * w)
        y, x = np.divmod(rem, w)
        corner = (b * (h + 2) + y + 1) * (w + 2) + x + 1
        return ap.take(corner[:, None] + offsets, axis=0).reshape(len(flat_idx), len(offsets) * c)

    def forward(self, x, cache=True):
        block, conv = self.block, self.conv
        pooled = block.forward(x, cache=cache)
        n, h, w, c = pooled.shape
        bg = np.maximum(block.conv.b, 0).astype(pooled.dtype)
        base = conv.forward(np.broadcast_to(bg, (1, h, w, c)), cache=cache)[0]
        near = np.zeros(n * h * w, dtype=bool)
        near[block.rows] = True
        near = np.flatnonzero(_dilate3(near.reshape(n, h, w)))
        offsets = np.array([(i - 1) * (w + 2) + (j - 1) for i in range(3) for j in range(3)])
        cols = self._patches(pooled - bg, near, offsets)
        out = np.empty((n, h, w, conv.out_ch), dtype=pooled.dtype)
        out[...] = base
        out.reshape(-1, conv.out_ch)[near] += cols @ conv.W.reshape(-1, conv.out_ch)
        if cache:
            self._cache = (cols, near, offsets)
        return out

    def backward(self, dy):
        cols, near, offsets = self._cache
        block, conv = self.block, self.conv
        n, h, w, c2 = dy.shape
        k, c1 = conv.k, conv.in_ch
        dsum = dy.sum(axis=0)
        conv.backward(dsum[None])  # constant-field part: weight and bias gradients
        dflat = dy.reshape(-1, c2)
        conv.grads[0] += (cols.T @ dflat[near]).reshape(conv.W.shape)
        # input gradient at the block's deviating positions: flipped-kernel correlation
        flipped = np.ascontiguousarray(conv.W.transpose(0, 1, 3, 2)).reshape(k * k * c2, c1)
        d_rows = self._patches(dy, block.rows, -offsets) @ flipped
        # and summed over every position: each tap sees a shifted window of dy
        d_total = np.zeros(c1, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                win = dsum[max(0, 1 - i):min(h, h + 1 - i), max(0, 1 - j):min(w, w + 1 - j)]
                d_total += conv.W[i, j] @ win.sum(axis=(0, 1))
        return block.backward_rows(d_rows, d_total)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng, dtype=np.float32):
        self.W = he_uniform(rng, (n_in, n_out), n_in, dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self.params = [self.W, self.b]
        self.grads = [np.zeros_like(self.W), np.zeros_like(self.b)]

    def out_shape(self, shape):
        return self.W.shape[1]

    def forward(self, x, cache=True):
        if cache:
            self._x = x
        return x @ self.W + self.b

    def backward(self, dy):
        self.grads[0] += self._x.T @ dy
        self.grads[1] += dy.sum(axis=0)
        return dy @ self.W.T


class QNetwork:
    """Conv/pool feature extractor, speed concatenation, dense head.

    Default sizes give three Conv(64, 3x3, same) + ReLU + AvgPool(5, stride 3)
    blocks on a 3x80x60 grid, then dense 512-256-64 (ReLU) and a linear 4-unit
    output.  ``input_scale`` multiplies each input channel before the first
    convolution, so stored grids keep their physical units.
    """

    def __init__(self, in_shape=(3, 80, 60), filters=(64, 64, 64), hidden=(512, 256, 64),
                 n_actions: int = 4, pool=(5, 3), seed: int = 0, dtype=np.float32,
                 input_scale=(1.0, 0.1, 1.0 / 180.0), sparse_input: bool = True):
        rng = np.random.default_rng(seed)
        self.in_shape = tuple(in_shape)
        self.dtype = np.dtype(dtype)
        self.input_scale = np.asarray(input_scale, dtype=self.dtype)
        if self.input_scale.shape != (in_shape[0],):
            raise ValueError("input_scale needs one factor per input channel")
        self.conv_layers: list[Layer] = []
        shape = self.in_shape
        for k, f in enumerate(filters):
            conv = Conv2D(shape[0], f, rng, dtype=dtype)
            avg = AvgPool2D(*pool)
            conv.need_input_grad = k > 0
            if k == 0 and sparse_input:
                self.conv_layers.append(SparseConvBlock(conv, avg))
            elif k == 1 and sparse_input:
                self.conv_layers[0] = SparseStem(self.conv_layers[0], conv)
                self.conv_layers += [ReLU(), avg]
            else:
                self.conv_layers += [conv, ReLU(), avg]
            shape = avg.out_shape(conv.out_shape(shape))
        self.feature_shape = shape
        n_in = int(np.prod(shape)) + 1
        self.dense_layers: list[Layer] = []
        for units in hidden:
            self.dense_layers += [Dense(n_in, units, rng, dtype=dtype), ReLU()]
            n_in = units
        self.dense_layers.append(Dense(n_in, n_actions, rng, dtype=dtype))
        self.n_actions = n_actions

    @property
    def layers(self) -> list[Layer]:
        return self.conv_layers + self.dense_layers

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads]

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def _prepare(self, x1, x2):
        x1 = np.asarray(x1, dtype=self.dtype)
        if x1.ndim == 3:
            x1 = x1[None]
        if x1.shape[1:] != self.in_shape:
            raise ValueError(f"x1 shape {x1.shape[1:]} does not match network input {self.in_shape}")
        x2 = np.asarray(x2, dtype=self.dtype).reshape(-1, 1)
        if x2.shape[0] != x1.shape[0]:
            raise ValueError("x1 and x2 batch sizes differ")
        x = np.ascontiguousarray(x1.transpose(0, 2, 3, 1)) * self.input_scale
        return x, x2

    def forward(self, x1, x2, cache: bool = False, trace: list | None = None) -> np.ndarray:
        """Q-values, shape (batch, n_actions).  ``trace`` collects activation shapes."""
        x, speed = self._prepare(x1, x2)
        for layer in self.conv_layers:
            x = layer.forward(x, cache=cache)
            if trace is not None:
                if isinstance(layer, SparseConvBlock):
                    trace.append((layer.conv.out_ch, *self.in_shape[1:]))
                    trace.append((x.shape[3], x.shape[1], x.shape[2]))
                elif isinstance(layer, SparseStem):
                    trace.append((layer.block.conv.out_ch, *self.in_shape[1:]))
                    trace.append(layer.block.out_shape(self.in_shape))
                    trace.append((x.shape[3], x.shape[1], x.shape[2]))
                elif not isinstance(layer, ReLU):
                    trace.append((x.shape[3], x.shape[1], x.shape[2]))
        n = x.shape[0]
        self._flat_shape = x.shape
        x = x.reshape(n, -1)
        if trace is not None:
            trace.append(x.shape[1])
        x = np.concatenate([x, speed], axis=1)
        if trace is not None:
            trace.append(x.shape[1])
        for layer in self.dense_layers:
            x = layer.forward(x, cache=cache)
            if trace is not None and isinstance(layer, Dense):
                trace.append(x.shape[1])
        _check("q-values", x)
        return x

    def shape_trace(self, x1, x2, blocks_only: bool = False) -> list:
        """Activation shapes in order; ``blocks_only`` keeps just the pooled
        output of each conv block (dropping the pre-pool conv shapes)."""
        trace: list = []
        self.forward(x1, x2, trace=trace)
        if blocks_only:
            maps = [s for s in trace if isinstance(s, tuple)]
            trace = maps[1::2] + [s for s in trace if not isinstance(s, tuple)]
        return trace

    def backward(self, dq: np.ndarray) -> list[np.ndarray]:
        """Accumulate gradients of sum(dq * q) from the last cached forward."""
        g = np.asarray(dq, dtype=self.dtype)
        for layer in reversed(self.dense_layers):
            g = layer.backward(g)
        g = g[:, :-1].reshape(self._flat_shape)
        for layer in reversed(self.conv_layers):
            g = layer.backward(g)
            if g is None:
                break
        for grad in self.grads:
            _check("gradient", grad)
        return self.grads

    def copy_from(self, other: "QNetwork") -> None:
        for dst, src in zip(self.params, other.params):
            dst[...] = src

    def clone(self) -> "QNetwork":
        twin = copy.deepcopy(self)
        for layer in twin.layers:
            layer.drop_cache()
        return twin


def clone_parameters(net: QNetwork) -> QNetwork:
    return net.clone()


def huber(residual: np.ndarray, delta: float = 1.0) -> np.ndarray:
    a = np.abs(residual)
    return np.where(a <= delta, 0.5 * residual ** 2, delta * (a - 0.5 * delta))


def td_loss_grad(q: np.ndarray, actions, targets, weights=None, delta: float = 1.0):
    """Importance-weighted mean Huber loss on the taken actions.

    Returns (loss, dL/dq, td_errors) where only the taken action column of
    dL/dq is non-zero and td_errors = target - Q(s, a).
    """
    n = q.shape[0]
    actions = np.asarray(actions, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    rows = np.arange(n)
    residual = q[rows, actions].astype(np.float64) - targets
    loss = float(np.mean(weights * huber(residual, delta)))
    dq = np.zeros_like(q)
    dq[rows, actions] = weights * np.clip(residual, -delta, delta) / n
    return loss, dq, -residual


class RMSprop:
    def __init__(self, params: list[np.ndarray], lr: float = 0.00025, decay: float = 0.95, eps: float = 1e-6):
        self.params = params
        self.lr, self.decay, self.eps = lr, decay, eps
        self.accum = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        for p, g, a in zip(self.params, grads, self.accum):
            a *= self.decay
            a += (1 - self.decay) * g * g
            p -= self.lr * g / (np.sqrt(a) + self.eps)


def rmsprop_step(net: QNetwork, grads, optimizer: RMSprop | None = None, **kw) -> QNetwork:
    opt = optimizer or RMSprop(net.params, **kw)
    opt.step(grads)
    return net


MAGIC = b"AVQN"
FORMAT_VERSION = 1


def save_checkpoint(net: QNetwork, path: str | Path) -> None:
    """Binary dump: magic, version, tensor count, then rank/extents/float32 data."""
    params = net.params
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(params)))
        for p in params:
            f.write(struct.pack("<I", p.ndim))
            f.write(struct.pack(f"<{p.ndim}I", *p.shape))
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def read_checkpoint(path: str | Path) -> list[np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a Q-network checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = []
    for _ in range(count):
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        out.append(np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape).copy())
        off += 4 * size
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out


def load_checkpoint(path: str | Path, net: QNetwork | None = None) -> QNetwork:
    """Load parameters into ``net`` (default architecture when omitted)."""
    net = net or QNetwork()
    arrays = read_checkpoint(path)
    params = net.params
    if len(arrays) != len(params) or any(a.shape != p.shape for a, p in zip(arrays, params)):
        got = [a.shape for a in arrays]
        want = [p.shape for p in params]
        raise ValueError(f"checkpoint architecture mismatch: {got} vs expected {want}")
    for p, a in zip(params, arrays):
        p[...] = a
    return net
