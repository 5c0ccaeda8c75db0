"""Dense NCHW tensors and the numeric layer kernels.

Tensors are plain ``numpy.ndarray`` objects of rank 4 and dtype float64.
Kernels never narrow storage: any quantization effect is injected
explicitly by :mod:`hybridsr.quantization`.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DTYPE = np.float64


def as_tensor(data, shape=None):
    """Return a read-only float64 rank-4 array built from ``data``.

    ``data`` may already be 4-D, or flat when ``shape`` is given.
    """
    arr = np.array(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if arr.size != int(np.prod(shape)):
            raise ShapeError("data length does not match shape", dims=(arr.size, shape))
        arr = arr.reshape(shape)
    if arr.ndim != 4:
        raise ShapeError("tensor must be rank 4 (n, c, h, w)", dims=arr.shape)
    arr.setflags(write=False)
    return arr


def _frozen(arr):
    arr.setflags(write=False)
    return arr


def conv2d(x, weights, bias=None, stride=1, padding=0, layer=None):
    """Cross-correlation with zero padding.

    ``weights`` has shape (c_out, c_in, k, k). Accumulation is float64 and
    the per-sample summation order is fixed (offset-major, then channel),
    so the result for a given output sample does not depend on the spatial
    extent of ``x``.
    """
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError("conv2d input must be rank 4", layer, x.shape)
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ShapeError("conv2d weights must be (c_out, c_in, k, k)", layer, weights.shape)
    n, c_in, h, w = x.shape
    c_out, wc_in, k, _ = weights.shape
    if wc_in != c_in:
        raise ShapeError(f"input has {c_in} channels, weights expect {wc_in}", layer,
                         (x.shape, weights.shape))
    if k % 2 != 1:
        raise ShapeError("kernel size must be odd", layer, weights.shape)
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0", layer, (stride, padding))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError("input smaller than kernel", layer, (x.shape, weights.shape))

    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    out = np.zeros((n, c_out, h_out, w_out), dtype=DTYPE)
    y_span = stride * (h_out - 1) + 1
    x_span = stride * (w_out - 1) + 1
    for dy in range(k):
        for dx in range(k):
            window = xp[:, :, dy:dy + y_span:stride, dx:dx + x_span:stride]
            # einsum without optimize= stays off BLAS: deterministic per-sample order
            out += np.einsum("oc,nchw->nohw", weights[:, :, dy, dx], window)
    if bias is not None:
        bias = np.asarray(bias, dtype=DTYPE)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias must have {c_out} entries", layer, bias.shape)
        out += bias[None, :, None, None]
    return _frozen(out)


def relu(x):
    return _frozen(np.maximum(np.asarray(x, dtype=DTYPE), 0.0))


def add(a, b, layer=None):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError("add operands differ in shape", layer, (a.shape, b.shape))
    return _frozen(a + b)


def _check_shuffle(x, s, layer):
    if x.ndim != 4:
        raise ShapeError("pixel shuffle input must be rank 4", layer, x.shape)
    if s < 1:
        raise ShapeError("upscale factor must be >= 1", layer, s)
    if x.shape[1] % (s * s):
        raise ShapeError(f"channel count {x.shape[1]} not divisible by {s * s}", layer, x.shape)


def pixel_shuffle_naive(x, s, layer=None):
    """Reference pixel shuffle through a rank-6 intermediate.

    out[n, c, s*y + i, s*x + j] = in[n, c*s*s + i*s + j, y, x]
    """
    x = np.asarray(x, dtype=DTYPE)
    _check_shuffle(x, s, layer)
    n, c, h, w = x.shape
    c_out = c // (s * s)
    six = x.reshape(n, c_out, s, s, h, w)
    six = six.transpose(0, 1, 4, 2, 5, 3)
    return _frozen(np.ascontiguousarray(six).reshape(n, c_out, s * h, s * w))


@dataclass
class RankTrace:
    """Per-call record of the largest tensor rank materialized."""

    max_rank: int = 0

    def see(self, arr):
        self.max_rank = max(self.max_rank, arr.ndim)
        return arr


def pixel_shuffle_memaware(x, s, trace=None, layer=None):
    """Pixel shuffle that never materializes a tensor above rank 4.

    Per batch item: flatten to (c_out, s*s*h*w), then for every output
    channel reshape to (s, s, h, w), permute to (h, s, w, s), collapse to
    (s*h, s*w), and finally stack the channels. Pass a :class:`RankTrace`
    to observe the ranks touched along the way.
    """
    if trace is None:
        trace = RankTrace()
    x = trace.see(np.asarray(x, dtype=DTYPE))
    _check_shuffle(x, s, layer)
    n, c, h, w = x.shape
    c_out = c // (s * s)
    items = []
    for b in range(n):
        flat = trace.see(x[b].reshape(c_out, s * s * h * w))
        planes = []
        for ch in range(c_out):
            vec = trace.see(flat[ch])
            block = trace.see(vec.reshape(s, s, h, w))
            block = trace.see(block.transpose(2, 0, 3, 1))
            planes.append(trace.see(np.ascontiguousarray(block).reshape(s * h, s * w)))
        items.append(trace.see(np.stack(planes)))
    out = trace.see(np.stack(items))
    return _frozen(out)
