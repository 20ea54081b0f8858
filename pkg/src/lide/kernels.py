"""Hot numeric kernels: numba-jitted loops with a pure-numpy fallback.

The fallback is selected with the environment variable ``LIDE_JIT=0``
(useful for debugging and for machines without a working numba).  Both
paths compute the same values up to float round-off;
``benchmarks/bench_kernels.py`` compares their throughput.
"""

import os

import numpy as np

_flag = os.environ.get("LIDE_JIT", "1").strip().lower()
JIT_ENABLED = _flag not in ("0", "false", "off", "no")

if JIT_ENABLED:
    try:
        from numba import njit, prange
    except ImportError:  # pragma: no cover - numba is a declared dependency
        JIT_ENABLED = False

if JIT_ENABLED and "LIDE_THREADS" in os.environ:
    import numba

    _want = max(1, int(os.environ["LIDE_THREADS"]))
    numba.set_num_threads(min(_want, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# im2col / col2im
#
# Patch extraction feeds conv2d forward (matmul against the flattened
# kernels); the scatter-add inverse feeds the input gradient.  The numpy
# col2im relies on np.add.at, which is the slow spot the jitted loop avoids.
# ---------------------------------------------------------------------------

def _im2col_numpy(x, kh, kw, stride):
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def _col2im_numpy(cols, x_shape, kh, kw, stride):
    n, c, h, w = x_shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    x = np.zeros(x_shape, dtype=cols.dtype)
    patches = cols.reshape(n, oh, ow, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            x[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += (
                patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return x


if JIT_ENABLED:

    @njit(cache=True, parallel=True)
    def _im2col_jit(x, kh, kw, stride):
        n, c, h, w = x.shape
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        cols = np.empty((n, oh, ow, c * kh * kw), dtype=x.dtype)
        for b in prange(n):
            for oy in range(oh):
                for ox in range(ow):
                    k = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                cols[b, oy, ox, k] = x[b, ch, oy * stride + i, ox * stride + j]
                                k += 1
        return cols

    @njit(cache=True, parallel=True)
    def _col2im_jit(cols, n, c, h, w, kh, kw, stride):
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        x = np.zeros((n, c, h, w), dtype=cols.dtype)
        for b in prange(n):
            for oy in range(oh):
                for ox in range(ow):
                    k = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                x[b, ch, oy * stride + i, ox * stride + j] += cols[b, oy, ox, k]
                                k += 1
        return x


def im2col(x, kh, kw, stride=1):
    """Extract (kh, kw) patches from NCHW input as rows of shape c*kh*kw."""
    if JIT_ENABLED:
        return _im2col_jit(np.ascontiguousarray(x), kh, kw, stride)
    return _im2col_numpy(x, kh, kw, stride)


def col2im(cols, x_shape, kh, kw, stride=1):
    """Scatter-add patch rows back onto an NCHW canvas (inverse of im2col)."""
    if JIT_ENABLED:
        n, c, h, w = x_shape
        return _col2im_jit(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride)
    return _col2im_numpy(cols, x_shape, kh, kw, stride)


# ---------------------------------------------------------------------------
# Pairwise squared euclidean distances (neighbor queries in the feature
# analyses).  Both paths sum squared coordinate differences directly; the
# numpy fallback chunks rows to bound the temporary (n, n, d) tensor.
# ---------------------------------------------------------------------------

def _pairwise_sq_numpy(x):
    n, dims = x.shape
    out = np.zeros((n, n), dtype=x.dtype)
    step = max(1, (1 << 22) // max(1, dims * n))
    for s in range(0, n, step):
        e = min(n, s + step)
        diff = x[s:e, None, :] - x[None, :, :]
        out[s:e] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


if JIT_ENABLED:

    @njit(cache=True, parallel=True)
    def _pairwise_sq_jit(x):
        n, dims = x.shape
        out = np.zeros((n, n), dtype=x.dtype)
        for i in prange(n):
            for j in range(i + 1, n):
                acc = 0.0
                for k in range(dims):
                    diff = x[i, k] - x[j, k]
                    acc += diff * diff
                out[i, j] = acc
                out[j, i] = acc
        return out


def pairwise_sq_dists(x):
    """Dense matrix of squared euclidean distances between rows of x."""
    if JIT_ENABLED:
        return _pairwise_sq_jit(np.ascontiguousarray(x))
    return _pairwise_sq_numpy(x)
