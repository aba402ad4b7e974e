"""Convolutional building blocks with explicit backward passes.

Everything runs channel-last on numpy arrays: activations are
(B, H, W, C).  3x3 convolutions lower to one GEMM per layer through the
im2col kernels; 1x1 convolutions are plain matrix products.  Backward
methods return the input gradient and accumulate parameter gradients into
a caller-supplied dict keyed by parameter name.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class Conv2d:
    """k x k convolution (k in {1, 3}), stride 1 or 2, zero padding for k=3.

    The im2col workspace, its gradient twin and the padded-input buffer are
    leased per layer and reused across batches; a forward's cache is only
    valid until the next forward of the same layer.
    """

    def __init__(self, name, k, cin, cout, stride, rng, dtype):
        if k not in (1, 3):
            raise ValueError("only 1x1 and 3x3 kernels are supported")
        if k == 1 and stride != 1:
            raise ValueError("1x1 convolutions are stride-1 only")
        std = np.sqrt(2.0 / (k * k * cin))
        self.name = name
        self.k = k
        self.stride = stride
        self.W = (rng.standard_normal((k, k, cin, cout)) * std).astype(dtype)
        self.b = np.zeros(cout, dtype=dtype)
        self._buf = {}

    def __deepcopy__(self, memo):
        clone = object.__new__(Conv2d)
        clone.name = self.name
        clone.k = self.k
        clone.stride = self.stride
        clone.W = self.W.copy()
        clone.b = self.b.copy()
        clone._buf = {}
        memo[id(self)] = clone
        return clone

    def _lease(self, key, shape, dtype, zero=False):
        arr = self._buf.get(key)
        if arr is None or arr.shape != shape or arr.dtype != dtype:
            arr = np.zeros(shape, dtype) if zero else np.empty(shape, dtype)
            self._buf[key] = arr
        return arr

    def params(self):
        return {f"{self.name}.W": self.W, f"{self.name}.b": self.b}

    def forward(self, x):
        b, h, w, cin = x.shape
        cout = self.W.shape[3]
        if self.k == 1:
            y = x.reshape(-1, cin) @ self.W[0, 0] + self.b
            return y.reshape(b, h, w, cout), x
        ho = (h + 2 - 3) // self.stride + 1
        wo = (w + 2 - 3) // self.stride + 1
        # zeroed on creation; only the interior is rewritten afterwards,
        # so the padding border stays zero across reuses
        xp = self._lease("xp", (b, h + 2, w + 2, cin), x.dtype, zero=True)
        xp[:, 1:h + 1, 1:w + 1, :] = x
        cols = self._lease("cols", (b, ho, wo, 3, 3, cin), x.dtype)
        kernels.im2col_k3(xp, self.stride, ho, wo, cols)
        flat = cols.reshape(b * ho * wo, 9 * cin)
        y = flat @ self.W.reshape(9 * cin, cout) + self.b
        return y.reshape(b, ho, wo, cout), (cols, (b, h, w, cin, ho, wo))

    def backward(self, dy, cache, grads):
        cout = self.W.shape[3]
        if self.k == 1:
            x = cache
            b, h, w, cin = x.shape
            dflat = dy.reshape(-1, cout)
            xflat = x.reshape(-1, cin)
            grads[f"{self.name}.W"][0, 0] += xflat.T @ dflat
            grads[f"{self.name}.b"] += dflat.sum(axis=0)
            return (dflat @ self.W[0, 0].T).reshape(x.shape)
        cols, (b, h, w, cin, ho, wo) = cache
        flat = cols.reshape(b * ho * wo, 9 * cin)
        dflat = np.ascontiguousarray(dy).reshape(b * ho * wo, cout)
        grads[f"{self.name}.W"] += (flat.T @ dflat).reshape(self.W.shape)
        # column sums as a GEMV; axis-0 reduction in numpy is far slower
        ones = self._lease("ones", (dflat.shape[0],), dflat.dtype)
        ones[:] = 1
        grads[f"{self.name}.b"] += ones @ dflat
        # cols is no longer needed; overwrite it in place with dcols
        np.matmul(dflat, self.W.reshape(9 * cin, cout).T, out=flat)
        dxp = self._lease("dxp", (b, h + 2, w + 2, cin), flat.dtype)
        kernels.col2im_k3(cols, self.stride, dxp)
        return dxp[:, 1:h + 1, 1:w + 1, :]


class ChannelNorm:
    """Per-sample, per-channel normalization over space with scale and shift.

    Statistics never cross the batch axis, so inference is independent of
    batch composition and bitwise deterministic per image.
    """

    EPS = 1e-5

    def __init__(self, name, c, dtype):
        self.name = name
        self.gamma = np.ones(c, dtype=dtype)
        self.beta = np.zeros(c, dtype=dtype)

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def forward(self, x):
        mean = x.mean(axis=(1, 2), keepdims=True)
        xhat = x - mean
        var = np.mean(xhat * xhat, axis=(1, 2), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.EPS)
        xhat *= inv_std
        return xhat * self.gamma + self.beta, (xhat, inv_std.astype(x.dtype))

    def backward(self, dy, cache, grads):
        xhat, inv_std = cache
        n = xhat.shape[1] * xhat.shape[2]
        grads[f"{self.name}.gamma"] += (dy * xhat).sum(axis=(0, 1, 2))
        grads[f"{self.name}.beta"] += dy.sum(axis=(0, 1, 2))
        dxhat = dy * self.gamma
        return inv_std / n * (
            n * dxhat
            - dxhat.sum(axis=(1, 2), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(1, 2), keepdims=True)
        )


class LeakyReLU:
    def __init__(self, slope):
        self.slope = slope

    def forward(self, x):
        return np.where(x > 0, x, self.slope * x), x > 0

    def backward(self, dy, positive):
        return np.where(positive, dy, self.slope * dy)


class SGDMomentum:
    """Classic momentum: v <- mu v + g; p <- p - lr v."""

    def __init__(self, lr, momentum):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, grads):
        for name, p in params.items():
            g = grads[name]
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
                self.velocity[name] = v
            v *= self.momentum
            v += g
            p -= self.lr * v


def zero_grads(params):
    return {name: np.zeros_like(p) for name, p in params.items()}
