"""Small convolutional observer network with hand-written backpropagation.

The architecture family is fixed: ``n_conv`` same-padded convolutions, each
followed by LeakyReLU, then one non-overlapping max-pool, a fully connected
layer to a single logit and a sigmoid. Feature maps are kept channels-last,
``(batch, height, width, channels)``, and convolution is done as a sum of
shifted-slice matrix products so BLAS does the heavy lifting.
"""
import json
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

CKPT_MAGIC = b"OBSNN01\x00"
P_CLAMP = 1e-12


@dataclass(frozen=True)
class ArchSpec:
    input_shape: tuple = (64, 64)
    n_conv: int = 1
    filters: int = 32
    filter_size: int = 5
    leaky_slope: float = 0.01
    pool: int = 2
    input_scale: float = 1.0

    def __post_init__(self):
        if self.n_conv < 1:
            raise ValueError("need at least one convolutional layer")
        if self.filter_size % 2 != 1:
            raise ValueError("filter size must be odd for same padding")
        if not 0 <= self.leaky_slope <= 1:
            raise ValueError("leaky slope must lie in [0, 1]")
        if self.pool < 1:
            raise ValueError("pool window must be >= 1")
        if not self.input_scale > 0:
            raise ValueError("input scale must be positive")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    @property
    def pooled_shape(self):
        h, w = self.input_shape
        return (h // self.pool, w // self.pool, self.filters)

    def with_depth(self, n_conv):
        return replace(self, n_conv=n_conv)


def leaky_relu(x, slope=0.01):
    # max(x, slope * x) equals the piecewise form for 0 <= slope <= 1
    return np.maximum(x, x * np.asarray(slope, dtype=x.dtype))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def max_pool(x, window):
    """Non-overlapping max-pool over the two spatial axes; ragged edges are dropped."""
    n, h, w, c = x.shape
    hp, wp = h // window, w // window
    blocks = x[:, :hp * window, :wp * window, :].reshape(n, hp, window, wp, window, c)
    return blocks.max(axis=(2, 4))


def cross_entropy_from_logits(z, y):
    """Per-item cross-entropy evaluated on logits, finite for any ``z``."""
    return np.logaddexp(0.0, z) - y * z


def loss_cross_entropy(p, y):
    """Per-item cross-entropy with ``p`` clamped away from 0 and 1."""
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))


def glorot(rng, shape, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class CnnModel:
    """Parameters and forward/backward passes of one network in the family."""

    def __init__(self, arch, params, dtype=np.float64):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in params.items()}

    @classmethod
    def init(cls, arch, rng, dtype=np.float64):
        k, f = arch.filter_size, arch.filters
        params = {}
        cin = 1
        for i in range(arch.n_conv):
            params[f"conv{i}.w"] = glorot(rng, (k, k, cin, f), cin * k * k, f * k * k, dtype)
            params[f"conv{i}.b"] = np.zeros(f, dtype)
            cin = f
        pooled = arch.pooled_shape
        params["fc.w"] = glorot(rng, pooled, int(np.prod(pooled)), 1, dtype)
        params["fc.b"] = np.zeros((), dtype)
        return cls(arch, params, dtype)

    @property
    def parameter_count(self):
        return int(sum(v.size for v in self.params.values()))

    def copy(self):
        return CnnModel(self.arch, {k: v.copy() for k, v in self.params.items()}, self.dtype)

    def astype(self, dtype):
        return CnnModel(self.arch, self.params, dtype)

    # -- forward ---------------------------------------------------------
    def _check_input(self, g):
        g = np.asarray(g, dtype=self.dtype)
        if g.shape == self.arch.input_shape:
            g = g[None]
        if g.shape[1:] != self.arch.input_shape:
            raise ValueError(f"input shape {g.shape[1:]} does not match {self.arch.input_shape}")
        return g

    def _conv(self, x, w, b):
        pad = w.shape[0] // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        return _conv_valid(xp, w, b, self.dtype), xp

    def logits(self, g, cache=None):
        x = self._check_input(g)[..., None]
        if self.arch.input_scale != 1.0:
            x = x * self.dtype.type(1.0 / self.arch.input_scale)
        slope = self.arch.leaky_slope
        for i in range(self.arch.n_conv):
            z, xp = self._conv(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            x = leaky_relu(z, slope)
            if cache is not None:
                cache.append((xp, z))
        pooled = max_pool(x, self.arch.pool)
        if cache is not None:
            cache.append((x, pooled))
        w = self.params["fc.w"]
        return np.tensordot(pooled, w, axes=3) + self.params["fc.b"]

    def forward(self, g):
        """Posterior Pr(H1 | g) for one image or a batch."""
        return sigmoid(self.logits(g))

    def loss(self, g, y):
        return float(np.mean(cross_entropy_from_logits(self.logits(g), np.asarray(y, dtype=float))))

    # -- backward --------------------------------------------------------
    def backward(self, g, y):
        """Mean batch cross-entropy and its gradient for every parameter."""
        y = np.asarray(y, dtype=self.dtype).ravel()
        cache = []
        z = self.logits(g, cache)
        if len(y) != len(z):
            raise ValueError("labels and images differ in count")
        p = sigmoid(z)
        loss = float(np.mean(cross_entropy_from_logits(z.astype(float), y)))
        n = len(y)
        dz = (p - y) / n
        grads = {}
        act, pooled = cache.pop()
        grads["fc.w"] = np.tensordot(dz, pooled, axes=1)
        grads["fc.b"] = np.asarray(dz.sum(), dtype=self.dtype)
        dpooled = dz[:, None, None, None] * self.params["fc.w"]
        dx = self._max_pool_backward(act, pooled, dpooled)
        slope = self.arch.leaky_slope
        for i in reversed(range(self.arch.n_conv)):
            xp, pre = cache.pop()
            dpre = dx * np.where(pre > 0, 1.0, slope).astype(self.dtype)
            dw, db, dx = self._conv_backward(xp, self.params[f"conv{i}.w"], dpre, need_input=i > 0)
            grads[f"conv{i}.w"] = dw
            grads[f"conv{i}.b"] = db
        return loss, grads

    def _max_pool_backward(self, x, pooled, dpooled):
        win = self.arch.pool
        n, h, w, c = x.shape
        hp, wp = pooled.shape[1:3]
        blocks = x[:, :hp * win, :wp * win, :].reshape(n, hp, win, wp, win, c)
        blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, hp, wp, c, win * win)
        # route each gradient to the first maximum of its window
        idx = blocks.argmax(axis=-1)
        route = np.zeros_like(blocks)
        np.put_along_axis(route, idx[..., None], dpooled[..., None], axis=-1)
        route = route.reshape(n, hp, wp, c, win, win).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros_like(x)
        dx[:, :hp * win, :wp * win, :] = route.reshape(n, hp * win, wp * win, c)
        return dx

    def _conv_backward(self, xp, w, dout, need_input=True):
        k = w.shape[0]
        pad = k // 2
        n, h, wd, f = dout.shape
        dw = np.zeros((k * k * w.shape[2], f), dtype=self.dtype)
        for lo, hi in _chunks(n, h * wd * k * k * w.shape[2]):
            dw += _im2col(xp[lo:hi], k).T @ dout[lo:hi].reshape(-1, f)
        db = dout.reshape(-1, f).sum(axis=0)
        dx = None
        if need_input:
            # the input gradient of a same-padded convolution is a same-padded
            # convolution of the output gradient with the flipped kernel
            flipped = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
            dp = np.pad(dout, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
            dx = _conv_valid(dp, flipped, None, self.dtype)
        return dw.reshape(w.shape), db, dx


# im2col working sets are capped at about 32 MB
_COL_BUDGET = 8_000_000


def _chunks(n, per_item):
    step = max(1, _COL_BUDGET // per_item)
    return [(lo, min(n, lo + step)) for lo in range(0, n, step)]


def _im2col(xp, k):
    """Patches of a padded channels-last batch as rows ordered (row, col, channel)."""
    n, hp, wp, c = xp.shape
    h, wd = hp - k + 1, wp - k + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, k * k * c)


def _conv_valid(xp, w, b, dtype):
    k, _, c, f = w.shape
    n, hp, wp, _ = xp.shape
    h, wd = hp - k + 1, wp - k + 1
    out = np.empty((n, h, wd, f), dtype=dtype)
    wm = w.reshape(k * k * c, f)
    for lo, hi in _chunks(n, h * wd * k * k * c):
        out[lo:hi] = (_im2col(xp[lo:hi], k) @ wm).reshape(hi - lo, h, wd, f)
    if b is not None:
        out += b
    return out


class Adam:
    """Bias-corrected Adam over a dict of parameter arrays, updated in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model):
    arch = json.dumps(asdict(model.arch), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(arch)))
        fh.write(arch)
        names = sorted(model.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(model.params[name], dtype="<f8")
            key = name.encode()
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, dtype=np.float64):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC:
        raise ValueError("not an observer-network checkpoint (bad magic)")
    try:
        pos = 8
        (alen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arch = json.loads(data[pos:pos + alen])
        pos += alen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + klen].decode()
            pos += klen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            nbytes = 8 * int(np.prod(shape))
            if pos + nbytes > len(data):
                raise ValueError("truncated checkpoint")
            params[name] = np.frombuffer(data, "<f8", int(np.prod(shape)), pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint: {exc}") from exc
    return CnnModel(ArchSpec(**arch), params, dtype)


# ---------------------------------------------------------------------------
# gradient checking

def numerical_gradient(f, x, step=1e-4):
    """Central finite-difference gradient of scalar ``f()`` with respect to array ``x``.

    ``x`` is perturbed in place and restored after every evaluation.
    """
    grad = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2 * step)
    return grad


def relative_error(a, b):
    """``||a - b|| / max(||a||, ||b||)``, zero when both vanish."""
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)
