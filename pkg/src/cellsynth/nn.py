"""Small double-precision layer set with hand-written backward passes.

Every layer exposes ``init(p, rng, group)``, ``forward(p, x) -> (y, cache)`` and
``backward(p, dy, cache) -> dx``; backward accumulates parameter gradients into
the shared :class:`NetParams`.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"CSNP"
RMSPROP_DECAY = 0.99
RMSPROP_EPS = 1e-8
DEFAULT_LR = 5e-5


class NetParams:
    """Named float64 parameters with gradient buffers and freezable groups."""

    def __init__(self):
        self.values: dict = {}
        self.grads: dict = {}
        self.groups: dict = {}
        self.frozen: set = set()
        self.state: dict = {}

    def add(self, name: str, value, group: str = "default") -> np.ndarray:
        if name in self.values and self.groups[name] in self.frozen:
            raise ValueError(f"parameter {name!r} belongs to frozen group {self.groups[name]!r}")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.groups[name] = group
        self.state.pop(name, None)
        return arr

    def init_uniform(self, name, shape, fan_in, rng, group="default") -> np.ndarray:
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        return self.add(name, rng.uniform(-bound, bound, size=shape), group)

    def __getitem__(self, name) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name) -> bool:
        return name in self.values

    def __len__(self) -> int:
        return len(self.values)

    def names(self, group=None) -> list:
        return [n for n in self.values if group is None or self.groups[n] == group]

    def accumulate(self, name, g) -> None:
        self.grads[name] += g

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def freeze(self, group: str) -> None:
        self.frozen.add(group)

    def unfreeze(self, group: str) -> None:
        self.frozen.discard(group)

    def is_frozen(self, name: str) -> bool:
        return self.groups[name] in self.frozen

    def n_values(self, trainable_only=False) -> int:
        return sum(v.size for n, v in self.values.items()
                   if not (trainable_only and self.is_frozen(n)))

    def copy(self) -> "NetParams":
        out = NetParams()
        for n, v in self.values.items():
            out.add(n, v.copy(), self.groups[n])
        out.frozen = set(self.frozen)
        out.state = {k: v.copy() for k, v in self.state.items()}
        return out

    def shadow(self) -> "NetParams":
        """Shares parameter arrays but has its own zeroed gradient buffers."""
        out = NetParams()
        out.values = dict(self.values)
        out.groups = dict(self.groups)
        out.grads = {n: np.zeros_like(v) for n, v in self.values.items()}
        out.frozen = set(self.frozen)
        return out

    def check_finite(self) -> None:
        bad = [n for n, v in self.values.items() if not np.all(np.isfinite(v))]
        if bad:
            raise FloatingPointError(f"non-finite parameters: {bad}")


# -- layers -------------------------------------------------------------------------

class Linear:
    def __init__(self, name, d_in, d_out, bias=True):
        self.name, self.d_in, self.d_out, self.bias = name, d_in, d_out, bias

    def init(self, p, rng, group="default"):
        p.init_uniform(f"{self.name}.W", (self.d_in, self.d_out), self.d_in, rng, group)
        if self.bias:
            p.init_uniform(f"{self.name}.b", (self.d_out,), self.d_in, rng, group)

    def forward(self, p, x):
        if x.shape[-1] != self.d_in:
            raise ValueError(f"{self.name}: expected last dim {self.d_in}, got {x.shape[-1]}")
        y = x @ p[f"{self.name}.W"]
        if self.bias:
            y = y + p[f"{self.name}.b"]
        return y, x

    def backward(self, p, dy, x):
        x2, dy2 = x.reshape(-1, self.d_in), dy.reshape(-1, self.d_out)
        p.accumulate(f"{self.name}.W", x2.T @ dy2)
        if self.bias:
            p.accumulate(f"{self.name}.b", dy2.sum(axis=0))
        return dy @ p[f"{self.name}.W"].T


class LeakyReLU:
    def __init__(self, slope=0.2):
        self.slope = slope

    def init(self, p, rng, group="default"):
        pass

    def forward(self, p, x):
        return np.where(x > 0, x, self.slope * x), x

    def backward(self, p, dy, x):
        return np.where(x > 0, dy, self.slope * dy)


_GELU_C = np.sqrt(2.0 / np.pi)


class GELU:
    """tanh approximation of the Gaussian error linear unit."""

    def init(self, p, rng, group="default"):
        pass

    def forward(self, p, x):
        t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1 + t), (x, t)

    def backward(self, p, dy, cache):
        x, t = cache
        dt = (1 - t ** 2) * _GELU_C * (1 + 3 * 0.044715 * x ** 2)
        return dy * (0.5 * (1 + t) + 0.5 * x * dt)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Sigmoid:
    def init(self, p, rng, group="default"):
        pass

    def forward(self, p, x):
        y = sigmoid(x)
        return y, y

    def backward(self, p, dy, y):
        return dy * y * (1 - y)


class LayerNorm:
    def __init__(self, name, d, eps=1e-5):
        self.name, self.d, self.eps = name, d, eps

    def init(self, p, rng, group="default"):
        p.add(f"{self.name}.gamma", np.ones(self.d), group)
        p.add(f"{self.name}.beta", np.zeros(self.d), group)

    def forward(self, p, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + self.eps)
        xhat = xc * inv
        return xhat * p[f"{self.name}.gamma"] + p[f"{self.name}.beta"], (xhat, inv)

    def backward(self, p, dy, cache):
        xhat, inv = cache
        p.accumulate(f"{self.name}.gamma", (dy * xhat).reshape(-1, self.d).sum(axis=0))
        p.accumulate(f"{self.name}.beta", dy.reshape(-1, self.d).sum(axis=0))
        g = dy * p[f"{self.name}.gamma"]
        return inv * (g - g.mean(axis=-1, keepdims=True)
                      - xhat * (g * xhat).mean(axis=-1, keepdims=True))


class Flatten:
    def init(self, p, rng, group="default"):
        pass

    def forward(self, p, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, p, dy, shape):
        return dy.reshape(shape)


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def init(self, p, rng, group="default"):
        for layer in self.layers:
            layer.init(p, rng, group)

    def forward(self, p, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(p, x)
            caches.append(c)
        return x, caches

    def backward(self, p, dy, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(p, dy, c)
        return dy


# -- attention ----------------------------------------------------------------------

def softmax(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def attention(q, k, v):
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d_k)) v`` over the last two axes."""
    a = softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1]))
    return a @ v, a


class MultiHeadAttention:
    """Per-head linear projections of queries, keys and values, concatenated and mixed by W_o."""

    def __init__(self, name, d_model, heads, d_head=None):
        if d_head is None:
            if d_model % heads:
                raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
            d_head = d_model // heads
        self.name, self.d_model, self.heads, self.d_head = name, d_model, heads, d_head

    def init(self, p, rng, group="default"):
        inner = self.heads * self.d_head
        for key in ("Wq", "Wk", "Wv"):
            p.init_uniform(f"{self.name}.{key}", (self.d_model, inner), self.d_model, rng, group)
        p.init_uniform(f"{self.name}.Wo", (inner, self.d_model), inner, rng, group)

    def _split(self, x):
        # (..., T, h*dh) -> (..., h, T, dh)
        return np.swapaxes(x.reshape(*x.shape[:-1], self.heads, self.d_head), -2, -3)

    def _merge(self, x):
        x = np.swapaxes(x, -2, -3)
        return x.reshape(*x.shape[:-2], self.heads * self.d_head)

    def forward(self, p, x, k_in=None, v_in=None):
        q_in = x
        k_in = q_in if k_in is None else k_in
        v_in = k_in if v_in is None else v_in
        for t in (q_in, k_in, v_in):
            if t.shape[-1] != self.d_model:
                raise ValueError(f"{self.name}: expected feature dim {self.d_model}, got {t.shape[-1]}")
        if k_in.shape[-2] != v_in.shape[-2]:
            raise ValueError(f"{self.name}: keys and values differ in length")
        n = self.name
        q = self._split(q_in @ p[f"{n}.Wq"])
        k = self._split(k_in @ p[f"{n}.Wk"])
        v = self._split(v_in @ p[f"{n}.Wv"])
        h, a = attention(q, k, v)
        merged = self._merge(h)
        out = merged @ p[f"{n}.Wo"]
        return out, (q_in, k_in, v_in, q, k, v, a, merged)

    def backward(self, p, dy, cache):
        """Returns gradients with respect to the query, key and value inputs."""
        q_in, k_in, v_in, q, k, v, a, merged = cache
        n, inner = self.name, self.heads * self.d_head
        p.accumulate(f"{n}.Wo", merged.reshape(-1, inner).T @ dy.reshape(-1, self.d_model))
        dh = self._split(dy @ p[f"{n}.Wo"].T)
        da = dh @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(a, -1, -2) @ dh
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / np.sqrt(self.d_head)
        dq = ds @ k
        dk = np.swapaxes(ds, -1, -2) @ q
        grads = []
        for key, d, inp in (("Wq", dq, q_in), ("Wk", dk, k_in), ("Wv", dv, v_in)):
            dm = self._merge(d)
            p.accumulate(f"{n}.{key}", inp.reshape(-1, self.d_model).T @ dm.reshape(-1, inner))
            grads.append(dm @ p[f"{n}.{key}"].T)
        return tuple(grads)


def multi_head_attention(Q, K, V, p: NetParams, heads: int, name: str = "mha"):
    """Functional form: uses ``{name}.Wq/Wk/Wv/Wo`` from ``p``."""
    Q, K, V = (np.asarray(t, dtype=np.float64) for t in (Q, K, V))
    if f"{name}.Wq" not in p:
        raise KeyError(f"missing attention parameters under {name!r}")
    inner = p[f"{name}.Wq"].shape[1]
    if inner % heads:
        raise ValueError(f"projection width {inner} not divisible by heads={heads}")
    mha = MultiHeadAttention(name, Q.shape[-1], heads, inner // heads)
    return mha.forward(p, Q, K, V)[0]


class TransformerBlock:
    """Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, name, d_model, heads, d_ff=None):
        d_ff = d_ff or 2 * d_model
        self.name = name
        self.ln1 = LayerNorm(f"{name}.ln1", d_model)
        self.attn = MultiHeadAttention(f"{name}.attn", d_model, heads)
        self.ln2 = LayerNorm(f"{name}.ln2", d_model)
        self.mlp = Sequential([Linear(f"{name}.fc1", d_model, d_ff), GELU(),
                               Linear(f"{name}.fc2", d_ff, d_model)])

    def init(self, p, rng, group="default"):
        for part in (self.ln1, self.attn, self.ln2, self.mlp):
            part.init(p, rng, group)

    def forward(self, p, x):
        h1, c1 = self.ln1.forward(p, x)
        a, ca = self.attn.forward(p, h1)
        x = x + a
        h2, c2 = self.ln2.forward(p, x)
        m, cm = self.mlp.forward(p, h2)
        return x + m, (c1, ca, c2, cm)

    def backward(self, p, dy, cache):
        c1, ca, c2, cm = cache
        dx = dy + self.ln2.backward(p, self.mlp.backward(p, dy, cm), c2)
        dq, dk, dv = self.attn.backward(p, dx, ca)
        return dx + self.ln1.backward(p, dq + dk + dv, c1)


def layer_stack_forward(x, p: NetParams, blocks):
    """Run ``blocks`` in order; returns the output and each block's output activation."""
    hidden, caches = [], []
    for b in blocks:
        x, c = b.forward(p, x)
        hidden.append(x)
        caches.append(c)
    return x, hidden, caches


def layer_stack_backward(dy, p: NetParams, blocks, caches):
    for b, c in zip(reversed(blocks), reversed(caches)):
        dy = b.backward(p, dy, c)
    return dy


# -- convolution --------------------------------------------------------------------

class Conv2d:
    """Channels-last 2D convolution, ``x`` of shape (B, H, W, C)."""

    def __init__(self, name, c_in, c_out, kernel, stride=1, padding=0):
        self.name, self.c_in, self.c_out = name, c_in, c_out
        self.k, self.stride, self.pad = kernel, stride, padding

    def init(self, p, rng, group="default"):
        fan_in = self.c_in * self.k * self.k
        p.init_uniform(f"{self.name}.W", (fan_in, self.c_out), fan_in, rng, group)
        p.init_uniform(f"{self.name}.b", (self.c_out,), fan_in, rng, group)

    def out_size(self, n):
        return (n + 2 * self.pad - self.k) // self.stride + 1

    def forward(self, p, x):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise ValueError(f"{self.name}: expected (B, H, W, {self.c_in}), got {x.shape}")
        k, s, pad = self.k, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
        B, Ho, Wo = win.shape[:3]
        cols = win.reshape(B, Ho, Wo, self.c_in * k * k)  # ordering (C, ki, kj)
        y = cols @ p[f"{self.name}.W"] + p[f"{self.name}.b"]
        return y, (cols, x.shape)

    def backward(self, p, dy, cache):
        cols, shape = cache
        k, s, pad = self.k, self.stride, self.pad
        B, H, W, C = shape
        Ho, Wo = dy.shape[1:3]
        p.accumulate(f"{self.name}.W", cols.reshape(-1, cols.shape[-1]).T
                     @ dy.reshape(-1, self.c_out))
        p.accumulate(f"{self.name}.b", dy.reshape(-1, self.c_out).sum(axis=0))
        dcols = (dy @ p[f"{self.name}.W"].T).reshape(B, Ho, Wo, C, k, k)
        dxp = np.zeros((B, H + 2 * pad, W + 2 * pad, C))
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * Ho:s, j:j + s * Wo:s, :] += dcols[..., i, j]
        return dxp[:, pad:pad + H, pad:pad + W, :]


# -- gradient checking & optimization -----------------------------------------------

def grad_check(fn, params: NetParams, eps: float = 1e-6, names=None, max_entries: int = 40,
               seed: int = 0, floor: float = 1e-8) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn(params)`` must return the scalar loss and accumulate its analytic
    gradient into ``params.grads``. At most ``max_entries`` coordinates per
    parameter are probed, chosen at random.
    """
    rng = np.random.default_rng(seed)
    names = list(params.values) if names is None else list(names)
    params.zero_grad()
    fn(params)
    analytic = {n: params.grads[n].copy() for n in names}
    worst = 0.0
    for n in names:
        flat = params.values[n].reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            params.zero_grad()
            up = fn(params)
            flat[i] = old - eps
            params.zero_grad()
            down = fn(params)
            flat[i] = old
            num = (up - down) / (2 * eps)
            a = analytic[n].reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    params.zero_grad()
    return worst


def optimizer_step(p: NetParams, lr: float = DEFAULT_LR, kind: str = "rmsprop",
                   decay: float = RMSPROP_DECAY, eps: float = RMSPROP_EPS) -> None:
    """In-place update of every non-frozen parameter from its gradient buffer."""
    if kind not in ("rmsprop", "sgd"):
        raise ValueError(f"unknown optimizer {kind!r}")
    for n, v in p.values.items():
        if p.is_frozen(n):
            continue
        g = p.grads[n]
        if kind == "sgd":
            v -= lr * g
            continue
        sq = p.state.setdefault(n, np.zeros_like(v))
        sq *= decay
        sq += (1 - decay) * g * g
        v -= lr * g / (np.sqrt(sq) + eps)


# -- checkpoints --------------------------------------------------------------------

def save_params(path, p: NetParams, meta=None) -> None:
    """Binary checkpoint: magic, little-endian u64 header length, JSON header, raw f8 data."""
    entries, offset = [], 0
    for n, v in p.values.items():
        entries.append({"name": n, "shape": list(v.shape), "group": p.groups[n], "offset": offset})
        offset += v.size
    header = json.dumps({"params": entries, "frozen": sorted(p.frozen),
                         "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for v in p.values.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(params, meta)``."""
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    (hlen,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12:12 + hlen])
    body = np.frombuffer(data[12 + hlen:], dtype="<f8")
    p = NetParams()
    total = 0
    for e in header["params"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + size > body.size:
            raise ValueError(f"{path}: truncated checkpoint")
        p.add(e["name"], body[e["offset"]:e["offset"] + size].reshape(e["shape"]), e["group"])
        total += size
    if total != body.size:
        raise ValueError(f"{path}: trailing data in checkpoint")
    p.frozen = set(header["frozen"])
    return p, header["meta"]
