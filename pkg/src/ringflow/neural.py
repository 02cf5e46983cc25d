"""Small numpy networks with hand-written backprop, Gaussian heads and Adam.

Everything runs in float64 so finite-difference checks stay meaningful.
"""
from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ModelFormatError

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DenseNet:
    """Fully connected net: tanh on hidden layers, linear output."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, zero: bool = False):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output widths")
        self.W, self.b = [], []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            if zero or rng is None:
                self.W.append(np.zeros((fan_out, fan_in)))
            else:
                lim = math.sqrt(6.0 / (fan_in + fan_out))
                self.W.append(rng.uniform(-lim, lim, (fan_out, fan_in)))
            self.b.append(np.zeros(fan_out))
        self.version = 0

    @property
    def params(self) -> list:
        out = []
        for W, b in zip(self.W, self.b):
            out += [W, b]
        return out

    def touch(self):
        """Mark parameters as changed; invalidates outstanding caches."""
        self.version += 1

    def copy(self) -> "DenseNet":
        other = DenseNet(self.sizes, zero=True)
        for dst, src in zip(other.params, self.params):
            dst[...] = src
        return other

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {h.shape[1]} != {self.sizes[0]}")
        acts = [h]
        last = len(self.W) - 1
        for l, (W, b) in enumerate(zip(self.W, self.b)):
            z = h @ W.T + b
            h = z if l == last else np.tanh(z)
            acts.append(h)
        y = h[0] if single else h
        return y, _Cache(id(self), self.version, acts, single)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache: "_Cache", dy):
        """Returns (param grads in ``params`` order, d input). Batch rows are summed."""
        if cache.net_id != id(self) or cache.version != self.version:
            raise RuntimeError("stale cache: parameters changed since forward")
        g = np.asarray(dy, dtype=float)
        g = g[None, :] if cache.single else g
        grads = [None] * (2 * len(self.W))
        for l in range(len(self.W) - 1, -1, -1):
            if l != len(self.W) - 1:
                g = g * (1.0 - cache.acts[l + 1] ** 2)
            grads[2 * l] = g.T @ cache.acts[l]
            grads[2 * l + 1] = g.sum(axis=0)
            g = g @ self.W[l]
        dx = g[0] if cache.single else g
        return grads, dx


@dataclass
class _Cache:
    net_id: int
    version: int
    acts: list
    single: bool


def net_forward(net: DenseNet, x):
    return net.forward(x)


def net_backward(net: DenseNet, cache, dy):
    return net.backward(cache, dy)


def clamp_log_std(log_std):
    return np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)


def log_std_grad_mask(log_std):
    """1 where the clamp is inactive, else 0."""
    return ((log_std >= LOG_STD_MIN) & (log_std <= LOG_STD_MAX)).astype(float)


def gaussian_log_prob(mean, std, x):
    """Diagonal Gaussian log density summed over the last axis."""
    mean, std, x = (np.asarray(a, dtype=float) for a in (mean, std, x))
    z = (x - mean) / std
    out = -0.5 * z**2 - np.log(std) - LOG_SQRT_2PI
    return out.sum(axis=-1) if out.ndim else float(out)


def gaussian_sample(mean, std, rng: np.random.Generator):
    mean = np.asarray(mean, dtype=float)
    eps = rng.standard_normal(mean.shape)
    return mean + np.asarray(std, dtype=float) * eps, eps


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def log_sigmoid_deriv(z):
    """log(sigmoid(z) * (1 - sigmoid(z))), stable for large |z|."""
    z = np.asarray(z, dtype=float)
    return -np.abs(z) - 2.0 * np.log1p(np.exp(-np.abs(z)))


class Adam:
    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8, max_grad_norm=None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.max_grad_norm = max_grad_norm
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        """In-place update. Raises DivergenceError before touching anything if a grad is non-finite."""
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ValueError("parameter/gradient count mismatch")
        for p, g, m in zip(params, grads, self.m):
            if np.shape(g) != p.shape or m.shape != p.shape:
                raise ValueError("gradient shape mismatch")
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient")
        scale = 1.0
        if self.max_grad_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = g * scale
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params, grads, state: Adam):
    state.step(params, grads)
    return params, state


# -- model files -------------------------------------------------------------

MAGIC = b"RFLOWMDL"
FORMAT_VERSION = 1


def write_model_file(path, role: str, meta: dict, nets: dict, vectors: dict) -> None:
    """Header (text key/values) + little-endian float64 payload, written atomically."""
    lines = [f"role={role}"]
    lines += [f"net.{name}={','.join(map(str, net.sizes))}" for name, net in nets.items()]
    lines += [f"vec.{name}={np.asarray(vec).size}" for name, vec in vectors.items()]
    lines += [f"meta.{k}={v}" for k, v in meta.items()]
    header = "\n".join(lines).encode()
    chunks = []
    for net in nets.values():
        chunks += [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params]
    chunks += [np.ascontiguousarray(v, dtype="<f8").reshape(-1).tobytes() for v in vectors.values()]
    payload = b"".join(chunks)
    blob = (
        MAGIC
        + struct.pack("<II", FORMAT_VERSION, len(header))
        + header
        + struct.pack("<QI", len(payload), zlib.crc32(payload))
        + payload
    )
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_model_file(path):
    """Returns (role, meta, nets, vectors); raises ModelFormatError on any corruption."""
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        if blob[:8] != MAGIC:
            raise ModelFormatError(f"{path}: not a ringflow model file")
        version, hlen = struct.unpack_from("<II", blob, 8)
        if version != FORMAT_VERSION:
            raise ModelFormatError(f"{path}: unsupported format version {version}")
        off = 16
        header = blob[off : off + hlen].decode()
        if len(header.encode()) != hlen:
            raise ModelFormatError(f"{path}: truncated header")
        off += hlen
        plen, crc = struct.unpack_from("<QI", blob, off)
        off += 12
        payload = blob[off:]
    except (struct.error, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header ({exc})") from exc
    if len(payload) != plen or zlib.crc32(payload) != crc:
        raise ModelFormatError(f"{path}: truncated or corrupt payload")
    role, meta, net_sizes, vec_sizes = None, {}, {}, {}
    for line in header.splitlines():
        key, _, val = line.partition("=")
        if key == "role":
            role = val
        elif key.startswith("net."):
            net_sizes[key[4:]] = [int(s) for s in val.split(",")]
        elif key.startswith("vec."):
            vec_sizes[key[4:]] = int(val)
        elif key.startswith("meta."):
            meta[key[5:]] = val
    data = np.frombuffer(payload, dtype="<f8")
    pos = 0
    nets = {}
    for name, sizes in net_sizes.items():
        net = DenseNet(sizes, zero=True)
        for p in net.params:
            p[...] = data[pos : pos + p.size].reshape(p.shape)
            pos += p.size
        nets[name] = net
    vectors = {}
    for name, n in vec_sizes.items():
        vectors[name] = data[pos : pos + n].astype(float)
        pos += n
    if pos != data.size or role is None:
        raise ModelFormatError(f"{path}: header does not match payload")
    return role, meta, nets, vectors
