"""Bipartite matching network: set-wise perceptrons with context normalization.

U-Net and V-Net embed the 2D and 3D point sets; E-Net scores each edge from
the concatenated embeddings of its endpoints and ends in a sigmoid. Every
block is ``relu(context_norm(x @ W) + b)``; E-Net adds an identity skip around
each consecutive pair of width-preserving blocks.

Forward and backward are plain numpy in float64 so gradients can be checked
against finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .hungarian import hungarian_pooling  # noqa: F401  (re-exported)

EPS = 1e-6
W_CLAMP = 1e-7
MAGIC = b"BMN1"


class StaleCacheError(RuntimeError):
    pass


class ParamsFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BmnetConfig:
    width: int = 128
    point_blocks: int = 5
    edge_blocks: int = 18
    eps: float = EPS

    def __post_init__(self):
        if self.width < 1 or self.point_blocks < 1 or self.edge_blocks < 1:
            raise ValueError("width and block counts must be positive")

    def shapes(self):
        d = self.width
        out = {}
        for net, c_in in (("u", 2), ("v", 3)):
            for i in range(self.point_blocks):
                out[f"{net}{i}.W"] = (c_in if i == 0 else d, d)
                out[f"{net}{i}.b"] = (d,)
        for i in range(self.edge_blocks):
            out[f"e{i}.W"] = (2 * d if i == 0 else d, d)
            out[f"e{i}.b"] = (d,)
        out["head.W"] = (d, 1)
        out["head.b"] = (1,)
        return out

    def residual_pairs(self):
        """E-Net block indices (i, i+1) wrapped by a skip connection."""
        return [(i, i + 1) for i in range(1, self.edge_blocks - 1, 2)]


class BmnetParams:
    """Named float64 tensors plus a version counter bumped on every in-place update."""

    def __init__(self, config, tensors):
        self.config = config
        shapes = config.shapes()
        if list(tensors) != list(shapes):
            raise ParamsFormatError("tensor names do not match the configured architecture")
        for name, shape in shapes.items():
            if tuple(tensors[name].shape) != shape:
                raise ParamsFormatError(f"{name}: shape {tensors[name].shape} != expected {shape}")
        self.tensors = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in tensors.items()}
        self.version = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self):
        return BmnetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self):
        return sum(v.size for v in self.tensors.values())

    def sgd_step(self, grads, lr):
        for name, g in grads.items():
            self.tensors[name] -= lr * g
        self.version += 1

    def bump(self):
        self.version += 1

    def __eq__(self, other):
        if not isinstance(other, BmnetParams):
            return NotImplemented
        return self.config == other.config and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def init_params(seed=0, config=None):
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases; the head uses ``sqrt(1 / fan_in)``."""
    config = config or BmnetConfig()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            gain = 1.0 if name == "head.W" else 2.0
            tensors[name] = rng.normal(scale=np.sqrt(gain / shape[0]), size=shape)
    return BmnetParams(config, tensors)


def context_normalize(X, eps=EPS):
    """Per-channel standardisation across the set axis (population variance)."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=0)
    sigma = np.sqrt(X.var(axis=0) + eps)
    return (X - mu) / sigma


def _cn_forward(Z, eps):
    mu = Z.mean(axis=0)
    sigma = np.sqrt(Z.var(axis=0) + eps)
    return (Z - mu) / sigma, sigma


def _cn_backward(dN, N, sigma):
    return (dN - dN.mean(axis=0) - N * (dN * N).mean(axis=0)) / sigma


def standardize_points(X):
    """Zero mean, unit RMS distance to the centroid (left centred if all points coincide)."""
    X = np.asarray(X, dtype=np.float64)
    Y = X - X.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum(Y * Y, axis=1)))
    return Y / rms if rms > 0 else Y


def graph_inputs(graph):
    if graph.camera is not None:
        c = graph.camera
        U = np.stack([(graph.U[:, 0] - c.cx) / c.fx, (graph.U[:, 1] - c.cy) / c.fy], axis=1)
    else:
        U = standardize_points(graph.U)
    return U, standardize_points(graph.V)


class ForwardCache:
    def __init__(self, params, graph):
        self.params_id = id(params)
        self.version = params.version
        self.graph = graph
        self.blocks = {}
        self.skips = {}
        self.head_in = None
        self.w = None


def _block_forward(params, name, H, eps, cache):
    Z = H @ params[name + ".W"]
    N, sigma = _cn_forward(Z, eps)
    A = N + params[name + ".b"]
    out = np.maximum(A, 0.0)
    cache.blocks[name] = (H, N, sigma, A > 0)
    return out


def _block_backward(params, name, dOut, cache, grads):
    H, N, sigma, mask = cache.blocks[name]
    dA = dOut * mask
    grads[name + ".b"] = dA.sum(axis=0)
    dZ = _cn_backward(dA, N, sigma)
    grads[name + ".W"] = H.T @ dZ
    return dZ @ params[name + ".W"].T


def _point_net(params, net, X, cache):
    cfg = params.config
    H = X
    for i in range(cfg.point_blocks):
        H = _block_forward(params, f"{net}{i}", H, cfg.eps, cache)
    return H


def forward(params, graph):
    """Edge weights ``w`` in [0, 1] and the cache needed by :func:`backward`."""
    cfg = params.config
    if graph.T == 0:
        raise ValueError("graph has no edges")
    U, V = graph_inputs(graph)
    if U.shape[1] != params["u0.W"].shape[0] or V.shape[1] != params["v0.W"].shape[0]:
        raise ValueError("graph input channels do not match parameters")
    cache = ForwardCache(params, graph)
    Xu = _point_net(params, "u", U, cache)
    Xv = _point_net(params, "v", V, cache)
    H = np.concatenate([Xu[graph.edge_u], Xv[graph.edge_v]], axis=1)
    pairs = dict(cfg.residual_pairs())
    skip_in = None
    for i in range(cfg.edge_blocks):
        if i in pairs:
            skip_in = H
        H = _block_forward(params, f"e{i}", H, cfg.eps, cache)
        if i - 1 in pairs and skip_in is not None:
            H = H + skip_in
            skip_in = None
    cache.head_in = H
    logits = H @ params["head.W"][:, 0] + params["head.b"][0]
    w = expit(logits)
    cache.w = w
    return w, cache


def loss(w, s, t):
    """Masked binary cross-entropy averaged over all T edges; w is clamped before the logs."""
    w = np.asarray(w, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if not (len(w) == len(s) == len(t)):
        raise ValueError("w, s and t must have equal length")
    if len(w) == 0:
        return 0.0
    wc = np.clip(w, W_CLAMP, 1.0 - W_CLAMP)
    terms = (t * np.log(wc) + (1.0 - t) * np.log(1.0 - wc)) * s
    return float(-terms.sum() / len(w))


def loss_logit_grad(w, s, t):
    """dL/d(logit) for :func:`loss`; zero where the clamp is active."""
    w = np.asarray(w, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    inside = (w > W_CLAMP) & (w < 1.0 - W_CLAMP)
    return np.where(inside, s * (w - t), 0.0) / len(w)


def backward(params, cache, s, t):
    """Gradients of :func:`loss` w.r.t. every tensor, with the assignment ``s`` as a fixed 0/1 gate."""
    return backward_logits(params, cache, loss_logit_grad(cache.w, s, t))


def backward_logits(params, cache, dlogits):
    if cache.params_id != id(params) or cache.version != params.version:
        raise StaleCacheError("forward cache was produced with different or since-updated parameters")
    cfg = params.config
    graph = cache.graph
    grads = {}
    grads["head.W"] = cache.head_in.T @ dlogits[:, None]
    grads["head.b"] = np.array([dlogits.sum()])
    dH = dlogits[:, None] * params["head.W"][:, 0][None, :]
    pairs = dict(cfg.residual_pairs())
    pair_end = {b: a for a, b in pairs.items()}
    d_skip = None
    for i in reversed(range(cfg.edge_blocks)):
        if i in pair_end:
            d_skip = dH
        dH = _block_backward(params, f"e{i}", dH, cache, grads)
        if i in pairs and d_skip is not None:
            dH = dH + d_skip
            d_skip = None
    d = cfg.width
    dXu = np.zeros((graph.M, d))
    dXv = np.zeros((graph.N, d))
    np.add.at(dXu, graph.edge_u, dH[:, :d])
    np.add.at(dXv, graph.edge_v, dH[:, d:])
    for net, dX in (("u", dXu), ("v", dXv)):
        for i in reversed(range(cfg.point_blocks)):
            dX = _block_backward(params, f"{net}{i}", dX, cache, grads)
    return {k: grads[k] for k in params.tensors}


def predict(params, graph):
    w, _ = forward(params, graph)
    return w, hungarian_pooling(graph, w)


# ---------------------------------------------------------------- BMN1 persistence


def dumps_params(params):
    cfg = params.config
    out = [MAGIC, struct.pack("<IIIId", cfg.width, cfg.point_blocks, cfg.edge_blocks, len(params.tensors), cfg.eps)]
    for name, arr in params.tensors.items():
        nb = name.encode("ascii")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in params.tensors.values():
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def save_params(params, path):
    with open(path, "wb") as fh:
        fh.write(dumps_params(params))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ParamsFormatError("truncated parameter file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads_params(data, expected=None):
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ParamsFormatError("not a BMN1 parameter file")
    width, lp, le, n_tensors, eps = r.unpack("<IIIId")
    try:
        cfg = BmnetConfig(width, lp, le, eps)
    except ValueError as exc:
        raise ParamsFormatError(str(exc)) from None
    if expected is not None and cfg != expected:
        raise ParamsFormatError(f"architecture {cfg} does not match expected {expected}")
    table = []
    for _ in range(n_tensors):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("ascii")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        table.append((name, tuple(shape)))
    want = cfg.shapes()
    if [name for name, _ in table] != list(want) or any(want[n] != s for n, s in table):
        raise ParamsFormatError("shape table does not match the declared architecture")
    tensors = {}
    for name, shape in table:
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise ParamsFormatError("trailing bytes after parameter data")
    for name, arr in tensors.items():
        if not np.all(np.isfinite(arr)):
            raise ParamsFormatError(f"{name}: non-finite weights")
    return BmnetParams(cfg, tensors)


def load_params(path, expected=None):
    with open(path, "rb") as fh:
        return loads_params(fh.read(), expected)
