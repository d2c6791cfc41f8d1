"""Tiny perceptrons, the spatial utility network (SUN) layer and the minimal network.

Everything here is plain numpy in float64. Forward passes are batched over
the leading axis; ``*_backward`` functions take the cache produced by the
matching ``*_forward_cached`` call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import PatrolGraph

LEAK = 0.3

SUN_F1_SHAPE = (2, 4, 1)
SUN_F2_SHAPE = (3, 6, 1)
MNS_SHAPE = (2, 2, 1)


class ArchitectureError(ValueError):
    """Raised when weights do not match the declared network architecture."""


def leaky_relu(z):
    return np.where(z > 0, z, LEAK * z)


def leaky_relu_grad(z):
    # slope at exactly 0 is the leak, by convention
    return np.where(z > 0, 1.0, LEAK)


@dataclass(frozen=True, eq=False)
class Mlp:
    """Fully connected perceptron; leaky-rectified hidden layers, linear output.

    ``layers`` is a tuple of ``(w, b)`` with ``w`` of shape ``(out, in)``.
    """

    layers: tuple

    def __post_init__(self):
        layers = tuple((np.array(w, dtype=float, ndmin=2), np.array(b, dtype=float, ndmin=1))
                       for w, b in self.layers)
        for i, (w, b) in enumerate(layers):
            if b.shape != (w.shape[0],):
                raise ArchitectureError(f"layer {i}: bias shape {b.shape} does not match weights {w.shape}")
            if i and w.shape[1] != layers[i - 1][0].shape[0]:
                raise ArchitectureError(
                    f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} has {layers[i - 1][0].shape[0]} outputs")
        object.__setattr__(self, "layers", layers)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.layers[0][0].shape[1],) + tuple(w.shape[0] for w, _ in self.layers)

    @classmethod
    def random(cls, shape, rng: np.random.Generator, scale: float = 0.5) -> Mlp:
        return cls(tuple((rng.uniform(-scale, scale, size=(n_out, n_in)), rng.uniform(-scale, scale, size=n_out))
                         for n_in, n_out in zip(shape[:-1], shape[1:])))

    @classmethod
    def zeros(cls, shape) -> Mlp:
        return cls(tuple((np.zeros((n_out, n_in)), np.zeros(n_out)) for n_in, n_out in zip(shape[:-1], shape[1:])))

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer]

    def with_params(self, params) -> Mlp:
        params = list(params)
        return Mlp(tuple((params[2 * i], params[2 * i + 1]) for i in range(len(self.layers))))

    def __eq__(self, other):
        if not isinstance(other, Mlp):
            return NotImplemented
        if len(self.layers) != len(other.layers):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.params(), other.params()))

    def to_dict(self) -> dict:
        return {"layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in self.layers]}

    @classmethod
    def from_dict(cls, data) -> Mlp:
        try:
            return cls(tuple((layer["w"], layer["b"]) for layer in data["layers"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchitectureError(f"malformed perceptron: {exc!r}") from exc


def mlp_forward_cached(net: Mlp, x):
    """Batched forward pass. ``x`` has shape ``(batch, n_in)``; returns ``(out, cache)``."""
    x = np.asarray(x, dtype=float)
    n_in = net.layers[0][0].shape[1]
    if x.ndim != 2 or x.shape[1] != n_in:
        raise ValueError(f"expected input of shape (batch, {n_in}), got {x.shape}")
    acts, pres = [x], []
    h = x
    last = len(net.layers) - 1
    for i, (w, b) in enumerate(net.layers):
        z = h @ w.T + b
        pres.append(z)
        h = z if i == last else leaky_relu(z)
        acts.append(h)
    return h[:, 0], (acts, pres)


def mlp_forward(net: Mlp, x) -> float:
    """Single input vector to scalar output."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"expected a vector, got shape {x.shape}")
    return float(mlp_forward_cached(net, x[None, :])[0][0])


def mlp_backward(net: Mlp, cache, upstream):
    """Gradients of ``sum(upstream * out)`` w.r.t. every parameter and the input.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
    :meth:`Mlp.params`.
    """
    acts, pres = cache
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (acts[0].shape[0],):
        raise ValueError(f"upstream gradient shape {upstream.shape} does not match batch {acts[0].shape[0]}")
    g = upstream[:, None]
    grads = []
    last = len(net.layers) - 1
    for i in range(last, -1, -1):
        w, _ = net.layers[i]
        if i != last:
            g = g * leaky_relu_grad(pres[i])
        grads.append(g.sum(axis=0))          # bias
        grads.append(g.T @ acts[i])          # weights
        g = g @ w
    grads.reverse()
    return grads, g


def backward(net, x, upstream=1.0):
    """Gradient of ``upstream * net(x)`` for a single input vector.

    Works for :class:`Mlp` and :class:`MnsNetwork`. Returns ``(param_grads, input_grad)``.
    """
    mlp = net.f1 if isinstance(net, MnsNetwork) else net
    x = np.asarray(x, dtype=float)
    _, cache = mlp_forward_cached(mlp, x[None, :])
    grads, gx = mlp_backward(mlp, cache, np.array([float(upstream)]))
    return grads, gx[0]


def _check_shape(mlp: Mlp, expected, name):
    if mlp.shape != tuple(expected):
        raise ArchitectureError(f"{name} has shape {mlp.shape}, expected {tuple(expected)}")


@dataclass(frozen=True, eq=False)
class SunNetwork:
    """Spatial utility network: ``u_i = f1(v_i) + sum_j f2([v_j | e_ij])`` stacked ``k`` times."""

    f1: Mlp
    f2: Mlp
    k: int = 1

    def __post_init__(self):
        _check_shape(self.f1, SUN_F1_SHAPE, "f1")
        _check_shape(self.f2, SUN_F2_SHAPE, "f2")
        if self.k < 1:
            raise ArchitectureError(f"depth k must be >= 1, got {self.k}")

    @classmethod
    def random(cls, rng: np.random.Generator, k: int = 1, scale: float = 0.5) -> SunNetwork:
        return cls(Mlp.random(SUN_F1_SHAPE, rng, scale), Mlp.random(SUN_F2_SHAPE, rng, scale), k)

    def params(self) -> list[np.ndarray]:
        return self.f1.params() + self.f2.params()

    def with_params(self, params) -> SunNetwork:
        params = list(params)
        n1 = len(self.f1.params())
        return SunNetwork(self.f1.with_params(params[:n1]), self.f2.with_params(params[n1:]), self.k)

    def __eq__(self, other):
        if not isinstance(other, SunNetwork):
            return NotImplemented
        return self.k == other.k and self.f1 == other.f1 and self.f2 == other.f2


@dataclass(frozen=True, eq=False)
class MnsNetwork:
    """Minimal network: one 2-2-1 perceptron applied to each vertex on its own."""

    f1: Mlp

    def __post_init__(self):
        _check_shape(self.f1, MNS_SHAPE, "mns perceptron")

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 0.5) -> MnsNetwork:
        return cls(Mlp.random(MNS_SHAPE, rng, scale))

    def params(self) -> list[np.ndarray]:
        return self.f1.params()

    def with_params(self, params) -> MnsNetwork:
        return MnsNetwork(self.f1.with_params(params))

    def __eq__(self, other):
        if not isinstance(other, MnsNetwork):
            return NotImplemented
        return self.f1 == other.f1


@dataclass(frozen=True)
class EdgeIndex:
    """Directed edge arrays of a graph, precomputed for batched SUN passes."""

    n: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray

    @classmethod
    def of(cls, graph: PatrolGraph) -> EdgeIndex:
        src, dst, w = graph.directed_edges()
        return cls(graph.n_vertices, src, dst, w)


def _check_signal(signal, n):
    signal = np.asarray(signal, dtype=float)
    if signal.shape[-2:] != (n, 2):
        raise ValueError(f"signal must have shape (..., {n}, 2), got {signal.shape}")
    return signal


def _sun_pass(net: SunNetwork, index: EdgeIndex, s):
    """One layer on a batch of signals ``s`` of shape ``(B, n, 2)``."""
    b, n = s.shape[0], index.n
    m = len(index.src)
    u1, c1 = mlp_forward_cached(net.f1, s.reshape(b * n, 2))
    u = u1.reshape(b, n)
    c2 = None
    if m:
        x2 = np.empty((b, m, 3))
        x2[:, :, :2] = s[:, index.dst, :]
        x2[:, :, 2] = index.weight
        msg, c2 = mlp_forward_cached(net.f2, x2.reshape(b * m, 3))
        msg = msg.reshape(b, m)
        offsets = (np.arange(b) * n)[:, None] + index.src[None, :]
        u = u + np.bincount(offsets.ravel(), weights=msg.ravel(), minlength=b * n).reshape(b, n)
    return u, (c1, c2)


def sun_forward_cached(net: SunNetwork, index: EdgeIndex, signal):
    """Batched SUN utilities. ``signal`` is ``(B, n, 2)`` of (idleness, distance)."""
    s = _check_signal(signal, index.n)
    caches = []
    for _ in range(net.k):
        u, cache = _sun_pass(net, index, s)
        caches.append(cache)
        s = np.stack([u, s[:, :, 1]], axis=-1)
    return u, caches


def sun_backward(net: SunNetwork, index: EdgeIndex, caches, upstream):
    """Gradients of ``sum(upstream * u)`` for a batch; returns ``(param_grads, signal_grad)``.

    ``signal_grad`` is the gradient with respect to the original signal.
    """
    upstream = np.asarray(upstream, dtype=float)
    b, n = upstream.shape
    m = len(index.src)
    total = [np.zeros_like(p) for p in net.params()]
    n1 = len(net.f1.params())
    g_u = upstream
    g_dist = np.zeros((b, n))
    for c1, c2 in reversed(caches):
        g1, gx1 = mlp_backward(net.f1, c1, g_u.ravel())
        gs = gx1.reshape(b, n, 2)
        for t, g in zip(total[:n1], g1):
            t += g
        if m:
            g2, gx2 = mlp_backward(net.f2, c2, g_u[:, index.src].ravel())
            for t, g in zip(total[n1:], g2):
                t += g
            gx2 = gx2.reshape(b, m, 3)
            offsets = ((np.arange(b) * n)[:, None] + index.dst[None, :]).ravel()
            for ch in range(2):
                gs[:, :, ch] += np.bincount(offsets, weights=gx2[:, :, ch].ravel(), minlength=b * n).reshape(b, n)
        g_dist += gs[:, :, 1]
        g_u = gs[:, :, 0]
    return total, np.stack([g_u, g_dist], axis=-1)


def sun_forward(net: SunNetwork, graph: PatrolGraph, signal) -> np.ndarray:
    """Utilities of every vertex for one signal of shape ``(n, 2)``."""
    signal = _check_signal(signal, graph.n_vertices)
    return sun_forward_cached(net, EdgeIndex.of(graph), signal[None])[0][0]


def sun_forward_local(net: SunNetwork, graph: PatrolGraph, signal) -> np.ndarray:
    """Per-vertex form: each vertex sums f2 over its own neighbour list.

    Deliberately unvectorised; used as a reference for :func:`sun_forward`.
    """
    s = _check_signal(signal, graph.n_vertices).copy()
    for _ in range(net.k):
        u = np.zeros(graph.n_vertices)
        for i in range(graph.n_vertices):
            total = mlp_forward(net.f1, s[i])
            for j in graph.neighbors[i]:
                total += mlp_forward(net.f2, [s[j, 0], s[j, 1], graph.weights[i, j]])
            u[i] = total
        s[:, 0] = u
    return u


def sun_forward_matrix(net: SunNetwork, graph: PatrolGraph, signal) -> np.ndarray:
    """Centralised form: f2 over the full ``n x n`` pair tensor, masked by the adjacency matrix."""
    s = _check_signal(signal, graph.n_vertices)
    n = graph.n_vertices
    a = graph.adjacency.astype(float)
    for _ in range(net.k):
        pairs = np.empty((n, n, 3))
        pairs[:, :, :2] = s[None, :, :]   # row i, column j holds [v_j | e_ij]
        pairs[:, :, 2] = graph.weights
        f2 = mlp_forward_cached(net.f2, pairs.reshape(n * n, 3))[0].reshape(n, n)
        u = mlp_forward_cached(net.f1, s)[0] + (a * f2).sum(axis=1)
        s = np.stack([u, s[:, 1]], axis=-1)
    return u


def mns_forward(net: MnsNetwork, signal) -> np.ndarray:
    """Per-vertex utilities for a signal of shape ``(n, 2)``."""
    signal = np.asarray(signal, dtype=float)
    if signal.ndim != 2 or signal.shape[1] != 2:
        raise ValueError(f"signal must have shape (n, 2), got {signal.shape}")
    return mlp_forward_cached(net.f1, signal)[0]


def weights_to_dict(net) -> dict:
    if isinstance(net, SunNetwork):
        return {"arch": "sun", "k": net.k, "f1": net.f1.to_dict(), "f2": net.f2.to_dict()}
    if isinstance(net, MnsNetwork):
        return {"arch": "mns", "f1": net.f1.to_dict()}
    raise TypeError(f"cannot serialise {type(net).__name__}")


def weights_from_dict(data: dict, expect: str | None = None):
    arch = data.get("arch")
    if expect is not None and arch != expect:
        raise ArchitectureError(f"weights declare architecture {arch!r}, expected {expect!r}")
    if arch == "sun":
        if "f1" not in data or "f2" not in data:
            raise ArchitectureError("sun weights need both f1 and f2")
        return SunNetwork(Mlp.from_dict(data["f1"]), Mlp.from_dict(data["f2"]), int(data.get("k", 1)))
    if arch == "mns":
        if "f2" in data:
            raise ArchitectureError("mns weights must not contain f2")
        return MnsNetwork(Mlp.from_dict(data["f1"]))
    raise ArchitectureError(f"unknown architecture {arch!r}")


def save_weights(net, path) -> None:
    # json writes floats with repr, which round-trips float64 exactly
    Path(path).write_text(json.dumps(weights_to_dict(net), indent=1) + "\n")


def load_weights(path, expect: str | None = None):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ArchitectureError(f"{path}: not valid JSON ({exc})") from exc
    return weights_from_dict(data, expect)
