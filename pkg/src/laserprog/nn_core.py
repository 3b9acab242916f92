"""Small numpy core for the recurrent models: dense and GRU layers with
hand-written backward passes, a named parameter store and Adam.

Conventions
-----------
Vectors are rows. A batch of inputs is an array of shape ``(batch, features)``
and a single input may be passed as a 1-D array. Weight matrices follow the
column-vector notation of the cell equations, i.e. an input weight has shape
``(hidden, input)`` and is applied as ``x @ U.T``.

The GRU update is

    z  = sigmoid(U_z x + W_z h_prev + b_z)
    r  = sigmoid(U_r x + W_r h_prev + b_r)
    hc = tanh(U_h x + W_h (r * h_prev) + b_h)
    h  = z * h_prev + (1 - z) * hc
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")
GRU_FIELDS = ("U_z", "U_r", "U_h", "W_z", "W_r", "W_h", "b_z", "b_r", "b_h")


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or infinity shows up where only finite values are allowed."""


def check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in {name}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # clamped so exp never overflows
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def activate(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return a
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "tanh":
        return np.tanh(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(a: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of the activation, given pre-activation ``a`` and output ``y``."""
    if kind == "identity":
        return np.ones_like(a)
    if kind == "relu":
        return (a > 0.0).astype(a.dtype)
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "sigmoid":
        return y * (1.0 - y)
    raise ValueError(f"unknown activation {kind!r}")


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_out, fan_in))


# ---------------------------------------------------------------------------
# Parameter storage


class ParamSet:
    """Ordered collection of named float64 arrays with gradient and Adam buffers.

    Gradients start out unset (``None``). Backward passes accumulate into them
    through :meth:`accumulate`; :func:`adam_step` refuses to run while any
    gradient is still unset and clears them all afterwards.
    """

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray | None] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        check_finite(name, arr)
        self.params[name] = arr
        self.grads[name] = None
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def size(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if grad.shape != self.params[name].shape:
            raise ValueError(
                f"gradient shape {grad.shape} does not match parameter {name!r} "
                f"{self.params[name].shape}"
            )
        current = self.grads[name]
        if current is None:
            self.grads[name] = np.array(grad, dtype=np.float64)
        else:
            current += grad

    def zero_grad(self) -> None:
        for name in self.grads:
            self.grads[name] = None

    def grad_or_zero(self, name: str) -> np.ndarray:
        g = self.grads[name]
        return np.zeros_like(self.params[name]) if g is None else g

    def set_values(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place (array identities are kept)."""
        for name, value in values.items():
            target = self.params[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != target.shape:
                raise ValueError(f"shape mismatch for {name!r}: {value.shape} vs {target.shape}")
            target[...] = value

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


# ---------------------------------------------------------------------------
# Dense layer


@dataclass
class DenseParams:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent dense shapes W{self.W.shape} b{self.b.shape}")

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


@dataclass
class DenseCache:
    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    p: DenseParams


def dense_forward(x: np.ndarray, p: DenseParams) -> tuple[np.ndarray, DenseCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.n_in:
        raise ValueError(f"dense input has {x.shape[-1]} features, expected {p.n_in}")
    check_finite("dense input", x)
    a = x @ p.W.T + p.b
    y = activate(a, p.activation)
    return y, DenseCache(x, a, y, p)


def dense_backward(cache: DenseCache, dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Returns ``(dx, {"W": dW, "b": db})`` summed over the batch."""
    if dy.shape != cache.y.shape:
        raise ValueError(f"upstream gradient shape {dy.shape} != output shape {cache.y.shape}")
    da = dy * activate_grad(cache.a, cache.y, cache.p.activation)
    da2 = da.reshape(-1, da.shape[-1])
    x2 = cache.x.reshape(-1, cache.x.shape[-1])
    dW = da2.T @ x2
    db = da2.sum(axis=0)
    dx = da @ cache.p.W
    return dx, {"W": dW, "b": db}


# ---------------------------------------------------------------------------
# GRU


@dataclass
class GruCellParams:
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    def __post_init__(self) -> None:
        hidden, n_in = self.U_z.shape
        for name in ("U_z", "U_r", "U_h"):
            if getattr(self, name).shape != (hidden, n_in):
                raise ValueError(f"{name} must have shape {(hidden, n_in)}")
        for name in ("W_z", "W_r", "W_h"):
            if getattr(self, name).shape != (hidden, hidden):
                raise ValueError(f"{name} must have shape {(hidden, hidden)}")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (hidden,):
                raise ValueError(f"{name} must have shape {(hidden,)}")

    @property
    def hidden(self) -> int:
        return self.U_z.shape[0]

    @property
    def n_in(self) -> int:
        return self.U_z.shape[1]

    @classmethod
    def zeros(cls, n_in: int, hidden: int) -> "GruCellParams":
        return cls(
            *(np.zeros((hidden, n_in)) for _ in range(3)),
            *(np.zeros((hidden, hidden)) for _ in range(3)),
            *(np.zeros(hidden) for _ in range(3)),
        )

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, hidden: int) -> "GruCellParams":
        return cls(
            *(glorot_uniform(rng, hidden, n_in) for _ in range(3)),
            *(glorot_uniform(rng, hidden, hidden) for _ in range(3)),
            *(np.zeros(hidden) for _ in range(3)),
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in GRU_FIELDS}


@dataclass
class GruCache:
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    hc: np.ndarray
    p: GruCellParams
    used: bool = field(default=False, repr=False)


def gru_cell_forward(
    x_t: np.ndarray, h_prev: np.ndarray, p: GruCellParams
) -> tuple[np.ndarray, GruCache]:
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x_t.shape[-1] != p.n_in:
        raise ValueError(f"GRU input has {x_t.shape[-1]} features, expected {p.n_in}")
    if h_prev.shape[-1] != p.hidden:
        raise ValueError(f"GRU state has {h_prev.shape[-1]} units, expected {p.hidden}")
    if x_t.shape[:-1] != h_prev.shape[:-1]:
        raise ValueError("input and state batch shapes differ")
    check_finite("GRU input", x_t, h_prev)

    z = sigmoid(x_t @ p.U_z.T + h_prev @ p.W_z.T + p.b_z)
    r = sigmoid(x_t @ p.U_r.T + h_prev @ p.W_r.T + p.b_r)
    hc = np.tanh(x_t @ p.U_h.T + (r * h_prev) @ p.W_h.T + p.b_h)
    h = z * h_prev + (1.0 - z) * hc
    return h, GruCache(x_t, h_prev, z, r, hc, p)


def gru_cell_backward(
    cache: GruCache, dh: np.ndarray
) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Backward pass through one cell step.

    Returns ``(dx_t, dh_prev, grads)`` where ``grads`` maps every field of
    :class:`GruCellParams` to its gradient, summed over the batch. A cache can
    be consumed only once.
    """
    if cache.used:
        raise RuntimeError("stale GRU cache: backward already run for this step")
    if dh.shape != cache.h_prev.shape:
        raise ValueError(f"upstream gradient shape {dh.shape} != state shape {cache.h_prev.shape}")
    cache.used = True
    p = cache.p
    x, h_prev, z, r, hc = cache.x, cache.h_prev, cache.z, cache.r, cache.hc

    dz = dh * (h_prev - hc)
    dhc = dh * (1.0 - z)
    dh_prev = dh * z

    da_h = dhc * (1.0 - hc * hc)
    drh = da_h @ p.W_h
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r

    da_z = dz * z * (1.0 - z)
    da_r = dr * r * (1.0 - r)
    dh_prev = dh_prev + da_z @ p.W_z + da_r @ p.W_r
    dx = da_z @ p.U_z + da_r @ p.U_r + da_h @ p.U_h

    def rows(a: np.ndarray) -> np.ndarray:
        return a.reshape(-1, a.shape[-1])

    x2, hp2 = rows(x), rows(h_prev)
    az, ar, ah = rows(da_z), rows(da_r), rows(da_h)
    grads = {
        "U_z": az.T @ x2,
        "U_r": ar.T @ x2,
        "U_h": ah.T @ x2,
        "W_z": az.T @ hp2,
        "W_r": ar.T @ hp2,
        "W_h": ah.T @ (rows(r) * hp2),
        "b_z": az.sum(axis=0),
        "b_r": ar.sum(axis=0),
        "b_h": ah.sum(axis=0),
    }
    return dx, dh_prev, grads


def gru_sequence_forward(
    xs: np.ndarray, p: GruCellParams, h0: np.ndarray | None = None
) -> tuple[np.ndarray, list[GruCache]]:
    """Run the cell left to right over ``xs`` of shape ``(T, ..., n_in)``.

    Returns all hidden states stacked as ``(T, ..., hidden)``; the last one is
    the layer output.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim < 2 or xs.shape[0] == 0:
        raise ValueError("GRU sequence must be non-empty with shape (T, ..., n_in)")
    if h0 is None:
        h0 = np.zeros(xs.shape[1:-1] + (p.hidden,))
    h = h0
    hs = []
    caches = []
    for x_t in xs:
        h, cache = gru_cell_forward(x_t, h, p)
        hs.append(h)
        caches.append(cache)
    return np.stack(hs), caches


def gru_sequence_backward(
    caches: list[GruCache], dhs: np.ndarray
) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Backpropagation through time.

    ``dhs[t]`` is the gradient arriving at hidden state ``t`` from outside the
    recurrence (zeros where a state is unused). Returns ``(dxs, dh0, grads)``.
    """
    if len(caches) != len(dhs):
        raise ValueError("gradient sequence length does not match the cached forward pass")
    p = caches[0].p
    grads = {name: np.zeros_like(getattr(p, name)) for name in GRU_FIELDS}
    dxs = []
    carry = np.zeros_like(dhs[0])
    for cache, dh_ext in zip(reversed(caches), dhs[::-1]):
        dx, carry, g = gru_cell_backward(cache, dh_ext + carry)
        for name in GRU_FIELDS:
            grads[name] += g[name]
        dxs.append(dx)
    return np.stack(dxs[::-1]), carry, grads


# ---------------------------------------------------------------------------
# Optimizer and gradient checking


def adam_step(
    params: ParamSet,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamSet:
    missing = [name for name, g in params.grads.items() if g is None]
    if missing:
        raise ValueError(f"gradients missing for {missing}")
    for name, g in params.grads.items():
        check_finite(f"gradient of {name}", g)

    params.step += 1
    t = params.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.params.items():
        g = params.grads[name]
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    params.zero_grad()
    return params


def grad_check(
    loss_fn: Callable[[], float], params: ParamSet, h: float = 1e-5
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn`` reads the current values in ``params``, accumulates analytic
    gradients into it and returns the scalar loss. Every coordinate of every
    array is perturbed; the relative error uses ``max(|a|, |n|, 1e-8)`` as
    denominator.
    """
    params.zero_grad()
    base = loss_fn()
    analytic = {name: params.grad_or_zero(name).copy() for name in params}
    params.zero_grad()
    again = loss_fn()
    params.zero_grad()
    if base != again:
        raise RuntimeError(f"loss_fn is not deterministic ({base!r} vs {again!r})")

    worst = 0.0
    for name in params:
        p = params[name]
        flat = p.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            params.zero_grad()
            num = (up - down) / (2.0 * h)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
