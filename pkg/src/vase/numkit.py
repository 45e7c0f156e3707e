"""Small numerical kernel shared by every other module.

Networks are plain feed-forward MLPs whose parameters live in a single flat
float64 vector. For each layer the layout is the weight matrix (row-major,
shape ``(n_in, n_out)``) followed by the bias. Gradients are computed with
explicit per-layer backward passes; there is no general autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")


class NumkitError(ValueError):
    """Base class for errors raised by the numerical kernel."""


class DimensionError(NumkitError):
    def __init__(self, what: str, expected, actual):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class NonFiniteError(NumkitError):
    def __init__(self, what: str):
        self.what = what
        super().__init__(f"{what}: non-finite value produced")


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(what)
    return x


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise NumkitError("an MLP needs at least an input and an output size")
        if min(sizes) < 1:
            raise NumkitError(f"layer sizes must be >= 1, got {sizes}")
        if self.hidden_activation not in ACTIVATIONS:
            raise NumkitError(f"unknown activation {self.hidden_activation!r}")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    def layout(self) -> list[tuple[slice, slice, tuple[int, int]]]:
        """(weight slice, bias slice, weight shape) for every layer."""
        out = []
        off = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(off, off + n_in * n_out)
            off += n_in * n_out
            b = slice(off, off + n_out)
            off += n_out
            out.append((w, b, (n_in, n_out)))
        return out


def _check_params(spec: MlpSpec, params: np.ndarray) -> None:
    if params.shape[-1] != spec.n_params:
        raise DimensionError("parameter vector length", spec.n_params, params.shape[-1])


def _as_batch(spec: MlpSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise DimensionError("input width", spec.n_in, x.shape[-1] if x.ndim else 0)
    return x, single


def unflatten(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of (W, b) for each layer. W has shape (n_in, n_out)."""
    params = np.asarray(params, dtype=np.float64)
    _check_params(spec, params)
    return [(params[w].reshape(shape), params[b]) for w, b, shape in spec.layout()]


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_deriv(kind: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - h * h


def _forward_cache(spec, params, x):
    layers = unflatten(spec, params)
    hs = [x]
    zs = []
    h = x
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        zs.append(z)
        h = z if i == len(layers) - 1 else _act(spec.hidden_activation, z)
        hs.append(h)
    return layers, zs, hs


def mlp_forward(spec: MlpSpec, params: np.ndarray, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    x, single = _as_batch(spec, x)
    _, _, hs = _forward_cache(spec, params, x)
    out = check_finite(hs[-1], "mlp_forward output")
    return out[0] if single else out


def mlp_gradient(spec: MlpSpec, params: np.ndarray, x, output_grad) -> np.ndarray:
    """Gradient of ``sum(output * output_grad)`` with respect to the parameters.

    For a batch input the contributions of all rows are summed.
    """
    x, single = _as_batch(spec, x)
    g = np.asarray(output_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (x.shape[0], spec.n_out):
        raise DimensionError("output_grad shape", (x.shape[0], spec.n_out), g.shape)
    layers, zs, hs = _forward_cache(spec, params, x)
    grad = np.empty(spec.n_params)
    layout = spec.layout()
    delta = g
    for i in range(len(layers) - 1, -1, -1):
        wsl, bsl, _ = layout[i]
        grad[wsl] = (hs[i].T @ delta).ravel()
        grad[bsl] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ layers[i][0].T) * _act_deriv(spec.hidden_activation, zs[i - 1], hs[i])
    return check_finite(grad, "mlp_gradient")


def mlp_jvp(spec: MlpSpec, params: np.ndarray, x, direction: np.ndarray) -> np.ndarray:
    """Forward-mode product J @ direction, J = d output / d params, per row."""
    x, single = _as_batch(spec, x)
    direction = np.asarray(direction, dtype=np.float64)
    _check_params(spec, direction)
    layers, zs, hs = _forward_cache(spec, params, x)
    dlayers = unflatten(spec, direction)
    dh = np.zeros_like(x)
    for i, ((W, _), (dW, db)) in enumerate(zip(layers, dlayers)):
        dz = dh @ W + hs[i] @ dW + db
        if i == len(layers) - 1:
            dh = dz
        else:
            dh = dz * _act_deriv(spec.hidden_activation, zs[i], hs[i + 1])
    return dh[0] if single else dh


def mlp_forward_each(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise forward pass where row k of ``x`` uses parameter row k.

    ``params`` has shape (K, n_params) and ``x`` shape (K, n_in).
    """
    params = np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_params(spec, params)
    if x.shape != (params.shape[0], spec.n_in):
        raise DimensionError("input batch shape", (params.shape[0], spec.n_in), x.shape)
    h = x
    layout = spec.layout()
    for i, (w, b, shape) in enumerate(layout):
        W = params[:, w].reshape(-1, *shape)
        h = np.einsum("ki,kio->ko", h, W) + params[:, b]
        if i < len(layout) - 1:
            h = _act(spec.hidden_activation, h)
    return check_finite(h, "mlp_forward_each output")


def init_mlp_params(spec: MlpSpec, rng: "Rng", output_scale: float = 1.0) -> np.ndarray:
    """Glorot-uniform weights, zero biases; the last layer is scaled by ``output_scale``."""
    params = np.zeros(spec.n_params)
    layout = spec.layout()
    for i, (w, _, (n_in, n_out)) in enumerate(layout):
        lim = np.sqrt(6.0 / (n_in + n_out))
        vals = rng.uniform(-lim, lim, n_in * n_out)
        if i == len(layout) - 1:
            vals = vals * output_scale
        params[w] = vals
    return params


# -- Adam ---------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One Adam descent step. Advances ``state`` in place and returns new params."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise DimensionError("adam grads length", params.shape, grads.shape)
    if state.m.shape != params.shape:
        raise DimensionError("adam moment length", params.shape, state.m.shape)
    check_finite(grads, "adam gradient")
    state.t += 1
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grads
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grads * grads
    m_hat = state.m / (1.0 - ADAM_BETA1**state.t)
    v_hat = state.v / (1.0 - ADAM_BETA2**state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# -- random numbers -----------------------------------------------------------


@dataclass
class Rng:
    """Seeded counter-based generator (Philox) with explicit state snapshots."""

    seed: int
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def snapshot(self) -> dict:
        return self._gen.bit_generator.state

    def restore(self, state: dict) -> None:
        self._gen.bit_generator.state = state

    def copy(self) -> "Rng":
        other = Rng(self.seed)
        other.restore(self.snapshot())
        return other

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from (seed, key); does not advance self."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)


def gaussian_sample(rng: Rng, n: int) -> np.ndarray:
    if n < 1:
        raise NumkitError(f"gaussian_sample needs n >= 1, got {n}")
    return rng.normal(n)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def inverse_softplus(y: float | np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def as_vector(x: Sequence[float] | np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)
