"""Small fully connected network: ReLU hidden layers, sigmoid outputs,
inverted dropout on hidden activations, exact backprop and Adam.

Inputs are batched as ``(n, fan_in)``. Weights are stored ``(fan_out, fan_in)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class NetworkError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    """A non-finite gradient or objective appeared during training."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class MlpArchitecture:
    layer_sizes: tuple
    dropout_rate: float = 0.0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise NetworkError(f"need >= 2 layers of positive width, got {sizes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise NetworkError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class MlpParams:
    weights: tuple
    biases: tuple

    def arrays(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "MlpParams":
        arrays = list(arrays)
        return cls(tuple(arrays[0::2]), tuple(arrays[1::2]))

    def map(self, fn, *others: "MlpParams") -> "MlpParams":
        rows = zip(self.arrays(), *(o.arrays() for o in others))
        return MlpParams.from_arrays(fn(*r) for r in rows)

    @property
    def layer_sizes(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)


def zeros_like(params: MlpParams) -> MlpParams:
    return params.map(np.zeros_like)


def init_params(arch: MlpArchitecture, rng: np.random.Generator, dtype=np.float64) -> MlpParams:
    """Gaussian weights with variance ``1/fan_in``, zero biases."""
    sizes = arch.layer_sizes
    weights = tuple((rng.standard_normal((o, i)) / np.sqrt(i)).astype(dtype) for i, o in zip(sizes[:-1], sizes[1:]))
    biases = tuple(np.zeros(o, dtype=dtype) for o in sizes[1:])
    return MlpParams(weights, biases)


def sigmoid(z):
    """Logistic function, branch-wise for stability, kept strictly inside (0, 1)."""
    z = np.asarray(z)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    info = np.finfo(z.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)  # input to each layer
    gates: list = field(default_factory=list)  # d(activation)/d(pre-activation) per hidden layer, mask included
    gate_scale: float = 1.0  # common factor of every gate (inverted-dropout 1/keep when masks are boolean)
    logits: np.ndarray | None = None
    output: np.ndarray | None = None


def keep_mask(rng: np.random.Generator, shape, keep: float) -> np.ndarray:
    """Boolean Bernoulli(``keep``) mask.

    ``keep == 0.5`` uses one random bit per entry, other keep probabilities on
    the 1/256 grid one random byte, and anything else uniform floats.
    """
    n = int(np.prod(shape))
    if keep == 0.5:
        bits = np.unpackbits(np.frombuffer(rng.bytes((n + 7) // 8), dtype=np.uint8), count=n)
        return bits.view(bool).reshape(shape)
    q = keep * 256
    if q == int(q):
        return (np.frombuffer(rng.bytes(n), dtype=np.uint8) < int(q)).reshape(shape)
    return rng.random(shape) < keep


def dropout_masks(params: MlpParams, n: int, rate: float, rng: np.random.Generator) -> list:
    """Inverted-dropout masks for the hidden layers: 0 or ``1/keep``."""
    keep = 1.0 - rate
    dtype = params.weights[0].dtype
    masks = []
    for w in params.weights[:-1]:
        m = keep_mask(rng, (n, w.shape[0]), keep).astype(dtype)
        m *= 1.0 / keep
        masks.append(m)
    return masks


def forward(params: MlpParams, x, train: bool = False, rng: np.random.Generator | None = None,
            dropout_rate: float = 0.0, masks: list | None = None):
    """Return ``(outputs, cache)``; outputs have shape ``(n, n_outputs)``.

    In train mode hidden activations are multiplied by inverted-dropout masks,
    drawn from ``rng`` unless ``masks`` is given. Eval mode is deterministic.
    """
    dtype = params.weights[0].dtype
    x = np.asarray(x, dtype=dtype)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise NetworkError(f"input width {x.shape[-1]} != {params.weights[0].shape[1]}")
    cache = ForwardCache()
    draw = train and masks is None and dropout_rate > 0
    if not train:
        masks = None
    elif draw and rng is None:
        raise NetworkError("train mode with dropout needs an rng")
    if draw:
        keep = 1.0 - dropout_rate
        cache.gate_scale = 1.0 / keep
    h = x
    last = len(params.weights) - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w.T
        z += b
        if layer == last:
            cache.logits = z
            h = sigmoid(z)
            break
        gate = z > 0
        if draw:
            # boolean gate, the 1/keep factor is applied once per layer
            gate &= keep_mask(rng, z.shape, keep)
            z *= gate
            z *= cache.gate_scale
        else:
            if masks is not None:
                gate = gate * masks[layer]
            z *= gate
        cache.gates.append(gate)
        h = z
    cache.output = h
    return (h[0] if squeeze else h), cache


def backward(params: MlpParams, cache: ForwardCache, output_gradient, wrt_logits: bool = False) -> MlpParams:
    """Gradient of ``sum(output_gradient * output)`` with respect to every parameter.

    With ``wrt_logits=True`` the gradient is taken as already being with
    respect to the output pre-activations (e.g. ``y - t`` for cross-entropy).
    """
    if len(cache.inputs) != len(params.weights) or any(
        i.shape[1] != w.shape[1] for i, w in zip(cache.inputs, params.weights)
    ) or cache.output.shape[1] != params.weights[-1].shape[0]:
        raise NetworkError("cache does not match params")
    dtype = params.weights[0].dtype
    dout = np.asarray(output_gradient, dtype=dtype).reshape(cache.output.shape)
    if wrt_logits:
        delta = dout
    else:
        y = cache.output
        delta = dout * y * (1.0 - y)
    # Saturated outputs give gradients near the subnormal range; those make
    # every later matmul crawl and carry no usable signal, so flush them.
    info = np.finfo(dtype)
    delta = np.where(np.abs(delta) < info.tiny / info.eps, 0, delta).astype(dtype, copy=False)
    gw, gb = [], []
    ones = np.ones(delta.shape[0], dtype=dtype)  # column sums via gemv, much faster than sum(axis=0)
    for layer in range(len(params.weights) - 1, -1, -1):
        gw.append(delta.T @ cache.inputs[layer])
        gb.append(ones @ delta)
        if layer == 0:
            break
        delta = delta @ params.weights[layer]
        delta *= cache.gates[layer - 1]
        if cache.gate_scale != 1.0:
            delta *= cache.gate_scale
    return MlpParams(tuple(reversed(gw)), tuple(reversed(gb)))


@dataclass(frozen=True)
class AdamState:
    m: MlpParams
    v: MlpParams
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: MlpParams, **hyper) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params), **hyper)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState, learning_rate: float = 1e-3,
              ascent: bool = False):
    """One bias-corrected Adam update. Returns ``(params, state)``."""
    for g in grads.arrays():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    m = state.m.map(lambda m_, g: b1 * m_ + (1 - b1) * g, grads)
    v = state.v.map(lambda v_, g: b2 * v_ + (1 - b2) * g * g, grads)
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    sign = 1.0 if ascent else -1.0

    def update(p, m_, v_):
        return p + sign * learning_rate * (m_ / c1) / (np.sqrt(v_ / c2) + state.eps)

    return params.map(update, m, v), replace(state, m=m, v=v, t=t)


def finite_diff_grad(fn, params, epsilon: float = 1e-6):
    """Central-difference gradient of scalar ``fn(params)`` for every coordinate.

    ``params`` may be an ``MlpParams`` or a plain array (or scalar).
    """
    if epsilon <= 0:
        raise NetworkError("epsilon must be positive")
    if not isinstance(params, MlpParams):
        x = np.array(params, dtype=float)
        g = _central_diff(lambda arrs: fn(arrs[0] if x.ndim else float(arrs[0])), [x], epsilon)[0]
        return g if x.ndim else float(g)
    grads = _central_diff(lambda arrs: fn(MlpParams.from_arrays(arrs)), params.arrays(), epsilon)
    return MlpParams.from_arrays(grads)


def _central_diff(fn, arrays, epsilon):
    arrays = [np.array(a, dtype=float) for a in arrays]
    grads = [np.zeros_like(a) for a in arrays]
    for a, g in zip(arrays, grads):
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = fn(arrays)
            flat[i] = orig - epsilon
            down = fn(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * epsilon)
    return grads
