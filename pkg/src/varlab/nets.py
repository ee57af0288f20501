"""Dense MLP math: forward/backward passes with exact reverse-mode gradients,
optimizers, schedules, and the normalization primitives the agent is built from.

All arithmetic is float64. Parameter sets are plain dataclasses holding numpy
arrays; gradients travel as flat lists of arrays in the same order as
``MlpParams.arrays()``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

HIDDEN_ACTIVATIONS = ("relu", "tanh")
PENULT_MODES = ("none", "pnorm", "layer_norm", "spectral")
OUTPUT_MODES = ("identity", "output_norm")

LN_EPS = 1e-5
NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when array shapes do not chain."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf shows up where it must not."""


@dataclass
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)


@dataclass
class MlpParams:
    layers: list[Layer]
    hidden_activation: str = "relu"
    penult_mode: str = "none"
    output_mode: str = "identity"
    # persisted power-iteration vector for the penultimate weight (spectral mode)
    power_vec: np.ndarray | None = None

    def __post_init__(self):
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden_activation {self.hidden_activation!r}")
        if self.penult_mode not in PENULT_MODES:
            raise ValueError(f"unknown penult_mode {self.penult_mode!r}")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"unknown output_mode {self.output_mode!r}")
        for i in range(len(self.layers) - 1):
            if self.layers[i + 1].w.shape[1] != self.layers[i].w.shape[0]:
                raise ShapeError(
                    f"layer {i} out dim {self.layers[i].w.shape[0]} does not chain "
                    f"into layer {i + 1} in dim {self.layers[i + 1].w.shape[1]}"
                )
        if self.penult_mode == "spectral" and self.power_vec is None:
            if len(self.layers) < 2:
                raise ShapeError("spectral mode needs a penultimate layer")
            n_in = self.layers[-2].w.shape[1]
            self.power_vec = np.full(n_in, 1.0 / math.sqrt(n_in))

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for lay in self.layers:
            out.append(lay.w)
            out.append(lay.b)
        return out

    def array_names(self) -> list[str]:
        out = []
        for i in range(len(self.layers)):
            out.append(f"layer{i}.w")
            out.append(f"layer{i}.b")
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            layers=[Layer(lay.w.copy(), lay.b.copy()) for lay in self.layers],
            hidden_activation=self.hidden_activation,
            penult_mode=self.penult_mode,
            output_mode=self.output_mode,
            power_vec=None if self.power_vec is None else self.power_vec.copy(),
        )


def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    """Orthogonal matrix (semi-orthogonal when non-square), sign-fixed for determinism."""
    big, small = max(rows, cols), min(rows, cols)
    a = rng.standard_normal((big, small))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * np.ascontiguousarray(q[:rows, :cols])


def init_mlp(
    rng: np.random.Generator,
    sizes: list[int],
    hidden_activation: str = "relu",
    penult_mode: str = "none",
    output_mode: str = "identity",
) -> MlpParams:
    """Orthogonal init: gain sqrt(2) for hidden layers, 1 for the final layer; zero biases."""
    layers = []
    n_lin = len(sizes) - 1
    for i in range(n_lin):
        gain = 1.0 if i == n_lin - 1 else math.sqrt(2.0)
        w = orthogonal(rng, sizes[i + 1], sizes[i], gain)
        layers.append(Layer(w, np.zeros(sizes[i + 1])))
    return MlpParams(layers, hidden_activation, penult_mode, output_mode)


@dataclass
class MlpTape:
    """Activation record from one forward call, sufficient for exact backprop."""
    x: np.ndarray                     # (B, in)
    inputs: list[np.ndarray]          # input to each linear layer
    pre: list[np.ndarray]             # hidden pre-activations
    feat: np.ndarray | None           # raw penultimate features
    feat_norm: np.ndarray | None      # row norms (pnorm) or std (layer_norm)
    feat_out: np.ndarray | None       # normalized penultimate features
    apre: np.ndarray                  # pre-output (before output_norm)
    out_norm: np.ndarray | None       # row norms of apre (output_norm)
    y: np.ndarray                     # final output
    single: bool                      # input was a 1-D vector
    clamp_hits: int = 0               # rows where a norm denominator was floored


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ShapeError(f"expected vector or batch, got ndim={x.ndim}")
    return x, False


def pnorm_forward(x: np.ndarray) -> np.ndarray:
    """x / ||x||_2, no mean subtraction. Denominator floored at 1e-12."""
    xb, single = _as_batch(x)
    n = np.maximum(np.linalg.norm(xb, axis=1, keepdims=True), NORM_FLOOR)
    out = xb / n
    return out[0] if single else out


def layer_norm_forward(x: np.ndarray) -> np.ndarray:
    """(x - mean) / sqrt(var + 1e-5); no learned affine."""
    xb, single = _as_batch(x)
    if xb.shape[1] < 2:
        raise ShapeError("layer norm needs length >= 2")
    mean = xb.mean(axis=1, keepdims=True)
    var = xb.var(axis=1, keepdims=True)
    out = (xb - mean) / np.sqrt(var + LN_EPS)
    return out[0] if single else out


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpTape]:
    xb, single = _as_batch(x)
    if xb.shape[1] != params.in_dim:
        raise ShapeError(f"input dim {xb.shape[1]} != net in dim {params.in_dim}")
    clamp_hits = 0
    inputs: list[np.ndarray] = []
    pre: list[np.ndarray] = []
    h = xb
    n_lin = len(params.layers)
    for i in range(n_lin - 1):
        lay = params.layers[i]
        inputs.append(h)
        z = h @ lay.w.T + lay.b
        pre.append(z)
        h = np.maximum(z, 0.0) if params.hidden_activation == "relu" else np.tanh(z)

    feat = feat_norm = feat_out = None
    if n_lin > 1:
        feat = h
        if params.penult_mode == "pnorm":
            raw = np.linalg.norm(feat, axis=1, keepdims=True)
            clamp_hits += int(np.sum(raw < NORM_FLOOR))
            feat_norm = np.maximum(raw, NORM_FLOOR)
            h = feat / feat_norm
            feat_out = h
        elif params.penult_mode == "layer_norm":
            mean = feat.mean(axis=1, keepdims=True)
            var = feat.var(axis=1, keepdims=True)
            feat_norm = np.sqrt(var + LN_EPS)
            h = (feat - mean) / feat_norm
            feat_out = h

    final = params.layers[-1]
    inputs.append(h)
    apre = h @ final.w.T + final.b

    out_norm = None
    y = apre
    if params.output_mode == "output_norm":
        raw = np.linalg.norm(apre, axis=1, keepdims=True)
        clamp_hits += int(np.sum(raw < NORM_FLOOR))
        out_norm = np.maximum(raw, NORM_FLOOR)
        y = apre / out_norm

    tape = MlpTape(xb, inputs, pre, feat, feat_norm, feat_out, apre, out_norm, y,
                   single, clamp_hits)
    return (y[0] if single else y), tape


def _normalize_backward(g: np.ndarray, u: np.ndarray, norm: np.ndarray) -> np.ndarray:
    # d(x/||x||)/dx = (I - u u^T)/||x|| with u = x/||x||; floored rows are linear.
    return (g - u * np.sum(u * g, axis=1, keepdims=True)) / norm


def mlp_backward(
    params: MlpParams, tape: MlpTape, output_grad: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Exact reverse-mode gradients. Returns (grads, input_grad).

    grads is a flat list in the order of ``params.arrays()``.
    """
    gy, single = _as_batch(output_grad)
    if gy.shape != tape.y.shape:
        raise ShapeError(f"output_grad shape {gy.shape} != output shape {tape.y.shape}")
    if len(tape.inputs) != len(params.layers):
        raise ShapeError("tape does not match this net")

    n_lin = len(params.layers)
    grads: list[np.ndarray | None] = [None] * (2 * n_lin)

    g = gy
    if params.output_mode == "output_norm":
        g = _normalize_backward(g, tape.y, tape.out_norm)

    final = params.layers[-1]
    grads[2 * (n_lin - 1)] = g.T @ tape.inputs[-1]
    grads[2 * (n_lin - 1) + 1] = g.sum(axis=0)
    g = g @ final.w

    if n_lin > 1:
        if params.penult_mode == "pnorm":
            g = _normalize_backward(g, tape.feat_out, tape.feat_norm)
        elif params.penult_mode == "layer_norm":
            yn = tape.feat_out
            g = (g - g.mean(axis=1, keepdims=True)
                 - yn * np.mean(g * yn, axis=1, keepdims=True)) / tape.feat_norm

    for i in range(n_lin - 2, -1, -1):
        if params.hidden_activation == "relu":
            gz = g * (tape.pre[i] > 0.0)
        else:
            t = np.tanh(tape.pre[i])
            gz = g * (1.0 - t * t)
        grads[2 * i] = gz.T @ tape.inputs[i]
        grads[2 * i + 1] = gz.sum(axis=0)
        g = gz @ params.layers[i].w

    gx = g[0] if single else g
    return grads, gx  # type: ignore[return-value]


def finite_diff_grad(f, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar f() w.r.t. a list of arrays.

    ``f`` is called with no arguments and must read the (mutated-in-place)
    arrays. The arrays are restored before returning.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            fp = f()
            a[idx] = orig - h
            fm = f()
            a[idx] = orig
            g[idx] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_arrays(cls, arrays: list[np.ndarray], beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
            beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(
    state: AdamState,
    arrays: list[np.ndarray],
    grads: list[np.ndarray],
    lr: float,
    names: list[str] | None = None,
) -> None:
    """Standard Adam update with bias correction, in place on ``arrays``."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ShapeError("parameter/gradient/state length mismatch")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            block = names[i] if names is not None else f"array {i}"
            raise NonFiniteError(f"non-finite gradient in {block}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        a -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def global_norm(grads: list[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale the whole buffer so its global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


@dataclass(frozen=True)
class LinearSchedule:
    start: float
    end: float
    duration: int

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be > 0")

    def value(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be >= 0")
        if step >= self.duration:
            return self.end
        return self.start + (self.end - self.start) * (step / self.duration)


def schedule_value(sched: LinearSchedule, step: int) -> float:
    return sched.value(step)


def soft_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    """target <- tau * online + (1 - tau) * target, entrywise, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    soft_update_arrays(target.arrays(), online.arrays(), tau)
    return target


def soft_update_arrays(target: list[np.ndarray], online: list[np.ndarray], tau: float) -> None:
    if len(target) != len(online):
        raise ShapeError("target/online length mismatch")
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise ShapeError(f"shape mismatch {t.shape} vs {o.shape}")
        t *= 1.0 - tau
        t += tau * o


def spectral_normalize(
    weight: np.ndarray, power_vec: np.ndarray, iters: int = 1
) -> np.ndarray:
    """weight / sigma_max estimated by power iteration; power_vec updated in place."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    u = power_vec
    sigma = 0.0
    for _ in range(iters):
        v = weight @ u
        vn = np.linalg.norm(v)
        if vn < NORM_FLOOR:
            return weight  # zero (or numerically dead) matrix: leave unchanged
        v = v / vn
        u_new = weight.T @ v
        un = np.linalg.norm(u_new)
        if un < NORM_FLOOR:
            return weight
        u[:] = u_new / un
        sigma = float(v @ (weight @ u))
    return weight / max(sigma, NORM_FLOOR)


def apply_spectral(params: MlpParams, iters: int = 1) -> None:
    """Re-project the penultimate weight to unit top singular value (spectral mode)."""
    if params.penult_mode != "spectral":
        return
    lay = params.layers[-2]
    lay.w = spectral_normalize(lay.w, params.power_vec, iters)


def scale_down_init(params: MlpParams, factor: float) -> MlpParams:
    """Divide the final layer's weights and bias by ``factor``, in place."""
    if factor <= 0:
        raise ValueError("factor must be > 0")
    params.layers[-1].w /= factor
    params.layers[-1].b /= factor
    return params
