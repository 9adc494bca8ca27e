"""Minimal dense-network substrate with explicit backpropagation.

Everything is float64 numpy. An Mlp is a stack of affine layers with one
activation per layer; ``forward`` accepts a single vector or a batch of row
vectors. ``backward`` returns exact reverse-mode gradients of the forward
map contracted against an upstream gradient, verified against central
finite differences by ``gradient_check``.

Parameters are updated functionally: ``adam_step`` returns a fresh Mlp and
optimizer state, leaving the inputs untouched, so concurrent readers of a
network snapshot are always safe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "NonFiniteGradientError",
    "Mlp",
    "ParamGrads",
    "OptimizerState",
    "adam_step",
    "GradCheckReport",
    "gradient_check",
    "save_checkpoint",
    "load_checkpoint",
]

ACTIVATIONS = ("tanh", "relu", "sigmoid", "identity")


class NonFiniteGradientError(ValueError):
    """A gradient contained NaN or infinity; parameters were left untouched."""


def _act(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(pre)
    if name == "relu":
        return np.maximum(0.0, pre)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-pre))
    if name == "identity":
        return pre
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - post**2
    if name == "relu":
        return (pre > 0.0).astype(float)
    if name == "sigmoid":
        return post * (1.0 - post)
    if name == "identity":
        return np.ones_like(pre)
    raise ValueError(f"unknown activation {name!r}")


# list of (dW, db) pairs, one per layer
ParamGrads = list


@dataclass
class Mlp:
    """Dense network: sizes[0] inputs, one activation per affine layer."""

    sizes: tuple[int, ...]
    activations: tuple[str, ...]
    weights: list
    biases: list

    @classmethod
    def create(
        cls,
        sizes: Sequence[int],
        activations: Sequence[str] | None = None,
        rng: np.random.Generator | None = None,
    ) -> "Mlp":
        """Xavier-uniform initialized network; hidden layers default to tanh,
        the output layer to identity."""
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output size")
        n_layers = len(sizes) - 1
        if activations is None:
            activations = ("tanh",) * (n_layers - 1) + ("identity",)
        activations = tuple(activations)
        if len(activations) != n_layers:
            raise ValueError("one activation required per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        rng = rng if rng is not None else np.random.default_rng()
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(sizes, activations, weights, biases)

    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(
            self.sizes,
            self.activations,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def _as_batch(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return x[None, :], True
        if x.ndim == 2:
            return x, False
        raise ValueError("input must be a vector or a batch of row vectors")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Deterministic affine + activation composition."""
        xb, squeeze = self._as_batch(x)
        if xb.shape[1] != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} inputs, got {xb.shape[1]}")
        h = xb
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = _act(act, h @ w + b)
        return h[0] if squeeze else h

    def _trace(self, xb: np.ndarray):
        pres, posts = [], []
        h = xb
        for w, b, act in zip(self.weights, self.biases, self.activations):
            pre = h @ w + b
            h = _act(act, pre)
            pres.append(pre)
            posts.append(h)
        return pres, posts

    def backward(self, x: np.ndarray, upstream: np.ndarray):
        """Reverse-mode gradients contracted against ``upstream``.

        Returns (grads, input_grad) where grads is one (dW, db) pair per
        layer and input_grad has the shape of ``x``. Batched rows accumulate
        by summation.
        """
        xb, squeeze = self._as_batch(x)
        if xb.shape[1] != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} inputs, got {xb.shape[1]}")
        up = np.asarray(upstream, dtype=float)
        up = up[None, :] if up.ndim == 1 else up
        if up.shape != (xb.shape[0], self.n_outputs):
            raise ValueError("upstream gradient shape does not match the output")
        pres, posts = self._trace(xb)
        grads: ParamGrads = [None] * len(self.weights)
        delta = up
        for layer in reversed(range(len(self.weights))):
            delta = delta * _act_grad(self.activations[layer], pres[layer], posts[layer])
            below = xb if layer == 0 else posts[layer - 1]
            grads[layer] = (below.T @ delta, delta.sum(axis=0))
            delta = delta @ self.weights[layer].T
        return grads, (delta[0] if squeeze else delta)

    def param_arrays(self) -> list:
        """Flat list of parameter arrays in checkpoint order (W0, b0, W1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def zero_grads(net: Mlp) -> ParamGrads:
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]


def add_grads(total: ParamGrads, extra: ParamGrads) -> None:
    for (tw, tb), (ew, eb) in zip(total, extra):
        tw += ew
        tb += eb


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adaptive-moment accumulators shaped like the network parameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def create(cls, net: Mlp, lr: float = 1e-3) -> "OptimizerState":
        arrays = net.param_arrays()
        return cls(
            lr=lr,
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
        )


def adam_step(opt: OptimizerState, net: Mlp, grads: ParamGrads):
    """One adaptive-moment update. Non-finite gradients raise and leave
    both the network and the optimizer state untouched."""
    flat = []
    for dw, db in grads:
        flat.extend((dw, db))
    for g in flat:
        if not np.isfinite(g).all():
            raise NonFiniteGradientError("gradient contains NaN or infinity")
    t = opt.step_count + 1
    new_m, new_v, updated = [], [], []
    for g, m, v in zip(flat, opt.m, opt.v):
        m2 = opt.beta1 * m + (1.0 - opt.beta1) * g
        v2 = opt.beta2 * v + (1.0 - opt.beta2) * g**2
        new_m.append(m2)
        new_v.append(v2)
        m_hat = m2 / (1.0 - opt.beta1**t)
        v_hat = v2 / (1.0 - opt.beta2**t)
        updated.append(opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps))
    new_net = net.copy()
    arrays = new_net.param_arrays()
    for a, upd in zip(arrays, updated):
        a -= upd
    new_opt = OptimizerState(opt.lr, opt.beta1, opt.beta2, opt.eps, t, new_m, new_v)
    return new_net, new_opt


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Worst disagreement between backprop and central differences."""

    max_rel_error: float
    worst_param: tuple[int, str, tuple[int, ...]] | None
    excluded: int = 0


def gradient_check(
    net: Mlp,
    loss: Callable[[np.ndarray], float],
    x: np.ndarray,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare backprop parameter gradients with central finite differences.

    ``loss`` maps the network output to a scalar. Its own gradient is taken
    by central differences over the output, which is exact for linear losses
    and O(step^2) otherwise. Parameters whose perturbation flips the sign of
    a relu pre-activation are excluded as non-comparable kink points.
    """
    y = net.forward(x)
    base = np.atleast_1d(np.asarray(y, dtype=float))
    up = np.zeros_like(base)
    for k in range(base.size):
        bump = np.zeros_like(base)
        bump.flat[k] = step
        up.flat[k] = (loss(base + bump) - loss(base - bump)) / (2.0 * step)
    grads, _ = net.backward(x, up.reshape(np.shape(y)))

    has_relu = "relu" in net.activations
    xb, _ = net._as_batch(np.asarray(x, dtype=float))

    def relu_signs(m: Mlp):
        pres, _ = m._trace(xb)
        return [np.sign(p) for p, a in zip(pres, m.activations) if a == "relu"]

    max_rel = 0.0
    worst = None
    excluded = 0
    analytic_flat = []
    for dw, db in grads:
        analytic_flat.extend((dw, db))
    arrays = net.param_arrays()
    names = []
    for layer in range(len(net.weights)):
        names.extend([(layer, "W"), (layer, "b")])
    trial = net.copy()
    trial_arrays = trial.param_arrays()
    for p_idx, (arr, analytic) in enumerate(zip(trial_arrays, analytic_flat)):
        it = np.nditer(arrays[p_idx], flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            original = arr[idx]
            arr[idx] = original + step
            y_plus = trial.forward(x)
            signs_plus = relu_signs(trial) if has_relu else None
            arr[idx] = original - step
            y_minus = trial.forward(x)
            signs_minus = relu_signs(trial) if has_relu else None
            arr[idx] = original
            if has_relu and any(
                np.any(sp != sm) for sp, sm in zip(signs_plus, signs_minus)
            ):
                excluded += 1
                continue
            numeric = (loss(np.atleast_1d(y_plus)) - loss(np.atleast_1d(y_minus))) / (
                2.0 * step
            )
            a = float(analytic[idx])
            denom = max(abs(a) + abs(numeric), 1e-8)
            rel = abs(a - numeric) / denom
            if rel > max_rel:
                max_rel = rel
                layer, kind = names[p_idx]
                worst = (layer, kind, idx)
    return GradCheckReport(max_rel, worst, excluded)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(nets: Mapping[str, Mlp], bin_path, json_path) -> None:
    """Write parameters as concatenated little-endian float64 with a JSON
    sidecar describing the layout. Byte output is a pure function of the
    parameters (no timestamps), so identical runs give identical files."""
    order = sorted(nets)
    meta = {"dtype": "<f8", "order": order, "nets": {}}
    with open(bin_path, "wb") as fh:
        for name in order:
            net = nets[name]
            meta["nets"][name] = {
                "sizes": list(net.sizes),
                "activations": list(net.activations),
            }
            for arr in net.param_arrays():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(bin_path, json_path) -> dict[str, Mlp]:
    with open(json_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    raw = np.fromfile(bin_path, dtype="<f8")
    out: dict[str, Mlp] = {}
    pos = 0
    for name in meta["order"]:
        spec = meta["nets"][name]
        sizes = tuple(spec["sizes"])
        acts = tuple(spec["activations"])
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = raw[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).copy()
            pos += fan_in * fan_out
            b = raw[pos : pos + fan_out].copy()
            pos += fan_out
            weights.append(w)
            biases.append(b)
        out[name] = Mlp(sizes, acts, weights, biases)
    if pos != raw.size:
        raise ValueError("checkpoint payload does not match its sidecar")
    return out
