"""Semantic transmission chain and its metrics.

encode -> quantize -> binary symmetric channel -> decode -> listener action.

Messages are power-normalized to unit mean square. The quantizer is uniform
mid-rise on a fixed range with Gray-coded level labels, so a single channel
bit flip moves the dequantized value by at most one step. Metrics cover
squared-error distortion, knowledge-base information error, the delta-ball
similarity test, empirical reliability, and the causal-influence KL between
the action distribution the speaker intends and the channel-marginalized
distribution the listener realizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .nn import Mlp

__all__ = [
    "EncodeError",
    "InfiniteDivergenceError",
    "Message",
    "BitFrame",
    "Channel",
    "ListenerPolicy",
    "SemanticMetrics",
    "encode",
    "power_normalize",
    "quantize",
    "dequantize",
    "transmit",
    "decode",
    "frame_features",
    "semantic_distortion",
    "kb_information_error",
    "is_semantically_similar",
    "semantic_reliability",
    "kl_divergence",
    "causal_influence",
    "listener_action",
    "classify_levels",
    "gray_encode",
    "gray_decode",
    "default_delta",
    "QUANT_LO",
    "QUANT_HI",
]

QUANT_LO = -2.0
QUANT_HI = 2.0
EXACT_ENUMERATION_BITS = 16
MC_DRAWS = 10_000


class EncodeError(ValueError):
    """The encoder produced an all-zero vector that cannot be normalized."""


class InfiniteDivergenceError(ValueError):
    """KL divergence is infinite: the reference puts zero mass where p has mass."""


@dataclass(frozen=True)
class Message:
    """Real message vector; unit mean-square amplitude after encoding."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("message must be a flat vector")
        if not np.isfinite(v).all():
            raise ValueError("message entries must be finite")
        object.__setattr__(self, "values", v)

    @property
    def k(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class BitFrame:
    """Bit sequence with its dims x bits-per-dim layout; MSB first per dim."""

    bits: np.ndarray
    dims: int
    bits_per_dim: int
    clamped: int = 0

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.uint8)
        if b.ndim != 1 or b.size != self.dims * self.bits_per_dim:
            raise ValueError("bit count must equal dims * bits_per_dim")
        if not np.isin(b, (0, 1)).all():
            raise ValueError("bits must be 0 or 1")
        object.__setattr__(self, "bits", b)

    @property
    def n_bits(self) -> int:
        return self.bits.size


@dataclass(frozen=True)
class Channel:
    """Binary symmetric channel with crossover probability p."""

    crossover_p: float

    def __post_init__(self):
        if not 0.0 <= self.crossover_p <= 1.0:
            raise ValueError("crossover probability must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Encoder / decoder
# ---------------------------------------------------------------------------

def power_normalize(y: np.ndarray) -> np.ndarray:
    """Scale a vector so its mean squared amplitude is exactly 1."""
    y = np.asarray(y, dtype=float)
    ms = float(np.mean(y**2))
    if ms == 0.0:
        raise EncodeError("cannot power-normalize an all-zero vector")
    return y / math.sqrt(ms)


def power_normalize_backward(y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of the normalization w.r.t. its input, row-wise for batches."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    up = np.atleast_2d(np.asarray(upstream, dtype=float))
    ssq = np.sum(y**2, axis=1, keepdims=True)
    k = y.shape[1]
    scale = np.sqrt(k / ssq)
    dot = np.sum(y * up, axis=1, keepdims=True)
    grad = scale * (up - y * dot / ssq)
    return grad if np.asarray(upstream).ndim == 2 else grad[0]


def encode(z: np.ndarray, net: Mlp) -> Message:
    """Forward pass followed by unit-power normalization."""
    z = np.asarray(z, dtype=float)
    if not np.isfinite(z).all():
        raise ValueError("encoder input must be finite")
    return Message(power_normalize(net.forward(z)))


def decode(frame: BitFrame, net: Mlp) -> Message:
    """Map the received bits (as +/-1 features) through the decoder network.

    A decoder whose input width equals the whole frame is applied jointly;
    one whose input width equals bits_per_dim is applied to each dimension's
    bits with shared weights (a block-structured decoder).
    """
    feats = frame_features(frame)
    if net.n_inputs == feats.size:
        out = net.forward(feats)
        return Message(np.atleast_1d(out))
    if net.n_inputs == frame.bits_per_dim:
        per_dim = feats.reshape(frame.dims, frame.bits_per_dim)
        out = net.forward(per_dim)
        return Message(np.asarray(out).reshape(frame.dims))
    raise ValueError(
        f"decoder expects {net.n_inputs} inputs; frame provides {feats.size} "
        f"bits in {frame.dims} dims of {frame.bits_per_dim}"
    )


def frame_features(frame: BitFrame) -> np.ndarray:
    """Bits mapped {0, 1} -> {-1, +1}."""
    return frame.bits.astype(float) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# Quantizer with Gray-coded levels
# ---------------------------------------------------------------------------

def gray_encode(index: int) -> int:
    return index ^ (index >> 1)


def gray_decode(code: int) -> int:
    index = 0
    while code:
        index ^= code
        code >>= 1
    return index


def _levels(bits_per_dim: int) -> int:
    if bits_per_dim < 1:
        raise ValueError("bits_per_dim must be >= 1")
    return 1 << bits_per_dim


def _level_indices(values: np.ndarray, bits_per_dim: int) -> tuple[np.ndarray, int]:
    levels = _levels(bits_per_dim)
    step = (QUANT_HI - QUANT_LO) / levels
    clamped = int(np.sum((values < QUANT_LO) | (values > QUANT_HI)))
    idx = np.floor((values - QUANT_LO) / step).astype(int)
    return np.clip(idx, 0, levels - 1), clamped


def quantize(m: Message, bits_per_dim: int) -> BitFrame:
    """Uniform mid-rise quantizer on [-2, 2] with Gray-coded level labels.

    Out-of-range values clamp to the edge levels; the clamp count is carried
    on the returned frame.
    """
    idx, clamped = _level_indices(m.values, bits_per_dim)
    bits = np.zeros(m.k * bits_per_dim, dtype=np.uint8)
    for d, level in enumerate(idx):
        code = gray_encode(int(level))
        for b in range(bits_per_dim):
            bits[d * bits_per_dim + b] = (code >> (bits_per_dim - 1 - b)) & 1
    return BitFrame(bits, m.k, bits_per_dim, clamped)


def dequantize(frame: BitFrame) -> Message:
    """Level midpoints of the Gray-decoded indices."""
    levels = _levels(frame.bits_per_dim)
    step = (QUANT_HI - QUANT_LO) / levels
    values = np.zeros(frame.dims)
    for d in range(frame.dims):
        code = 0
        for b in range(frame.bits_per_dim):
            code = (code << 1) | int(frame.bits[d * frame.bits_per_dim + b])
        idx = gray_decode(code)
        values[d] = QUANT_LO + (idx + 0.5) * step
    return Message(values)


def transmit(frame: BitFrame, ch: Channel, rng: np.random.Generator) -> BitFrame:
    """Flip each bit independently with the channel's crossover probability."""
    flips = rng.random(frame.n_bits) < ch.crossover_p
    bits = frame.bits ^ flips.astype(np.uint8)
    return BitFrame(bits, frame.dims, frame.bits_per_dim, frame.clamped)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def semantic_distortion(m: Message, m_hat: Message) -> float:
    """Squared Euclidean distance between sent and reconstructed messages."""
    if m.k != m_hat.k:
        raise ValueError("messages must have equal length")
    diff = m.values - m_hat.values
    return float(diff @ diff)


def kb_information_error(s_speaker: float, s_listener: float) -> float:
    """Squared difference of the two theories' semantic contents (bits^2)."""
    if not (math.isfinite(s_speaker) and math.isfinite(s_listener)):
        raise ValueError("semantic contents must be finite")
    return (s_speaker - s_listener) ** 2


def is_semantically_similar(
    m: Message, m_hat: Message, delta: float, s_speaker: float, s_listener: float
) -> bool:
    """Distortion within delta (closed inequality) and matching KB content."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    return (
        semantic_distortion(m, m_hat) <= delta
        and kb_information_error(s_speaker, s_listener) == 0.0
    )


def semantic_reliability(trials: Sequence[tuple[Message, Message]], delta: float) -> float:
    """Empirical fraction of trials with distortion strictly below delta."""
    if not trials:
        raise ValueError("need at least one trial")
    hits = sum(1 for m, m_hat in trials if semantic_distortion(m, m_hat) < delta)
    return hits / len(trials)


def default_delta(k: int, bits_per_dim: int, margin: float = 1.25) -> float:
    """margin x worst-case quantization distortion for k dims at this depth."""
    step = (QUANT_HI - QUANT_LO) / _levels(bits_per_dim)
    return margin * k * (step / 2.0) ** 2


def kl_divergence(p: np.ndarray, q: np.ndarray, smoothing: float | None = None) -> float:
    """KL(p || q) in nats over a shared finite support.

    A zero in q where p has mass raises InfiniteDivergenceError unless a
    smoothing floor is supplied, in which case q is floored and renormalized.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions must share a support")
    if smoothing is not None:
        q = np.maximum(q, smoothing)
        q = q / q.sum()
    total = 0.0
    for pi, qi in zip(p, q):
        if pi == 0.0:
            continue
        if qi == 0.0:
            raise InfiniteDivergenceError(
                "reference distribution has a zero where p has mass"
            )
        total += pi * math.log(pi / qi)
    return max(total, 0.0)


# ---------------------------------------------------------------------------
# Listener
# ---------------------------------------------------------------------------

def classify_levels(values: np.ndarray, bits_per_dim: int) -> np.ndarray:
    """Quantization-level classification with ties broken toward the lower level."""
    levels = _levels(bits_per_dim)
    step = (QUANT_HI - QUANT_LO) / levels
    u = (np.asarray(values, dtype=float) - QUANT_LO) / step
    idx = np.floor(u).astype(int)
    on_boundary = (u == idx) & (idx > 0)
    idx = np.where(on_boundary, idx - 1, idx)
    return np.clip(idx, 0, levels - 1)


@dataclass(frozen=True)
class ListenerPolicy:
    """Deterministic per-dimension level classification of a decoded message.

    ``kb_truth_scale`` below 1 models a listener whose theory downgrades a
    fraction of formula truths; the harness uses it to derive the listener's
    knowledge base.
    """

    dims: int
    bits_per_dim: int
    kb_truth_scale: float = 1.0
    kb_perturbed_fraction: float = 0.0

    def actions(self, m_hat: Message) -> tuple[int, ...]:
        if m_hat.k != self.dims:
            raise ValueError("message length does not match policy dimensionality")
        return tuple(int(a) for a in classify_levels(m_hat.values, self.bits_per_dim))

    def action_distribution(self, m_hat: Message) -> dict[tuple[int, ...], float]:
        return {self.actions(m_hat): 1.0}


def listener_action(m_hat: Message, policy: ListenerPolicy) -> tuple[int, ...]:
    """Per-dimension level indices for a decoded message."""
    return policy.actions(m_hat)


def causal_influence(
    m: Message,
    ch: Channel,
    speaker_policy: Callable[[Message], Mapping[tuple, float]],
    listener_policy: Callable[[BitFrame], Mapping[tuple, float]],
    bits_per_dim: int,
    rng: np.random.Generator | None = None,
    smoothing: float | None = None,
    mc_draws: int = MC_DRAWS,
) -> float:
    """KL divergence (nats) between the speaker's intended action distribution
    and the listener's channel-marginalized one.

    The channel marginal is enumerated exactly for frames up to 16 bits and
    estimated with at least 10,000 Monte Carlo corruption draws beyond that.
    """
    frame = quantize(m, bits_per_dim)
    p_speaker = dict(speaker_policy(m))
    marginal: dict[tuple, float] = {}
    p = ch.crossover_p
    if frame.n_bits <= EXACT_ENUMERATION_BITS:
        for pattern in range(1 << frame.n_bits):
            flips = np.array(
                [(pattern >> b) & 1 for b in range(frame.n_bits)], dtype=np.uint8
            )
            k = int(flips.sum())
            weight = (p**k) * ((1.0 - p) ** (frame.n_bits - k))
            if weight == 0.0:
                continue
            received = BitFrame(
                frame.bits ^ flips, frame.dims, frame.bits_per_dim, frame.clamped
            )
            for action, prob in listener_policy(received).items():
                marginal[action] = marginal.get(action, 0.0) + weight * prob
    else:
        if rng is None:
            raise ValueError("Monte Carlo marginalization needs an rng")
        draws = max(mc_draws, MC_DRAWS)
        for _ in range(draws):
            received = transmit(frame, ch, rng)
            for action, prob in listener_policy(received).items():
                marginal[action] = marginal.get(action, 0.0) + prob / draws
    support = sorted(set(p_speaker) | set(marginal))
    p_vec = np.array([p_speaker.get(a, 0.0) for a in support])
    q_vec = np.array([marginal.get(a, 0.0) for a in support])
    return kl_divergence(p_vec, q_vec, smoothing=smoothing)


@dataclass(frozen=True)
class SemanticMetrics:
    """Per-event or aggregate metric bundle."""

    distortion: float
    kb_error: float
    similar: bool
    reliability: float
    causal_influence: float
    delta: float
    epsilon: float

    def __post_init__(self):
        if not 0.0 <= self.reliability <= 1.0:
            raise ValueError("reliability must lie in [0, 1]")
        if self.causal_influence < 0.0:
            raise ValueError("causal influence must be nonnegative")
