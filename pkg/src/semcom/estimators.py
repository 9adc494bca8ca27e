"""Scikit-learn style estimators wrapping the structure learner and codec.

``StructureLearner.fit(X)`` learns a posterior sampler over the DAGs behind
an observation matrix; ``SemanticCodec.fit(Z)`` trains the encoder/decoder
pair that carries state-description feature rows across the quantized
binary symmetric channel. Both expose get_params/set_params so they compose
with pipelines and grid search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import comm
from .gflownet import (
    FlowNet,
    RewardSpec,
    TrainConfig,
    sample_trajectory,
    state_key,
    terminal_distribution_exact,
    train_structure,
)
from .nn import Mlp, OptimizerState, adam_step
from .worldmodel import Dag, Dataset

__all__ = [
    "StructureLearner",
    "SemanticCodec",
    "CodecState",
    "codec_update",
    "constellation_targets",
]


def _rng_seeds(random_state, count: int) -> list[int]:
    ss = np.random.SeedSequence(random_state)
    return [int(s) for s in ss.generate_state(count)]


class StructureLearner(BaseEstimator):
    """Learns a reward-proportional sampler over causal DAGs from data.

    Parameters mirror the flow-matching training loop: the reward weighs the
    data's description length by ``dl_coeff`` and charges ``edge_cost_bits``
    per edge; ``mu`` is the early-termination threshold on the terminate
    probability during trajectory rollouts.
    """

    def __init__(
        self,
        hidden=(64, 64),
        iterations=1500,
        batch_size=16,
        learning_rate=0.01,
        dl_coeff=0.1,
        edge_cost_bits=2.0,
        explore=0.1,
        mu=1.0,
        random_state=None,
    ):
        self.hidden = hidden
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dl_coeff = dl_coeff
        self.edge_cost_bits = edge_cost_bits
        self.explore = explore
        self.mu = mu
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=float, ensure_min_samples=2)
        init_seed, train_seed, sample_seed = _rng_seeds(self.random_state, 3)
        self.n_nodes_ = X.shape[1]
        self.reward_spec_ = RewardSpec(
            data=Dataset(X),
            dl_coeff=self.dl_coeff,
            edge_cost_bits=self.edge_cost_bits,
        )
        net = FlowNet.create(
            self.n_nodes_, hidden=self.hidden, rng=np.random.default_rng(init_seed)
        )
        config = TrainConfig(
            iterations=self.iterations,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            mu=self.mu,
            explore=self.explore,
            seed=train_seed,
        )
        self.flow_net_, self.loss_history_ = train_structure(
            net, self.reward_spec_, config
        )
        self._sample_seed = sample_seed
        return self

    def sample_dags(self, n_samples=128, random_state=None) -> list[Dag]:
        """Draw DAGs from the learned terminal distribution."""
        check_is_fitted(self, "flow_net_")
        seed = self._sample_seed if random_state is None else random_state
        rng = np.random.default_rng(seed)
        return [
            Dag(sample_trajectory(self.flow_net_, rng).terminal_state.adj)
            for _ in range(n_samples)
        ]

    def posterior_mode(self, n_samples=128, random_state=None) -> Dag:
        """Most frequently sampled DAG; ties break on the adjacency bytes."""
        dags = self.sample_dags(n_samples, random_state=random_state)
        counts: dict[bytes, tuple[int, Dag]] = {}
        for dag in dags:
            key = state_key(dag.adj)
            hits, _ = counts.get(key, (0, dag))
            counts[key] = (hits + 1, dag)
        best_key = max(counts, key=lambda k: (counts[k][0], k))
        return counts[best_key][1]

    def exact_terminal_distribution(self) -> dict[bytes, float]:
        check_is_fitted(self, "flow_net_")
        return terminal_distribution_exact(self.flow_net_)


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------

@dataclass
class CodecState:
    """Encoder, auxiliary reconstructor and channel decoder with optimizers.

    The auxiliary head reconstructs the input features from the message
    during training only; it anchors the message to the state description so
    the encoder cannot collapse to a constant.
    """

    encoder: Mlp
    aux: Mlp
    decoder: Mlp
    enc_opt: OptimizerState
    aux_opt: OptimizerState
    dec_opt: OptimizerState

    @classmethod
    def create(cls, z_dim, message_dim, bits_per_dim, hidden, learning_rate, rng):
        encoder = Mlp.create((z_dim, *hidden, message_dim), rng=rng)
        aux = Mlp.create((message_dim, 32, z_dim), rng=rng)
        # one shared per-dimension decoder block: every dimension's bits are
        # decoded by the same subnetwork, so each bit pattern keeps its own
        # reconstruction level regardless of the other dimensions
        decoder = Mlp.create((bits_per_dim, 32, 32, 1), rng=rng)
        return cls(
            encoder,
            aux,
            decoder,
            OptimizerState.create(encoder, lr=learning_rate),
            OptimizerState.create(aux, lr=learning_rate),
            OptimizerState.create(decoder, lr=learning_rate),
        )


def _normalize_rows(y: np.ndarray) -> np.ndarray:
    ms = np.mean(y**2, axis=1, keepdims=True)
    if np.any(ms == 0.0):
        raise comm.EncodeError("cannot power-normalize an all-zero row")
    return y / np.sqrt(ms)


def _gray_table(bits_per_dim: int) -> np.ndarray:
    levels = 1 << bits_per_dim
    table = np.zeros((levels, bits_per_dim), dtype=np.uint8)
    for level in range(levels):
        code = comm.gray_encode(level)
        for b in range(bits_per_dim):
            table[level, b] = (code >> (bits_per_dim - 1 - b)) & 1
    return table


def quantize_rows(m_rows: np.ndarray, bits_per_dim: int) -> np.ndarray:
    """Vectorized quantizer matching comm.quantize row by row."""
    levels = 1 << bits_per_dim
    step = (comm.QUANT_HI - comm.QUANT_LO) / levels
    idx = np.clip(
        np.floor((m_rows - comm.QUANT_LO) / step).astype(int), 0, levels - 1
    )
    table = _gray_table(bits_per_dim)
    return table[idx].reshape(m_rows.shape[0], -1)


def dequantize_rows(bit_rows: np.ndarray, dims: int, bits_per_dim: int) -> np.ndarray:
    levels = 1 << bits_per_dim
    step = (comm.QUANT_HI - comm.QUANT_LO) / levels
    codes = bit_rows.reshape(bit_rows.shape[0], dims, bits_per_dim)
    weights = 1 << np.arange(bits_per_dim - 1, -1, -1)
    code_vals = (codes * weights).sum(axis=2)
    decode = np.array([comm.gray_decode(c) for c in range(levels)])
    inverse = np.zeros(levels, dtype=int)
    for level in range(levels):
        inverse[comm.gray_encode(level)] = level
    idx = inverse[code_vals]
    return comm.QUANT_LO + (idx + 0.5) * step


def encode_rows(z_rows: np.ndarray, encoder: Mlp) -> np.ndarray:
    return _normalize_rows(encoder.forward(z_rows))


def decode_rows(bit_rows: np.ndarray, decoder: Mlp, dims: int, bits_per_dim: int) -> np.ndarray:
    """Batch decode; handles both joint and shared per-dimension decoders."""
    feats = bit_rows.astype(float) * 2.0 - 1.0
    if decoder.n_inputs == dims * bits_per_dim:
        return decoder.forward(feats)
    per_dim = feats.reshape(-1, bits_per_dim)
    return decoder.forward(per_dim).reshape(-1, dims)


# unit-power constellation: in every message exactly one dimension sits in an
# outer quantizer level and the rest in inner levels, so the pooled level
# usage stays balanced and every Gray pattern gets trained
OUTER_AMPLITUDE = 1.3


def inner_amplitude(message_dim: int) -> float:
    return math.sqrt((message_dim - OUTER_AMPLITUDE**2) / max(message_dim - 1, 1))


def constellation_targets(bits: np.ndarray, message_dim: int = 2) -> np.ndarray:
    """Map rows of message_dim + 1 bits onto the unit-power constellation.

    Bit 0 selects which of the first two dimensions carries the outer
    (large-amplitude) level; the remaining bits sign each dimension. All
    points lie strictly inside quantizer bins at unit mean square.
    """
    if message_dim < 2:
        raise ValueError("the unit-power constellation needs message_dim >= 2")
    bits = np.asarray(bits, dtype=int)
    if bits.ndim != 2 or bits.shape[1] != message_dim + 1:
        raise ValueError(f"expected rows of {message_dim + 1} bits")
    c_in = inner_amplitude(message_dim)
    signs = np.where(bits[:, 1:] == 1, 1.0, -1.0)
    values = signs * c_in
    outer_dim = bits[:, 0]  # 0 or 1
    rows = np.arange(bits.shape[0])
    values[rows, outer_dim] = signs[rows, outer_dim] * OUTER_AMPLITUDE
    return values


def codec_update(
    state: CodecState,
    z_rows: np.ndarray,
    targets: np.ndarray,
    bits_per_dim: int,
    train_p: float,
    delta: float,
    penalty: float,
    rng: np.random.Generator,
) -> tuple[CodecState, dict]:
    """One training step on a batch of feature rows.

    The encoder regresses its normalized output onto the target messages
    (constellation points carrying the semantic bits of the event). The
    auxiliary head learns to reconstruct the features from the message
    without feeding gradients back, as an interpretability probe. The
    decoder regresses the channel-corrupted frame back onto the sent
    message, with a hinge surcharge on events whose distortion exceeds
    delta standing in for the chance constraint.
    """
    batch = z_rows.shape[0]

    y = state.encoder.forward(z_rows)
    m_rows = _normalize_rows(y)
    enc_diff = m_rows - np.asarray(targets, dtype=float)
    enc_loss = float(np.mean(np.sum(enc_diff**2, axis=1)))
    d_y = comm.power_normalize_backward(y, 2.0 * enc_diff / batch)
    enc_grads, _ = state.encoder.backward(z_rows, d_y)
    encoder, enc_opt = adam_step(state.enc_opt, state.encoder, enc_grads)

    recon = state.aux.forward(m_rows)
    err = recon - z_rows
    recon_loss = float(np.mean(np.sum(err**2, axis=1)))
    aux_grads, _ = state.aux.backward(m_rows, 2.0 * err / batch)
    aux, aux_opt = adam_step(state.aux_opt, state.aux, aux_grads)

    bits = quantize_rows(m_rows, bits_per_dim)
    if train_p > 0.0:
        flips = rng.random(bits.shape) < train_p
        bits = bits ^ flips.astype(np.uint8)
    dims = m_rows.shape[1]
    m_hat = decode_rows(bits, state.decoder, dims, bits_per_dim)
    diff = m_hat - m_rows
    distortions = np.sum(diff**2, axis=1)
    violations = distortions >= delta
    dec_loss = float(np.mean(distortions) + penalty * np.mean(np.maximum(distortions - delta, 0.0)))
    scale = (2.0 / batch) * (1.0 + penalty * violations)
    upstream_dec = diff * scale[:, None]
    feats = bits.astype(float) * 2.0 - 1.0
    if state.decoder.n_inputs == dims * bits_per_dim:
        dec_grads, _ = state.decoder.backward(feats, upstream_dec)
    else:
        dec_grads, _ = state.decoder.backward(
            feats.reshape(-1, bits_per_dim), upstream_dec.reshape(-1, 1)
        )
    decoder, dec_opt = adam_step(state.dec_opt, state.decoder, dec_grads)

    stats = {
        "encoder_loss": enc_loss,
        "reconstruction_loss": recon_loss,
        "decoder_loss": dec_loss,
        "mean_distortion": float(np.mean(distortions)),
        "violation_rate": float(np.mean(violations)),
    }
    return CodecState(encoder, aux, decoder, enc_opt, aux_opt, dec_opt), stats


class SemanticCodec(BaseEstimator):
    """Encoder/decoder pair over the quantized binary symmetric channel.

    ``fit(Z)`` trains on feature rows; ``transform(Z)`` returns the unit-power
    messages; ``simulate`` runs the full chain at a chosen crossover
    probability and reports messages, frames and per-dimension level actions
    on both sides.
    """

    def __init__(
        self,
        message_dim=2,
        bits_per_dim=2,
        hidden=(64, 64),
        learning_rate=2e-3,
        iterations=600,
        batch_size=128,
        channel_p=0.05,
        delta=None,
        epsilon=0.05,
        penalty=10.0,
        random_state=None,
    ):
        self.message_dim = message_dim
        self.bits_per_dim = bits_per_dim
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.batch_size = batch_size
        self.channel_p = channel_p
        self.delta = delta
        self.epsilon = epsilon
        self.penalty = penalty
        self.random_state = random_state

    def _delta(self) -> float:
        if self.delta is not None:
            return self.delta
        return comm.default_delta(self.message_dim, self.bits_per_dim)

    def message_bits(self, Z) -> np.ndarray:
        """Target bits per row (message_dim + 1): signs of fixed random
        projections of the centered features. Override by passing explicit
        bits to fit."""
        check_is_fitted(self, "projection_")
        Z = np.asarray(Z, dtype=float)
        return ((Z - self.center_) @ self.projection_.T > 0.0).astype(np.uint8)

    def fit(self, Z, y=None):
        """Train on feature rows. ``y`` may supply explicit per-row message
        bits (three columns); otherwise they derive from random projections."""
        Z = check_array(Z, dtype=float, ensure_min_samples=1)
        init_seed, train_seed, proj_seed = _rng_seeds(self.random_state, 3)
        self.center_ = Z.mean(axis=0)
        self.projection_ = np.random.default_rng(proj_seed).normal(
            size=(self.message_dim + 1, Z.shape[1])
        )
        bits = self.message_bits(Z) if y is None else np.asarray(y, dtype=np.uint8)
        targets = constellation_targets(bits, self.message_dim)
        state = CodecState.create(
            Z.shape[1],
            self.message_dim,
            self.bits_per_dim,
            self.hidden,
            self.learning_rate,
            np.random.default_rng(init_seed),
        )
        rng = np.random.default_rng(train_seed)
        history = []
        for _ in range(self.iterations):
            pick = rng.integers(0, Z.shape[0], size=min(self.batch_size, Z.shape[0]))
            state, stats = codec_update(
                state,
                Z[pick],
                targets[pick],
                self.bits_per_dim,
                self.channel_p,
                self._delta(),
                self.penalty,
                rng,
            )
            history.append(stats)
        self.codec_state_ = state
        self.encoder_ = state.encoder
        self.decoder_ = state.decoder
        self.loss_history_ = history
        return self

    def transform(self, Z):
        check_is_fitted(self, "encoder_")
        Z = check_array(Z, dtype=float)
        return encode_rows(Z, self.encoder_)

    def simulate(self, Z, p=None, rng=None):
        """Run encode -> quantize -> channel -> decode -> classify on rows of Z."""
        check_is_fitted(self, "encoder_")
        Z = check_array(Z, dtype=float)
        p = self.channel_p if p is None else p
        rng = rng if rng is not None else np.random.default_rng(0)
        m_rows = encode_rows(Z, self.encoder_)
        sent_bits = quantize_rows(m_rows, self.bits_per_dim)
        flips = rng.random(sent_bits.shape) < p
        received_bits = sent_bits ^ flips.astype(np.uint8)
        m_hat = decode_rows(received_bits, self.decoder_, self.message_dim, self.bits_per_dim)
        sent_values = dequantize_rows(sent_bits, self.message_dim, self.bits_per_dim)
        return {
            "messages": m_rows,
            "sent_bits": sent_bits,
            "received_bits": received_bits,
            "decoded": m_hat,
            "flips": flips,
            "actions_sent": comm.classify_levels(sent_values, self.bits_per_dim),
            "actions_received": comm.classify_levels(m_hat, self.bits_per_dim),
            "distortions": np.sum((m_rows - m_hat) ** 2, axis=1),
        }
