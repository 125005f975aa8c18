"""Residual vector quantization.

Codebooks are plain numpy state updated by exponential moving averages; the
encoder-side gradient (straight-through and commitment) is handled by the codec.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

N_LAYERS = 4
_CHUNK = 64


@dataclass
class Codebook:
    entries: np.ndarray  # (size, dim)
    usage_ema: np.ndarray = None  # (size,) assignment share relative to uniform use (1.0)
    entry_ema: np.ndarray = None  # (size, dim) running mean of assigned vectors

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2:
            raise ValueError("codebook entries must be a (size, dim) matrix")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook entries must be finite")
        if self.usage_ema is None:
            self.usage_ema = np.ones(self.size)
        if self.entry_ema is None:
            self.entry_ema = self.entries.copy()

    @property
    def size(self):
        return self.entries.shape[0]

    @property
    def dim(self):
        return self.entries.shape[1]

    def copy(self):
        return Codebook(self.entries.copy(), self.usage_ema.copy(), self.entry_ema.copy())


@dataclass
class RvqStack:
    codebooks: list = field(default_factory=list)

    def __post_init__(self):
        dims = {cb.dim for cb in self.codebooks}
        if len(dims) > 1:
            raise ValueError(f"codebooks disagree on dimension: {sorted(dims)}")

    @property
    def n_layers(self):
        return len(self.codebooks)

    @property
    def dim(self):
        return self.codebooks[0].dim

    def copy(self):
        return RvqStack([cb.copy() for cb in self.codebooks])


@dataclass(frozen=True)
class QuantResult:
    indices: np.ndarray  # (frames, layers)
    quantized: np.ndarray  # (frames, dim)
    residual_energy: np.ndarray  # (layers,) mean squared residual after each layer
    residuals: np.ndarray  # (layers, frames, dim) input to each layer


def _sq_distances(vectors, entries):
    # direct (x - c)^2 sums: no cancellation, so argmin agrees with a naive scan
    out = np.empty((vectors.shape[0], entries.shape[0]))
    for start in range(0, vectors.shape[0], _CHUNK):
        diff = vectors[start:start + _CHUNK, None, :] - entries[None, :, :]
        out[start:start + _CHUNK] = np.einsum("fkd,fkd->fk", diff, diff)
    return out


def nearest(codebook, vectors):
    """Index and entry minimising squared L2 distance; ties go to the lowest index.

    Accepts one vector or a (n, dim) batch.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    single = vectors.ndim == 1
    batch = np.atleast_2d(vectors)
    if batch.shape[1] != codebook.dim:
        raise ValueError(f"vector dim {batch.shape[1]} != codebook dim {codebook.dim}")
    if not np.all(np.isfinite(batch)):
        raise ValueError("cannot quantize non-finite vectors")
    idx = np.argmin(_sq_distances(batch, codebook.entries), axis=1)  # argmin keeps the first minimum
    if single:
        return int(idx[0]), codebook.entries[idx[0]]
    return idx, codebook.entries[idx]


def rvq_encode(stack, frames):
    """Greedy residual quantization through every layer of ``stack``."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("rvq_encode needs a non-empty (frames, dim) matrix")
    if frames.shape[1] != stack.dim:
        raise ValueError(f"frame dim {frames.shape[1]} != codebook dim {stack.dim}")
    residual = frames.copy()
    quantized = np.zeros_like(frames)
    indices = np.empty((frames.shape[0], stack.n_layers), dtype=np.int64)
    energy = np.empty(stack.n_layers)
    residuals = np.empty((stack.n_layers,) + frames.shape)
    for k, cb in enumerate(stack.codebooks):
        residuals[k] = residual
        idx, chosen = nearest(cb, residual)
        indices[:, k] = idx
        quantized += chosen
        residual = residual - chosen
        energy[k] = np.mean(np.sum(residual ** 2, axis=1))
    return QuantResult(indices, quantized, energy, residuals)


def rvq_decode(stack, indices):
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 2 or indices.shape[1] != stack.n_layers:
        raise ValueError(f"indices must be (frames, {stack.n_layers})")
    out = np.zeros((indices.shape[0], stack.dim))
    for k, cb in enumerate(stack.codebooks):
        if indices.size and (indices[:, k].min() < 0 or indices[:, k].max() >= cb.size):
            raise ValueError(f"layer {k}: index out of range [0, {cb.size})")
        out += cb.entries[indices[:, k]]
    return out


def commitment_loss(frames, quantized):
    """Mean squared error between encoder outputs and their (constant) quantizations."""
    frames = np.asarray(frames, dtype=np.float64)
    return float(np.mean((frames - np.asarray(quantized, dtype=np.float64)) ** 2))


def commitment_grad(frames, quantized):
    """Gradient of :func:`commitment_loss` w.r.t. ``frames`` (quantized held fixed)."""
    frames = np.asarray(frames, dtype=np.float64)
    return 2.0 * (frames - quantized) / frames.size


def codebook_update(stack, result, decay=0.99, dead_threshold=1e-3, rng=None):
    """EMA update from one batch of assignments; returns a new stack.

    Every entry's usage decays by ``decay`` per call. Entries that received
    assignments move toward the batch mean of their vectors by ``1 - decay``.
    Entries whose usage falls below ``dead_threshold`` are re-seeded from random
    batch residuals of that layer.
    """
    if result is None or result.indices.shape[0] == 0:
        return stack.copy()
    rng = np.random.default_rng(rng)
    new = stack.copy()
    n = result.indices.shape[0]
    for k, cb in enumerate(new.codebooks):
        idx = result.indices[:, k]
        vectors = result.residuals[k]
        counts = np.bincount(idx, minlength=cb.size).astype(np.float64)
        sums = np.zeros_like(cb.entries)
        np.add.at(sums, idx, vectors)
        hit = counts > 0
        cb.usage_ema = decay * cb.usage_ema + (1.0 - decay) * counts * cb.size / n
        means = sums[hit] / counts[hit, None]
        cb.entry_ema[hit] = decay * cb.entry_ema[hit] + (1.0 - decay) * means
        cb.entries[hit] = cb.entry_ema[hit]
        dead = np.flatnonzero(cb.usage_ema < dead_threshold)
        if dead.size:
            picks = rng.integers(0, n, size=dead.size)
            cb.entries[dead] = vectors[picks]
            cb.entry_ema[dead] = vectors[picks]
            cb.usage_ema[dead] = 1.0
    return new


def kmeans_pp(vectors, k, rng):
    """k-means++ seeding: first centre uniform, the rest with D^2 weighting."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    centres = np.empty((k, vectors.shape[1]))
    centres[0] = vectors[rng.integers(n)]
    d2 = np.sum((vectors - centres[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than entries: jitter duplicates
            centres[i] = vectors[rng.integers(n)] + 1e-3 * rng.standard_normal(vectors.shape[1])
        else:
            centres[i] = vectors[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((vectors - centres[i]) ** 2, axis=1))
    return centres


def init_stack(frames, n_layers=N_LAYERS, codebook_size=1024, rng=None):
    """Seed every layer with k-means++ on the residual left by the layers above."""
    rng = np.random.default_rng(rng)
    residual = np.asarray(frames, dtype=np.float64)
    codebooks = []
    for _ in range(n_layers):
        cb = Codebook(kmeans_pp(residual, codebook_size, rng))
        codebooks.append(cb)
        residual = residual - nearest(cb, residual)[1]
    return RvqStack(codebooks)


def random_stack(dim, codebook_size, n_layers=N_LAYERS, scale=1.0, rng=None):
    """Gaussian codebooks whose layer scale halves per layer."""
    rng = np.random.default_rng(rng)
    return RvqStack([Codebook(scale * 0.5 ** k * rng.standard_normal((codebook_size, dim)))
                     for k in range(n_layers)])


class ResidualVQ(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` seeds and refines codebooks, ``transform`` emits
    (frames, layers) indices and ``inverse_transform`` sums the selected entries."""

    def __init__(self, n_layers=N_LAYERS, codebook_size=1024, decay=0.99, dead_threshold=1e-3,
                 n_iter=10, random_state=None):
        self.n_layers = n_layers
        self.codebook_size = codebook_size
        self.decay = decay
        self.dead_threshold = dead_threshold
        self.n_iter = n_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        rng = np.random.default_rng(self.random_state)
        self.stack_ = init_stack(X, self.n_layers, self.codebook_size, rng)
        for _ in range(self.n_iter):
            self.partial_fit(X, _rng=rng)
        self.n_features_in_ = X.shape[1]
        return self

    def partial_fit(self, X, y=None, _rng=None):
        X = check_array(X, dtype=np.float64)
        if not hasattr(self, "stack_"):
            rng = np.random.default_rng(self.random_state)
            self.stack_ = init_stack(X, self.n_layers, self.codebook_size, rng)
            self.n_features_in_ = X.shape[1]
        result = rvq_encode(self.stack_, X)
        self.stack_ = codebook_update(self.stack_, result, self.decay, self.dead_threshold, _rng)
        return self

    def transform(self, X):
        check_is_fitted(self, "stack_")
        return rvq_encode(self.stack_, check_array(X, dtype=np.float64)).indices

    def inverse_transform(self, X):
        check_is_fitted(self, "stack_")
        return rvq_decode(self.stack_, X)

    def quantize(self, X):
        check_is_fitted(self, "stack_")
        return rvq_encode(self.stack_, check_array(X, dtype=np.float64))
