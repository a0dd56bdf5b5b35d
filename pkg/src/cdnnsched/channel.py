"""Channel gains and distributed (per-transmitter) noisy estimates.

Gains are real power gains, entry ``(i, j)`` being the gain from TX ``j`` to
RX ``i``. Every draw is unit-mean exponential (chi-square with two degrees of
freedom, i.e. Rayleigh fading) scaled by a per-entry variance.

TX ``j`` observes ``sigma_bar ⊙ G + sigma ⊙ Delta`` where ``Delta`` is an
independent draw from the same per-entry distribution as ``G``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Samples per random sub-stream; see ``sample_batch``.
CHUNK_SIZE = 1024

# Consumer roles for sub-stream derivation.
ROLE_GAINS = 0
ROLE_NOISE = 1


class ChannelError(ValueError):
    """Invalid channel or CSI-noise input."""


def sigma_bar(sigma) -> np.ndarray:
    """Return ``sqrt(1 - sigma**2)`` elementwise, rejecting entries outside [0, 1]."""
    sigma = np.asarray(sigma, dtype=float)
    bad = ~((sigma >= 0.0) & (sigma <= 1.0))
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ChannelError(f"sigma entry {idx} = {sigma[idx]!r} outside [0, 1]")
    return np.sqrt(1.0 - sigma**2)


@dataclass(frozen=True)
class GainMatrix:
    entries: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.entries, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1] or g.shape[0] < 1:
            raise ChannelError(f"gain matrix must be square with K >= 1, got shape {g.shape}")
        if not np.all(np.isfinite(g)) or np.any(g < 0):
            raise ChannelError("gain entries must be finite and nonnegative")
        object.__setattr__(self, "entries", g)

    @property
    def k_users(self) -> int:
        return self.entries.shape[0]


def default_variance(k_users: int) -> np.ndarray:
    return np.ones((k_users, k_users))


def _check_variance(variance, k_users: int) -> np.ndarray:
    v = np.asarray(variance, dtype=float)
    if v.shape != (k_users, k_users):
        raise ChannelError(f"variance must be {k_users}x{k_users}, got {v.shape}")
    if not np.all(np.isfinite(v)) or np.any(v < 0):
        raise ChannelError("variance entries must be finite and nonnegative")
    return v


@dataclass(frozen=True)
class CsiNoiseSpec:
    """Per-TX noise standard deviations.

    ``shared=True`` draws a single ``Delta`` used by every TX, so identical
    ``sigma`` matrices give identical estimates (the centralized case).
    """

    sigma: tuple
    shared: bool = False
    sigma_bar: tuple = field(init=False)

    def __post_init__(self):
        mats = tuple(np.asarray(s, dtype=float) for s in self.sigma)
        if not mats:
            raise ChannelError("need at least one sigma matrix")
        k = len(mats)
        for j, s in enumerate(mats):
            if s.shape != (k, k):
                raise ChannelError(f"sigma for TX {j} must be {k}x{k}, got {s.shape}")
        object.__setattr__(self, "sigma", mats)
        object.__setattr__(self, "sigma_bar", tuple(sigma_bar(s) for s in mats))

    @property
    def k_users(self) -> int:
        return len(self.sigma)

    @classmethod
    def perfect(cls, k_users: int) -> "CsiNoiseSpec":
        return cls(tuple(np.zeros((k_users, k_users)) for _ in range(k_users)))


@dataclass(frozen=True)
class ChannelSample:
    gains: GainMatrix
    estimates: tuple  # of GainMatrix, estimate held by TX 1..K

    def __post_init__(self):
        k = self.gains.k_users
        if len(self.estimates) != k or any(e.k_users != k for e in self.estimates):
            raise ChannelError("estimates must be K matrices of size KxK")


@dataclass(frozen=True)
class ChannelBatch:
    """``n`` joint draws stored as arrays.

    ``gains`` has shape ``(n, K, K)`` and ``estimates`` has shape
    ``(n, K, K, K)`` with axis 1 indexing the TX holding the estimate.
    """

    gains: np.ndarray
    estimates: np.ndarray

    def __len__(self) -> int:
        return self.gains.shape[0]

    @property
    def k_users(self) -> int:
        return self.gains.shape[1]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return ChannelSample(
                GainMatrix(self.gains[idx]),
                tuple(GainMatrix(e) for e in self.estimates[idx]),
            )
        return ChannelBatch(self.gains[idx], self.estimates[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_samples(cls, samples: Sequence[ChannelSample]) -> "ChannelBatch":
        gains = np.stack([s.gains.entries for s in samples])
        est = np.stack([np.stack([e.entries for e in s.estimates]) for s in samples])
        return cls(gains, est)


def sample_gains(k_users: int, variance=None, rng: np.random.Generator | None = None) -> GainMatrix:
    if k_users < 1:
        raise ChannelError("k_users must be >= 1")
    v = default_variance(k_users) if variance is None else _check_variance(variance, k_users)
    rng = np.random.default_rng() if rng is None else rng
    return GainMatrix(rng.standard_exponential((k_users, k_users)) * v)


def noisy_estimate(gains, sigma, delta) -> np.ndarray:
    """``sigma_bar(sigma) * gains + sigma * delta``, elementwise (broadcasting)."""
    sigma = np.asarray(sigma, dtype=float)
    return sigma_bar(sigma) * gains + sigma * delta


def _mix(gains: np.ndarray, noise: CsiNoiseSpec, delta: np.ndarray) -> np.ndarray:
    # gains (..., K, K); delta (..., K, K, K) indexed [..., tx, i, k]
    return noisy_estimate(gains[..., None, :, :], np.stack(noise.sigma), delta)


def sample_estimates(gains: GainMatrix, noise: CsiNoiseSpec, rng: np.random.Generator | None = None,
                     variance=None) -> list[GainMatrix]:
    """Draw the K per-TX estimates of ``gains``.

    ``variance`` scales ``Delta`` so that ``sigma = 1`` yields an independent
    draw from the same distribution as the gains.
    """
    k = gains.k_users
    if noise.k_users != k:
        raise ChannelError(f"noise spec is for K={noise.k_users}, gains have K={k}")
    v = default_variance(k) if variance is None else _check_variance(variance, k)
    rng = np.random.default_rng() if rng is None else rng
    if noise.shared:
        delta = np.broadcast_to(rng.standard_exponential((k, k)) * v, (k, k, k))
    else:
        delta = rng.standard_exponential((k, k, k)) * v
    est = _mix(gains.entries, noise, delta)
    return [GainMatrix(e) for e in est]


def substream(seed_seq: np.random.SeedSequence, *key: int) -> np.random.Generator:
    """Generator for a child stream identified by ``key`` under ``seed_seq``."""
    child = np.random.SeedSequence(seed_seq.entropy, spawn_key=tuple(seed_seq.spawn_key) + tuple(key))
    return np.random.Generator(np.random.PCG64(child))


def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _sample_chunk(seed_seq, chunk: int, m: int, k: int, v: np.ndarray, noise: CsiNoiseSpec):
    g = substream(seed_seq, chunk, ROLE_GAINS).standard_exponential((m, k, k)) * v
    rng_noise = substream(seed_seq, chunk, ROLE_NOISE)
    if noise.shared:
        delta = np.repeat((rng_noise.standard_exponential((m, k, k)) * v)[:, None], k, axis=1)
    else:
        delta = rng_noise.standard_exponential((m, k, k, k)) * v
    return g, _mix(g, noise, delta)


def sample_batch(n: int, k_users: int, variance, noise: CsiNoiseSpec, seed, jobs: int = 1) -> ChannelBatch:
    """Draw ``n`` independent joint samples.

    Samples are generated in chunks of ``CHUNK_SIZE``; chunk ``c`` uses
    sub-streams keyed by ``(c, role)`` under ``seed``, so the result does not
    depend on ``jobs`` or on generation order.
    """
    if n < 1:
        raise ChannelError("n must be >= 1")
    if noise.k_users != k_users:
        raise ChannelError(f"noise spec is for K={noise.k_users}, expected {k_users}")
    v = default_variance(k_users) if variance is None else _check_variance(variance, k_users)
    seed_seq = as_seed_sequence(seed)
    sizes = [min(CHUNK_SIZE, n - s) for s in range(0, n, CHUNK_SIZE)]
    args = [(seed_seq, c, m, k_users, v, noise) for c, m in enumerate(sizes)]
    if jobs > 1 and len(args) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(lambda a: _sample_chunk(*a), args))
    else:
        parts = [_sample_chunk(*a) for a in args]
    gains = np.concatenate([p[0] for p in parts])
    est = np.concatenate([p[1] for p in parts])
    return ChannelBatch(gains, est)
