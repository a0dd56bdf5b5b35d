"""Pretraining, joint (collaborative) training, locally-robust training and
Monte-Carlo evaluation of decentralized scheduling policies."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import neural as nn
from ._alloc import tune_allocator
from .channel import ChannelBatch, as_seed_sequence, substream
from .rates import exhaustive_best, relaxed_sum_rate_with_grad, sum_rate

log = logging.getLogger(__name__)

# Sub-stream roles under the training seed.
ROLE_INIT = 10
ROLE_PRETRAIN = 11
ROLE_JOINT = 12
ROLE_LOCAL = 13

CDNN = "cdnn"
LOCALLY_ROBUST = "locally_robust"


@dataclass(frozen=True)
class TrainConfig:
    n_train: int = 30000
    batch_size: int = 5000
    steps: int = 10000
    learning_rate: float = 1e-3
    dropout_rate: float = 0.5
    seed: int = 0
    pretrain_steps: int = 500
    pretrain_labels_from: str = "estimate"
    hidden_layers: tuple = (30, 30, 30)
    p_max: float = 1.0
    noise_power: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if min(self.n_train, self.batch_size, self.steps) < 1:
            raise ValueError("n_train, batch_size and steps must be >= 1")
        if self.batch_size > self.n_train:
            raise ValueError(f"batch_size {self.batch_size} exceeds n_train {self.n_train}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.pretrain_steps < 0:
            raise ValueError("pretrain_steps must be >= 0")
        if self.pretrain_labels_from not in ("estimate", "truth"):
            raise ValueError("pretrain_labels_from must be 'estimate' or 'truth'")

    def architecture(self, k_users: int, n_outputs: int = 1) -> nn.MlpArchitecture:
        return nn.MlpArchitecture((k_users * k_users, *self.hidden_layers, n_outputs), self.dropout_rate)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def flat_inputs(matrices: np.ndarray) -> np.ndarray:
    """``(n, K, K)`` -> row-major ``(n, K*K)``."""
    return matrices.reshape(matrices.shape[0], -1)


@dataclass(frozen=True)
class Policy:
    """One TX's network. Deployment thresholds output ``output_index``."""

    params: nn.MlpParams
    arch: nn.MlpArchitecture
    standardizer: Standardizer
    output_index: int = 0
    threshold: float = 0.5

    def outputs(self, estimates: np.ndarray) -> np.ndarray:
        """Eval-mode outputs ``(n, n_outputs)`` for estimate matrices ``(n, K, K)``."""
        y, _ = nn.forward(self.params, self.standardizer(flat_inputs(estimates)))
        return y

    def decide(self, estimates: np.ndarray) -> np.ndarray:
        """Binary transmit decisions (0/1) of this TX."""
        return (self.outputs(estimates)[:, self.output_index] >= self.threshold).astype(float)


@dataclass(frozen=True)
class PolicySet:
    policies: tuple
    kind: str = CDNN

    def __post_init__(self):
        k = len(self.policies)
        for p in self.policies:
            if p.arch.n_inputs != k * k:
                raise ValueError(f"policy input width {p.arch.n_inputs} != K^2 = {k * k}")

    @property
    def k_users(self) -> int:
        return len(self.policies)

    def decisions(self, batch: ChannelBatch, p_max: float = 1.0) -> np.ndarray:
        """Each TX ``j`` decides from ``estimates[:, j]`` only."""
        cols = [p.decide(batch.estimates[:, j]) for j, p in enumerate(self.policies)]
        return np.stack(cols, axis=1) * p_max


@dataclass(frozen=True)
class EvalReport:
    expected_sum_rate: float
    transmit_fraction: np.ndarray
    n_eval: int
    confidence_halfwidth: float
    rates: np.ndarray = field(repr=False, compare=False, default=None)


def _rng(config: TrainConfig, *key: int) -> np.random.Generator:
    return substream(as_seed_sequence(config.seed), *key)


def _network_inputs(dataset: ChannelBatch, tx_index: int, labels_from: str) -> np.ndarray:
    return dataset.gains if labels_from == "truth" else dataset.estimates[:, tx_index]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless contiguous slices of a permutation, reshuffled every epoch."""
    per_epoch = n // batch_size
    while True:
        perm = rng.permutation(n)
        for b in range(per_epoch):
            yield perm[b * batch_size:(b + 1) * batch_size]


def fit_standardizer(dataset: ChannelBatch, tx_index: int) -> Standardizer:
    """Per-coordinate mean/std of TX ``tx_index``'s flattened estimates."""
    return Standardizer.fit(flat_inputs(dataset.estimates[:, tx_index]))


def pretrain_naive(tx_index: int, arch: nn.MlpArchitecture, dataset: ChannelBatch, config: TrainConfig,
                   standardizer: Standardizer | None = None, all_outputs: bool = False) -> nn.MlpParams:
    """Fit the network of TX ``tx_index`` to the naive decisions by cross-entropy.

    The network input is ``estimates[:, tx_index]`` (or the true gains when
    ``config.pretrain_labels_from == "truth"``) and the labels are the naive
    decision computed on that same matrix. With ``all_outputs`` every one of
    the K outputs is fitted to the matching component of the naive decision
    vector; otherwise the single output is fitted to component ``tx_index``.
    """
    if len(dataset) == 0:
        raise ValueError("empty pretraining dataset")
    role = ROLE_LOCAL if all_outputs else ROLE_PRETRAIN
    params = nn.init_params(arch, _rng(config, ROLE_INIT, role, tx_index), np.dtype(config.dtype))
    if config.pretrain_steps == 0:
        return params
    mats = _network_inputs(dataset, tx_index, config.pretrain_labels_from)
    if standardizer is None:
        standardizer = Standardizer.fit(flat_inputs(mats))
    x = standardizer(flat_inputs(mats)).astype(np.dtype(config.dtype))
    best = exhaustive_best(mats, 1.0, config.noise_power)
    targets = best if all_outputs else best[:, [tx_index]]
    if targets.shape[1] != arch.n_outputs:
        raise ValueError(f"architecture has {arch.n_outputs} outputs, labels have {targets.shape[1]}")

    tune_allocator()
    rng = _rng(config, ROLE_PRETRAIN, role, tx_index)
    batch_size = min(config.batch_size, len(dataset))
    state = nn.AdamState.fresh(params)
    batches = _batches(len(dataset), batch_size, rng)
    for step in range(config.pretrain_steps):
        idx = next(batches)
        y, cache = nn.forward(params, x[idx], train=True, rng=rng, dropout_rate=arch.dropout_rate)
        t = targets[idx]
        loss = -np.mean(t * np.log(np.clip(y, 1e-12, None)) + (1 - t) * np.log(np.clip(1 - y, 1e-12, None)))
        if not np.isfinite(loss):
            raise nn.TrainingDiverged("non-finite pretraining loss", step)
        grads = nn.backward(params, cache, (y - t) / len(idx), wrt_logits=True)
        params, state = nn.adam_step(params, grads, state, config.learning_rate)
    return params


def init_policy_set(train_set: ChannelBatch, config: TrainConfig) -> PolicySet:
    """One naive-pretrained single-output network per TX."""
    k = train_set.k_users
    arch = config.architecture(k)
    policies = []
    for j in range(k):
        std = fit_standardizer(train_set, j)
        params = pretrain_naive(j, arch, train_set, config, standardizer=std)
        policies.append(Policy(params, arch, std))
    return PolicySet(tuple(policies), CDNN)


def joint_objective_and_grads(policies: PolicySet, batch: ChannelBatch, config: TrainConfig,
                              rng: np.random.Generator | None = None, train: bool = False):
    """Batch-mean relaxed sum rate and its gradient for each TX's parameters.

    Network ``j`` sees only ``estimates[:, j]``; ``d objective / d fraction_j``
    is routed back through network ``j`` alone.
    """
    inputs = [pol.standardizer(flat_inputs(batch.estimates[:, j])) for j, pol in enumerate(policies.policies)]
    return _joint_grads(policies, batch.gains, inputs, config, rng, train)


def _joint_grads(policies, gains, inputs, config, rng, train):
    caches, fractions = [], []
    for pol, x in zip(policies.policies, inputs):
        y, cache = nn.forward(pol.params, x, train=train, rng=rng, dropout_rate=pol.arch.dropout_rate)
        caches.append(cache)
        fractions.append(y[:, pol.output_index])
    fractions = np.stack(fractions, axis=1)
    rate, dfrac = relaxed_sum_rate_with_grad(gains, fractions, config.p_max, config.noise_power)
    n = len(gains)
    grads = []
    for j, (pol, cache) in enumerate(zip(policies.policies, caches)):
        dout = np.zeros_like(cache.output)
        dout[:, pol.output_index] = dfrac[:, j] / n
        grads.append(nn.backward(pol.params, cache, dout))
    return float(rate.mean()), grads


def train_joint(policies: PolicySet, train_set: ChannelBatch, config: TrainConfig,
                history: list | None = None, on_checkpoint: Callable | None = None,
                checkpoint_every: int = 1000) -> PolicySet:
    """Run ``config.steps`` Adam ascent steps on the batch-mean relaxed sum rate.

    The batch objective of every step is appended to ``history`` when given.
    ``on_checkpoint(step, policies)`` is called every ``checkpoint_every`` steps.
    """
    tune_allocator()
    rng = _rng(config, ROLE_JOINT)
    states = [nn.AdamState.fresh(p.params) for p in policies.policies]
    batches = _batches(len(train_set), min(config.batch_size, len(train_set)), rng)
    dtype = np.dtype(config.dtype)
    inputs = [pol.standardizer(flat_inputs(train_set.estimates[:, j])).astype(dtype)
              for j, pol in enumerate(policies.policies)]
    for step in range(config.steps):
        idx = next(batches)
        obj, grads = _joint_grads(policies, train_set.gains[idx], [x[idx] for x in inputs], config, rng, True)
        if not np.isfinite(obj):
            raise nn.TrainingDiverged("non-finite objective", step)
        new = []
        for j, (pol, g) in enumerate(zip(policies.policies, grads)):
            try:
                params, states[j] = nn.adam_step(pol.params, g, states[j], config.learning_rate, ascent=True)
            except nn.TrainingDiverged as exc:
                raise nn.TrainingDiverged(str(exc), step) from exc
            new.append(replace(pol, params=params))
        policies = replace(policies, policies=tuple(new))
        if history is not None:
            history.append(obj)
        if on_checkpoint is not None and (step + 1) % checkpoint_every == 0:
            on_checkpoint(step + 1, policies)
        if step % 1000 == 0:
            log.debug("joint step %d objective %.5f", step, obj)
    return policies


def train_locally_robust(tx_index: int, train_set: ChannelBatch, config: TrainConfig,
                         history: list | None = None) -> Policy:
    """K-output network on ``estimates[:, tx_index]`` choosing every TX's power.

    All K relaxed powers come from this one network. The returned policy
    deploys output ``tx_index`` only.
    """
    k = train_set.k_users
    arch = config.architecture(k, n_outputs=k)
    std = fit_standardizer(train_set, tx_index)
    params = pretrain_naive(tx_index, arch, train_set, config, standardizer=std, all_outputs=True)
    pol = Policy(params, arch, std, output_index=tx_index)
    x_all = std(flat_inputs(train_set.estimates[:, tx_index])).astype(np.dtype(config.dtype))

    tune_allocator()
    rng = _rng(config, ROLE_LOCAL, tx_index)
    state = nn.AdamState.fresh(params)
    batches = _batches(len(train_set), min(config.batch_size, len(train_set)), rng)
    for step in range(config.steps):
        idx = next(batches)
        y, cache = nn.forward(params, x_all[idx], train=True, rng=rng, dropout_rate=arch.dropout_rate)
        rate, dfrac = relaxed_sum_rate_with_grad(train_set.gains[idx], y, config.p_max, config.noise_power)
        obj = float(rate.mean())
        if not np.isfinite(obj):
            raise nn.TrainingDiverged("non-finite objective", step)
        grads = nn.backward(params, cache, dfrac / len(idx))
        try:
            params, state = nn.adam_step(params, grads, state, config.learning_rate, ascent=True)
        except nn.TrainingDiverged as exc:
            raise nn.TrainingDiverged(str(exc), step) from exc
        if history is not None:
            history.append(obj)
    return replace(pol, params=params)


def train_locally_robust_set(train_set: ChannelBatch, config: TrainConfig) -> PolicySet:
    pols = tuple(train_locally_robust(j, train_set, config) for j in range(train_set.k_users))
    return PolicySet(pols, LOCALLY_ROBUST)


def local_full_decisions(policy: Policy, estimates: np.ndarray, p_max: float = 1.0) -> np.ndarray:
    """All K thresholded outputs of a locally-robust network (the TX's guess for everyone)."""
    return (policy.outputs(estimates) >= policy.threshold).astype(float) * p_max


# Decision sources: ChannelBatch -> (n, K) powers in {0, p_max}.

def perfect_csi_source(p_max: float = 1.0, noise_power: float = 1.0):
    return lambda batch: exhaustive_best(batch.gains, p_max, noise_power)


def naive_source(p_max: float = 1.0, noise_power: float = 1.0):
    def decide(batch):
        k = batch.k_users
        return np.stack([exhaustive_best(batch.estimates[:, j], p_max, noise_power)[:, j] for j in range(k)], axis=1)
    return decide


def constant_source(decision):
    decision = np.asarray(decision, dtype=float)
    return lambda batch: np.broadcast_to(decision, (len(batch), decision.size))


def policy_source(policies: PolicySet, p_max: float = 1.0):
    return lambda batch: policies.decisions(batch, p_max)


def evaluate_policy(decision_source, eval_set: ChannelBatch, p_max: float = 1.0,
                    noise_power: float = 1.0) -> EvalReport:
    """Monte-Carlo expected sum rate and per-TX transmit frequency."""
    n = len(eval_set)
    if n == 0:
        raise ValueError("empty evaluation set")
    powers = np.asarray(decision_source(eval_set), dtype=float)
    rates = sum_rate(eval_set.gains, powers, noise_power)
    mean = float(rates.mean())
    half = float(1.96 * rates.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    frac = (powers >= p_max).mean(axis=0)
    return EvalReport(mean, frac, n, half, rates)
