"""Ensemble error estimation and iterative correction of age predictions.

An ensemble of small regressors learns, from the image embedding and a
candidate age, the errors that candidate would have against the label
(absolute and squared). At inference those estimates are combined with
the label-free ensemble disagreement through softmax voting weights. When
the combined estimate for the base prediction exceeds the threshold, a
Gaussian candidate generator is nudged toward low estimated error and its
samples compete with the incumbent until the estimate falls below the
threshold or the iteration budget runs out.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .nn import MLP, Linear, ParamSet, param
from .optim import AdamW
from .tensor import ContractError, DimensionError, Tensor


def absolute_error(x, y):
    return np.abs(np.asarray(x, dtype=np.float64) - y)


def squared_error(x, y):
    return np.square(np.asarray(x, dtype=np.float64) - y)


LABELLED_METRICS: tuple[Callable, ...] = (absolute_error, squared_error)


@dataclass
class ErrorVector:
    values: np.ndarray
    k: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not 0 <= self.k <= self.h:
            raise ContractError(f"k={self.k} outside [0, {self.h}]")

    @property
    def h(self) -> int:
        return self.values.shape[-1]


def compute_error_vector(x, y, metrics: Sequence[Callable] = LABELLED_METRICS, k: int = 0) -> ErrorVector:
    """Evaluate each metric E_i(x, y); vectorised over x and y."""
    if not metrics:
        raise ContractError("metric list is empty")
    return ErrorVector(np.stack([m(x, y) for m in metrics], axis=-1), k)


@dataclass
class ErrorWeights(ParamSet):
    logits: Tensor

    @classmethod
    def uniform(cls, h: int) -> "ErrorWeights":
        return cls(param(np.zeros(h)))

    def weights(self) -> Tensor:
        return T.softmax(self.logits, axis=-1)

    def numpy(self) -> np.ndarray:
        return self.weights().data.astype(np.float64)


def weighted_error(e, w: ErrorWeights) -> float:
    values = e.values if isinstance(e, ErrorVector) else np.asarray(e, dtype=np.float64)
    if values.shape[-1] != w.logits.shape[0]:
        raise DimensionError(f"{values.shape[-1]} error components vs {w.logits.shape[0]} weights")
    return values @ w.numpy()


# -- ensemble -----------------------------------------------------------------------------

@dataclass
class EnsembleState(ParamSet):
    """L regressors sharing one architecture: [embedding, scaled age] -> k errors."""

    members: list[MLP]
    target_scale: Tensor
    age_center: float = 40.0
    age_scale: float = 20.0
    steps: int = 0

    @classmethod
    def init(cls, dim: int, k: int = 2, size: int = 5, hidden: int = 64, seed: int = 0,
             age_center: float = 40.0, age_scale: float = 20.0, zero: bool = False) -> "EnsembleState":
        if size < 1:
            raise ContractError("ensemble needs at least one member")
        members = []
        for i in range(size):
            m = MLP.init(np.random.default_rng(seed + 1000 * i), dim + 1, hidden, k)
            if zero:
                m = MLP(Linear(param(np.zeros((dim + 1, hidden))), param(np.zeros(hidden))),
                        Linear(param(np.zeros((hidden, k))), param(np.zeros(k))))
            members.append(m)
        scale = Tensor(np.ones(k))
        return cls(members, scale, age_center, age_scale)

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def k(self) -> int:
        return self.members[0].out.weight.shape[1]

    def state(self, embedding, ages) -> Tensor:
        """Stack embedding(s) [..., D] with candidate age(s) into regressor input."""
        emb = embedding if isinstance(embedding, Tensor) else Tensor(embedding)
        ages = ages if isinstance(ages, Tensor) else Tensor(np.asarray(ages, dtype=np.float32))
        a = (ages - self.age_center) * (1.0 / self.age_scale)
        a = T.expand_dims(a, -1)
        if emb.ndim < a.ndim:
            emb = T.broadcast_to(emb, a.shape[:-1] + emb.shape[-1:])
        return T.concatenate([emb, a], axis=-1)

    def member_outputs(self, state: Tensor) -> list[Tensor]:
        return [m(state) * self.target_scale for m in self.members]


def ensemble_estimate(state: Tensor, ensemble: EnsembleState) -> Tensor:
    """Mean of the member error estimates, shape [..., k]."""
    outs = ensemble.member_outputs(state)
    total = outs[0]
    for o in outs[1:]:
        total = total + o
    return total * (1.0 / len(outs))


def ensemble_disagreement(state: Tensor, ensemble: EnsembleState) -> Tensor:
    """Std across members of the first error slot (label free), shape [..., 1]."""
    outs = [o[..., :1] for o in ensemble.member_outputs(state)]
    if len(outs) == 1:
        return outs[0] * 0.0
    stacked = T.stack(outs, axis=0)
    centered = stacked - T.mean(stacked, axis=0, keepdims=True)
    return T.sqrt(T.mean(T.square(centered), axis=0) + 1e-12)


def cumulative_error(state: Tensor, ensemble: EnsembleState, w: ErrorWeights,
                     explicit: Tensor | None = None) -> Tensor:
    """Weighted implicit estimates plus weighted explicit components.

    The first k weights apply to the ensemble estimates, the rest to
    ``explicit`` (default: ensemble disagreement).
    """
    k = ensemble.k
    h = w.logits.shape[0]
    if explicit is None and h > k:
        explicit = ensemble_disagreement(state, ensemble)
    n_explicit = 0 if explicit is None else explicit.shape[-1]
    if k + n_explicit != h:
        raise DimensionError(f"k={k} implicit + {n_explicit} explicit != h={h}")
    weights = w.weights()
    total = T.tsum(ensemble_estimate(state, ensemble) * weights[:k], axis=-1)
    if n_explicit:
        total = total + T.tsum(explicit * weights[k:], axis=-1)
    return total


def train_ensemble(states: np.ndarray, targets: np.ndarray, ensemble: EnsembleState,
                   steps: int = 500, lr: float = 3e-3, batch: int = 256,
                   weight_decay: float = 1e-4, seed: int = 0,
                   fit_scale: bool = True) -> list[list[float]]:
    """Fit each member to targets e_{1:k} by mean squared distance.

    Members see independently shuffled batches. Returns per-member loss
    curves measured in the scaled target space.
    """
    states = np.asarray(states, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float32)
    if len(states) == 0:
        raise ContractError("ensemble training set is empty")
    if fit_scale:
        rms = np.sqrt(np.mean(np.square(targets), axis=0))
        ensemble.target_scale = Tensor(np.where(rms > 0, rms, 1.0))
    scale = ensemble.target_scale.data
    scaled = targets / scale
    curves = []
    for i, member in enumerate(ensemble.members):
        rng = np.random.default_rng(seed + 7919 * (i + 1))
        opt = AdamW(member.parameters(), lr=lr, weight_decay=weight_decay)
        curve = []
        for _ in range(steps):
            idx = rng.choice(len(states), size=min(batch, len(states)), replace=False)
            pred = member(Tensor(states[idx]))
            loss = T.mean(T.tsum(T.square(pred - scaled[idx]), axis=-1))
            opt.zero_grad()
            loss.backward()
            opt.step()
            curve.append(loss.item())
        curves.append(curve)
    ensemble.steps += steps
    return curves


def fit_error_weights(states: np.ndarray, abs_errors: np.ndarray, ensemble: EnsembleState,
                      w: ErrorWeights, steps: int = 200, lr: float = 0.05) -> float:
    """Vote calibration: fit softmax weights so the cumulative estimate tracks |x - y|."""
    st = Tensor(states)
    target = np.asarray(abs_errors, dtype=np.float32)
    opt = AdamW(w.parameters(), lr=lr, weight_decay=0.0)
    with T.no_grad():
        est = ensemble_estimate(st, ensemble)
        dis = ensemble_disagreement(st, ensemble)
    est, dis = Tensor(est.data), Tensor(dis.data)
    loss = None
    for _ in range(steps):
        weights = w.weights()
        k = ensemble.k
        total = T.tsum(est * weights[:k], axis=-1)
        if w.logits.shape[0] > k:
            total = total + T.tsum(dis * weights[k:], axis=-1)
        loss = T.mean(T.square(total - target))
        opt.zero_grad()
        loss.backward()
        opt.step()
    return float(loss.data)


# -- candidate generation -------------------------------------------------------------------

@dataclass
class CandidateGenerator(ParamSet):
    """Gaussian over age offsets from the base prediction.

    A two-layer net maps [embedding, z] to (mean offset / offset_scale,
    log-scale shift); the output layer starts at zero so the initial
    proposal is N(0, init_scale^2).
    """

    net: MLP
    latent_dim: int = 8
    offset_scale: float = 10.0
    init_scale: float = 4.0

    @classmethod
    def init(cls, dim: int, latent_dim: int = 8, hidden: int = 32, seed: int = 0,
             offset_scale: float = 10.0, init_scale: float = 4.0) -> "CandidateGenerator":
        rng = np.random.default_rng(seed)
        return cls(MLP.init(rng, dim + latent_dim, hidden, 2, zero_out=True),
                   latent_dim, offset_scale, init_scale)

    def distribution(self, embedding, z: np.ndarray) -> tuple[Tensor, Tensor]:
        emb = np.asarray(embedding, dtype=np.float32)
        emb = np.broadcast_to(emb, (len(z), emb.shape[-1]))
        out = self.net(Tensor(np.concatenate([emb, z], axis=-1)))
        mean = out[:, 0] * self.offset_scale
        log_scale = out[:, 1] + float(np.log(self.init_scale))
        return mean, log_scale


def sample_candidates(generator: CandidateGenerator, embedding, base: float,
                      rng: np.random.Generator, k: int) -> tuple[Tensor, dict]:
    """Reparameterised draws base + mu(z) + sigma(z) * n; differentiable in theta."""
    z = rng.standard_normal((k, generator.latent_dim)).astype(np.float32)
    n = rng.standard_normal(k).astype(np.float32)
    mean, log_scale = generator.distribution(embedding, z)
    ages = mean + T.exp(log_scale) * n + float(base)
    return ages, {"z": z, "noise": n, "mean": mean.data, "log_scale": log_scale.data}


def update_generator(generator: CandidateGenerator, estimate: Callable[[Tensor], Tensor],
                     embedding, base: float, rng: np.random.Generator, optimizer: AdamW,
                     k: int = 16) -> tuple[float, np.ndarray]:
    """One optimizer step on the mean estimated error of k sampled candidates.

    Returns the objective before the step and the candidate ages it used.
    """
    ages, _ = sample_candidates(generator, embedding, base, rng, k)
    objective = T.mean(estimate(ages))
    optimizer.zero_grad()
    objective.backward()
    optimizer.step()
    return float(objective.data), ages.data.copy()


def select_candidate(candidates: Sequence[float], estimate: Callable[[Tensor], Tensor],
                     incumbent_error: float | None = None) -> tuple[float, float]:
    """Arg-min of estimated error; candidates[0] is the incumbent and wins ties.

    ``incumbent_error`` reuses the incumbent's earlier estimate: float32
    results can shift in the last bits with batch size, and re-scoring
    would let the selected error creep upward.
    """
    if len(candidates) == 0:
        raise ContractError("no candidates to select from")
    ages = np.asarray(candidates, dtype=np.float32)
    with T.no_grad():
        errors = np.asarray(estimate(Tensor(ages)).data, dtype=np.float64)
    if incumbent_error is not None:
        errors[0] = incumbent_error
    best = int(np.argmin(errors))
    return float(ages[best]), float(errors[best])


# -- loop ---------------------------------------------------------------------------------------

@dataclass
class CorrectionConfig:
    epsilon: float = 2.0
    max_iters: int = 10
    candidates: int = 16
    ensemble_size: int = 5
    k: int = 2
    h: int = 3
    generator_lr: float = 0.05
    latent_dim: int = 8
    min_age: float = 1.0
    max_age: float = 80.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.candidates < 1:
            raise ValueError("candidates must be >= 1")
        if not 0 <= self.k <= self.h:
            raise ValueError("need 0 <= k <= h")


@dataclass
class CorrectionResult:
    age: float
    iterations: int
    trace: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def selected_errors(self) -> list[float]:
        return [e for _, _, e in self.trace]


def make_estimator(embedding, ensemble: EnsembleState, w: ErrorWeights) -> Callable[[Tensor], Tensor]:
    emb = Tensor(np.asarray(embedding, dtype=np.float32))

    def estimate(ages: Tensor) -> Tensor:
        return cumulative_error(ensemble.state(emb, ages), ensemble, w)

    return estimate


def correction_loop(base: float, embedding, ensemble: EnsembleState, w: ErrorWeights,
                    generator: CandidateGenerator, config: CorrectionConfig,
                    rng: np.random.Generator, estimate: Callable | None = None) -> CorrectionResult:
    """Refine one prediction until its estimated error is <= epsilon.

    The generator is copied so the caller's parameters are untouched; within
    the loop it is warm-started from one iteration to the next.
    """
    estimate = estimate or make_estimator(embedding, ensemble, w)
    incumbent, err = select_candidate([base], estimate)
    result = CorrectionResult(incumbent, 0, [(0, incumbent, err)])
    if err <= config.epsilon:
        return result
    gen = copy.deepcopy(generator)
    opt = AdamW(gen.parameters(), lr=config.generator_lr, weight_decay=0.0)
    for it in range(1, config.max_iters + 1):
        update_generator(gen, estimate, embedding, base, rng, opt, config.candidates)
        with T.no_grad():
            ages, _ = sample_candidates(gen, embedding, base, rng, config.candidates)
        pool = np.clip(ages.data, config.min_age, config.max_age)
        incumbent, err = select_candidate([incumbent, *pool.tolist()], estimate, err)
        result.age, result.iterations = incumbent, it
        result.trace.append((it, incumbent, err))
        if err <= config.epsilon:
            break
    return result


def write_trace_csv(path, results: Sequence[CorrectionResult], sample_ids: Sequence[int] | None = None) -> None:
    """Rows: sample id, iteration, candidate age, estimated error."""
    ids = range(len(results)) if sample_ids is None else sample_ids
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample_id", "iteration", "candidate_age", "estimated_error"])
        for sid, res in zip(ids, results):
            for it, age, err in res.trace:
                wr.writerow([sid, it, f"{age:.6f}", f"{err:.6f}"])
