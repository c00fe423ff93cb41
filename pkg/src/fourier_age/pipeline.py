"""End-to-end training, inference and correction on a dataset."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .clip_align import AgeModel, matching_loss
from .config import RunConfig
from .correction import (CandidateGenerator, CorrectionResult, EnsembleState, ErrorWeights,
                         compute_error_vector, correction_loop, fit_error_weights,
                         make_estimator, train_ensemble, update_generator)
from .data import Dataset
from .metrics import cs_metric, mae_metric
from .optim import AdamW
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class Bundle:
    config: RunConfig
    model: AgeModel
    ensemble: EnsembleState | None = None
    weights: ErrorWeights | None = None
    generator: CandidateGenerator | None = None


@dataclass
class MetricsReport:
    mae: float
    cs: float
    cs_threshold: float
    base_mae: float
    mean_predictor_mae: float
    epoch_losses: list[float] = field(default_factory=list)
    val_mae_curve: list[float] = field(default_factory=list)
    bench_slopes: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.mae < 0 or not 0 <= self.cs <= 100:
            raise ValueError("MAE must be >= 0 and CS within [0, 100]")

    def rows(self) -> list[tuple[str, float]]:
        rows = [("mae", self.mae), (f"cs@{self.cs_threshold:g}", self.cs),
                ("base_mae", self.base_mae), ("mean_predictor_mae", self.mean_predictor_mae)]
        rows += [(f"epoch{i + 1}_loss", v) for i, v in enumerate(self.epoch_losses)]
        rows += [(f"epoch{i + 1}_val_mae", v) for i, v in enumerate(self.val_mae_curve)]
        rows += [(f"slope_{k}", v) for k, v in self.bench_slopes.items()]
        return rows


def predict(model: AgeModel, images: np.ndarray, batch: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Base age predictions and pooled embeddings, without recording a tape."""
    ages, embs = [], []
    with T.no_grad():
        for i in range(0, len(images), batch):
            out = model.forward(images[i:i + batch])
            ages.append(np.asarray(out["age"].data if isinstance(out["age"], Tensor) else out["age"]))
            embs.append(out["embedding"].data)
    return np.concatenate(ages).astype(np.float64), np.concatenate(embs)


def train_model(model: AgeModel, config: RunConfig, images: np.ndarray, ages: np.ndarray,
                val: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[list[float], list[float]]:
    """Minimise mean |y - y_hat| + lambda * matching loss with AdamW."""
    oc = config.optimizer
    opt = AdamW(model.parameters(), lr=oc.lr, betas=(oc.beta1, oc.beta2), eps=oc.eps,
                weight_decay=oc.weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    class_ages = model.config.class_ages
    epoch_losses, val_curve = [], []
    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            y = ages[idx]
            out = model.forward(images[idx])
            loss = T.mean(T.absolute(out["age"] - y))
            if config.lambda_match and len(idx) > 1:
                cls = np.searchsorted(class_ages, np.clip(y, class_ages[0], class_ages[-1]))
                texts = out["text_states"][np.arange(len(idx)), cls]
                loss = loss + config.lambda_match * matching_loss(
                    texts, out["embedding"], model.config.tau, model.config.loss_floor)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {b} "
                                   f"(samples {idx[:8].tolist()}...)")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        epoch_losses.append(total / max(count, 1))
        if val is not None:
            pred, _ = predict(model, val[0])
            val_curve.append(mae_metric(pred, val[1]))
            log.info("epoch %d loss %.4f val MAE %.3f", epoch + 1, epoch_losses[-1], val_curve[-1])
    return epoch_losses, val_curve


def fit_corrector(bundle: Bundle, embeddings: np.ndarray, base: np.ndarray, ages: np.ndarray) -> None:
    """Train the error ensemble, voting weights and candidate generator."""
    cfg = bundle.config
    cc, ec = cfg.correction, cfg.ensemble
    lo, hi = float(cc.min_age), float(cc.max_age)
    dim = embeddings.shape[1]
    rng = np.random.default_rng(cfg.seed + 2)
    ens = EnsembleState.init(dim, k=cc.k, size=cc.ensemble_size, hidden=ec.hidden, seed=cfg.seed + 3,
                             age_center=(lo + hi) / 2, age_scale=(hi - lo) / 4)
    m = ec.candidates_per_sample
    near = base[:, None] + rng.normal(0.0, 8.0, size=(len(base), m - m // 2))
    wide = rng.uniform(lo, hi, size=(len(base), m // 2))
    cand = np.clip(np.concatenate([near, wide], axis=1), lo, hi)
    y = np.repeat(ages[:, None], m, axis=1)
    with T.no_grad():
        states = ens.state(np.repeat(embeddings[:, None, :], m, axis=1), cand).data
    states = states.reshape(-1, dim + 1)
    targets = compute_error_vector(cand, y).values.reshape(-1, 2)[:, :cc.k]
    train_ensemble(states, targets, ens, steps=ec.steps, lr=ec.lr, batch=ec.batch, seed=cfg.seed + 4)

    w = ErrorWeights.uniform(cc.h)
    fit_error_weights(states, targets[:, 0], ens, w, steps=ec.weight_steps)

    gen = CandidateGenerator.init(dim, cc.latent_dim, seed=cfg.seed + 5)
    opt = AdamW(gen.parameters(), lr=1e-3, weight_decay=0.0)
    for _ in range(ec.generator_steps):
        i = int(rng.integers(len(base)))
        update_generator(gen, make_estimator(embeddings[i], ens, w), embeddings[i], base[i],
                         rng, opt, cc.candidates)
    bundle.ensemble, bundle.weights, bundle.generator = ens, w, gen


def correct(bundle: Bundle, embeddings: np.ndarray, base: np.ndarray,
            seed: int | None = None) -> tuple[np.ndarray, list[CorrectionResult]]:
    cfg = bundle.config
    rng = np.random.default_rng(cfg.seed + 6 if seed is None else seed)
    results = [correction_loop(float(b), e, bundle.ensemble, bundle.weights, bundle.generator,
                               cfg.correction, rng) for b, e in zip(base, embeddings)]
    return np.array([r.age for r in results]), results


def evaluate(bundle: Bundle, images: np.ndarray, ages: np.ndarray,
             cs_threshold: float | None = None, use_correction: bool | None = None) -> dict:
    cfg = bundle.config
    thr = cfg.cs_threshold if cs_threshold is None else cs_threshold
    base, emb = predict(bundle.model, images)
    use = cfg.error_correction if use_correction is None else use_correction
    final, results = base, []
    if use and bundle.ensemble is not None:
        final, results = correct(bundle, emb, base)
    return {
        "base": base, "final": final, "results": results,
        "base_mae": mae_metric(base, ages), "mae": mae_metric(final, ages),
        "cs": cs_metric(final, ages, thr), "cs_threshold": thr,
    }


def train_pipeline(config: RunConfig, dataset: Dataset, split: str = "val") -> tuple[Bundle, MetricsReport]:
    model = AgeModel.init(config.alignment, seed=config.seed)
    bundle = Bundle(config, model)
    tr_x, tr_y = dataset.split("train")
    va_x, va_y = dataset.split(split)
    losses, curve = train_model(model, config, tr_x, tr_y, (va_x, va_y))
    if config.error_correction:
        base, emb = predict(model, tr_x)
        fit_corrector(bundle, emb, base, tr_y)
    ev = evaluate(bundle, va_x, va_y)
    report = MetricsReport(
        mae=ev["mae"], cs=ev["cs"], cs_threshold=ev["cs_threshold"], base_mae=ev["base_mae"],
        mean_predictor_mae=mae_metric(np.full(len(va_y), tr_y.mean()), va_y),
        epoch_losses=losses, val_mae_curve=curve)
    return bundle, report
