"""Optimization and evaluation harness.

Adam with weight decay drives the classifier parameters; a plateau
scheduler halves the learning rate after `patience` consecutive epochs
without a strict improvement of the epoch-mean training loss. On top of
the single training loop sit k-fold cross-validation, the alpha/beta
grid sweep, and Welch's t-test for comparing accuracy samples.

Weight decay and the loss-side L2 term cover the same regularizer; only
one should be active. The default keeps decay in the optimizer
(weight_decay=5e-2) and the loss term off (hp.l2_coeff=0).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import model as md
from .autodiff import Tape, Tensor
from . import autodiff as ad
from .model import HyperParams, KnowledgeBundle, ModelParams
from .textdata import EncodedArticle, make_folds


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-2
    batch_size: int = 16
    epochs: int = 50
    patience: int = 5
    lr_factor: float = 0.5
    seed: int = 0
    hp: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not (0.0 < self.lr_factor < 1.0):
            raise ValueError(f"lr_factor must lie in (0, 1), got {self.lr_factor}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class EpochReport:
    epoch: int
    loss: float
    val_acc: float  # nan when no validation set was given
    lr: float
    secs: float

    def to_json_dict(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "val_acc": self.val_acc,
                "lr": self.lr, "secs": self.secs}


@dataclass
class CvReport:
    fold_accuracies: list[float]
    mean: float
    std: float


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

class AdamState:
    """First/second moment estimates plus step counts, keyed by parameter name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}


def adam_step(
    params: Sequence[tuple[str, Tensor]],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
):
    """Bias-corrected Adam update, in place.

    Weight decay enters as an additive gradient term g + wd*x (classic L2
    coupling), so it must stay off when the loss already carries an L2 term.
    """
    b1, b2 = betas
    for (name, tensor), grad in zip(params, grads):
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        g = grad + weight_decay * tensor.data if weight_decay != 0.0 else grad
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / (1.0 - b1 ** t)
        v_hat = state.v[name] / (1.0 - b2 ** t)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# --------------------------------------------------------------------------
# Plateau scheduler
# --------------------------------------------------------------------------

@dataclass
class PlateauState:
    lr: float
    patience: int
    factor: float
    best: float = np.inf
    bad_epochs: int = 0


def plateau_step(state: PlateauState, epoch_loss: float) -> float:
    """Track the best loss; halve the lr after `patience` non-improving epochs.

    Improvement means strictly smaller than the best loss seen so far. The
    counter resets on improvement and after every reduction.
    """
    if not np.isfinite(epoch_loss):
        raise ValueError(f"epoch loss must be finite, got {epoch_loss}")
    if epoch_loss < state.best:
        state.best = epoch_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr *= state.factor
            state.bad_epochs = 0
    return state.lr


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

def train(
    dataset: list[EncodedArticle],
    bundle: KnowledgeBundle,
    cfg: TrainConfig,
    val_dataset: Optional[list[EncodedArticle]] = None,
) -> tuple[ModelParams, list[EpochReport]]:
    """Mini-batch training; returns final parameters and one report per epoch.

    Shuffling, initialisation, and therefore every report field except
    wall-clock seconds are fully determined by (cfg, seed).
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    hp = cfg.hp
    params = md.init_params(bundle.n_words, hp, seed=cfg.seed)
    named = list(params.named())
    state = AdamState()
    sched = PlateauState(lr=cfg.lr, patience=cfg.patience, factor=cfg.lr_factor)
    rng = np.random.default_rng(cfg.seed)
    reports: list[EpochReport] = []

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = rng.permutation(len(dataset))
        total_loss = 0.0
        lr_used = sched.lr
        for lo in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[lo : lo + cfg.batch_size]]
            with Tape() as tape:
                per_example = []
                for article in batch:
                    probs = md.predict(article, params, bundle, hp)
                    per_example.append(md.cross_entropy(probs, article.label))
                batch_loss = per_example[0]
                for extra in per_example[1:]:
                    batch_loss = ad.add(batch_loss, extra)
                batch_loss = ad.scale(batch_loss, 1.0 / len(batch))
                if hp.l2_coeff != 0.0:
                    reg = None
                    for _, t in named:
                        term = ad.sum_all(ad.mul(t, t))
                        reg = term if reg is None else ad.add(reg, term)
                    batch_loss = ad.add(batch_loss, ad.scale(reg, hp.l2_coeff))
                tape.backward(batch_loss)
            total_loss += float(batch_loss.data) * len(batch)
            adam_step(named, [t.grad for _, t in named], state, lr_used,
                      weight_decay=cfg.weight_decay)
            params.zero_grads()
        epoch_loss = total_loss / len(dataset)
        plateau_step(sched, epoch_loss)
        val_acc = (evaluate_accuracy(params, bundle, val_dataset, hp)
                   if val_dataset else float("nan"))
        reports.append(EpochReport(epoch, epoch_loss, val_acc, lr_used,
                                   time.perf_counter() - start))
    return params, reports


def evaluate_accuracy(
    params: ModelParams,
    bundle: KnowledgeBundle,
    dataset: list[EncodedArticle],
    hp: HyperParams,
) -> float:
    """Fraction of articles whose argmax prediction matches the label.

    Ties go to the lowest class id (numpy argmax takes the first maximum).
    """
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    hits = 0
    for article in dataset:
        probs = md.predict(article, params, bundle, hp)
        if int(np.argmax(probs.data)) == article.label:
            hits += 1
    return hits / len(dataset)


def cross_validate(
    corpus: list[EncodedArticle],
    bundle: KnowledgeBundle,
    k: int,
    cfg: TrainConfig,
    jobs: int = 1,
) -> CvReport:
    """Train on each fold's complement and evaluate on the fold.

    Folds come from make_folds(len(corpus), k, cfg.seed). Fold runs share
    nothing but the read-only corpus, so they may run on a thread pool;
    results are merged in fold order either way.
    """
    folds = make_folds(len(corpus), k, cfg.seed)

    def run_fold(fold):
        held = set(fold)
        train_set = [a for i, a in enumerate(corpus) if i not in held]
        val_set = [corpus[i] for i in fold]
        params, _ = train(train_set, bundle, cfg)
        return evaluate_accuracy(params, bundle, val_set, cfg.hp)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            accuracies = list(pool.map(run_fold, folds))
    else:
        accuracies = [run_fold(fold) for fold in folds]
    mean = float(np.mean(accuracies))
    std = float(np.std(accuracies, ddof=1)) if len(accuracies) > 1 else 0.0
    return CvReport(accuracies, mean, std)


DEFAULT_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)


def sweep_alpha_beta(
    corpus: list[EncodedArticle],
    bundle: KnowledgeBundle,
    cfg: TrainConfig,
    alphas: Sequence[float] = DEFAULT_GRID,
    betas: Sequence[float] = DEFAULT_GRID,
    folds: int = 0,
    val_fraction: float = 0.25,
) -> np.ndarray:
    """Accuracy for every (alpha, beta) cell; rows follow alphas ascending.

    With folds >= 2 each cell runs a cross-validation; otherwise a single
    deterministic train/validation split (the same split for every cell).
    """
    for value in list(alphas) + list(betas):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"grid values must lie in [0, 1], got {value}")
    grid = np.zeros((len(alphas), len(betas)))
    order = np.random.default_rng(cfg.seed).permutation(len(corpus))
    n_val = max(1, int(round(len(corpus) * val_fraction)))
    val_idx = set(order[:n_val].tolist())
    train_set = [a for i, a in enumerate(corpus) if i not in val_idx]
    val_set = [corpus[i] for i in sorted(val_idx)]

    for i, alpha in enumerate(alphas):
        for j, beta in enumerate(betas):
            cell_cfg = replace(cfg, hp=replace(cfg.hp, alpha=alpha, beta=beta))
            if folds >= 2:
                grid[i, j] = cross_validate(corpus, bundle, folds, cell_cfg).mean
            else:
                params, _ = train(train_set, bundle, cell_cfg)
                grid[i, j] = evaluate_accuracy(params, bundle, val_set, cell_cfg.hp)
    return grid


# --------------------------------------------------------------------------
# Significance testing
# --------------------------------------------------------------------------

def welch_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> tuple[float, float]:
    """Welch's unequal-variance t statistic and two-sided p-value.

    Degenerate convention: if both samples have zero variance, p is 1.0
    for equal means and 0.0 otherwise.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 observations")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        if a.mean() == b.mean():
            return 0.0, 1.0
        return float("inf") if a.mean() > b.mean() else float("-inf"), 0.0
    se_sq = va / a.size + vb / b.size
    t_stat = (a.mean() - b.mean()) / np.sqrt(se_sq)
    df = se_sq ** 2 / (
        (va / a.size) ** 2 / (a.size - 1) + (vb / b.size) ** 2 / (b.size - 1)
    )
    p = 2.0 * float(stats.t.sf(abs(t_stat), df))
    return float(t_stat), p
