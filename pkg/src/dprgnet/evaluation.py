"""Regression metrics, fold assignment and cross-validation."""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, UndefinedMetricError
from .priors import build_priors
from .training import predict_samples, train
from .types import CHANNELS

logger = logging.getLogger(__name__)

MODES = ("step_level", "subject_level")


@dataclass
class MetricsReport:
    """Per-channel Pearson r, RMSE and NRMSE (percent of the target range)."""

    r: np.ndarray
    rmse: np.ndarray
    nrmse: np.ndarray
    channels: tuple = CHANNELS

    @property
    def mean_nrmse(self):
        return float(np.mean(self.nrmse))

    def as_dict(self):
        return {"channels": list(self.channels), "r": self.r.tolist(), "rmse": self.rmse.tolist(),
                "nrmse": self.nrmse.tolist()}


def _flatten(a):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, a.shape[-1])


def compute_metrics(pred, target, normalizer="range"):
    """Metrics per channel over all frames of all samples concatenated.

    Args:
        pred, target: ``M x L x C`` arrays (any leading shape works).
        normalizer: ``"range"`` divides RMSE by the target's max minus min,
            ``"mean"`` by the absolute target mean.

    Raises:
        UndefinedMetricError: a target channel is constant, so NRMSE (and r)
            are undefined.
    """
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"prediction {pred.shape} and target {target.shape} differ")
    if pred.ndim == 3 and pred.shape[0] < 2:
        raise ContractError("compute_metrics needs at least 2 samples")
    p, t = _flatten(pred), _flatten(target)
    err = p - t
    rmse = np.sqrt(np.mean(err * err, axis=0))
    if normalizer == "range":
        scale = t.max(axis=0) - t.min(axis=0)
    elif normalizer == "mean":
        scale = np.abs(t.mean(axis=0))
    else:
        raise ContractError(f"unknown normalizer {normalizer!r}")
    bad = np.nonzero(scale <= 0)[0]
    if bad.size:
        names = ", ".join(CHANNELS[i] if i < len(CHANNELS) else str(i) for i in bad)
        raise UndefinedMetricError(f"NRMSE undefined: zero target {normalizer} for channel(s) {names}")
    nrmse = rmse / scale * 100.0
    pc, tc = p - p.mean(axis=0), t - t.mean(axis=0)
    denom = np.sqrt((pc * pc).sum(axis=0) * (tc * tc).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, (pc * tc).sum(axis=0) / denom, 0.0)
    r = np.clip(r, -1.0, 1.0)
    channels = CHANNELS if p.shape[1] == len(CHANNELS) else tuple(str(i) for i in range(p.shape[1]))
    return MetricsReport(r, rmse, nrmse, channels)


@dataclass
class FoldAssignment:
    k: int
    mode: str
    folds: np.ndarray

    def indices(self, fold):
        return np.nonzero(self.folds == fold)[0]

    def split(self, fold):
        """``(train_indices, held_out_indices)`` for one fold."""
        return np.nonzero(self.folds != fold)[0], self.indices(fold)


def normalize_mode(mode):
    aliases = {"step": "step_level", "subject": "subject_level"}
    mode = aliases.get(mode, mode)
    if mode not in MODES:
        raise ContractError(f"unknown fold mode {mode!r}; choose step_level or subject_level")
    return mode


def make_folds(samples, k=5, mode="step_level", seed=0):
    """Assign every sample to one of ``k`` folds.

    ``step_level`` shuffles samples and deals them round-robin;
    ``subject_level`` shuffles subjects and deals whole subjects round-robin.
    """
    mode = normalize_mode(mode)
    if k < 2:
        raise ContractError("k must be at least 2")
    n = len(samples)
    if n < k:
        raise ContractError(f"{n} samples cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    if mode == "step_level":
        folds[rng.permutation(n)] = np.arange(n) % k
        return FoldAssignment(k, mode, folds)
    ids = [s.subject_id for s in samples]
    subjects = sorted(set(ids))
    if len(subjects) < k:
        raise ContractError(f"subject-level folds need at least {k} subjects, got {len(subjects)}")
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    fold_of = {sid: i % k for i, sid in enumerate(order)}
    folds[:] = [fold_of[sid] for sid in ids]
    return FoldAssignment(k, mode, folds)


@dataclass
class FoldResult:
    fold: int
    metrics: MetricsReport
    baseline: MetricsReport
    best_epoch: int
    history: list


@dataclass
class CVReport:
    """Per-fold metrics with mean and standard deviation (across folds, ``ddof=1``)."""

    variant: str
    mode: str
    folds: list = field(default_factory=list)

    def _stack(self, name, source="metrics"):
        return np.stack([getattr(getattr(f, source), name) for f in self.folds])

    def mean(self, name, source="metrics"):
        return self._stack(name, source).mean(axis=0)

    def sd(self, name, source="metrics"):
        values = self._stack(name, source)
        if len(values) < 2:
            return np.zeros(values.shape[1])
        return values.std(axis=0, ddof=1)

    def fold_mean_nrmse(self, source="metrics"):
        """Six-channel mean NRMSE of each fold."""
        return self._stack("nrmse", source).mean(axis=1)

    def table(self):
        """Plain-text summary: one row per fold, then mean (SD)."""
        lines = [f"{'fold':>6} " + " ".join(f"{c:>16}" for c in CHANNELS) + f" {'mean':>8}"]
        for f in self.folds:
            lines.append(f"{f.fold:>6} " + " ".join(f"{v:16.3f}" for v in f.metrics.nrmse)
                         + f" {f.metrics.mean_nrmse:8.3f}")
        m, s = self.mean("nrmse"), self.sd("nrmse")
        lines.append(f"{'mean':>6} " + " ".join(f"{a:9.3f} ({b:.2f})" for a, b in zip(m, s))
                     + f" {float(np.mean(m)):8.3f}")
        return "\n".join(lines)

    def as_dict(self):
        return {
            "variant": self.variant,
            "mode": self.mode,
            "folds": [{"fold": f.fold, "best_epoch": f.best_epoch, **f.metrics.as_dict()} for f in self.folds],
            "mean": {k: self.mean(k).tolist() for k in ("r", "rmse", "nrmse")},
            "sd": {k: self.sd(k).tolist() for k in ("r", "rmse", "nrmse")},
        }


def constant_predictor(train_samples, held_out):
    """Predict the training-set per-channel mean at every frame."""
    mean = np.mean([s.targets for s in train_samples], axis=(0, 1))
    return np.broadcast_to(mean, (len(held_out),) + held_out[0].targets.shape).copy()


def run_fold(model_config, samples, assignment, fold, train_config, global_priors=None):
    """Train on every fold but ``fold`` and score the held-out fold.

    The held-out fold also serves as the early-stopping validation set.
    Priors come from the training portion unless ``global_priors`` is given.
    """
    from dataclasses import replace

    tr_idx, te_idx = assignment.split(fold)
    train_s = [samples[i] for i in tr_idx]
    test_s = [samples[i] for i in te_idx]
    cfg = replace(train_config, seed=train_config.seed + fold)
    priors = global_priors if global_priors is not None else build_priors(train_s)
    result = train(model_config, train_s, test_s, priors, cfg)
    pred = predict_samples(result.params, model_config, test_s, result.prior, result.scaler)
    target = np.stack([s.targets for s in test_s])
    metrics = compute_metrics(pred, target)
    baseline = compute_metrics(constant_predictor(train_s, test_s), target)
    logger.info("fold %d %s mean NRMSE %.3f (constant %.3f)", fold, model_config.variant,
                metrics.mean_nrmse, baseline.mean_nrmse)
    return FoldResult(fold, metrics, baseline, result.best_epoch, result.history)


def _run_fold_star(args):
    return run_fold(*args)


def cross_validate(model_config, samples, train_config, mode="step_level", k=5, fold_seed=0,
                   global_priors=False, workers=1):
    """k-fold cross-validation; fold ``i`` trains with seed ``train_config.seed + i``.

    Args:
        global_priors: build priors once from every sample instead of from
            each training portion.
        workers: run folds in this many processes (1 runs them in order).
    """
    mode = normalize_mode(mode)
    assignment = make_folds(samples, k, mode, fold_seed)
    shared = build_priors(samples) if global_priors else None
    jobs = [(model_config, samples, assignment, f, train_config, shared) for f in range(k)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_fold_star, jobs))
    else:
        results = [_run_fold_star(j) for j in jobs]
    return CVReport(model_config.variant, mode, results)
