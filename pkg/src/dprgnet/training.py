"""Losses, AdamW, cosine schedule and the training loop with early stopping."""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ops
from .encodings import batch_cop
from .errors import ContractError, DivergenceError
from .model import DOWNSAMPLE, attention_prior, empty_prior, init_parameters, model_forward

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_epochs: int = 60
    patience: int = 10
    base_lr: float = 1e-3
    min_lr: float = 5e-6
    weight_decay: float = 1e-2
    batch_size: int = 32
    prior_coeff: float = 0.1
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    standardize_targets: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ContractError("max_epochs and batch_size must be positive")
        if self.patience < 0 or self.patience > self.max_epochs:
            raise ContractError(f"patience must lie in [0, max_epochs], got {self.patience}")
        if not 0 < self.min_lr <= self.base_lr:
            raise ContractError(f"need 0 < min_lr <= base_lr, got {self.min_lr} and {self.base_lr}")
        if self.prior_coeff < 0 or self.weight_decay < 0:
            raise ContractError("prior_coeff and weight_decay must be non-negative")

    def to_dict(self):
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


# -- losses ------------------------------------------------------------------


def mse_loss(pred, target):
    """Mean squared error over every element."""
    pred = ad.as_tensor(pred)
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"mse_loss: prediction {pred.shape} and target {target.shape} differ")
    diff = ops.sub(pred, target)
    return ops.mean(ops.mul(diff, diff))


def pooled_cells(pressure, factor=DOWNSAMPLE):
    """Average-pool ``B x L x H x W`` pressure into ``B x L x N`` encoder cells."""
    p = np.asarray(pressure, dtype=np.float64)
    b, l, h, w = p.shape
    cells = p.reshape(b, l, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    return cells.reshape(b, l, -1)


def prior_regularization(attention, pressure, prior_P, epsilon=1e-6, cells=None):
    """Mean over frames of ``KL(P_t || a_t)``.

    ``a_t`` holds, for every region, the attention-weighted mean of the cell
    pressures under that region's weight row, smoothed by ``epsilon`` and
    normalised over regions.

    Args:
        attention: ``B x L x R x N`` tensor of attention weights.
        pressure: ``B x L x H x W`` input pressure (ignored when ``cells`` given).
        prior_P: ``L x R`` row-stochastic target.
        cells: optional precomputed ``B x L x N`` cell pressures.
    """
    attention = ad.as_tensor(attention)
    b, l, r, n = attention.shape
    if cells is None:
        cells = pooled_cells(pressure)
    cells = np.asarray(cells, dtype=np.float64)
    prior_P = np.asarray(prior_P, dtype=np.float64)
    if cells.shape != (b, l, n):
        raise ContractError(f"cell pressures {cells.shape} do not match attention {attention.shape}")
    if prior_P.shape != (l, r):
        raise ContractError(f"prior {prior_P.shape} does not match (L, R) = {(l, r)}")
    act = ops.reshape(ops.matmul(attention, cells.reshape(b, l, n, 1)), (b, l, r))
    act = ops.add(act, epsilon)
    act = ops.div(act, ops.expand(ops.sum(act, axis=-1, keepdims=True), (b, l, r)))
    target = np.ascontiguousarray(np.broadcast_to(prior_P, (b, l, r)))
    # elementwise P (log P - log a) keeps the sum small near the optimum
    gap = ops.sub(np.log(target), ops.log(act))
    return ops.mul(ops.sum(ops.mul(gap, target)), 1.0 / (b * l))


def total_loss(pred, target, attention=None, pressure=None, prior_P=None, beta=0.1, cells=None, epsilon=1e-6):
    """``mse + beta * prior_regularization``; the prior term is dropped when ``beta`` is 0 or there is no attention."""
    loss = mse_loss(pred, target)
    if beta == 0 or attention is None or prior_P is None:
        return loss
    reg = prior_regularization(attention, pressure, prior_P, epsilon, cells)
    return ops.add(loss, ops.mul(reg, float(beta)))


# -- optimisation ------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return AdamState(self.step, {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One AdamW update, in place on ``params`` (a ``name -> Tensor`` map).

    Decay ``p -= lr * weight_decay * p`` is applied separately from the
    bias-corrected adaptive step. Missing gradients count as zero.
    """
    b1, b2 = betas
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m.setdefault(name, np.zeros(p.shape))
        v = state.v.setdefault(name, np.zeros(p.shape))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def cosine_lr(epoch, config):
    if not 0 <= epoch < config.max_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {config.max_epochs})")
    return config.min_lr + 0.5 * (config.base_lr - config.min_lr) * (1.0 + math.cos(math.pi * epoch / config.max_epochs))


class EarlyStopping:
    """Track the best validation loss; ``update`` returns True once the run should stop.

    A run stops after more than ``patience`` consecutive epochs without a
    strict improvement.
    """

    def __init__(self, patience, best=math.inf, best_epoch=-1, bad_epochs=0):
        self.patience = patience
        self.best = best
        self.best_epoch = best_epoch
        self.bad_epochs = bad_epochs

    def update(self, epoch, val_loss):
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs > self.patience

    @property
    def improved_last(self):
        return self.bad_epochs == 0


# -- data plumbing -----------------------------------------------------------


@dataclass
class Arrays:
    pressure: np.ndarray
    targets: np.ndarray
    cop: np.ndarray
    cells: np.ndarray

    def __len__(self):
        return self.pressure.shape[0]

    def take(self, idx):
        return Arrays(self.pressure[idx], self.targets[idx], self.cop[idx], self.cells[idx])


def stack_samples(samples):
    if not samples:
        raise ContractError("need at least one sample")
    pressure = np.stack([s.pressure for s in samples])
    targets = np.stack([s.targets for s in samples])
    return Arrays(pressure, targets, batch_cop(pressure), pooled_cells(pressure))


@dataclass
class TargetScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, targets, enabled=True):
        flat = targets.reshape(-1, targets.shape[-1])
        if not enabled:
            return cls(np.zeros(flat.shape[1]), np.ones(flat.shape[1]))
        std = flat.std(axis=0)
        return cls(flat.mean(axis=0), np.where(std > 0, std, 1.0))

    def forward(self, y):
        return (y - self.mean) / self.std

    def inverse(self, y):
        return y * self.std + self.mean


@dataclass
class TrainState:
    """Everything needed to resume: optimiser, early-stopping book-keeping, best snapshot."""

    epoch: int
    adam: AdamState
    best_loss: float
    best_epoch: int
    bad_epochs: int
    best_params: dict
    history: list
    scaler: TargetScaler


@dataclass
class TrainResult:
    params: object
    history: list
    best_epoch: int
    best_loss: float
    state: TrainState
    prior: object
    scaler: TargetScaler
    stopped_early: bool = False


def _loss_for(out, batch, scaler, prior_P, beta, config):
    target = scaler.forward(batch.targets)
    attn = out.attention if config.has_path_a else None
    return total_loss(out.y_hat, target, attn, None, prior_P, beta, cells=batch.cells)


def evaluate_loss(params, config, arrays, scaler, prior, batch_size=64):
    """Validation MSE in inference mode (standardised target units)."""
    total = 0.0
    count = 0
    with ad.no_grad():
        for start in range(0, len(arrays), batch_size):
            batch = arrays.take(slice(start, start + batch_size))
            out = model_forward(batch.pressure, batch.cop, params, config, prior, training=False)
            err = out.y_hat.data - scaler.forward(batch.targets)
            total += float(np.sum(err * err))
            count += err.size
    return total / count


def train(model_config, train_samples, val_samples, prior_artifacts, train_config, resume=None,
          stop_after_epoch=None, init_params=None):
    """Fit ``model_config`` with AdamW and cosine annealing, keeping the best-validation snapshot.

    Args:
        model_config: :class:`ModelConfig`.
        train_samples, val_samples: lists of :class:`StanceSample`.
        prior_artifacts: :class:`PriorArtifacts` from the training portion (may
            be ``None`` for variants without the attention path).
        train_config: :class:`TrainConfig`.
        resume: optional ``(params, TrainState)`` to continue from.
        stop_after_epoch: halt (without restoring the best snapshot) after this
            epoch index, leaving a resumable state; used for checkpointing.

    Returns:
        :class:`TrainResult` whose ``params`` are the best-validation weights.

    Raises:
        DivergenceError: the training loss became non-finite; ``last_good``
            holds the best snapshot so far.
    """
    if not train_samples or not val_samples:
        raise ContractError("train and validation splits must both be non-empty")
    cfg = train_config
    tr = stack_samples(train_samples)
    va = stack_samples(val_samples)
    grid = tr.pressure.shape[2:]
    if grid != (model_config.grid_h, model_config.grid_w):
        raise ContractError(f"sample grid {grid} does not match model grid {(model_config.grid_h, model_config.grid_w)}")

    if model_config.has_path_a and prior_artifacts is not None:
        prior = attention_prior(prior_artifacts.partition.labels, model_config)
        prior_P = prior_artifacts.prior.P
        beta = cfg.prior_coeff
    else:
        prior = empty_prior(model_config)
        prior_P, beta = None, 0.0

    if resume is not None:
        params, state = resume
        params = params.copy()
        state = TrainState(state.epoch, state.adam.copy(), state.best_loss, state.best_epoch, state.bad_epochs,
                           {k: v.copy() for k, v in state.best_params.items()}, list(state.history), state.scaler)
        start = state.epoch + 1
    else:
        params = init_params.copy() if init_params is not None else init_parameters(model_config, cfg.seed)
        scaler = TargetScaler.fit(tr.targets, cfg.standardize_targets)
        state = TrainState(-1, AdamState(), math.inf, -1, 0, params.state(), [], scaler)
        start = 0
    scaler = state.scaler
    stopper = EarlyStopping(cfg.patience, state.best_loss, state.best_epoch, state.bad_epochs)
    stopped = False

    for epoch in range(start, cfg.max_epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        lr = cosine_lr(epoch, cfg)
        order = rng.permutation(len(tr))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            batch = tr.take(np.sort(order[s:s + cfg.batch_size]))
            params.zero_grad()
            out = model_forward(batch.pressure, batch.cop, params, model_config, prior, training=True, rng=rng)
            loss = _loss_for(out, batch, scaler, prior_P, beta, model_config)
            value = loss.item()
            if not math.isfinite(value):
                from .model import ParameterStore
                raise DivergenceError(f"training loss became {value} at epoch {epoch}",
                                      last_good=ParameterStore.from_state(state.best_params))
            ad.backpropagate(loss)
            grads = {k: p.grad for k, p in params.params.items()}
            adamw_step(params.params, grads, state.adam, lr, cfg.betas, cfg.eps, cfg.weight_decay)
            losses.append(value * len(batch))
        train_loss = float(np.sum(losses) / len(tr))
        val_loss = evaluate_loss(params, model_config, va, scaler, prior)
        stop = stopper.update(epoch, val_loss)
        if stopper.improved_last:
            state.best_params = params.state()
        state.history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss})
        state.epoch = epoch
        state.best_loss, state.best_epoch, state.bad_epochs = stopper.best, stopper.best_epoch, stopper.bad_epochs
        logger.debug("epoch %d lr %.3g train %.5f val %.5f", epoch, lr, train_loss, val_loss)
        if stop:
            stopped = True
            logger.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            return TrainResult(params, state.history, state.best_epoch, state.best_loss, state, prior, scaler)

    from .model import ParameterStore
    best = ParameterStore.from_state(state.best_params)
    return TrainResult(best, state.history, state.best_epoch, state.best_loss, state, prior, scaler, stopped)


def predict_samples(params, model_config, samples, prior, scaler, batch_size=64):
    """Inference-mode predictions in physical (normalised-by-body-weight) units, ``M x L x 6``."""
    arrays = stack_samples(samples)
    outs = []
    with ad.no_grad():
        for start in range(0, len(arrays), batch_size):
            batch = arrays.take(slice(start, start + batch_size))
            out = model_forward(batch.pressure, batch.cop, params, model_config, prior, training=False)
            outs.append(scaler.inverse(out.y_hat.data))
    return np.concatenate(outs)


def model_gradcheck(variant, seed=0, step=1e-5, model_config=None, batch=2):
    """Largest finite-difference disagreement over every element of every parameter.

    Runs the ``gradcheck`` preset (or ``model_config``) in training mode on a
    random ``batch``-sample input with ``total_loss`` (prior term included for
    the attention variant). Dropout masks are re-drawn from the same seed on
    every evaluation so the loss is a deterministic function of the weights.

    Returns:
        ``(worst_error, per_parameter)`` where ``per_parameter`` maps names to errors.
    """
    from .autodiff import finite_difference_check, no_grad
    from .model import attention_prior, preset
    from .priors import NUM_REGIONS

    config = model_config or preset("gradcheck", variant)
    rng = np.random.default_rng(seed)
    params = init_parameters(config, seed)
    for p in params.params.values():
        # move off the symmetric initial values (unit BN scale, zero shift, unit forget bias)
        p.data += rng.normal(0.0, 0.1, p.shape)
    l, h, w = config.stance_len, config.grid_h, config.grid_w
    pressure = rng.uniform(0.1, 1.0, (batch, l, h, w))
    cop = batch_cop(pressure)
    labels = rng.integers(-1, NUM_REGIONS, (h, w))
    prior = attention_prior(labels, config)
    cells = pooled_cells(pressure)
    beta = 0.1 if config.has_path_a else 0.0

    def forward():
        out = model_forward(pressure, cop, params, config, prior, training=True, rng=np.random.default_rng(seed + 1))
        return out.y_hat, (out.attention if config.has_path_a else None)

    # Targets and prior sit close to the model's own output so the loss is
    # small; a loss near 1 leaves one-ulp noise that swamps tiny gradients.
    with no_grad():
        y0, a0 = forward()
        target = y0.data + rng.normal(0.0, 0.05, y0.shape)
        if a0 is not None:
            act = np.einsum("blrn,bln->lr", a0.data, cells) + 1e-6
            P = act * np.exp(rng.normal(0.0, 0.05, act.shape))
        else:
            P = rng.uniform(0.1, 1.0, (l, NUM_REGIONS))
        P /= P.sum(axis=1, keepdims=True)

    def loss_fn(_):
        y_hat, attn = forward()
        return total_loss(y_hat, target, attn, None, P, beta, cells=cells)

    errors = {}
    for name, p in params.params.items():
        errors[name] = finite_difference_check(loss_fn, p, step)
    return max(errors.values()), errors


NUM_OUTPUTS_ = 6
