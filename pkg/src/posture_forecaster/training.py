"""Losses, the teacher-forced training loop, and hyperparameter search."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import Checkpoint, Model, Transformer
from .motion.markers import SegmentSpec
from .motion.preprocess import NormalizerStats, WindowSample, fit_normalizer, stack_windows

log = logging.getLogger(__name__)

BEST_COEFFICIENT = {"arms": 10.0, "legs": 1.0}


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 512
    lr: float = 1e-3
    lr_factor: float = 0.1
    lr_patience: int = 5
    min_lr: float = 1e-7
    early_stop_patience: int = 15
    a: float = 0.0
    constraint_space: str = "mm"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.early_stop_patience < 1 or self.lr_patience < 1:
            raise ValueError("epochs, batch size and patience values must be positive")
        if self.lr <= 0 or self.min_lr <= 0 or not 0 < self.lr_factor < 1:
            raise ValueError("learning rates must be positive and the factor in (0, 1)")
        if self.a < 0:
            raise ValueError(f"constraint coefficient must be non-negative, got {self.a}")
        if self.constraint_space not in ("mm", "normalized"):
            raise ValueError(f"constraint_space must be 'mm' or 'normalized', got {self.constraint_space!r}")

    @classmethod
    def for_model(cls, kind: str, **overrides) -> "TrainConfig":
        base = {"blstm": dict(epochs=150, batch_size=256, lr=1e-2),
                "transformer": dict(epochs=200, batch_size=512, lr=1e-3)}[kind]
        return cls(**{**base, **overrides})


# -- losses -------------------------------------------------------------------------


def segment_lengths(frame, pairs) -> Tensor:
    """Euclidean distance of each marker pair; ``frame`` is (..., 3m) in mm."""
    frame = ad.as_tensor(frame)
    if not pairs:
        raise ValueError("no constraint pairs given")
    pts = ad.reshape(frame, frame.shape[:-1] + (frame.shape[-1] // 3, 3))
    first = [p[0] for p in pairs]
    second = [p[1] for p in pairs]
    lead = (slice(None),) * (len(frame.shape) - 1)
    diff = ad.sub(ad.take(pts, lead + (first,)), ad.take(pts, lead + (second,)))
    return ad.sqrt(ad.sum_(ad.square(diff), axis=-1))


def kinematic_loss(pred, target, ref_lengths, pairs, a: float,
                   stats: NormalizerStats | None = None, constraint_space: str = "mm") -> Tensor:
    """MSE plus ``a`` times the batch-mean of squared pair-length deviations.

    Without ``stats`` both arguments are taken as millimetres. With ``stats``
    they are normalised values: the MSE stays normalised while pair lengths
    are measured on the denormalised prediction. ``constraint_space="mm"``
    weighs squared millimetres; ``"normalized"`` first divides length
    deviations by the mean coordinate standard deviation.
    """
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    loss = ad.mse(pred, target)
    if a == 0:
        return loss
    if ref_lengths is None or not pairs:
        raise ValueError("constraint term needs reference lengths and constraint pairs")
    ref = np.asarray(ref_lengths, dtype=np.float64)
    coords = pred
    scale = 1.0
    if stats is not None:
        k = pred.shape[-1]
        coords = ad.add(ad.mul(pred, stats.divisor[:k]), stats.mean[:k])
        if constraint_space == "normalized":
            scale = float(stats.divisor[:k].mean())
    lengths = segment_lengths(coords, pairs)
    ref = np.broadcast_to(ref, lengths.shape)
    n = lengths.shape[0] if lengths.ndim > 1 else 1
    penalty = ad.mul(ad.sum_(ad.square(ad.sub(lengths, ref))), a / (n * scale * scale))
    return ad.add(loss, penalty)


# -- training loop ------------------------------------------------------------------


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 5, min_lr: float = 1e-7,
                 threshold: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric < self.best * (1.0 - self.threshold):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience: int = 15):
        self.patience = patience
        self.best = math.inf
        self.counter = 0

    def step(self, metric: float) -> bool:
        """Record one epoch; True when training should stop."""
        if metric < self.best:
            self.best = metric
            self.counter = 0
        else:
            self.counter += 1
        return self.counter >= self.patience


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,lr"]
        for row in zip(self.epoch, self.train_loss, self.val_loss, self.lr):
            lines.append(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "History":
        h = cls()
        for line in text.strip().splitlines()[1:]:
            e, tr, va, lr = line.split(",")
            h.epoch.append(int(e))
            h.train_loss.append(float(tr))
            h.val_loss.append(float(va))
            h.lr.append(float(lr))
        return h


@dataclass
class PreparedData:
    X: np.ndarray      # normalised windows
    Y: np.ndarray      # normalised labels
    ref: np.ndarray    # reference pair lengths, mm


def prepare(samples: list[WindowSample], stats: NormalizerStats) -> PreparedData:
    X, Y, R = stack_windows(samples)
    return PreparedData(stats.normalize(X), stats.normalize_coords(Y), R)


def evaluate_loss(model: Model, data: PreparedData, batch_size: int = 1024) -> float:
    """Eval-mode MSE on normalised labels."""
    total = 0.0
    for s in range(0, len(data.X), batch_size):
        pred = model(data.X[s:s + batch_size]).data
        total += float(((pred - data.Y[s:s + batch_size]) ** 2).sum())
    return total / data.Y.size


def train(model: Model, train_windows: list[WindowSample], val_windows: list[WindowSample],
          config: TrainConfig, seg: SegmentSpec, stats: NormalizerStats | None = None,
          on_epoch: Callable[[int, float, float, float], None] | None = None) -> tuple[Checkpoint, History]:
    """Mini-batch one-step training with plateau scheduling, early stopping and best-weight restore."""
    if not train_windows or not val_windows:
        raise ValueError("training and validation windows must be non-empty")
    stats = stats or fit_normalizer(train_windows)
    tr = prepare(train_windows, stats)
    va = prepare(val_windows, stats)
    pairs = seg.pair_indices()
    a = config.a if pairs else 0.0

    rng = np.random.default_rng(config.seed)
    state = ad.AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    sched = PlateauScheduler(config.lr, config.lr_factor, config.lr_patience, config.min_lr)
    stopper = EarlyStopping(config.early_stop_patience)
    history = History()
    best_state, best_val = model.state(), math.inf
    n = len(tr.X)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        running, seen = 0.0, 0
        for b, s in enumerate(range(0, n, config.batch_size)):
            idx = order[s:s + config.batch_size]
            with ad.Tape() as tape:
                pred = model(tr.X[idx], train=True, rng=rng)
                loss = kinematic_loss(pred, tr.Y[idx], tr.ref[idx], pairs, a, stats,
                                      config.constraint_space)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = tape.backward(loss)
            named = {k: grads[p] for k, p in model.params.items() if p in grads}
            ad.adam_step(model.params, named, state)
            running += value * len(idx)
            seen += len(idx)
        val = evaluate_loss(model, va)
        if not math.isfinite(val):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.epoch.append(epoch)
        history.train_loss.append(running / seen)
        history.val_loss.append(val)
        history.lr.append(state.lr)
        if val < best_val:
            best_val, best_state = val, model.state()
            history.best_epoch = epoch
        if on_epoch:
            on_epoch(epoch, running / seen, val, state.lr)
        state.lr = sched.step(val)
        if stopper.step(val):
            log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
            break

    model.load_state(best_state)
    meta = {"train": asdict(config), "best_epoch": history.best_epoch, "best_val_loss": best_val}
    return Checkpoint(model, stats, seg.name, meta), history


# -- hyperparameter search ------------------------------------------------------------

SEARCH_SPACE: dict[str, list] = {
    "model_width": [64, 96, 128],
    "heads": [8, 16, 32],
    "feedforward_width": [256, 512, 1024, 2048],
    "encoder_layers": [1, 2, 3, 4],
    "decoder_layers": [1, 2, 3, 4],
    "head_hidden": [64, 128, 256],
    "dropout": [0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5],
}


def grid_size(space: dict[str, list]) -> int:
    return math.prod(len(v) for v in space.values())


def decode_grid_index(space: dict[str, list], index: int) -> dict:
    out = {}
    for key in reversed(list(space)):
        values = space[key]
        index, r = divmod(index, len(values))
        out[key] = values[r]
    return {k: out[k] for k in space}


class RandomSearch:
    """Seeded sampling of the discrete grid without replacement."""

    def __init__(self, space: dict[str, list], seed: int = 0):
        self.space = space
        self._order = np.random.default_rng(seed).permutation(grid_size(space))
        self._next = 0

    def ask(self) -> dict | None:
        if self._next >= len(self._order):
            return None
        index = int(self._order[self._next])
        self._next += 1
        return decode_grid_index(self.space, index)

    def tell(self, config: dict, value: float) -> None:
        pass


@dataclass
class Trial:
    number: int
    params: dict
    value: float


def hyperparameter_search(objective: Callable[[dict], float], budget: int,
                          space: dict[str, list] | None = None, seed: int = 0,
                          sampler=None) -> tuple[dict, list[Trial]]:
    """Minimise ``objective`` over at most ``budget`` grid points; returns (best params, trials)."""
    if budget < 1:
        raise ValueError(f"search budget must be at least 1, got {budget}")
    space = space or SEARCH_SPACE
    sampler = sampler or RandomSearch(space, seed)
    trials: list[Trial] = []
    for number in range(budget):
        params = sampler.ask()
        if params is None:
            break
        value = float(objective(params))
        sampler.tell(params, value)
        trials.append(Trial(number, params, value))
    best = min(trials, key=lambda t: t.value)
    return best.params, trials


def transformer_objective(train_windows, val_windows, seg: SegmentSpec, base: TrainConfig,
                          seed: int = 0) -> Callable[[dict], float]:
    """Objective that trains a transformer with the trial's architecture and returns best val loss."""
    from .models import TransformerConfig

    def objective(params: dict) -> float:
        if params["model_width"] % params["heads"]:
            return math.inf
        cfg = TransformerConfig(seg.n_features, 3 * seg.n_markers, **params)
        model = Transformer.init(cfg, seed)
        ckpt, hist = train(model, train_windows, val_windows, base, seg)
        return min(hist.val_loss)

    return objective
