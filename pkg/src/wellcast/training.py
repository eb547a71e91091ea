"""Mini-batch MSE training with Adam, averaged-norm gradient clipping and transfer learning.

Clipping threshold: during the first ``clip_warmup_epochs`` epochs the global
gradient norm of every step is recorded but nothing is rescaled; the threshold
is then frozen at the mean of those norms and applied to every later step.

The returned :class:`Checkpoint` always holds the parameters of the epoch with
the lowest validation MSE (epoch 0 is the untrained model).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .dataio import DatasetSplits, FeatureSet, Sample, ScalerParams, stack
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    UnsupportedArchitectureError,
)
from .models import Model, ModelConfig, TransformerModel, build_model
from .tensor import Tensor, backward

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "wellcast-checkpoint/1"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 300
    batch_size: int = 16
    clip_warmup_epochs: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    # None: clip recurrent models, leave the transformer unclipped
    clip: Optional[bool] = None

    def validate(self) -> None:
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be a non-negative number, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.clip_warmup_epochs < 1:
            raise ConfigError("clip_warmup_epochs must be at least 1")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training settings: {sorted(unknown)}")
        return cls(**data)


class AdamState:
    """First/second moment buffers keyed by parameter name."""

    def __init__(self):
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0


@dataclass
class ClipState:
    norms: List[float] = field(default_factory=list)
    threshold: Optional[float] = None
    # (norm before, norm after) for every active-phase step
    steps: List[tuple] = field(default_factory=list)

    def freeze(self) -> float:
        if not self.norms:
            raise ContractError("cannot freeze a clipping threshold without warm-up norms")
        if self.threshold is None:
            self.threshold = math.fsum(self.norms) / len(self.norms)
        return self.threshold


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Dict[str, np.ndarray]
    epoch: int
    val_mse: float
    train_config: Optional[TrainConfig] = None
    features: Optional[FeatureSet] = None
    scaler: Optional[ScalerParams] = None
    well_ids: List[str] = field(default_factory=list)
    history: List[dict] = field(default_factory=list)
    clip_threshold: Optional[float] = None
    clip_state: Optional[ClipState] = field(default=None, repr=False, compare=False)

    def build_model(self) -> Model:
        model = build_model(ModelConfig.from_dict(self.model_config.to_dict()))
        model.load_state_dict(self.params)
        return model

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict() if self.train_config else None,
            "features": self.features.to_dict() if self.features else None,
            "scaler": self.scaler.to_json() if self.scaler else None,
            "well_ids": list(self.well_ids),
            "epoch": self.epoch,
            "val_mse": self.val_mse,
            "clip_threshold": self.clip_threshold,
            "history": self.history,
            "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Checkpoint":
        if data.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"not a wellcast checkpoint (format tag {data.get('format')!r})")
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in data["params"].items()}
        return cls(
            model_config=ModelConfig.from_dict(data["model_config"]),
            params=params,
            epoch=data["epoch"],
            val_mse=data["val_mse"],
            train_config=TrainConfig.from_dict(data["train_config"]) if data.get("train_config") else None,
            features=FeatureSet.from_dict(data["features"]) if data.get("features") else None,
            scaler=ScalerParams.from_json(data["scaler"]) if data.get("scaler") else None,
            well_ids=list(data.get("well_ids", [])),
            history=list(data.get("history", [])),
            clip_threshold=data.get("clip_threshold"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"checkpoint not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"checkpoint {path} is not valid JSON: {exc}") from None
        return cls.from_json(data)


# ---------------------------------------------------------------------------
# losses and update rules
# ---------------------------------------------------------------------------

def mse_loss(preds: Sequence[float], targets: Sequence[float]) -> float:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise ContractError(f"{p.size} predictions for {t.size} targets")
    if p.size == 0:
        raise ContractError("mse of an empty batch")
    d = p - t
    return float(np.mean(d * d))


def mse(pred: Tensor, targets: np.ndarray) -> Tensor:
    d = pred - Tensor(targets)
    return (d * d).mean()


def adam_update(
    params: Mapping[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    apply: bool = True,
) -> None:
    """One Adam step from the ``.grad`` buffers.

    With ``apply=False`` only the moments and step counter advance; the
    parameters are left untouched (fine-tuning warm-up).
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if apply:
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def global_norm(params: Mapping[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_gradients(params: Mapping[str, Tensor], clip: ClipState, phase: str) -> tuple:
    """Record (warm-up) or enforce (active) the averaged-norm threshold.

    Returns ``(norm_before, norm_after, clipped)``.
    """
    norm = global_norm(params)
    if phase == "warmup":
        clip.norms.append(norm)
        return norm, norm, False
    if phase != "active":
        raise ContractError(f"unknown clipping phase {phase!r}")
    if clip.threshold is None:
        if not clip.norms:
            raise ContractError("active clipping requested before any warm-up norms were recorded")
        clip.freeze()
    clipped = norm > clip.threshold
    if clipped:
        scale = clip.threshold / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    after = global_norm(params) if clipped else norm
    clip.steps.append((norm, after))
    return norm, after, clipped


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def mean_squared_error(model: Model, X: np.ndarray, y: np.ndarray) -> float:
    return mse_loss(model.predict(X), y)


def _batches(n: int, batch_size: int, rng: Optional[np.random.Generator]):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_inputs(model: Model, X: np.ndarray, what: str) -> None:
    if X.shape[-1] != model.config.input_size:
        raise ContractError(
            f"{what} windows have {X.shape[-1]} features but the model expects {model.config.input_size}"
        )


def _clip_enabled(model: Model, cfg: TrainConfig) -> bool:
    if cfg.clip is not None:
        return cfg.clip
    return model.config.architecture != "transformer"


def warmup_epoch(model: Model, samples: Sequence[Sample], cfg: TrainConfig, state: AdamState) -> None:
    """One pass that feeds gradients to Adam's moments without moving any parameter."""
    X, y = stack(samples)
    _check_inputs(model, X, "training")
    rng = np.random.default_rng([cfg.seed, 2]) if cfg.shuffle else None
    drop_rng = np.random.default_rng([cfg.seed, 3])
    for idx in _batches(len(y), cfg.batch_size, rng):
        model.zero_grad()
        loss = mse(model.forward(X[idx], training=True, rng=drop_rng), y[idx])
        if not math.isfinite(loss.item()):
            raise NumericError("non-finite loss during the warm-up epoch")
        backward(loss, model.parameters())
        adam_update(model.params, state, 0.0, cfg.beta1, cfg.beta2, cfg.adam_eps, apply=False)


def train(
    model: Model,
    splits: DatasetSplits,
    cfg: TrainConfig,
    adam_state: Optional[AdamState] = None,
    learning_rate: Optional[float] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> Checkpoint:
    """Train ``model`` in place and return the best-validation checkpoint.

    ``learning_rate`` overrides ``cfg.learning_rate`` (used by fine-tuning);
    ``on_epoch`` receives each epoch's log record.
    """
    cfg.validate()
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    if not splits.train or not splits.validation:
        raise DataError("training needs non-empty train and validation splits")
    X_tr, y_tr = stack(splits.train)
    X_va, y_va = stack(splits.validation)
    _check_inputs(model, X_tr, "training")
    state = adam_state if adam_state is not None else AdamState()
    clip = ClipState()
    use_clip = _clip_enabled(model, cfg)
    shuffle_rng = np.random.default_rng([cfg.seed, 0]) if cfg.shuffle else None
    drop_rng = np.random.default_rng([cfg.seed, 1])

    def record(epoch: int, norms: List[float], clipped: bool) -> dict:
        entry = {
            "epoch": epoch,
            "train_mse": mean_squared_error(model, X_tr, y_tr),
            "val_mse": mean_squared_error(model, X_va, y_va),
            "grad_norm": math.fsum(norms) / len(norms) if norms else None,
            "clipped": clipped,
            "lr": lr,
        }
        if not math.isfinite(entry["val_mse"]):
            raise NumericError(f"non-finite validation MSE after epoch {epoch}")
        if on_epoch is not None:
            on_epoch(entry)
        return entry

    history = [record(0, [], False)]
    best_epoch, best_val, best_params = 0, history[0]["val_mse"], model.state_dict()

    for epoch in range(1, cfg.epochs + 1):
        phase = "warmup" if epoch <= cfg.clip_warmup_epochs else "active"
        norms, any_clipped = [], False
        for b, idx in enumerate(_batches(len(y_tr), cfg.batch_size, shuffle_rng)):
            model.zero_grad()
            loss = mse(model.forward(X_tr[idx], training=True, rng=drop_rng), y_tr[idx])
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            backward(loss, model.parameters())
            if use_clip:
                before, _, clipped = clip_gradients(model.params, clip, phase)
                any_clipped |= clipped
            else:
                before = global_norm(model.params)
            norms.append(before)
            adam_update(model.params, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        entry = record(epoch, norms, any_clipped)
        history.append(entry)
        logger.debug("epoch %d train %.3e val %.3e", epoch, entry["train_mse"], entry["val_mse"])
        if entry["val_mse"] < best_val:
            best_epoch, best_val, best_params = epoch, entry["val_mse"], model.state_dict()

    ckpt = Checkpoint(
        model_config=ModelConfig.from_dict(model.config.to_dict()),
        params=best_params,
        epoch=best_epoch,
        val_mse=best_val,
        train_config=cfg,
        history=history,
        clip_threshold=clip.threshold,
        clip_state=clip,
    )
    return ckpt


def fine_tune(
    pretrained: Checkpoint,
    target_splits: DatasetSplits,
    cfg: TrainConfig,
    features: Optional[FeatureSet] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> Checkpoint:
    """Transfer a pre-trained transformer to a new well.

    The linear output layer is replaced by linear -> ReLU -> linear (hidden
    width ``d_model``), one warm-up epoch primes Adam's moments without
    changing any weight, and the whole network is then trained at a tenth
    of ``cfg.learning_rate``.
    """
    if pretrained.model_config.architecture != "transformer":
        raise UnsupportedArchitectureError("transfer learning requires a transformer checkpoint")
    if features is not None and pretrained.features is not None and features != pretrained.features:
        raise ContractError(
            f"feature set {features.mode}/{features.target} differs from the pre-trained "
            f"{pretrained.features.mode}/{pretrained.features.target}"
        )
    model = pretrained.build_model()
    assert isinstance(model, TransformerModel)
    X_tr, _ = stack(target_splits.train)
    _check_inputs(model, X_tr, "target well")
    model.replace_head(model.config.d_model, seed=cfg.seed)
    state = AdamState()
    warmup_epoch(model, target_splits.train, cfg, state)
    ckpt = train(model, target_splits, cfg, adam_state=state,
                 learning_rate=cfg.learning_rate / 10.0, on_epoch=on_epoch)
    ckpt.features = pretrained.features
    return ckpt
