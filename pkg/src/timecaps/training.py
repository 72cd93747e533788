"""Optimization loop, combined loss, evaluation, and checkpoint I/O.

Checkpoint format: one JSON header line (config plus a tensor manifest of
name/shape/offset, offsets measured from the start of the binary payload)
followed by each tensor's raw little-endian float64 data in manifest order.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .capsules import LossParams, margin_loss, mse_loss
from .data import Dataset
from .errors import CheckpointError, ConfigError
from .model import ForwardOutput, ModelConfig, ModelParams, model_forward, param_shapes
from .optim import AdamState, adam_step
from .tensor import Tensor, no_grad

_CHECKPOINT_MAGIC = "timecaps-checkpoint"


@dataclass
class TrainConfig:
    epochs: int = 35
    lr: float = 0.001
    lambda_margin: float = 0.5
    recon_weight: float = 0.0005
    batch_size: int = 16
    seed: int = 0
    routing_iters: int = 3
    lr_decay: float = 1.0  # per-epoch multiplier; 1.0 disables decay

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0 or self.batch_size < 1 or self.recon_weight < 0:
            raise ConfigError("lr must be > 0, batch_size >= 1, recon_weight >= 0")
        if not 0.0 < self.lambda_margin <= 1.0:
            raise ConfigError(f"lambda_margin must be in (0, 1], got {self.lambda_margin}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")


@dataclass
class EpochStats:
    epoch: int
    margin_loss: float
    recon_loss: float
    train_accuracy: float
    test_accuracy: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    confusion: np.ndarray | None = None
    wall_time_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "epochs": [
                {
                    "epoch": e.epoch,
                    "margin_loss": e.margin_loss,
                    "recon_loss": e.recon_loss,
                    "train_accuracy": e.train_accuracy,
                    "test_accuracy": e.test_accuracy,
                }
                for e in self.epochs
            ],
            "confusion": self.confusion.tolist() if self.confusion is not None else None,
            "wall_time_seconds": self.wall_time_seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def total_loss(fwd: ForwardOutput, target: Tensor, true_class: int, cfg: TrainConfig) -> Tensor:
    """Margin loss on class lengths plus down-weighted reconstruction MSE."""
    loss_params = LossParams(lam=cfg.lambda_margin)
    margin = margin_loss(fwd.class_lengths, true_class, loss_params)
    return T.add(margin, T.scale(mse_loss(fwd.reconstruction, target), cfg.recon_weight))


def evaluate(params: ModelParams, dataset: Dataset, workers: int = 1) -> tuple[float, np.ndarray]:
    """Accuracy (argmax class length) and the true-by-predicted count matrix."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    cfg = params.config

    def predict(sig) -> int:
        with no_grad():
            fwd = model_forward(Tensor(sig.samples), params, cfg, mask_class=None)
        return fwd.predicted_class()

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(predict, dataset.signals))
    else:
        preds = [predict(sig) for sig in dataset.signals]

    confusion = np.zeros((cfg.num_classes, cfg.num_classes), dtype=int)
    correct = 0
    for sig, pred in zip(dataset.signals, preds):
        confusion[sig.label, pred] += 1
        correct += int(pred == sig.label)
    return correct / len(dataset), confusion


def train(params: ModelParams, train_set: Dataset, test_set: Dataset, cfg: TrainConfig,
          log=None, eval_workers: int = 1) -> tuple[ModelParams, TrainReport]:
    """Seeded mini-batch loop: gradients averaged per batch, one Adam step per
    batch, both splits evaluated after every epoch.  Deterministic per seed."""
    model_cfg = params.config
    if train_set.L != model_cfg.L:
        raise ConfigError(f"dataset length {train_set.L} != model length {model_cfg.L}")
    if test_set.L != model_cfg.L:
        raise ConfigError(f"test dataset length {test_set.L} != model length {model_cfg.L}")
    start = time.perf_counter()
    report = TrainReport()
    state = AdamState.for_params(params.tensors(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    for epoch in range(1, cfg.epochs + 1):
        state.lr = cfg.lr * (cfg.lr_decay ** (epoch - 1))
        order = rng.permutation(len(train_set))
        margin_sum = 0.0
        recon_sum = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            params.zero_grad()
            for idx in batch:
                sig = train_set.signals[int(idx)]
                x = Tensor(sig.samples)
                fwd = model_forward(x, params, model_cfg, mask_class=sig.label)
                loss_params = LossParams(lam=cfg.lambda_margin)
                margin = margin_loss(fwd.class_lengths, sig.label, loss_params)
                recon = mse_loss(fwd.reconstruction, x)
                loss = T.add(margin, T.scale(recon, cfg.recon_weight))
                loss.backward()
                margin_sum += margin.item()
                recon_sum += recon.item()
            scale = 1.0 / len(batch)
            grads = {
                name: (p.grad * scale if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()
            }
            new_tensors, state = adam_step(params.tensors(), grads, state)
            params = params.replace(new_tensors)
        train_acc, _ = evaluate(params, train_set, workers=eval_workers)
        test_acc, confusion = evaluate(params, test_set, workers=eval_workers)
        stats = EpochStats(
            epoch=epoch,
            margin_loss=margin_sum / len(train_set),
            recon_loss=recon_sum / len(train_set),
            train_accuracy=train_acc,
            test_accuracy=test_acc,
        )
        report.epochs.append(stats)
        report.confusion = confusion
        if log is not None:
            log(f"epoch {epoch}/{cfg.epochs} margin={stats.margin_loss:.4f} "
                f"recon={stats.recon_loss:.4f} train_acc={train_acc:.4f} test_acc={test_acc:.4f}")

    report.wall_time_seconds = time.perf_counter() - start
    return params, report


def save_checkpoint(params: ModelParams, path):
    """Write the JSON header line followed by raw float64 tensor payloads."""
    manifest = []
    offset = 0
    blobs = []
    for name, p in params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": _CHECKPOINT_MAGIC,
        "version": 1,
        "config": params.config.to_dict(),
        "tensors": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ModelParams:
    """Reconstruct params and config; any inconsistency raises CheckpointError
    before anything is returned (no partial loads)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("format") != _CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (format={header.get('format')!r})")
    try:
        config = ModelConfig.from_dict(header["config"])
        manifest = header["tensors"]
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from None

    expected = param_shapes(config)
    if [m.get("name") for m in manifest] != list(expected):
        raise CheckpointError(f"{path}: tensor manifest does not match the config's parameter set")
    tensors: dict[str, Tensor] = {}
    for m in manifest:
        name = m["name"]
        shape = tuple(int(s) for s in m["shape"])
        if shape != expected[name]:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {shape}, expected {expected[name]}")
        count = int(np.prod(shape)) if shape else 1
        start = int(m["offset"])
        stop = start + 8 * count
        if start < 0 or stop > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} payload is truncated")
        data = np.frombuffer(payload[start:stop], dtype="<f8").reshape(shape)
        tensors[name] = Tensor(data.copy(), requires_grad=True)
    return ModelParams(config, tensors)
