"""Focal loss, Adam with L2 penalty, the training loop, and checkpoint I/O.

Training iterates length-sorted zero-padded batches; each batch runs one
forward/backward pass per record, pools the per-epoch losses, and takes
one optimizer step.  Validation accuracy (per-patient averaged) is
evaluated after every pass over the data and the best-scoring parameter
set is retained.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evaluation
from .autodiff import Tensor, backward
from .data import SleepRecord, StandardizationStats, compute_stats, make_batches, preprocess_record
from .errors import (
    ConfigError,
    ConfigMismatchError,
    ContractError,
    CorruptionError,
    NumericalError,
)
from .model import ModelConfig, ModelParameters, SleepStager

CHECKPOINT_MAGIC = b"SOMNOCK1"
_DTYPE_TAGS = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


@dataclass(frozen=True)
class LossConfig:
    """Class-balance weight on the wake class and hard-example focus."""

    alpha: float = 0.4
    gamma: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma must be non-negative, got {self.gamma}")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    weight_decay: float = 1e-3

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {b}")
        if self.epsilon <= 0 or self.weight_decay < 0:
            raise ConfigError("epsilon must be positive and weight_decay non-negative")


@dataclass(frozen=True)
class TrainConfig:
    n_batch: int = 16
    max_epochs: int = 500
    dropout: float | None = None   # None: use the model config's value
    seed: int = 0
    checkpoint_path: str | None = None
    log_path: str | None = None
    report_every: int = 1

    def __post_init__(self):
        if self.n_batch < 1:
            raise ConfigError("n_batch must be positive")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be non-negative")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.report_every < 1:
            raise ConfigError("report_every must be positive")


def focal_loss(
    probabilities: Tensor,
    labels,
    epoch_mask=None,
    config: LossConfig = LossConfig(),
) -> Tensor:
    """Mean over unmasked epochs of -w_t * (1 - p_t)^gamma * log(p_t).

    ``p_t`` is the probability assigned to the true class; the wake class
    is weighted by alpha, sleep by 1 - alpha.  ``p_t`` is clamped at
    1e-12 before the log so a hard-zero probability yields a large finite
    loss rather than a NaN.
    """
    if probabilities.ndim != 2 or probabilities.shape[1] != 2:
        raise ContractError(
            f"focal_loss expects (E, 2) probabilities, got {list(probabilities.shape)}"
        )
    n_epochs = probabilities.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n_epochs,):
        raise ContractError(f"labels shape {list(labels.shape)} does not match {n_epochs} epochs")
    mask = np.ones(n_epochs, dtype=bool) if epoch_mask is None else np.asarray(epoch_mask, bool)
    count = int(mask.sum())
    if count == 0:
        raise ContractError("focal_loss over zero unmasked epochs")

    one_hot = np.zeros((n_epochs, 2))
    one_hot[np.arange(n_epochs), labels] = 1.0
    p_true = ad.tsum(ad.mul(probabilities, Tensor(one_hot)), axis=1)

    focus = ad.power(ad.sub(Tensor(np.ones(n_epochs)), p_true), config.gamma)
    log_p = ad.log(ad.clamp_min(p_true, 1e-12))
    class_weight = np.where(labels == 1, config.alpha, 1.0 - config.alpha)
    neg_weight = Tensor(-(class_weight * mask))
    total = ad.tsum(ad.mul(neg_weight, ad.mul(focus, log_p)))
    return ad.scale(total, 1.0 / count)


@dataclass
class AdamState:
    """First/second moment estimates and the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParameters) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.tensors.items()},
            v={name: np.zeros_like(t.data) for name, t in params.tensors.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )


def adam_step(params: ModelParameters, state: AdamState, config: OptimizerConfig) -> None:
    """One Adam update with bias correction.

    The L2 penalty enters as a lambda * w gradient contribution before the
    moment updates (penalty-in-loss semantics), and only for parameters
    flagged for decay (weights; never biases or norm affines).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for name, p in params.tensors.items():
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient; run backward first")
        g = p.grad
        if config.weight_decay > 0.0 and name in params.decay:
            g = g + config.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        p.data -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate: config, parameters,
    optimizer state, and run metadata (epoch, validation accuracy, seed,
    standardization statistics)."""

    config: ModelConfig
    params: ModelParameters
    optimizer: AdamState | None
    metadata: dict = field(default_factory=dict)

    def stats(self) -> StandardizationStats:
        try:
            return StandardizationStats(
                mean=float(self.metadata["hr_mean"]), std=float(self.metadata["hr_std"])
            )
        except KeyError:
            raise CorruptionError("checkpoint metadata lacks standardization statistics") from None

    def stager(self) -> SleepStager:
        return SleepStager(self.config, self.params)

    def ensure_config(self, expected: ModelConfig) -> None:
        if self.config.to_dict() != expected.to_dict():
            ours = self.config.to_dict()
            theirs = expected.to_dict()
            diff = sorted(k for k in ours if ours[k] != theirs.get(k))
            raise ConfigMismatchError(
                f"checkpoint model config differs from the requested one in {diff}"
            )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]


def _batch_loss(
    stager: SleepStager,
    batch,
    loss_cfg: LossConfig,
    rng: np.random.Generator,
) -> tuple[Tensor, int]:
    """Forward every record of the batch and pool one focal loss over all
    unmasked epochs."""
    probs_parts = []
    for i in range(batch.n_records):
        hr = Tensor(batch.inputs.data[i])
        result = stager.forward(
            hr,
            valid_samples=int(batch.valid_samples[i]),
            training=True,
            rng=rng,
        )
        probs_parts.append(result.probabilities)
    probs = probs_parts[0] if len(probs_parts) == 1 else ad.concat(probs_parts, axis=0)
    labels = batch.labels.reshape(-1)
    mask = batch.epoch_mask.reshape(-1)
    return focal_loss(probs, labels, mask, loss_cfg), int(mask.sum())


def train(
    model_config: ModelConfig,
    train_records: list[SleepRecord],
    val_records: list[SleepRecord],
    loss_config: LossConfig = LossConfig(),
    optimizer_config: OptimizerConfig = OptimizerConfig(),
    train_config: TrainConfig = TrainConfig(),
    init_params: ModelParameters | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Train on raw records; returns the best-validation checkpoint and the
    per-epoch log [{epoch, train_loss, val_acc, seconds}, ...]."""
    if not train_records:
        raise ConfigError("training requires at least one record")
    stats = compute_stats(train_records)
    train_prepped = [preprocess_record(r, stats) for r in train_records]
    val_prepped = [preprocess_record(r, stats) for r in val_records]
    batches = make_batches(train_prepped, train_config.n_batch)

    if train_config.dropout is not None:
        model_config = ModelConfig.from_dict(
            {**model_config.to_dict(), "dropout": train_config.dropout}
        )
    params = init_params.copy() if init_params is not None else None
    stager = SleepStager(model_config, params=params, seed=train_config.seed)
    adam = AdamState.for_params(stager.params)
    rng = np.random.default_rng(train_config.seed)

    def validation_accuracy() -> float | None:
        if not val_prepped:
            return None
        report = evaluation.evaluate_prepared(stager, val_prepped)
        return report.average.acc

    metadata = {
        "seed": train_config.seed,
        "hr_mean": stats.mean,
        "hr_std": stats.std,
        "epoch": 0,
        "val_acc": validation_accuracy() if train_config.max_epochs == 0 else None,
    }
    best = Checkpoint(model_config, stager.params.copy(), adam.copy(), dict(metadata))
    best_acc: float | None = None

    log: list[dict] = []
    for epoch in range(1, train_config.max_epochs + 1):
        started = time.monotonic()
        loss_sum = 0.0
        epoch_count = 0
        order = rng.permutation(len(batches))
        for position, bi in enumerate(order):
            stager.params.zero_grads()
            loss, n_scored = _batch_loss(stager, batches[bi], loss_config, rng)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericalError(
                    f"non-finite training loss in epoch {epoch}, batch {bi} "
                    f"(position {position} of the shuffle)"
                )
            backward(loss)
            adam_step(stager.params, adam, optimizer_config)
            loss_sum += loss_value * n_scored
            epoch_count += n_scored
        val_acc = validation_accuracy()
        entry = {
            "epoch": epoch,
            "train_loss": loss_sum / max(epoch_count, 1),
            "val_acc": val_acc,
            "seconds": time.monotonic() - started,
        }
        log.append(entry)
        if verbose and epoch % train_config.report_every == 0:
            print(
                f"epoch {epoch}: train_loss={entry['train_loss']:.6f} "
                f"val_acc={val_acc if val_acc is None else f'{val_acc:.4f}'}"
            )
        selectable = val_acc if val_acc is not None else -entry["train_loss"]
        if best_acc is None or selectable > best_acc:
            best_acc = selectable
            best = Checkpoint(
                model_config,
                stager.params.copy(),
                adam.copy(),
                {**metadata, "epoch": epoch, "val_acc": val_acc},
            )

    if train_config.log_path:
        write_train_log(log, train_config.log_path)
    if train_config.checkpoint_path:
        save_checkpoint(best, train_config.checkpoint_path)
    return TrainResult(checkpoint=best, log=log)


def write_train_log(log: list[dict], path: str | Path) -> None:
    """JSON-lines log: one object per epoch."""
    with open(path, "w") as f:
        for entry in log:
            f.write(json.dumps(entry, sort_keys=True))
            f.write("\n")


# ----------------------------------------------------------------------
# checkpoint format: 8-byte magic, little-endian uint64 header length,
# JSON header (config, metadata, named tensor table), raw IEEE-754 blob.
# ----------------------------------------------------------------------

def _dtype_tag(dtype: np.dtype) -> str:
    tag = {"float64": "<f8", "float32": "<f4"}.get(dtype.name)
    if tag is None:
        raise ContractError(f"checkpoint cannot store dtype {dtype}")
    return tag


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    table = []
    blob = bytearray()

    def put(name: str, arr: np.ndarray, kind: str, decay: bool = False) -> None:
        tag = _dtype_tag(arr.dtype)
        raw = np.ascontiguousarray(arr).astype(_DTYPE_TAGS[tag], copy=False).tobytes()
        table.append(
            {
                "name": name,
                "kind": kind,
                "shape": list(arr.shape),
                "dtype": tag,
                "offset": len(blob),
                "nbytes": len(raw),
                "decay": decay,
            }
        )
        blob.extend(raw)

    for name, tensor in ckpt.params.tensors.items():
        put(name, tensor.data, "param", decay=name in ckpt.params.decay)
    for name, buf in ckpt.params.buffers.items():
        put(name, buf, "buffer")
    if ckpt.optimizer is not None:
        for name, arr in ckpt.optimizer.m.items():
            put(name, arr, "adam_m")
        for name, arr in ckpt.optimizer.v.items():
            put(name, arr, "adam_v")

    header = {
        "format_version": 1,
        "model_config": ckpt.config.to_dict(),
        "metadata": ckpt.metadata,
        "adam_step": None if ckpt.optimizer is None else ckpt.optimizer.step,
        "tensors": table,
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(encoded)))
        f.write(encoded)
        f.write(bytes(blob))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptionError(f"{path}: not a somnoflow checkpoint (bad magic)")
    header_len = struct.unpack("<Q", raw[8:16])[0]
    body = raw[16:]
    if header_len > len(body):
        raise CorruptionError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(body[:header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header: {exc}") from None
    blob = body[header_len:]

    required = {"format_version", "model_config", "metadata", "adam_step", "tensors"}
    if not required.issubset(header):
        raise CorruptionError(f"{path}: header missing keys {sorted(required - set(header))}")

    try:
        config = ModelConfig.from_dict(header["model_config"])
    except (ConfigError, TypeError) as exc:
        raise CorruptionError(f"{path}: invalid model config in header: {exc}") from None

    params = ModelParameters()
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    expected_end = 0
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        dtype = _DTYPE_TAGS.get(entry["dtype"])
        if dtype is None:
            raise CorruptionError(f"{path}: unknown dtype {entry['dtype']!r}")
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        want = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        if nbytes != want:
            raise CorruptionError(
                f"{path}: tensor {entry['name']} declares {nbytes} bytes for shape {list(shape)}"
            )
        if offset + nbytes > len(blob):
            raise CorruptionError(
                f"{path}: tensor {entry['name']} extends past end of file (truncated?)"
            )
        expected_end = max(expected_end, offset + nbytes)
        arr = np.frombuffer(blob, dtype=dtype, count=want // dtype.itemsize, offset=offset)
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(shape)
        kind = entry["kind"]
        if kind == "param":
            params.add(entry["name"], arr, decay=bool(entry.get("decay", False)))
        elif kind == "buffer":
            params.add_buffer(entry["name"], arr)
        elif kind == "adam_m":
            adam_m[entry["name"]] = arr
        elif kind == "adam_v":
            adam_v[entry["name"]] = arr
        else:
            raise CorruptionError(f"{path}: unknown tensor kind {kind!r}")
    if expected_end != len(blob):
        raise CorruptionError(
            f"{path}: blob holds {len(blob)} bytes but header accounts for {expected_end}"
        )

    optimizer = None
    if header["adam_step"] is not None:
        optimizer = AdamState(m=adam_m, v=adam_v, step=int(header["adam_step"]))
    return Checkpoint(
        config=config, params=params, optimizer=optimizer, metadata=header["metadata"]
    )
