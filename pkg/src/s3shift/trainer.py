"""SGD/Adam with cosine annealing, validation-based model selection, checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .datasets import FeatureDataset, make_batches, stack_batch
from .network import ModelConfig, ResNet, predict_labels, softmax_xent
from .quantizers import parse_mode
from .tensor import Rng

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"S3CK"
CHECKPOINT_VERSION = 1
HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_acc", "reg_value")


class NumericError(FloatingPointError):
    """Training diverged (NaN/Inf loss)."""


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 200
    lr: float = 1e-4
    eta_min: float = 0.0
    momentum: float = 0.9
    lambda_sparse: float = 1e-4
    seed: int = 0
    mode: str = "s3"
    optimizer: str = "auto"  # auto: Adam for DeepShift, SGD otherwise
    t_fixed: int = 128

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.eta_min < 0 or self.lambda_sparse < 0:
            raise ValueError("eta_min and lambda_sparse must be non-negative")
        if self.optimizer not in ("auto", "sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.t_fixed < 1:
            raise ValueError("t_fixed must be >= 1")
        parse_mode(self.mode)

    def resolved_optimizer(self) -> str:
        if self.optimizer != "auto":
            return self.optimizer
        return "adam" if parse_mode(self.mode)[0] == "d" else "sgd"

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(t: float, total: float, lr0: float, eta_min: float = 0.0) -> float:
    if not 0 <= t <= total:
        raise ValueError(f"epoch {t} outside [0, {total}]")
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * t / total))


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float,
             momentum: float) -> tuple[np.ndarray, np.ndarray]:
    """v <- momentum * v + g;  theta <- theta - lr * v."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError("param, grad and velocity shapes differ")
    velocity = momentum * velocity + grad
    return (param - lr * velocity).astype(param.dtype), velocity.astype(param.dtype)


ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(param: np.ndarray, grad: np.ndarray, state: dict, lr: float) -> np.ndarray:
    """Bias-corrected Adam; ``state`` holds m, v and the step count t and is updated in place."""
    if "m" not in state:
        state.update(m=np.zeros_like(param), v=np.zeros_like(param), t=0)
    state["t"] += 1
    t = state["t"]
    state["m"] = (ADAM_BETA1 * state["m"] + (1 - ADAM_BETA1) * grad).astype(param.dtype)
    state["v"] = (ADAM_BETA2 * state["v"] + (1 - ADAM_BETA2) * grad * grad).astype(param.dtype)
    m_hat = state["m"] / (1 - ADAM_BETA1 ** t)
    v_hat = state["v"] / (1 - ADAM_BETA2 ** t)
    return (param - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(param.dtype)


class Optimizer:
    def __init__(self, kind: str, momentum: float = 0.9):
        self.kind = kind
        self.momentum = momentum
        self.state: dict[str, dict] = {}

    def step(self, model: ResNet, lr: float) -> None:
        for p in model.parameters():
            st = self.state.setdefault(p.name, {})
            if self.kind == "sgd":
                v = st.get("v")
                if v is None:
                    v = np.zeros_like(p.data)
                new, st["v"] = sgd_step(p.data, p.grad, v, lr, self.momentum)
            else:
                new = adam_step(p.data, p.grad, st, lr)
            p.data[...] = new

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in sorted(self.state.items()):
            for key, val in sorted(st.items()):
                if isinstance(val, np.ndarray):
                    out[f"{name}/{key}"] = val
        return out

    def scalars(self) -> dict[str, int]:
        return {name: st["t"] for name, st in sorted(self.state.items()) if "t" in st}

    def load(self, tensors: dict[str, np.ndarray], scalars: dict[str, int]) -> None:
        self.state = {}
        for key, val in tensors.items():
            name, slot = key.rsplit("/", 1)
            self.state.setdefault(name, {})[slot] = np.array(val)
        for name, t in scalars.items():
            self.state.setdefault(name, {})["t"] = int(t)


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    params: dict[str, np.ndarray]
    epoch: int  # completed epochs
    best_val_acc: float
    best_epoch: int
    rng_state: dict
    optimizer_tensors: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_scalars: dict[str, int] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    def build_model(self) -> ResNet:
        model = ResNet(ModelConfig.from_dict(self.model_config))
        model.load_state_dict(self.params)
        return model


_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}


def _encode(meta: dict, blobs: list[tuple[str, np.ndarray]], magic: bytes, version: int) -> bytes:
    meta = dict(meta)
    meta["tensors"] = [{"name": n, "shape": list(a.shape), "dtype": a.dtype.name} for n, a in blobs]
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(magic)
    out.write(struct.pack("<IQ", version, len(head)))
    out.write(head)
    for _, arr in blobs:
        out.write(np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes())
    return out.getvalue()


def _decode(raw: bytes, magic: bytes, version: int, what: str) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:4] != magic:
        raise CheckpointError(f"not a {what} file: bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < 16:
        raise CheckpointError(f"truncated {what} header")
    file_version, head_len = struct.unpack("<IQ", raw[4:16])
    if file_version != version:
        raise CheckpointError(f"unsupported {what} version {file_version} (expected {version})")
    if len(raw) < 16 + head_len:
        raise CheckpointError(f"truncated {what} metadata")
    try:
        meta = json.loads(raw[16 : 16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt {what} metadata: {exc}") from exc
    tensors = {}
    pos = 16 + head_len
    for spec in meta["tensors"]:
        dt = np.dtype(_DTYPES[spec["dtype"]])
        n = int(np.prod(spec["shape"], dtype=np.int64)) * dt.itemsize
        if pos + n > len(raw):
            raise CheckpointError(f"truncated {what}: tensor {spec['name']} incomplete")
        tensors[spec["name"]] = np.frombuffer(raw, dtype=dt, count=n // dt.itemsize, offset=pos) \
            .reshape(spec["shape"]).astype(spec["dtype"])
        pos += n
    if pos != len(raw):
        raise CheckpointError(f"{what} has {len(raw) - pos} trailing bytes")
    return meta, tensors


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    meta = {
        "model_config": ck.model_config, "train_config": ck.train_config, "epoch": ck.epoch,
        "best_val_acc": ck.best_val_acc, "best_epoch": ck.best_epoch, "rng_state": ck.rng_state,
        "optimizer_scalars": ck.optimizer_scalars, "history": ck.history,
    }
    blobs = [(f"param/{k}", v) for k, v in ck.params.items()]
    blobs += [(f"optim/{k}", v) for k, v in ck.optimizer_tensors.items()]
    return _encode(meta, blobs, CHECKPOINT_MAGIC, ck.version)


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    meta, tensors = _decode(raw, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    optim = {k[6:]: v for k, v in tensors.items() if k.startswith("optim/")}
    return Checkpoint(
        model_config=meta["model_config"], train_config=meta["train_config"], params=params,
        epoch=meta["epoch"], best_val_acc=meta["best_val_acc"], best_epoch=meta["best_epoch"],
        rng_state=meta["rng_state"], optimizer_tensors=optim,
        optimizer_scalars=meta["optimizer_scalars"], history=meta["history"],
    )


def predict_dataset(model: ResNet, data: FeatureDataset, t_fixed: int, batch_size: int = 64) -> np.ndarray:
    preds = []
    for start in range(0, len(data), batch_size):
        x = stack_batch(data.features[start : start + batch_size], t_fixed, model.dtype)
        preds.append(predict_labels(model.forward(x, training=False)))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: ResNet, data: FeatureDataset, t_fixed: int = 128) -> float:
    """Fraction of items whose predicted label matches."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict_dataset(model, data, t_fixed) == data.labels))


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _snapshot(model, config, opt, epoch, best_acc, best_epoch, history) -> Checkpoint:
    return Checkpoint(
        model_config=model.config.to_dict(), train_config=config.to_dict(),
        params={k: v.copy() for k, v in model.state_dict().items()},
        epoch=epoch, best_val_acc=best_acc, best_epoch=best_epoch,
        rng_state=Rng(config.seed, epoch).get_state(),
        optimizer_tensors={k: v.copy() for k, v in opt.tensors().items()},
        optimizer_scalars=opt.scalars(), history=[dict(h) for h in history],
    )


def train(model: ResNet, train_set: FeatureDataset, val_set: FeatureDataset, config: TrainConfig,
          resume: Checkpoint | None = None, resume_best: Checkpoint | None = None,
          on_epoch: Optional[Callable[[int, Checkpoint], None]] = None,
          stop_after: int | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run the epoch loop and return (best-validation checkpoint, history rows).

    Epoch ``e`` shuffles with stream ``Rng(seed).split(e)``, so a run resumed
    from the checkpoint taken after epoch ``k`` continues exactly as an
    uninterrupted run would.  ``on_epoch(e, last_checkpoint)`` is called after
    every epoch (used to persist resumable state).  ``stop_after`` ends the
    loop once that many epochs are complete, keeping the full-length schedule.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    opt = Optimizer(config.resolved_optimizer(), config.momentum)
    use_reg = parse_mode(model.config.mode)[0] == "s" and config.lambda_sparse > 0
    history: list[dict] = []
    best: Checkpoint | None = None
    best_acc, best_epoch, start = -1.0, -1, 0
    if resume is not None:
        model.load_state_dict(resume.params)
        opt.load(resume.optimizer_tensors, resume.optimizer_scalars)
        history = [dict(h) for h in resume.history]
        best_acc, best_epoch, start = resume.best_val_acc, resume.best_epoch, resume.epoch
        best = resume_best
    base = Rng(config.seed)
    end = config.epochs if stop_after is None else min(stop_after, config.epochs)
    for epoch in range(start, end):
        lr = cosine_lr(epoch, config.epochs, config.lr, config.eta_min)
        total, count = 0.0, 0
        for batch in make_batches(train_set, config.batch_size, config.t_fixed, base.split(epoch)):
            model.zero_grad()
            logits = model.forward(batch.features.astype(model.dtype, copy=False), training=True)
            loss, grad = softmax_xent(logits, batch.labels)
            model.backward(grad)
            if use_reg:
                loss += config.lambda_sparse * model.regularizer(accumulate_grad=config.lambda_sparse)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch}")
            opt.step(model, lr)
            total += loss * len(batch.labels)
            count += len(batch.labels)
        val_acc = evaluate(model, val_set, config.t_fixed)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / count, "val_acc": val_acc,
               "reg_value": model.regularizer()}
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f val_acc %.4f reg %.3f", epoch, lr, row["train_loss"],
                 val_acc, row["reg_value"])
        if val_acc >= best_acc:  # ties keep the later, longer-trained model
            best_acc, best_epoch = val_acc, epoch
        last = _snapshot(model, config, opt, epoch + 1, best_acc, best_epoch, history)
        if best_epoch == epoch:
            best = last
        if on_epoch is not None:
            on_epoch(epoch, last)
    if best is None:
        raise RuntimeError("no best checkpoint available; pass resume_best when resuming")
    return best, history


def history_csv(history: list[dict]) -> str:
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=HISTORY_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS})
    return out.getvalue()
