"""Fluent Speech Commands manifests, intent labels, batching and a synthetic task."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Rng

log = logging.getLogger(__name__)

FEATURE_DIM = 400
MANIFEST_COLUMNS = ("path", "speakerId", "transcription", "action", "object", "location")
FSC_SPLIT_SIZES = {"train_data.csv": 23132, "valid_data.csv": 3118, "test_data.csv": 3793}
FSC_N_INTENTS = 15
FSC_N_SLOTS = 8


class DataError(ValueError):
    """Malformed or missing dataset input."""


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    speaker_id: str
    transcription: str
    action: str
    object: str
    location: str

    @property
    def intent(self) -> str:
        return f"{self.action}_{self.object}"


def load_manifest(csv_path: str | os.PathLike, audio_root: str | os.PathLike | None = None,
                  lazy: bool = False) -> list[ManifestRecord]:
    """Read an FSC-style CSV; extra columns (e.g. a leading index) are ignored.

    Relative audio paths resolve against ``audio_root`` (default: the CSV's
    directory).  Unless ``lazy``, every audio file must exist.
    """
    csv_path = Path(csv_path)
    try:
        fh = open(csv_path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {csv_path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in MANIFEST_COLUMNS:
            if col not in header:
                raise DataError(f"manifest {csv_path} is missing column {col!r}")
        root = Path(audio_root) if audio_root is not None else csv_path.parent
        records = []
        for lineno, row in enumerate(reader, start=2):
            rec = ManifestRecord(
                path=row["path"], speaker_id=row["speakerId"], transcription=row["transcription"],
                action=row["action"], object=row["object"], location=row["location"])
            for slot in ("action", "object", "location"):
                if not getattr(rec, slot):
                    raise DataError(f"{csv_path}:{lineno}: empty {slot!r}")
            if not Path(rec.path).is_absolute():
                rec = ManifestRecord(str(root / rec.path), *[getattr(rec, f) for f in
                                     ("speaker_id", "transcription", "action", "object", "location")])
            if not lazy and not Path(rec.path).exists():
                raise DataError(f"{csv_path}:{lineno}: audio file {rec.path} not found")
            records.append(rec)
    expected = FSC_SPLIT_SIZES.get(csv_path.name)
    if expected is not None and len(records) != expected:
        log.warning("%s has %d records; the full FSC split has %d", csv_path.name, len(records), expected)
    else:
        log.info("loaded %d records from %s", len(records), csv_path)
    return records


@dataclass
class LabelMap:
    intents: list[str]
    slots: list[str]

    def __post_init__(self):
        self._intent_index = {k: i for i, k in enumerate(self.intents)}
        self._slot_index = {k: i for i, k in enumerate(self.slots)}
        if len(self._intent_index) != len(self.intents) or len(self._slot_index) != len(self.slots):
            raise ValueError("label vocabularies must not contain duplicates")

    @property
    def n_intents(self) -> int:
        return len(self.intents)

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    def intent_index(self, rec: ManifestRecord) -> int:
        try:
            return self._intent_index[rec.intent]
        except KeyError:
            raise DataError(f"intent {rec.intent!r} not in label map") from None

    def slot_index(self, rec: ManifestRecord) -> int:
        try:
            return self._slot_index[rec.location]
        except KeyError:
            raise DataError(f"slot {rec.location!r} not in label map") from None

    def to_json(self) -> str:
        return json.dumps({"intents": self.intents, "slots": self.slots}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LabelMap":
        d = json.loads(text)
        return cls(list(d["intents"]), list(d["slots"]))


def build_label_map(records: Sequence[ManifestRecord], check_fsc: bool = False) -> LabelMap:
    """Intent = action_object, slot = location; both sorted lexicographically."""
    if not records:
        raise DataError("cannot build a label map from zero records")
    lm = LabelMap(sorted({r.intent for r in records}), sorted({r.location for r in records}))
    if check_fsc and (lm.n_intents != FSC_N_INTENTS or lm.n_slots != FSC_N_SLOTS):
        log.warning("label map has %d intents / %d slots; full FSC has %d / %d",
                    lm.n_intents, lm.n_slots, FSC_N_INTENTS, FSC_N_SLOTS)
    return lm


@dataclass
class FeatureDataset:
    """Variable-length (T', 400) feature maps with integer labels."""

    features: list[np.ndarray]
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise DataError(f"{len(self.features)} feature maps but {len(self.labels)} labels")
        if not self.ids:
            self.ids = [f"utt{i:06d}" for i in range(len(self.features))]
        for f in self.features:
            if f.ndim != 2 or f.shape[0] < 1:
                raise DataError(f"feature maps must be (T, D) with T >= 1, got {f.shape}")

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, idx: Iterable[int]) -> "FeatureDataset":
        idx = list(idx)
        return FeatureDataset([self.features[i] for i in idx], self.labels[idx], [self.ids[i] for i in idx])


@dataclass
class Batch:
    features: np.ndarray  # (N, 1, T_fixed, D)
    labels: np.ndarray  # (N,)


def pad_or_crop(feat: np.ndarray, t_fixed: int) -> np.ndarray:
    """Zero-pad at the end of the time axis, or keep the centered ``t_fixed`` rows."""
    t = feat.shape[0]
    if t == t_fixed:
        return feat
    if t < t_fixed:
        out = np.zeros((t_fixed,) + feat.shape[1:], dtype=feat.dtype)
        out[:t] = feat
        return out
    start = (t - t_fixed) // 2
    return feat[start : start + t_fixed]


def stack_batch(feats: Sequence[np.ndarray], t_fixed: int, dtype=np.float32) -> np.ndarray:
    return np.stack([pad_or_crop(f, t_fixed) for f in feats])[:, None].astype(dtype, copy=False)


def make_batches(data: FeatureDataset, batch_size: int = 8, t_fixed: int = 128,
                 rng: Rng | None = None) -> list[Batch]:
    """Shuffled (when ``rng`` is given) fixed-size batches; the last one may be partial."""
    if t_fixed < 1:
        raise ValueError("t_fixed must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(data)) if rng is not None else np.arange(len(data))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        batches.append(Batch(stack_batch([data.features[i] for i in idx], t_fixed), data.labels[idx]))
    return batches


# --------------------------------------------------------------------------
# synthetic task


def band_layout(classes: int, width: int = FEATURE_DIM) -> list[tuple[int, int]]:
    """Column band (start, stop) of each class.

    Band widths grow with the class index so classes differ both in where the
    energy sits and in how much of the map it covers.
    """
    bands = []
    for k in range(classes):
        w = max(1, round(width * (k + 1) / (2 * classes)))
        start = round(k * (width - w) / max(classes - 1, 1))
        bands.append((start, start + w))
    return bands


@dataclass
class SyntheticSplits:
    train: FeatureDataset
    val: FeatureDataset
    test: FeatureDataset
    classes: int


def synth_dataset(classes: int = 4, per_class: int = 50, rng: Rng | int = 7, noise: float = 0.5,
                  frames: int = 8, amplitude: float = 1.0) -> SyntheticSplits:
    """Band-energy maps of shape (frames, 400): class k lifts its band by ``amplitude``.

    Each class is split 80/10/10 into train/val/test in generation order.
    """
    if not 2 <= classes <= 16:
        raise ValueError(f"classes must be in [2, 16], got {classes}")
    if per_class < 3:
        raise ValueError("per_class must be >= 3 so every split is non-empty")
    rng = Rng(rng) if isinstance(rng, int) else rng
    n_hold = max(1, per_class // 10)
    splits = {"train": ([], [], []), "val": ([], [], []), "test": ([], [], [])}
    for k, (lo, hi) in enumerate(band_layout(classes)):
        template = np.zeros((frames, FEATURE_DIM))
        template[:, lo:hi] = amplitude
        for i in range(per_class):
            x = template + noise * rng.standard_normal(frames * FEATURE_DIM).reshape(frames, FEATURE_DIM)
            if i < per_class - 2 * n_hold:
                name = "train"
            elif i < per_class - n_hold:
                name = "val"
            else:
                name = "test"
            feats, labels, ids = splits[name]
            feats.append(x.astype(np.float32))
            labels.append(k)
            ids.append(f"synth-{k:02d}-{i:04d}")
    ds = {name: FeatureDataset(f, np.array(l), i) for name, (f, l, i) in splits.items()}
    return SyntheticSplits(ds["train"], ds["val"], ds["test"], classes)
