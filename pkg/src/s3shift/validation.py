"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .datasets import FEATURE_DIM


def check_feature_maps(X, dim: int | None = FEATURE_DIM, name: str = "X") -> list[np.ndarray]:
    """Accept a (N, T, D) / (N, 1, T, D) array or a sequence of (T, D) maps.

    Returns a list of float32 (T, D) arrays.
    """
    if isinstance(X, np.ndarray):
        if X.ndim == 4 and X.shape[1] == 1:
            X = X[:, 0]
        if X.ndim != 3:
            raise ValueError(f"{name} must be (N, T, D), (N, 1, T, D) or a list of (T, D) maps; got {X.shape}")
        maps = list(X)
    else:
        maps = [np.asarray(f) for f in X]
    if not maps:
        raise ValueError(f"{name} is empty")
    out = []
    for i, f in enumerate(maps):
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValueError(f"{name}[{i}] must be a non-empty (T, D) map, got shape {f.shape}")
        if dim is not None and f.shape[1] != dim:
            raise ValueError(f"{name}[{i}] has feature width {f.shape[1]}, expected {dim}")
        if not np.all(np.isfinite(f)):
            raise ValueError(f"{name}[{i}] contains NaN or Inf")
        out.append(f.astype(np.float32, copy=False))
    return out


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"y must be 1-D with {n} entries, got shape {y.shape}")
    return y


def check_is_fitted(est, attr: str = "model_") -> None:
    from sklearn.exceptions import NotFittedError

    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


def as_clips(clips: Sequence) -> list[np.ndarray]:
    from .audio import AudioClip

    out = []
    for c in clips:
        out.append(c.samples if isinstance(c, AudioClip) else np.asarray(c, dtype=np.float32))
    return out
