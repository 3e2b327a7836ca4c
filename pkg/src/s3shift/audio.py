"""WAV -> stacked log-mel features.

The pipeline is fixed so that the same WAV bytes always give the same
features: 20 ms periodic-Hann frames with a 10 ms hop, a 512-point power
spectrum, 80 peak-normalized HTK-mel triangles on 0-8 kHz, natural log with
a 1e-10 floor, global CMVN, then 5-frame stacking with stride 2.
"""

from __future__ import annotations

import io
import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SAMPLE_RATE = 16000
FRAME_LENGTH = 320
HOP_LENGTH = 160
N_FFT = 512
N_MELS = 80
LOG_FLOOR = 1e-10
CMVN_EPS = 1e-10
STACK_WINDOW = 5
STACK_STRIDE = 2

FEATURE_MAGIC = b"S3FT"
CMVN_MAGIC = b"S3CM"
FORMAT_VERSION = 1


class WavFormatError(ValueError):
    pass


class NotPcmError(WavFormatError):
    pass


class SampleRateError(WavFormatError):
    pass


class ChannelCountError(WavFormatError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray  # float32 in [-1, 1]
    rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.rate != SAMPLE_RATE:
            raise SampleRateError(f"expected {SAMPLE_RATE} Hz audio, got {self.rate} Hz (no resampling)")


def read_wav(path) -> AudioClip:
    """16-bit PCM mono 16 kHz WAV; samples scaled by 1/32768."""
    try:
        wf = wave.open(str(path) if isinstance(path, Path) else path, "rb")
    except wave.Error as exc:
        raise NotPcmError(f"{path}: unsupported WAV encoding ({exc})") from exc
    with wf:
        if wf.getcomptype() != "NONE" or wf.getsampwidth() != 2:
            raise NotPcmError(f"{path}: only 16-bit PCM is supported (sample width {wf.getsampwidth()})")
        if wf.getnchannels() != 1:
            raise ChannelCountError(f"{path}: expected mono, got {wf.getnchannels()} channels")
        if wf.getframerate() != SAMPLE_RATE:
            raise SampleRateError(f"{path}: expected {SAMPLE_RATE} Hz, got {wf.getframerate()} Hz")
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip((pcm / 32768.0).astype(np.float32), SAMPLE_RATE)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(np.asarray(clip.samples, dtype=np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path) if isinstance(path, Path) else path, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.rate)
        wf.writeframes(pcm.astype("<i2").tobytes())


def hann_window(n: int = FRAME_LENGTH) -> np.ndarray:
    """Periodic Hann window (the DFT-even form)."""
    return 0.5 - 0.5 * np.cos(2.0 * math.pi * np.arange(n) / n)


def frame_signal(samples, frame_length: int = FRAME_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    """(T, frame_length) Hann-windowed frames, T = 1 + (L - frame_length) // hop."""
    x = samples.samples if isinstance(samples, AudioClip) else np.asarray(samples)
    if x.ndim != 1 or len(x) < frame_length:
        raise ValueError(f"clip of {len(x)} samples is shorter than one {frame_length}-sample frame")
    n = 1 + (len(x) - frame_length) // hop
    idx = np.arange(frame_length)[None, :] + hop * np.arange(n)[:, None]
    return x.astype(np.float64)[idx] * hann_window(frame_length)


def power_spectrum(frames: np.ndarray, nfft: int = N_FFT) -> np.ndarray:
    """|rFFT|^2 on bins 0..nfft/2 of zero-padded frames."""
    if frames.shape[-1] > nfft:
        raise ValueError(f"frame length {frames.shape[-1]} exceeds nfft {nfft}")
    return np.abs(np.fft.rfft(frames, n=nfft, axis=-1)) ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class MelFilterbank:
    weights: np.ndarray  # (n_mels, nfft // 2 + 1)
    fmin: float
    fmax: float
    centers_hz: np.ndarray


def mel_matrix(nfft: int = N_FFT, n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = 8000.0,
               rate: int = SAMPLE_RATE) -> MelFilterbank:
    """Triangles with centers equally spaced on the HTK mel scale, each scaled to peak 1."""
    if fmax > rate / 2 or fmin < 0 or fmin >= fmax:
        raise ValueError(f"need 0 <= fmin < fmax <= {rate / 2}, got {fmin}, {fmax}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(nfft // 2 + 1) * rate / nfft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    w = np.maximum(0.0, np.minimum((freqs - lo) / (mid - lo), (hi - freqs) / (hi - mid)))
    peak = w.max(axis=1)
    if np.any(peak <= 0):
        raise ValueError(f"{n_mels} mel filters are too narrow for nfft={nfft}: "
                         f"filter {int(np.argmin(peak))} covers no FFT bin")
    return MelFilterbank(w / peak[:, None], fmin, fmax, edges[1:-1])


def log_mel(power: np.ndarray, fb: MelFilterbank, floor: float = LOG_FLOOR) -> np.ndarray:
    if power.shape[-1] != fb.weights.shape[1]:
        raise ValueError(f"power spectrum has {power.shape[-1]} bins, filterbank expects {fb.weights.shape[1]}")
    return np.log(np.maximum(power @ fb.weights.T, floor))


_DEFAULT_FB: MelFilterbank | None = None


def logmel_features(clip: AudioClip | np.ndarray) -> np.ndarray:
    """(T, 80) float32 log-mel features before CMVN and stacking."""
    global _DEFAULT_FB
    if _DEFAULT_FB is None:
        _DEFAULT_FB = mel_matrix()
    return log_mel(power_spectrum(frame_signal(clip)), _DEFAULT_FB).astype(np.float32)


@dataclass
class CmvnStats:
    mean: np.ndarray
    var: np.ndarray
    count: int
    corpus: str = ""

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.count <= 0:
            raise ValueError("CMVN stats need a positive frame count")
        if np.any(self.var < 0):
            raise ValueError("CMVN variances must be non-negative")


def cmvn_fit(corpus: Iterable[np.ndarray], corpus_id: str = "") -> CmvnStats:
    """Global per-dimension mean/variance; two passes in float64, fixed order."""
    corpus = [np.asarray(f, dtype=np.float64) for f in corpus]
    if not corpus or sum(len(f) for f in corpus) == 0:
        raise ValueError("cannot fit CMVN on an empty corpus")
    count = sum(len(f) for f in corpus)
    mean = sum(f.sum(axis=0) for f in corpus) / count
    var = sum(((f - mean) ** 2).sum(axis=0) for f in corpus) / count
    return CmvnStats(mean, var, int(count), corpus_id)


def cmvn_apply(features: np.ndarray, stats: CmvnStats) -> np.ndarray:
    out = (np.asarray(features, dtype=np.float64) - stats.mean) / np.sqrt(stats.var + CMVN_EPS)
    return out.astype(np.float32)


def stack_frames(features: np.ndarray, window: int = STACK_WINDOW, stride: int = STACK_STRIDE) -> np.ndarray:
    """Row t' = concat(frames[stride*t' - window//2 .. stride*t' + window//2]), edges replicated.

    (T, D) -> (ceil(T / stride), window * D).
    """
    features = np.asarray(features)
    t = features.shape[0]
    if t < 1:
        raise ValueError("need at least one frame to stack")
    centers = np.arange(0, t, stride)
    offsets = np.arange(window) - window // 2
    idx = np.clip(centers[:, None] + offsets[None, :], 0, t - 1)
    return features[idx].reshape(len(centers), window * features.shape[1])


def extract_features(clip: AudioClip, stats: CmvnStats | None) -> np.ndarray:
    """Full pipeline: (T', 400) float32."""
    feats = logmel_features(clip)
    if stats is not None:
        feats = cmvn_apply(feats, stats)
    return stack_frames(feats).astype(np.float32)


# --------------------------------------------------------------------------
# file formats


def write_feature_archive(path, records: Sequence[tuple[str, np.ndarray]]) -> None:
    """S3FT: magic, u32 version, u32 count, then per record
    (u16 id length, utf-8 id, u32 frames, u32 dim, little-endian float32 data)."""
    out = io.BytesIO()
    out.write(FEATURE_MAGIC + struct.pack("<II", FORMAT_VERSION, len(records)))
    for utt_id, feat in records:
        feat = np.asarray(feat)
        if feat.ndim != 2:
            raise ValueError(f"{utt_id}: features must be 2-D, got {feat.shape}")
        key = utt_id.encode("utf-8")
        out.write(struct.pack("<H", len(key)) + key + struct.pack("<II", *feat.shape))
        out.write(np.ascontiguousarray(feat, dtype="<f4").tobytes())
    Path(path).write_bytes(out.getvalue())


def read_feature_archive(path) -> list[tuple[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature archive (magic {raw[:4]!r})")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported feature archive version {version}")
    pos, records = 12, []
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            utt_id = raw[pos : pos + klen].decode("utf-8")
            pos += klen
            t, d = struct.unpack_from("<II", raw, pos)
            pos += 8
            if pos + 4 * t * d > len(raw):
                raise ValueError("record data truncated")
            feat = np.frombuffer(raw, dtype="<f4", count=t * d, offset=pos).reshape(t, d).astype(np.float32)
            pos += 4 * t * d
            records.append((utt_id, feat))
    except struct.error as exc:
        raise ValueError(f"{path}: truncated feature archive") from exc
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes in feature archive")
    return records


def write_cmvn(path, stats: CmvnStats) -> None:
    """S3CM: magic, u32 version, u32 dim, float64 means, float64 variances, u64 count, corpus id."""
    key = stats.corpus.encode("utf-8")
    data = (CMVN_MAGIC + struct.pack("<II", FORMAT_VERSION, len(stats.mean))
            + stats.mean.astype("<f8").tobytes() + stats.var.astype("<f8").tobytes()
            + struct.pack("<QH", stats.count, len(key)) + key)
    Path(path).write_bytes(data)


def read_cmvn(path) -> CmvnStats:
    raw = Path(path).read_bytes()
    if raw[:4] != CMVN_MAGIC:
        raise ValueError(f"{path}: not a CMVN stats file (magic {raw[:4]!r})")
    try:
        version, dim = struct.unpack_from("<II", raw, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported CMVN version {version}")
        mean = np.frombuffer(raw, dtype="<f8", count=dim, offset=12)
        var = np.frombuffer(raw, dtype="<f8", count=dim, offset=12 + 8 * dim)
        count, klen = struct.unpack_from("<QH", raw, 12 + 16 * dim)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated CMVN stats file") from exc
    start = 12 + 16 * dim + 10
    corpus = raw[start : start + klen].decode("utf-8")
    return CmvnStats(mean.copy(), var.copy(), int(count), corpus)
