"""Synthetic paired data, a log-mel front end and on-disk formats.

Synthetic pairs tie both modalities to the same latent draw: the class set
picks grating orientations in the image and mel bands in the spectrogram;
an instance code shared by both modalities makes individual pairs
matchable, not just their classes.  The code weights a faint plaid
texture in the image and a loudness envelope on every class band of the
spectrogram; both repeat every CODE_PERIOD pixels/frames.  Per-class
intensities add a little more instance variation.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ConfigError

GENERATOR_VERSION = "synth-v1"
MAGIC = b"AVSM"
FORMAT_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
BAND_ROWS = 8
GRATING_CYCLES = 8
CODE_PERIOD = 16
CODE_WAVES = ((1, 0), (0, 1), (1, 1), (1, -1))  # image plaid directions
CODE_DIM = 2 * len(CODE_WAVES)
CODE_GAIN_IMAGE = 0.06
CODE_GAIN_AUDIO = 0.25


class FormatError(ValueError):
    """A tensor container is malformed."""


class InputError(ValueError):
    """Audio input cannot be turned into a spectrogram."""


class SeparabilityError(ConfigError):
    """Too many classes for the spectrogram to hold disjoint bands."""


# -- synthetic pairs ---------------------------------------------------------


@dataclass
class PairedInstance:
    image: np.ndarray  # (Hv, Wv, 3) in [0, 1]
    spectrogram: np.ndarray  # (Ha, Wa)
    labels: np.ndarray  # (K,) multi-hot
    id: tuple[int, int]

    @property
    def classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.labels)]


def _band_taper() -> np.ndarray:
    j = np.arange(BAND_ROWS)
    return np.sin(np.pi * (j + 0.5) / BAND_ROWS)


def _code_image(h: int, w: int) -> np.ndarray:
    """(CODE_DIM, h, w) plaid patterns: cos and sin waves along CODE_WAVES."""
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    out = []
    for ky, kx in CODE_WAVES:
        arg = 2 * np.pi * (kx * x + ky * y) / CODE_PERIOD
        out += [np.cos(arg), np.sin(arg)]
    return np.stack(out)


def _code_audio(h: int) -> np.ndarray:
    """(CODE_DIM, h) temporal envelopes: cos and sin at 1..CODE_DIM/2 cycles per period."""
    t = np.arange(h, dtype=np.float64)
    out = []
    for k in range(1, len(CODE_WAVES) + 1):
        arg = 2 * np.pi * k * t / CODE_PERIOD
        out += [np.cos(arg), np.sin(arg)]
    return np.stack(out)


def sample_classes(seed: int, index: int, K: int, max_classes: int = 2) -> np.ndarray:
    rng = np.random.default_rng([seed, index])
    m = int(rng.integers(1, max_classes + 1))
    return np.sort(rng.choice(K, size=m, replace=False))


def synth_pair(
    seed: int,
    index: int,
    K: int = 8,
    noise_sigma: float = 0.05,
    image_size: tuple[int, int] = (64, 64),
    audio_size: tuple[int, int] = (128, 64),
    max_classes: int = 2,
    frame: int = 0,
) -> PairedInstance:
    """Deterministic aligned (image, spectrogram, labels) triple.

    ``frame`` only reseeds the image noise, giving several views of one clip.
    """
    if K < 2:
        raise ConfigError(f"need at least 2 classes, got {K}")
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be nonnegative, got {noise_sigma}")
    if max_classes not in (1, 2):
        raise ConfigError(f"max_classes must be 1 or 2, got {max_classes}")
    ha, wa = audio_size
    if K > wa // BAND_ROWS:
        raise SeparabilityError(f"{K} classes do not fit {wa} mel rows at {BAND_ROWS} rows per band")

    rng = np.random.default_rng([seed, index])
    m = int(rng.integers(1, max_classes + 1))
    classes = np.sort(rng.choice(K, size=m, replace=False))
    amps = rng.uniform(0.4, 1.0, size=m)
    code = rng.uniform(-1.0, 1.0, size=CODE_DIM)

    hv, wv = image_size
    y, x = np.mgrid[0:hv, 0:wv].astype(np.float64)
    raw = np.zeros((hv, wv))
    for c, a in zip(classes, amps):
        theta = np.pi * c / K
        u = (x * np.cos(theta) + y * np.sin(theta)) / wv
        raw += a * np.sin(2 * np.pi * GRATING_CYCLES * u)
    img = 0.5 + 0.2 * raw + CODE_GAIN_IMAGE * np.tensordot(code, _code_image(hv, wv), axes=1)

    spec = np.zeros((ha, wa))
    envelope = 1.0 + CODE_GAIN_AUDIO * (code @ _code_audio(ha))
    taper = _band_taper()
    for c, a in zip(classes, amps):
        center = int(math.floor((c + 0.5) * wa / K))
        lo = center - BAND_ROWS // 2
        spec[:, lo : lo + BAND_ROWS] += 2.0 * a * envelope[:, None] * taper[None, :]

    if noise_sigma > 0:
        spec = spec + np.random.default_rng([seed, index, 0, 1]).normal(0, noise_sigma, spec.shape)
        img = img + np.random.default_rng([seed, index, frame, 2]).normal(0, noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    image = np.repeat(img[:, :, None], 3, axis=2)
    labels = np.zeros(K)
    labels[classes] = 1.0
    return PairedInstance(image, spec, labels, (seed, index))


@dataclass
class DataConfig:
    K: int = 8
    n_train: int = 256
    n_eval: int = 128
    noise_sigma: float = 0.05
    max_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_eval < 2:
            raise ConfigError("retrieval needs at least 2 eval instances")
        if self.max_classes not in (1, 2):
            raise ConfigError(f"max_classes must be 1 or 2, got {self.max_classes}")


class SyntheticDataset:
    """Materializes instances lazily from (seed, index) and caches them."""

    def __init__(self, cfg: DataConfig, image_size, audio_size):
        self.cfg = cfg
        self.image_size = tuple(image_size)
        self.audio_size = tuple(audio_size)
        self._cache: dict[tuple[int, int], PairedInstance] = {}

    def indices(self, split: str) -> np.ndarray:
        if split == "train":
            return np.arange(self.cfg.n_train)
        if split == "eval":
            return np.arange(self.cfg.n_train, self.cfg.n_train + self.cfg.n_eval)
        raise ConfigError(f"unknown split {split!r}")

    def instance(self, index: int, frame: int = 0) -> PairedInstance:
        key = (int(index), frame)
        if key not in self._cache:
            c = self.cfg
            self._cache[key] = synth_pair(
                c.seed, int(index), c.K, c.noise_sigma, self.image_size, self.audio_size,
                c.max_classes, frame,
            )
        return self._cache[key]

    def batch(self, indices, frame: int = 0):
        """Stacked (spectrograms, images, multi-hot labels)."""
        items = [self.instance(i, frame) for i in indices]
        return (
            np.stack([it.spectrogram for it in items]),
            np.stack([it.image for it in items]),
            np.stack([it.labels for it in items]),
        )


def build_manifest(n_train: int, n_eval: int, K: int, seed: int, max_classes: int = 2) -> dict:
    if n_eval < 2:
        raise ConfigError("retrieval needs at least 2 eval instances")
    entries = []
    for i in range(n_train + n_eval):
        entries.append(
            {
                "id": [seed, i],
                "split": "train" if i < n_train else "eval",
                "labels": sample_classes(seed, i, K, max_classes).tolist(),
            }
        )
    return {
        "generator": GENERATOR_VERSION,
        "K": K,
        "seed": seed,
        "max_classes": max_classes,
        "n_train": n_train,
        "n_eval": n_eval,
        "instances": entries,
    }


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode()


def write_manifest(path, manifest: dict) -> None:
    _atomic_write(Path(path), manifest_bytes(manifest))


# -- log-mel front end -------------------------------------------------------


@dataclass
class MelConfig:
    sample_rate: int = 16000
    window: int = 400
    hop: int = 160
    n_fft: int = 512
    mel_bins: int = 128
    target_frames: int = 1024
    low_freq: float = 20.0
    norm_mean: float = -5.081
    norm_std: float = 4.485
    norm_scale: float = 1.0  # 2.0 gives the (x - mean) / (2 std) variant

    def __post_init__(self):
        if not self.hop <= self.window <= self.n_fft:
            raise ConfigError("need hop <= window <= n_fft")

    def silence_value(self) -> float:
        return (math.log(1e-6) - self.norm_mean) / (self.norm_std * self.norm_scale)


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def mel_edges(cfg: MelConfig) -> np.ndarray:
    """mel_bins + 2 equally spaced edge points on the mel scale."""
    return np.linspace(hz_to_mel(cfg.low_freq), hz_to_mel(cfg.sample_rate / 2), cfg.mel_bins + 2)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    return mel_to_hz(mel_edges(cfg)[1:-1])


def mel_filterbank(cfg: MelConfig, oversample: int = 32) -> np.ndarray:
    """Triangular filters (mel_bins, n_fft // 2 + 1).

    Each weight is the triangle averaged over the FFT bin's frequency span,
    so even filters narrower than one bin get nonzero mass.
    """
    edges = mel_edges(cfg)
    n_bins = cfg.n_fft // 2 + 1
    df = cfg.sample_rate / cfg.n_fft
    offs = (np.arange(oversample) + 0.5) / oversample - 0.5
    f = (np.arange(n_bins)[:, None] + offs[None, :]) * df  # (bins, oversample)
    mel = hz_to_mel(np.clip(f, 0.0, None))
    lo, mid, hi = edges[:-2], edges[1:-1], edges[2:]
    m = mel[None]
    up = (m - lo[:, None, None]) / (mid - lo)[:, None, None]
    down = (hi[:, None, None] - m) / (hi - mid)[:, None, None]
    tri = np.clip(np.minimum(up, down), 0.0, None)
    return tri.mean(axis=2)


def frame_count(n_samples: int, cfg: MelConfig) -> int:
    return 1 + (n_samples - cfg.window) // cfg.hop


def log_mel(wave_: np.ndarray, cfg: MelConfig | None = None, pad: bool = True) -> np.ndarray:
    """Normalized log-mel spectrogram (target_frames, mel_bins).

    Magnitude STFT with a periodic Hann window, triangular mel filters,
    ``log(x + 1e-6)``, then ``(x - mean) / (std * scale)``.  Frames beyond
    the clip are filled with the value of normalized silence.
    """
    cfg = cfg or MelConfig()
    x = np.asarray(wave_, dtype=np.float64).reshape(-1)
    if x.size <= cfg.window:
        raise InputError(f"need more than {cfg.window} samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise InputError("waveform has non-finite samples")
    n = frame_count(x.size, cfg)
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window)[:: cfg.hop][:n]
    win = np.hanning(cfg.window + 1)[:-1]
    mag = np.abs(np.fft.rfft(frames * win, n=cfg.n_fft, axis=1))
    mel = mag @ mel_filterbank(cfg).T
    spec = (np.log(mel + 1e-6) - cfg.norm_mean) / (cfg.norm_std * cfg.norm_scale)
    if not pad:
        return spec
    out = np.full((cfg.target_frames, cfg.mel_bins), cfg.silence_value())
    keep = min(n, cfg.target_frames)
    out[:keep] = spec[:keep]
    return out


def read_wav(path, target_rate: int = 16000) -> np.ndarray:
    """Mono 16-bit PCM WAV as floats in [-1, 1), resampled to ``target_rate``."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2:
                raise InputError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
            if w.getnchannels() != 1:
                raise InputError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise InputError(f"{path}: not a readable WAV file ({e})") from e
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if rate != target_rate:
        from scipy.signal import resample_poly

        g = math.gcd(rate, target_rate)
        x = resample_poly(x, target_rate // g, rate // g)
    return x


def write_wav(path, samples: np.ndarray, rate: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


# -- tensor container ----------------------------------------------------------


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            code = 0
        elif arr.dtype == np.float64:
            code = 1
        else:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        key = name.encode("utf-8")
        if len(key) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"{name}: name or rank too large for the container")
        parts.append(struct.pack("<H", len(key)))
        parts.append(key)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated container at byte {pos}: need {n} more bytes")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise FormatError("bad magic at byte 0")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"tensor name is not UTF-8 at byte {start + 2}") from e
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code} at byte {pos - 2}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = DTYPE_CODES[code]
        size = math.prod(dims) * dt.itemsize
        if size > len(buf) - pos:
            raise FormatError(f"truncated container at byte {pos}: tensor {name!r} needs {size} bytes")
        arr = np.frombuffer(take(size), dtype=dt).reshape(dims)
        out[name] = arr.astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise FormatError(f"trailing bytes after last tensor at byte {pos}")
    return out


def write_tensor(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32/float64 arrays to a little-endian container, atomically."""
    _atomic_write(Path(path), encode_tensors(tensors))


def read_tensor(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


