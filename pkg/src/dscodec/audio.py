"""Audio I/O, fixed-length crop datasets and spectral features."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from math import gcd
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-5


class AudioError(ValueError):
    """Unreadable, malformed or mismatched audio."""


class SampleRateMismatch(AudioError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains NaN or Inf samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def check_sample_rate(wav: Waveform, expected: int = SAMPLE_RATE) -> None:
    if wav.sample_rate != expected:
        raise SampleRateMismatch(f"expected {expected} Hz audio, got {wav.sample_rate} Hz")


def resample(wav: Waveform, target: int) -> Waveform:
    if wav.sample_rate == target:
        return wav
    g = gcd(wav.sample_rate, target)
    return Waveform(resample_poly(wav.samples, target // g, wav.sample_rate // g), target)


def load_wav(path, expected_rate: int | None = SAMPLE_RATE, resample_to_expected: bool = False) -> Waveform:
    """Read a PCM or float WAV file as a mono waveform in [-1, 1].

    Stereo files are averaged to mono.  ``expected_rate=None`` skips the
    rate check; otherwise a mismatch raises unless ``resample_to_expected``.
    """
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises ValueError/struct.error on junk
        raise AudioError(f"cannot read {path}: {exc}") from exc

    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported WAV encoding {data.dtype} in {path}")
    if x.ndim == 2:
        x = x.mean(axis=1)

    wav = Waveform(x, int(rate))
    if expected_rate is not None and wav.sample_rate != expected_rate:
        if not resample_to_expected:
            raise SampleRateMismatch(
                f"{path}: sample rate {wav.sample_rate} Hz, expected {expected_rate} Hz "
                "(pass resample_to_expected=True to convert)"
            )
        wav = resample(wav, expected_rate)
    return wav


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    # round-to-nearest, saturate instead of wrapping
    return np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype(np.int16)


def save_wav(path, wav: Waveform) -> None:
    path = Path(path)
    try:
        wavfile.write(str(path), wav.sample_rate, to_pcm16(wav.samples))
    except OSError as exc:
        raise AudioError(f"cannot write {path}: {exc}") from exc


def read_manifest(path) -> list[Path]:
    """Newline-separated file list; blank lines and ``#`` comments are ignored.

    Relative entries resolve against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    files = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        files.append(p if p.is_absolute() else base / p)
    return files


@dataclass
class CropDataset:
    """Random fixed-length crops from a list of WAV files.

    Every crop is a pure function of ``(seed, epoch, index)``, so prefetch
    order cannot change batch contents.
    """

    files: Sequence[Path]
    crop_length: int = SAMPLE_RATE
    seed: int = 0
    sample_rate: int = SAMPLE_RATE
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.files = [Path(f) for f in self.files]
        if not self.files:
            raise AudioError("dataset has an empty file list")
        if self.crop_length <= 0:
            raise AudioError("crop_length must be positive")

    @classmethod
    def from_manifest(cls, manifest, **kwargs) -> "CropDataset":
        return cls(read_manifest(manifest), **kwargs)

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], **kwargs) -> "CropDataset":
        """In-memory dataset; entries get synthetic names ``<mem:i>``."""
        names = [Path(f"<mem:{i}>") for i in range(len(arrays))]
        ds = cls(names, **kwargs)
        for name, arr in zip(names, arrays):
            ds._cache[name] = np.asarray(arr, dtype=np.float64)
        return ds

    def __len__(self):
        return len(self.files)

    def samples(self, i: int) -> np.ndarray:
        name = self.files[i]
        if name not in self._cache:
            self._cache[name] = load_wav(name, expected_rate=self.sample_rate).samples
        return self._cache[name]

    def crop(self, index: int, epoch: int = 0) -> Waveform:
        return random_crop(self, index, np.random.default_rng([self.seed, epoch, index]))

    def batch(self, step: int, batch_size: int) -> np.ndarray:
        """Batch ``step`` of an endless shuffled stream, shape (batch_size, crop_length)."""
        n = len(self)
        out = np.empty((batch_size, self.crop_length), dtype=np.float32)
        for j in range(batch_size):
            g = step * batch_size + j
            epoch, pos = divmod(g, n)
            order = np.random.default_rng([self.seed, epoch]).permutation(n)
            out[j] = self.crop(int(order[pos]), epoch).samples
        return out


def random_crop(dataset: CropDataset, index: int, rng: np.random.Generator) -> Waveform:
    x = dataset.samples(index)
    n = dataset.crop_length
    if len(x) <= n:
        return Waveform(np.pad(x, (0, n - len(x))), dataset.sample_rate)
    start = int(rng.integers(0, len(x) - n + 1))
    return Waveform(x[start:start + n], dataset.sample_rate)


# -- spectral features ----------------------------------------------------------


@dataclass(frozen=True)
class SpectrogramConfig:
    fft_size: int = 1024
    hop: int = 256
    window_size: int | None = None
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        win = self.window
        if not (0 < self.hop <= win <= self.fft_size):
            raise ValueError(
                f"need 0 < hop <= window <= fft_size, got hop={self.hop} window={win} fft={self.fft_size}"
            )

    @property
    def window(self) -> int:
        return self.fft_size if self.window_size is None else self.window_size


def _as_tensor(x):
    if isinstance(x, Waveform):
        return torch.from_numpy(x.samples), True
    if isinstance(x, np.ndarray):
        return torch.from_numpy(np.asarray(x, dtype=np.float64)), True
    return x, False


def _hann(cfg: SpectrogramConfig, like: torch.Tensor) -> torch.Tensor:
    w = torch.hann_window(cfg.window, periodic=True, dtype=like.dtype, device=like.device)
    left = (cfg.fft_size - cfg.window) // 2
    return torch.nn.functional.pad(w, (left, cfg.fft_size - cfg.window - left))


def stft(x, cfg: SpectrogramConfig):
    """Centered STFT, shape (..., fft_size//2 + 1, frames).

    Accepts a Waveform, a numpy array or a torch tensor (batched or not).
    Reflect padding by fft_size//2 on both sides, zero padding if the signal
    is too short to reflect.  numpy in, numpy out.
    """
    t, to_numpy = _as_tensor(x)
    lead = t.shape[:-1]
    flat = t.reshape(-1, 1, t.shape[-1])
    pad = cfg.fft_size // 2
    mode = "reflect" if t.shape[-1] > pad else "constant"
    flat = torch.nn.functional.pad(flat, (pad, pad), mode=mode).squeeze(1)
    spec = torch.stft(
        flat, cfg.fft_size, hop_length=cfg.hop, window=_hann(cfg, flat),
        center=False, return_complex=True,
    )
    spec = spec.reshape(*lead, *spec.shape[-2:])
    return spec.numpy() if to_numpy else spec


def n_frames(length: int, cfg: SpectrogramConfig) -> int:
    return 1 + (length + 2 * (cfg.fft_size // 2) - cfg.fft_size) // cfg.hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=32)
def mel_filterbank(sample_rate: int, fft_size: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular HTK-mel filterbank, shape (n_mels, fft_size//2 + 1), peak height 1."""
    if fmax > sample_rate / 2:
        raise ValueError(f"fmax {fmax} Hz exceeds Nyquist {sample_rate / 2} Hz")
    if not 0 <= fmin < fmax:
        raise ValueError(f"need 0 <= fmin < fmax, got {fmin}, {fmax}")
    freqs = np.linspace(0.0, sample_rate / 2, fft_size // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (center - lo)
    down = (hi - freqs) / (hi - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mel_spectrogram(x, cfg: SpectrogramConfig):
    """Log-magnitude mel spectrogram, log(max(mel, 1e-5)), shape (..., n_mels, frames)."""
    fmax = cfg.sample_rate / 2 if cfg.fmax is None else cfg.fmax
    fb = mel_filterbank(cfg.sample_rate, cfg.fft_size, cfg.n_mels, float(cfg.fmin), float(fmax))
    spec = stft(x, cfg)
    to_numpy = isinstance(spec, np.ndarray)
    if to_numpy:
        spec = torch.from_numpy(spec)
    mag = spec.abs()
    mel = torch.matmul(torch.tensor(fb, dtype=mag.dtype), mag)
    out = torch.log(torch.clamp(mel, min=LOG_FLOOR))
    return out.numpy() if to_numpy else out
