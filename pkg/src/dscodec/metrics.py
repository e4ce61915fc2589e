"""Objective metrics: STOI, voiced/unvoiced F1 and pluggable PESQ/UTMOS adapters."""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.signal import resample_poly

from . import kernels
from .audio import SAMPLE_RATE, Waveform, load_wav, read_manifest

log = logging.getLogger(__name__)

_EPS = np.finfo(np.float64).eps


class MetricUnavailable(LookupError):
    """No adapter registered for the requested metric."""


class AdapterRangeError(ValueError):
    pass


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64).reshape(-1)


# -- STOI -------------------------------------------------------------------------

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30  # frames, 384 ms
STOI_BETA = -15.0  # dB, lower signal-to-distortion bound
STOI_DYN_RANGE = 40.0  # dB, silent-frame removal


def _hann(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def third_octave_bands(fs: int = STOI_FS, nfft: int = STOI_NFFT, n_bands: int = STOI_BANDS,
                       min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    """0/1 matrix (n_bands, nfft//2 + 1) grouping FFT bins into one-third octave bands."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    cf = min_freq * 2.0 ** (np.arange(n_bands) / 3.0)
    lo, hi = cf * 2.0 ** (-1 / 6), cf * 2.0 ** (1 / 6)
    obm = np.zeros((n_bands, f.size))
    for i in range(n_bands):
        a = np.argmin((f - lo[i]) ** 2)
        b = np.argmin((f - hi[i]) ** 2)
        obm[i, a:b] = 1.0
    return obm


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    starts = range(0, len(x) - size, hop)
    return np.array([x[s:s + size] for s in starts]).reshape(-1, size)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n, size = frames.shape
    out = np.zeros((n - 1) * hop + size) if n else np.zeros(0)
    for i in range(n):
        out[i * hop:i * hop + size] += frames[i]
    return out


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float = STOI_DYN_RANGE,
                         size: int = STOI_FRAME, hop: int = STOI_FRAME // 2):
    """Drop frames more than ``dyn_range`` dB below the loudest reference frame, in both signals."""
    w = _hann(size)
    xf = _frames(x, size, hop) * w
    yf = _frames(y, size, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range if energy.size else np.zeros(0, dtype=bool)
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _band_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x, STOI_FRAME, STOI_FRAME // 2) * _hann(STOI_FRAME), n=STOI_NFFT, axis=1)
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)


def stoi(reference, degraded, sample_rate: int = SAMPLE_RATE) -> float:
    """Short-time objective intelligibility of ``degraded`` against ``reference``."""
    x, y = _samples(reference), _samples(degraded)
    if isinstance(reference, Waveform):
        sample_rate = reference.sample_rate
        if isinstance(degraded, Waveform) and degraded.sample_rate != sample_rate:
            raise ValueError("reference and degraded sample rates differ")
    if x.shape != y.shape:
        raise ValueError(f"signals differ in length: {x.shape} vs {y.shape}")
    if sample_rate != STOI_FS:
        from math import gcd

        g = gcd(sample_rate, STOI_FS)
        x = resample_poly(x, STOI_FS // g, sample_rate // g)
        y = resample_poly(y, STOI_FS // g, sample_rate // g)
    x, y = remove_silent_frames(x, y)
    obm = third_octave_bands()
    x_tob, y_tob = _band_envelopes(x, obm), _band_envelopes(y, obm)
    if x_tob.shape[1] < STOI_SEGMENT:
        raise ValueError(
            f"signal too short for STOI: {x_tob.shape[1]} active frames, need {STOI_SEGMENT} (384 ms)"
        )
    clip = 1.0 + 10.0 ** (-STOI_BETA / 20.0)
    return float(kernels.stoi_correlation(np.ascontiguousarray(x_tob), np.ascontiguousarray(y_tob),
                                          STOI_SEGMENT, clip))


# -- voiced / unvoiced F1 ------------------------------------------------------------


@dataclass(frozen=True)
class VoicingConfig:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    fmin: float = 60.0
    fmax: float = 400.0
    threshold: float = 0.45
    energy_floor: float = 1e-10  # mean square per sample below which a frame is unvoiced


def voicing(x, sample_rate: int = SAMPLE_RATE, cfg: VoicingConfig = VoicingConfig()) -> np.ndarray:
    """Per-frame voiced decisions from the normalized autocorrelation peak in the pitch range."""
    s = _samples(x)
    if isinstance(x, Waveform):
        sample_rate = x.sample_rate
    frame = int(round(cfg.frame_ms * sample_rate / 1000))
    hop = int(round(cfg.hop_ms * sample_rate / 1000))
    min_lag = int(sample_rate // cfg.fmax)
    max_lag = min(int(sample_rate // cfg.fmin), frame - 1)
    peaks = kernels.autocorr_peaks(np.ascontiguousarray(s, dtype=np.float64), frame, hop, min_lag, max_lag,
                                   cfg.energy_floor)
    return peaks > cfg.threshold


def vuv_counts(reference: np.ndarray, degraded: np.ndarray) -> dict[str, int]:
    """Confusion counts with voiced as the positive class; the shorter sequence is padded unvoiced."""
    n = max(len(reference), len(degraded))
    r = np.zeros(n, dtype=bool)
    d = np.zeros(n, dtype=bool)
    r[:len(reference)] = reference
    d[:len(degraded)] = degraded
    return {"tp": int(np.sum(r & d)), "fp": int(np.sum(~r & d)), "fn": int(np.sum(r & ~d)),
            "tn": int(np.sum(~r & ~d))}


def precision_recall_f1(reference: np.ndarray, degraded: np.ndarray) -> tuple[float, float, float]:
    c = vuv_counts(reference, degraded)
    if c["tp"] + c["fn"] == 0:  # reference entirely unvoiced
        score = 1.0 if c["fp"] == 0 else 0.0
        return score, score, score
    precision = c["tp"] / (c["tp"] + c["fp"]) if c["tp"] + c["fp"] else 0.0
    recall = c["tp"] / (c["tp"] + c["fn"])
    f1 = 2 * c["tp"] / (2 * c["tp"] + c["fp"] + c["fn"])
    return precision, recall, f1


def f1_vuv(reference, degraded, sample_rate: int = SAMPLE_RATE, cfg: VoicingConfig = VoicingConfig()) -> float:
    if isinstance(reference, Waveform) and isinstance(degraded, Waveform):
        if reference.sample_rate != degraded.sample_rate:
            raise ValueError("reference and degraded sample rates differ")
    return precision_recall_f1(voicing(reference, sample_rate, cfg), voicing(degraded, sample_rate, cfg))[2]


# -- external adapters ----------------------------------------------------------------


@dataclass
class MetricAdapter:
    fn: Callable[[np.ndarray, np.ndarray, int], float]
    low: float
    high: float


# P.862.2 wideband MOS-LQO tops out at 4.644; the slack admits that value.
PESQ_RANGE = (-0.5, 4.645)

_ADAPTERS: dict[str, MetricAdapter] = {}


def register_adapter(name: str, fn, low: float = -np.inf, high: float = np.inf) -> None:
    _ADAPTERS[name] = MetricAdapter(fn, low, high)


def unregister_adapter(name: str) -> None:
    _ADAPTERS.pop(name, None)


def has_adapter(name: str) -> bool:
    return name in _ADAPTERS


def register_pesq(fn=None) -> bool:
    """Register a PESQ implementation; default is the ``pesq`` package in wideband mode.

    Returns False (and registers nothing) when no implementation is importable.
    """
    if fn is None:
        try:
            from pesq import pesq as _pesq
        except ImportError:
            return False

        def fn(ref, deg, sr):
            return float(_pesq(sr, ref, deg, "wb"))

    register_adapter("pesq", fn, *PESQ_RANGE)
    return True


def run_adapter(name: str, reference, degraded, sample_rate: int = SAMPLE_RATE) -> float:
    adapter = _ADAPTERS.get(name)
    if adapter is None:
        raise MetricUnavailable(f"no {name} adapter registered")
    value = float(adapter.fn(_samples(reference), _samples(degraded), sample_rate))
    if not adapter.low <= value <= adapter.high:
        raise AdapterRangeError(f"{name} adapter returned {value}, outside [{adapter.low}, {adapter.high}]")
    return value


def pesq(reference, degraded, sample_rate: int = SAMPLE_RATE) -> float:
    if sample_rate != 16000:
        raise ValueError("wideband PESQ needs 16 kHz audio")
    return run_adapter("pesq", reference, degraded, sample_rate)


# -- corpus evaluation -------------------------------------------------------------------

CSV_METRICS = ("pesq", "stoi", "f1_vuv")
NATIVE = {"stoi": stoi, "f1_vuv": f1_vuv}


@dataclass
class MetricResult:
    metrics: list[str]
    rows: list[dict] = field(default_factory=list)  # {"file": ..., metric: value or None}
    excluded: list[dict] = field(default_factory=list)  # {"file": ..., "error": ...}

    @property
    def means(self) -> dict[str, float]:
        out = {}
        for m in self.metrics:
            vals = [r[m] for r in self.rows if r.get(m) is not None]
            if vals:
                out[m] = float(np.mean(vals))
        return out

    def summary(self) -> dict:
        return {"means": self.means, "n_files": len(self.rows), "n_excluded": len(self.excluded),
                "excluded": self.excluded, "metrics": self.metrics}

    def write_csv(self, path) -> None:
        cols = list(CSV_METRICS) + (["utmos"] if "utmos" in self.metrics else [])
        means = self.means

        def fmt(v):
            return "NA" if v is None else f"{v:.6f}"

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file"] + cols)
            for r in self.rows:
                w.writerow([r["file"]] + [fmt(r.get(c)) for c in cols])
            w.writerow(["MEAN"] + [fmt(means.get(c)) for c in cols])

    def table(self) -> str:
        cols = [m for m in self.metrics if m in self.means]
        head = "| " + " | ".join(c.upper() for c in cols) + " |"
        rule = "|" + "|".join("---" for _ in cols) + "|"
        vals = "| " + " | ".join(f"{self.means[c]:.3f}" for c in cols) + " |"
        return "\n".join([head, rule, vals])


def available_metrics() -> list[str]:
    present = [m for m in CSV_METRICS if m in NATIVE or has_adapter(m)]
    if has_adapter("utmos"):
        present.append("utmos")
    return present


def evaluate_corpus(codec, files: Sequence | str | Path, metrics: Sequence[str] | None = None,
                    out_dir=None, bypass: bool = False, workers: int | None = None) -> MetricResult:
    """Encode/decode every reference file and score the reconstruction.

    ``codec=None`` together with ``bypass=True`` scores each file against
    itself.  Files that fail are logged and excluded, never silently dropped.
    """
    if isinstance(files, (str, Path)):
        files = read_manifest(files)
    files = [Path(f) for f in files]
    if not files:
        raise ValueError("empty manifest")
    requested = list(metrics) if metrics is not None else available_metrics()
    present = [m for m in requested if m in NATIVE or has_adapter(m)]
    for m in set(requested) - set(present):
        log.warning("metric %s has no registered adapter; reported as absent", m)
    if not bypass and codec is None:
        raise ValueError("a codec is required unless bypass=True")

    def score(path: Path) -> dict:
        ref = load_wav(path)
        deg = ref if bypass else codec.decode(codec.encode(ref))
        row = {"file": str(path)}
        for m in present:
            fn = NATIVE.get(m)
            row[m] = fn(ref, deg) if fn else run_adapter(m, ref, deg, ref.sample_rate)
        return row

    def safe(path):
        try:
            return score(path)
        except Exception as exc:  # keep going; the file is reported as excluded
            log.error("evaluation failed for %s: %s", path, exc)
            return {"file": str(path), "error": f"{type(exc).__name__}: {exc}"}

    workers = workers or int(os.environ.get("DSCODEC_NUM_WORKERS", "1"))
    if workers > 1 and bypass:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(safe, files))
    else:  # codec forward passes share one module; keep them sequential
        rows = [safe(f) for f in files]

    result = MetricResult(present)
    for row in rows:
        (result.excluded if "error" in row else result.rows).append(row)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.write_csv(out_dir / "metrics.csv")
        (out_dir / "summary.json").write_text(json.dumps(result.summary(), indent=1))
    return result
