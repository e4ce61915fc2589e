"""Synthetic speech-like corpora for smoke tests and toy training runs.

Utterances alternate voiced segments (glottal pulse train with a drifting
pitch through three formant resonators), unvoiced segments (band-passed
noise) and short pauses.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.signal import butter, lfilter

from .audio import SAMPLE_RATE, Waveform, save_wav

_VOWELS = [(730, 1090, 2440), (270, 2290, 3010), (530, 1840, 2480), (570, 840, 2410), (300, 870, 2240),
           (660, 1720, 2410), (490, 1350, 1690)]


def _resonator(x, freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def voiced_segment(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    f0_start, f0_end = rng.uniform(90, 240, size=2)
    f0 = np.linspace(f0_start, f0_end, n) * (1 + 0.02 * np.sin(2 * np.pi * rng.uniform(3, 6) * np.arange(n) / sr))
    phase = np.cumsum(f0 / sr)
    pulses = np.diff(np.floor(phase), prepend=0.0)  # one impulse per glottal cycle
    source = lfilter([1.0], [1.0, -0.95], pulses)
    formants = _VOWELS[rng.integers(len(_VOWELS))]
    y = sum(_resonator(source, f, 80 + 0.05 * f, sr) * g for f, g in zip(formants, (1.0, 0.6, 0.3)))
    return y / (np.max(np.abs(y)) + 1e-9)


def unvoiced_segment(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    lo = rng.uniform(1500, 3500)
    b, a = butter(2, [lo / (sr / 2), min(0.95, (lo + rng.uniform(1500, 3500)) / (sr / 2))], btype="band")
    y = lfilter(b, a, rng.standard_normal(n))
    return y / (np.max(np.abs(y)) + 1e-9)


def utterance(duration: float, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    total = int(duration * sr)
    out = np.zeros(total)
    pos = int(rng.uniform(0.05, 0.2) * sr)
    while pos < total:
        kind = rng.choice(["voiced", "unvoiced", "pause"], p=[0.6, 0.25, 0.15])
        n = int(rng.uniform(0.06, 0.3) * sr)
        n = min(n, total - pos)
        if n <= 0:
            break
        if kind != "pause":
            seg = voiced_segment(n, rng, sr) if kind == "voiced" else 0.3 * unvoiced_segment(n, rng, sr)
            env = np.minimum(1.0, np.minimum(np.arange(n), np.arange(n)[::-1]) / (0.01 * sr))
            out[pos:pos + n] += rng.uniform(0.2, 0.6) * seg * env
        pos += n
    return np.clip(out, -0.99, 0.99)


def synthetic_corpus(minutes: float = 5.0, seed: int = 0, min_len: float = 2.0, max_len: float = 6.0,
                     sr: int = SAMPLE_RATE) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    remaining = minutes * 60.0
    utts = []
    while remaining > 0:
        d = min(remaining, rng.uniform(min_len, max_len))
        if d < 0.5:
            break
        utts.append(utterance(d, rng, sr))
        remaining -= d
    return utts


def write_corpus(out_dir, minutes: float = 5.0, seed: int = 0) -> Path:
    """Write the corpus as PCM16 WAVs plus ``manifest.txt``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, x in enumerate(synthetic_corpus(minutes, seed)):
        name = f"utt{i:04d}.wav"
        save_wav(out_dir / name, Waveform(x, SAMPLE_RATE))
        names.append(name)
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(names) + "\n")
    return manifest
