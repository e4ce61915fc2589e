"""Hot numeric kernels, each with a compiled loop and a vectorized numpy twin.

The public names at the bottom dispatch on :data:`dscodec._jit.USE_NUMBA`.
Both variants stay importable (``*_loop`` / ``*_numpy``) so tests and the
benchmark can check they agree.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._jit import USE_NUMBA, njit

_EPS = np.finfo(np.float64).eps


# -- product-quantizer index arithmetic --------------------------------------


@njit
def pq_compose_loop(sub_indices, sizes):
    n, groups = sub_indices.shape
    out = np.empty(n, dtype=np.int64)
    for t in range(n):
        code = 0
        for i in range(groups):
            code = code * sizes[i] + sub_indices[t, i]
        out[t] = code
    return out


@njit
def pq_decompose_loop(codes, sizes):
    n = codes.shape[0]
    groups = sizes.shape[0]
    out = np.empty((n, groups), dtype=np.int64)
    for t in range(n):
        code = codes[t]
        for i in range(groups - 1, -1, -1):
            out[t, i] = code % sizes[i]
            code //= sizes[i]
    return out


def pq_compose_numpy(sub_indices, sizes):
    code = np.zeros(sub_indices.shape[0], dtype=np.int64)
    for i, size in enumerate(sizes):
        code = code * size + sub_indices[:, i]
    return code


def pq_decompose_numpy(codes, sizes):
    out = np.empty((codes.shape[0], len(sizes)), dtype=np.int64)
    rest = codes.astype(np.int64, copy=True)
    for i in range(len(sizes) - 1, -1, -1):
        out[:, i] = rest % sizes[i]
        rest //= sizes[i]
    return out


# -- autocorrelation peak per analysis frame ----------------------------------


@njit
def autocorr_peaks_loop(x, frame_len, hop, min_lag, max_lag, energy_floor):
    n_frames = 1 + (x.shape[0] - frame_len) // hop if x.shape[0] >= frame_len else 0
    peaks = np.zeros(n_frames)
    buf = np.empty(frame_len)
    for f in range(n_frames):
        start = f * hop
        mean = 0.0
        for j in range(frame_len):
            buf[j] = x[start + j]
            mean += buf[j]
        mean /= frame_len
        energy = 0.0
        for j in range(frame_len):
            buf[j] -= mean
            energy += buf[j] * buf[j]
        if energy <= energy_floor * frame_len:
            continue
        best = 0.0
        for k in range(min_lag, max_lag + 1):
            num = 0.0
            e1 = 0.0
            e2 = 0.0
            for j in range(frame_len - k):
                a = buf[j]
                b = buf[j + k]
                num += a * b
                e1 += a * a
                e2 += b * b
            den = np.sqrt(e1 * e2)
            if den > 0.0:
                r = num / den
                if r > best:
                    best = r
        peaks[f] = best
    return peaks


def autocorr_peaks_numpy(x, frame_len, hop, min_lag, max_lag, energy_floor):
    if x.shape[0] < frame_len:
        return np.zeros(0)
    frames = sliding_window_view(x, frame_len)[::hop]
    frames = frames - frames.mean(axis=1, keepdims=True)
    energy = np.einsum("ij,ij->i", frames, frames)
    nfft = 1 << int(np.ceil(np.log2(2 * frame_len)))
    spec = np.fft.rfft(frames, nfft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)
    lags = np.arange(min_lag, max_lag + 1)
    sq = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames**2, axis=1)], axis=1)
    e1 = sq[:, frame_len - lags]
    e2 = sq[:, -1:] - sq[:, lags]
    den = np.sqrt(e1 * e2)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(den > 0.0, acf[:, lags] / den, 0.0)
    peaks = np.maximum(r.max(axis=1), 0.0)
    peaks[energy <= energy_floor * frame_len] = 0.0
    return peaks


# -- STOI intermediate intelligibility ----------------------------------------


@njit
def stoi_correlation_loop(x_tob, y_tob, seg_len, clip_ratio):
    bands, frames = x_tob.shape
    n_seg = frames - seg_len + 1
    if n_seg <= 0:
        return np.nan
    eps = 2.220446049250313e-16
    total = 0.0
    y_clip = np.empty(seg_len)
    for m in range(n_seg):
        for j in range(bands):
            nx = 0.0
            ny = 0.0
            for n in range(seg_len):
                nx += x_tob[j, m + n] ** 2
                ny += y_tob[j, m + n] ** 2
            alpha = np.sqrt(nx) / (np.sqrt(ny) + eps)
            mx = 0.0
            my = 0.0
            for n in range(seg_len):
                xv = x_tob[j, m + n]
                yv = alpha * y_tob[j, m + n]
                bound = xv * clip_ratio
                y_clip[n] = yv if yv < bound else bound
                mx += xv
                my += y_clip[n]
            mx /= seg_len
            my /= seg_len
            sxy = 0.0
            sxx = 0.0
            syy = 0.0
            for n in range(seg_len):
                dx = x_tob[j, m + n] - mx
                dy = y_clip[n] - my
                sxy += dx * dy
                sxx += dx * dx
                syy += dy * dy
            total += sxy / ((np.sqrt(sxx) + eps) * (np.sqrt(syy) + eps))
    return total / (bands * n_seg)


def stoi_correlation_numpy(x_tob, y_tob, seg_len, clip_ratio):
    if x_tob.shape[1] < seg_len:
        return np.nan
    xs = sliding_window_view(x_tob, seg_len, axis=1)  # (bands, n_seg, seg_len)
    ys = sliding_window_view(y_tob, seg_len, axis=1)
    alpha = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    yc = np.minimum(alpha * ys, xs * clip_ratio)
    xn = xs - xs.mean(axis=2, keepdims=True)
    yn = yc - yc.mean(axis=2, keepdims=True)
    num = np.sum(xn * yn, axis=2)
    den = (np.linalg.norm(xn, axis=2) + _EPS) * (np.linalg.norm(yn, axis=2) + _EPS)
    return float(np.mean(num / den))


if USE_NUMBA:
    pq_compose = pq_compose_loop
    pq_decompose = pq_decompose_loop
    autocorr_peaks = autocorr_peaks_loop
    stoi_correlation = stoi_correlation_loop
else:
    pq_compose = pq_compose_numpy
    pq_decompose = pq_decompose_numpy
    autocorr_peaks = autocorr_peaks_numpy
    stoi_correlation = stoi_correlation_numpy
