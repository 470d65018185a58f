"""Frame-level paralinguistic descriptors (38 base rows + 38 deltas).

The row layout mirrors the IS10 low-level descriptor set in composition and
dimension. Values are computed with conventional DSP recipes and are not
numerically identical to openSMILE.

Row layout, version 1 (``LAYOUT.names``):

* ``loudness``       log(1 + 1e4 * frame RMS); 0 for digital silence
* ``mfcc[0..14]``    DCT-II (orthonormal) of log energies of 26 mel filters
* ``logMelBand[0..7]`` log energies of 8 mel bands spanning 0-8 kHz
* ``lspFreq[0..7]``  line spectral frequencies (radians) of an order-8 LPC fit
* ``f0_envelope``    last voiced F0, held through unvoiced frames
* ``voicing_prob``   normalized autocorrelation peak, clipped to [0, 1]
* ``f0_final``       F0 in Hz on voiced frames, else 0
* ``jitter_local``, ``jitter_ddp``, ``shimmer_local``  frame-to-frame period
  and peak-amplitude perturbation ratios
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.fft import dct

from .audio_io import AudioClip
from .errors import EmptyInput, UnsupportedFormat

N_BASE = 38
N_FEATURES = 2 * N_BASE
N_FRAMES = 397
STD_FLOOR = 1e-6

F0_MIN = 50.0
F0_MAX = 500.0
VOICING_THRESHOLD = 0.55
SILENCE_RMS = 1e-6


@dataclass(frozen=True)
class FrameConfig:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    window: str = "hamming"

    def __post_init__(self):
        if self.hop_ms > self.frame_ms:
            raise ValueError("hop_ms must not exceed frame_ms")
        if self.window != "hamming":
            raise ValueError(f"unsupported window {self.window!r}")

    def sizes(self, sample_rate: int) -> tuple[int, int]:
        return int(round(self.frame_ms * sample_rate / 1000)), int(round(self.hop_ms * sample_rate / 1000))


@dataclass(frozen=True)
class LldRowLayout:
    version: int = 1
    names: tuple[str, ...] = (
        ("loudness",)
        + tuple(f"mfcc[{i}]" for i in range(15))
        + tuple(f"logMelBand[{i}]" for i in range(8))
        + tuple(f"lspFreq[{i}]" for i in range(8))
        + ("f0_envelope", "voicing_prob", "f0_final", "jitter_local", "jitter_ddp", "shimmer_local")
    )

    def __post_init__(self):
        if len(self.names) != N_BASE:
            raise ValueError(f"layout must have {N_BASE} rows, got {len(self.names)}")

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def all_names(self) -> tuple[str, ...]:
        return self.names + tuple(f"delta_{n}" for n in self.names)


LAYOUT = LldRowLayout()


@dataclass(frozen=True)
class Frames:
    """Framed signal: raw samples and their Hamming-windowed copy, one frame per row."""

    raw: np.ndarray = field(repr=False)
    windowed: np.ndarray = field(repr=False)
    sample_rate: int

    def __len__(self) -> int:
        return self.raw.shape[0]


@dataclass
class FeatureMatrix:
    """Network input of shape (76, 397); ``n_valid`` counts the unpadded columns."""

    values: np.ndarray
    n_valid: int

    def __post_init__(self):
        if self.values.shape != (N_FEATURES, N_FRAMES):
            raise ValueError(f"FeatureMatrix must be {N_FEATURES}x{N_FRAMES}, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("FeatureMatrix contains non-finite values")


@dataclass(frozen=True)
class FoldStats:
    mean: np.ndarray
    std: np.ndarray


def frame_signal(clip: AudioClip, cfg: FrameConfig = FrameConfig()) -> Frames:
    win, hop = cfg.sizes(clip.sample_rate)
    x = clip.samples
    if x.shape[0] < win:
        x = np.pad(x, (0, win - x.shape[0]))
    n = (x.shape[0] - win) // hop + 1
    raw = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n].copy()
    return Frames(raw, raw * np.hamming(win), clip.sample_rate)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int, n_fft: int, sample_rate: int, f_lo: float = 0.0, f_hi: float | None = None) -> np.ndarray:
    """Triangular mel filters, shape (n_filters, n_fft // 2 + 1)."""
    f_hi = sample_rate / 2 if f_hi is None else min(f_hi, sample_rate / 2)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(f_lo), _hz_to_mel(f_hi), n_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def _levinson(r: np.ndarray, order: int) -> np.ndarray:
    """Batched Levinson-Durbin; returns A(z) coefficients with a[:, 0] == 1."""
    n = r.shape[0]
    a = np.zeros((n, order + 1))
    a[:, 0] = 1.0
    err = r[:, 0].copy()
    for i in range(1, order + 1):
        acc = r[:, i] + np.einsum("nj,nj->n", a[:, 1:i], r[:, i - 1 : 0 : -1])
        k = -acc / err
        a_prev = a[:, 1:i].copy()
        a[:, 1:i] = a_prev + k[:, None] * a_prev[:, ::-1]
        a[:, i] = k
        err = err * (1.0 - k * k)
        err = np.maximum(err, 1e-12 * r[:, 0])
    return a


def _lsp_from_lpc(a: np.ndarray, grid: int = 512) -> np.ndarray:
    """Line spectral frequencies in radians by sign-change search on a grid."""
    order = a.shape[1] - 1
    ext = np.concatenate([a, np.zeros((a.shape[0], 1))], axis=1)
    p = ext + ext[:, ::-1]
    q = ext - ext[:, ::-1]
    omega = (np.arange(grid) + 0.5) * np.pi / grid
    shift = np.arange(order + 2)[:, None] - (order + 1) / 2.0
    fp = p @ np.cos(shift * omega)
    fq = q @ np.sin(shift * omega)
    fallback = np.arange(1, order + 1) * np.pi / (order + 1)
    out = np.tile(fallback, (a.shape[0], 1))
    roots = np.full((a.shape[0], 2 * (grid - 1)), np.inf)
    for j, f in enumerate((fp, fq)):
        s0, s1 = f[:, :-1], f[:, 1:]
        hit = np.signbit(s0) != np.signbit(s1)
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = s0 / (s0 - s1)
        pos = omega[:-1] + frac * (np.pi / grid)
        roots[:, j * (grid - 1) : (j + 1) * (grid - 1)] = np.where(hit, pos, np.inf)
    roots.sort(axis=1)
    found = roots[:, :order]
    ok = np.all(np.isfinite(found), axis=1) & ~np.isfinite(roots[:, order])
    out[ok] = found[ok]
    return out


def _autocorr(x: np.ndarray) -> np.ndarray:
    """Linear (non-circular) autocorrelation of each row, lags 0..len-1."""
    win = x.shape[-1]
    nfft = 1 << int(np.ceil(np.log2(2 * win)))
    return np.fft.irfft(np.abs(np.fft.rfft(x, nfft, axis=-1)) ** 2, nfft, axis=-1)[..., :win]


def _pitch(frames: Frames, r: np.ndarray):
    """Autocorrelation pitch with window correction and parabolic refinement.

    ``r`` is the autocorrelation of the windowed frames. Returns (f0 candidate
    in Hz, voicing probability); f0 is 0 where no candidate lies in range.
    """
    n, win = r.shape
    sr = frames.sample_rate
    rw = _autocorr(np.hamming(win))
    r0 = r[:, :1]
    energetic = (r0[:, 0] > 0) & (np.sqrt(np.mean(frames.raw**2, axis=1)) > SILENCE_RMS)
    with np.errstate(divide="ignore", invalid="ignore"):
        rn = np.where(energetic[:, None], (r / np.where(r0 > 0, r0, 1.0)) / (rw / rw[0]), 0.0)

    lag_lo = max(2, int(np.floor(sr / F0_MAX)))
    lag_hi = min(int(np.ceil(sr / F0_MIN)), int(0.75 * win))
    seg = rn[:, lag_lo - 1 : lag_hi + 2]
    mid = seg[:, 1:-1]
    is_peak = (mid > seg[:, :-2]) & (mid >= seg[:, 2:]) & (mid > 0)
    peak_vals = np.where(is_peak, mid, -np.inf)
    best = peak_vals.max(axis=1)
    # lowest lag whose peak is within 90% of the best one (octave-error guard)
    good = is_peak & (mid >= 0.9 * best[:, None])
    has = good.any(axis=1) & np.isfinite(best)
    j = np.argmax(good, axis=1)
    rows = np.arange(n)
    lag = lag_lo + j
    y0 = rn[rows, lag - 1]
    y1 = rn[rows, lag]
    y2 = rn[rows, np.minimum(lag + 1, win - 1)]
    denom = y0 - 2 * y1 + y2
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(np.abs(denom) > 1e-12, 0.5 * (y0 - y2) / denom, 0.0)
    delta = np.clip(delta, -0.5, 0.5)
    peak_height = y1 - 0.25 * (y0 - y2) * delta
    f0 = np.where(has, np.clip(sr / (lag + delta), F0_MIN, F0_MAX), 0.0)
    voicing = np.where(has, np.clip(peak_height, 0.0, 1.0), 0.0)
    return f0, voicing


def _perturbation(values: np.ndarray, voiced: np.ndarray):
    """Frame-to-frame relative change and second difference over voiced neighbours."""
    n = values.shape[0]
    local = np.zeros(n)
    ddp = np.zeros(n)
    if n >= 2:
        pair = voiced[1:] & voiced[:-1]
        mean2 = 0.5 * (values[1:] + values[:-1])
        with np.errstate(divide="ignore", invalid="ignore"):
            local[1:] = np.where(pair & (mean2 > 0), np.abs(values[1:] - values[:-1]) / mean2, 0.0)
    if n >= 3:
        triple = voiced[2:] & voiced[1:-1] & voiced[:-2]
        mean3 = (values[2:] + values[1:-1] + values[:-2]) / 3.0
        second = np.abs(values[2:] - 2 * values[1:-1] + values[:-2])
        with np.errstate(divide="ignore", invalid="ignore"):
            ddp[1:-1] = np.where(triple & (mean3 > 0), second / mean3, 0.0)
    return local, ddp


def extract_lld(frames: Frames, layout: LldRowLayout = LAYOUT) -> np.ndarray:
    """Compute the 38 base descriptors; returns shape (38, n_frames)."""
    if layout.version != 1:
        raise ValueError(f"unsupported layout version {layout.version}")
    sr = frames.sample_rate
    x = frames.windowed
    n, win = x.shape
    nfft = max(512, 1 << int(np.ceil(np.log2(win))))

    rms = np.sqrt(np.mean(frames.raw**2, axis=1))
    loudness = np.log1p(1e4 * rms)

    power = np.abs(np.fft.rfft(x, nfft, axis=1)) ** 2
    mel26 = power @ mel_filterbank(26, nfft, sr).T
    mfcc = dct(np.log(np.maximum(mel26, 1e-12)), type=2, norm="ortho", axis=1)[:, :15]
    mel8 = np.log(np.maximum(power @ mel_filterbank(8, nfft, sr, 0.0, 8000.0).T, 1e-12))

    acf = _autocorr(x)
    r = acf[:, :9]
    degenerate = r[:, 0] <= 1e-12
    r_safe = np.where(degenerate[:, None], np.eye(1, 9), r)
    r_safe[:, 0] *= 1.0 + 1e-9
    lsp = _lsp_from_lpc(_levinson(r_safe, 8))
    lsp[degenerate] = np.arange(1, 9) * np.pi / 9

    f0_cand, voicing = _pitch(frames, acf)
    voiced = (voicing >= VOICING_THRESHOLD) & (f0_cand > 0)
    f0_final = np.where(voiced, f0_cand, 0.0)
    # hold last voiced value
    idx = np.where(voiced, np.arange(n), -1)
    idx = np.maximum.accumulate(idx)
    f0_env = np.where(idx >= 0, f0_final[np.maximum(idx, 0)], 0.0)

    with np.errstate(divide="ignore"):
        period = np.where(voiced, 1.0 / np.where(voiced, f0_final, 1.0), 0.0)
    jitter_local, jitter_ddp = _perturbation(period, voiced)
    peak = np.max(np.abs(frames.raw), axis=1)
    shimmer_local, _ = _perturbation(peak, voiced)

    out = np.vstack(
        [
            loudness[None],
            mfcc.T,
            mel8.T,
            lsp.T,
            f0_env[None],
            voicing[None],
            f0_final[None],
            jitter_local[None],
            jitter_ddp[None],
            shimmer_local[None],
        ]
    )
    return np.nan_to_num(out, nan=0.0, posinf=0.0, neginf=0.0)


def append_deltas(base: np.ndarray, window: int = 2) -> np.ndarray:
    """Stack regression deltas (edge-replicated, +-``window`` frames) below ``base``."""
    if base.ndim != 2 or base.shape[1] < 1:
        raise ValueError("base must be a (rows, T>=1) matrix")
    t = base.shape[1]
    padded = np.pad(base, ((0, 0), (window, window)), mode="edge")
    num = np.zeros_like(base, dtype=np.float64)
    for k in range(1, window + 1):
        num += k * (padded[:, window + k : window + k + t] - padded[:, window - k : window - k + t])
    denom = 2 * sum(k * k for k in range(1, window + 1))
    return np.vstack([base, num / denom])


def lld_matrix(clip: AudioClip, cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    """clip -> (76, min(T_raw, 397)) descriptor matrix, unpadded."""
    full = append_deltas(extract_lld(frame_signal(clip, cfg)))
    return full[:, :N_FRAMES]


def _valid_part(m) -> np.ndarray:
    if isinstance(m, FeatureMatrix):
        return m.values[:, : m.n_valid]
    return np.asarray(m)


def compute_fold_stats(matrices: Iterable) -> FoldStats:
    """Per-row mean/std over the non-padded columns of every matrix."""
    total = None
    count = 0
    for m in matrices:
        v = _valid_part(m).astype(np.float64)
        if total is None:
            total = np.zeros(v.shape[0])
            total_sq = np.zeros(v.shape[0])
        total += v.sum(axis=1)
        total_sq += np.square(v).sum(axis=1)
        count += v.shape[1]
    if total is None or count == 0:
        raise EmptyInput("cannot compute statistics of an empty collection")
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    return FoldStats(mean, np.sqrt(var))


def assemble_feature_matrix(lld: np.ndarray, stats: FoldStats | None = None) -> FeatureMatrix:
    """Truncate/zero-pad to 397 columns, optionally z-normalizing first."""
    lld = np.asarray(lld, dtype=np.float64)
    if lld.ndim != 2 or lld.shape[1] < 1:
        raise ValueError("lld must be a (76, T>=1) matrix")
    v = lld[:, :N_FRAMES]
    if stats is not None:
        v = (v - stats.mean[:, None]) / np.maximum(stats.std, STD_FLOOR)[:, None]
    n_valid = v.shape[1]
    out = np.zeros((lld.shape[0], N_FRAMES))
    out[:, :n_valid] = v
    return FeatureMatrix(out, n_valid)


# -- feature cache files --------------------------------------------------------

CACHE_MAGIC = b"LLDC"
CACHE_VERSION = 1


def write_cache(path, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    f, t = m.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, f, t))
        fh.write(m.tobytes(order="C"))


def read_cache(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise UnsupportedFormat(f"{path}: not a feature cache file")
    version, f, t = struct.unpack("<III", data[4:16])
    if version != CACHE_VERSION:
        raise UnsupportedFormat(f"{path}: cache version {version} unsupported")
    body = np.frombuffer(data[16:], dtype="<f4")
    if body.size != f * t:
        raise UnsupportedFormat(f"{path}: truncated cache ({body.size} of {f * t} values)")
    return body.reshape(f, t).astype(np.float64)


def stack_inputs(matrices: Sequence[FeatureMatrix], dtype=np.float32) -> np.ndarray:
    return np.stack([m.values for m in matrices]).astype(dtype)
