"""WAV I/O, level normalization, cross-talk removal and segmentation.

All functions take and return immutable :class:`AudioClip` values; nothing here
keeps state, so sessions can be processed in parallel.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    InvalidSpan,
    LengthMismatch,
    RateMismatch,
    SilentAudio,
    UnsupportedFormat,
)

NATIVE_RATES = (16000, 44100)
SILENCE_RMS = 1e-8
SPAN_TOLERANCE_S = 0.05
TURN_EXTENSION_S = 0.010
MIN_REMAINDER_S = 1.0


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray = field(repr=False)
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("AudioClip holds mono samples only")
        x = np.clip(x, -1.0, 1.0)
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class TurnSpan:
    start_s: float
    end_s: float

    def __post_init__(self):
        if self.start_s < -SPAN_TOLERANCE_S:
            raise InvalidSpan(f"turn starts before 0: {self.start_s}")
        if self.end_s <= self.start_s:
            raise InvalidSpan(f"turn end {self.end_s} not after start {self.start_s}")


@dataclass(frozen=True)
class SubtractionParams:
    fft_size: int = 512
    hop: int = 128
    over_subtraction: float = 1.0
    spectral_floor: float = 0.01

    def __post_init__(self):
        if self.fft_size <= 0 or self.fft_size & (self.fft_size - 1):
            raise ValueError("fft_size must be a power of two")
        if not 0 < self.hop <= self.fft_size:
            raise ValueError("hop must be in (0, fft_size]")
        if self.over_subtraction < 0:
            raise ValueError("over_subtraction must be >= 0")
        if not 0.0 <= self.spectral_floor <= 1.0:
            raise ValueError("spectral_floor must lie in [0, 1]")


def check_rate(clip: AudioClip, allow_resample: bool = False, target_rate: int = 16000) -> AudioClip:
    """Reject (or optionally resample) clips recorded at a non-native rate."""
    if clip.sample_rate in NATIVE_RATES:
        return clip
    if not allow_resample:
        raise UnsupportedFormat(
            f"sample rate {clip.sample_rate} Hz not supported; expected one of {NATIVE_RATES}"
        )
    from math import gcd

    from scipy.signal import resample_poly

    g = gcd(target_rate, clip.sample_rate)
    y = resample_poly(clip.samples, target_rate // g, clip.sample_rate // g)
    return AudioClip(y, target_rate)


def read_wav(path, allow_resample: bool = False) -> AudioClip:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    if channels != 1:
        raise UnsupportedFormat(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise UnsupportedFormat(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return check_rate(AudioClip(samples, rate), allow_resample=allow_resample)


def write_wav(path, clip: AudioClip) -> None:
    """Write a clip as 16-bit mono PCM, clipping to full scale."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


def rms_dbfs(clip: AudioClip) -> float:
    rms = float(np.sqrt(np.mean(np.square(clip.samples)))) if len(clip) else 0.0
    if rms <= SILENCE_RMS:
        raise SilentAudio("clip RMS is below the silence threshold")
    return 20.0 * np.log10(rms)


def mean_dbfs(clips: Iterable[AudioClip]) -> float:
    """Mean RMS level over a collection; silent clips are ignored."""
    levels = []
    for clip in clips:
        try:
            levels.append(rms_dbfs(clip))
        except SilentAudio:
            continue
    if not levels:
        raise SilentAudio("every clip in the collection is silent")
    return float(np.mean(levels))


def normalize_dbfs(clip: AudioClip, target_dbfs: float) -> AudioClip:
    gain_db = target_dbfs - rms_dbfs(clip)
    return AudioClip(clip.samples * 10.0 ** (gain_db / 20.0), clip.sample_rate)


def extract_turn_utterances(clip: AudioClip, turns: Sequence[TurnSpan]) -> list[AudioClip]:
    """Cut one utterance per turn, widened by 10 ms at each end and clamped."""
    duration = clip.duration
    sr = clip.sample_rate
    out = []
    for turn in turns:
        if turn.start_s < -SPAN_TOLERANCE_S or turn.end_s > duration + SPAN_TOLERANCE_S:
            raise InvalidSpan(
                f"turn ({turn.start_s:.3f}, {turn.end_s:.3f}) outside clip of {duration:.3f}s"
            )
        start = max(0, int(round((turn.start_s - TURN_EXTENSION_S) * sr)))
        stop = min(len(clip), int(round((turn.end_s + TURN_EXTENSION_S) * sr)))
        if stop <= start:
            raise InvalidSpan(f"turn ({turn.start_s:.3f}, {turn.end_s:.3f}) is empty after clamping")
        out.append(AudioClip(clip.samples[start:stop], sr))
    return out


def segment_fixed(clip: AudioClip, length_s: float) -> list[AudioClip]:
    """Split into back-to-back segments of ``length_s``.

    A trailing remainder survives only when it is at least one second long; it is
    zero-padded later, at feature assembly.
    """
    if length_s <= 0:
        raise ValueError("length_s must be positive")
    return [AudioClip(clip.samples[a:b], clip.sample_rate) for a, b in segment_bounds(len(clip), clip.sample_rate, length_s)]


def segment_bounds(n_samples: int, sample_rate: int, length_s: float) -> list[tuple[int, int]]:
    seg = int(round(length_s * sample_rate))
    min_tail = int(round(MIN_REMAINDER_S * sample_rate))
    bounds = [(a, a + seg) for a in range(0, n_samples - seg + 1, seg)]
    tail_start = len(bounds) * seg
    if n_samples - tail_start >= min_tail and n_samples > tail_start:
        bounds.append((tail_start, n_samples))
    return bounds


def _stft(x: np.ndarray, window: np.ndarray, hop: int) -> np.ndarray:
    n = window.shape[0]
    idx = np.arange(n)[None, :] + hop * np.arange(1 + (x.shape[0] - n) // hop)[:, None]
    return np.fft.rfft(x[idx] * window, axis=1)


def cross_channel_spectral_subtraction(
    patient: AudioClip, interviewer: AudioClip, params: SubtractionParams = SubtractionParams()
) -> AudioClip:
    """Suppress interviewer leakage in the patient channel.

    Per STFT bin the magnitude becomes ``max(|P| - alpha*|I|, beta*|P|)``; the
    patient phase is kept and the signal is rebuilt by weighted overlap-add.
    """
    if patient.sample_rate != interviewer.sample_rate:
        raise RateMismatch(f"{patient.sample_rate} Hz vs {interviewer.sample_rate} Hz")
    if len(patient) != len(interviewer):
        raise LengthMismatch(f"{len(patient)} vs {len(interviewer)} samples")
    n_fft, hop = params.fft_size, params.hop
    n = len(patient)
    if n == 0:
        return patient
    # pad so every sample is covered by a full set of overlapping frames
    n_frames = -(-(n + n_fft) // hop) + 1
    total = (n_frames - 1) * hop + n_fft
    pad_left = n_fft
    pad_right = total - n - pad_left
    p = np.pad(patient.samples, (pad_left, pad_right))
    i = np.pad(interviewer.samples, (pad_left, pad_right))

    window = np.hanning(n_fft + 1)[:-1]
    P = _stft(p, window, hop)
    I = _stft(i, window, hop)
    mag_p = np.abs(P)
    mag = np.maximum(mag_p - params.over_subtraction * np.abs(I), params.spectral_floor * mag_p)
    phase = np.exp(1j * np.angle(P))
    frames = np.fft.irfft(mag * phase, n=n_fft, axis=1) * window

    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = window**2
    for k in range(frames.shape[0]):
        out[k * hop : k * hop + n_fft] += frames[k]
        norm[k * hop : k * hop + n_fft] += w2
    out = out[pad_left : pad_left + n] / np.maximum(norm[pad_left : pad_left + n], 1e-12)
    return AudioClip(out, patient.sample_rate)


def read_turns(path) -> list[TurnSpan]:
    """Parse a turns file: one ``start end`` pair (seconds) per line, ``#`` comments."""
    spans = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) < 2:
            raise InvalidSpan(f"{path}: malformed turn line {line!r}")
        spans.append(TurnSpan(float(parts[0]), float(parts[1])))
    return normalize_turns(spans)


def normalize_turns(spans: Sequence[TurnSpan]) -> list[TurnSpan]:
    """Sort spans and merge overlapping ones."""
    merged: list[TurnSpan] = []
    for span in sorted(spans, key=lambda s: (s.start_s, s.end_s)):
        if merged and span.start_s <= merged[-1].end_s:
            last = merged[-1]
            merged[-1] = TurnSpan(last.start_s, max(last.end_s, span.end_s))
        else:
            merged.append(span)
    return merged
