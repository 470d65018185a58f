"""Synthetic speech-like sessions with controllable paralinguistic class cues.

Each session is a train of harmonic "syllables" (tone bursts whose period is
perturbed cycle by cycle at the class jitter level) separated by pauses at the
class speaking rate. Speakers get a fixed F0 offset so that speaker-disjoint
evaluation is meaningful.

Spec file format (flat ``key = value``, ``#`` comments)::

    speakers_per_class = 20
    sessions_per_speaker = 2
    session_duration_s = 60
    sample_rate = 16000
    seed = 0
    classes = D,H
    D.f0_mean = 110        # per-class overrides: f0_mean, f0_std, jitter,
    H.jitter = 0.005       # rate, am_depth
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, write_wav
from .errors import InvalidSpec
from .evaluation import CLASS_LABELS, MMSE_RANGES, SessionRecord
from .manifest import write_manifest


@dataclass(frozen=True)
class ClassProfile:
    f0_mean: float
    f0_std: float = 8.0  # spread of per-speaker F0 offsets
    jitter: float = 0.01  # relative per-period std
    rate: float = 3.0  # syllables per second
    am_depth: float = 0.3


DEFAULT_PROFILES = {
    "D": ClassProfile(f0_mean=110.0, jitter=0.03, rate=2.5, am_depth=0.5),
    "M": ClassProfile(f0_mean=140.0, jitter=0.015, rate=3.2, am_depth=0.35),
    "H": ClassProfile(f0_mean=170.0, jitter=0.005, rate=4.0, am_depth=0.2),
}


@dataclass(frozen=True)
class SynthSpec:
    speakers_per_class: int = 20
    sessions_per_speaker: int = 2
    session_duration_s: float = 60.0
    sample_rate: int = 16000
    classes: tuple[str, ...] = ("D", "H")
    profiles: dict = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    seed: int = 0

    def validate(self) -> None:
        if self.speakers_per_class < 2:
            raise InvalidSpec("need at least 2 speakers per class")
        if self.sessions_per_speaker < 1:
            raise InvalidSpec("need at least 1 session per speaker")
        if self.session_duration_s <= 0:
            raise InvalidSpec("session duration must be positive")
        if len(set(self.classes)) != len(self.classes) or not set(self.classes) <= set(CLASS_LABELS):
            raise InvalidSpec(f"classes must be distinct members of {CLASS_LABELS}")
        missing = [c for c in self.classes if c not in self.profiles]
        if missing:
            raise InvalidSpec(f"no profile for classes {missing}")
        used = [self.profiles[c] for c in self.classes]
        if len(set(used)) != len(used):
            raise InvalidSpec("class profiles must be distinct")


def two_class_spec(f0_gap: float, **kwargs) -> SynthSpec:
    """D vs H spec whose F0 means sit ``f0_gap`` Hz apart around 140 Hz."""
    profiles = dict(DEFAULT_PROFILES)
    profiles["D"] = replace(profiles["D"], f0_mean=140.0 - f0_gap / 2)
    profiles["H"] = replace(profiles["H"], f0_mean=140.0 + f0_gap / 2)
    return SynthSpec(profiles=profiles, **kwargs)


def _rng(spec: SynthSpec, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, *key]))


def speaker_f0(spec: SynthSpec, class_label: str, speaker: int) -> float:
    prof = spec.profiles[class_label]
    rng = _rng(spec, CLASS_LABELS.index(class_label), speaker)
    return float(prof.f0_mean + prof.f0_std * rng.standard_normal())


def _syllable(rng, f0: float, jitter: float, am_depth: float, n: int, sr: int) -> np.ndarray:
    freqs = []
    total = 0
    while total < n:
        f = f0 * (1.0 + jitter * rng.standard_normal())
        f = float(np.clip(f, 0.5 * f0, 1.5 * f0))
        length = max(1, int(round(sr / f)))
        freqs.append(np.full(length, f))
        total += length
    inst = np.concatenate(freqs)[:n]
    phase = 2 * np.pi * np.cumsum(inst) / sr
    wave = sum(np.sin(h * phase) / h for h in range(1, 6))
    t = np.arange(n) / sr
    env = np.hanning(n) * (1.0 - am_depth * (0.5 + 0.5 * np.sin(2 * np.pi * 5.0 * t + rng.uniform(0, 2 * np.pi))))
    return wave * env


def synth_session(spec: SynthSpec, class_label: str, speaker: int, session: int = 0) -> tuple[AudioClip, SessionRecord]:
    """Deterministic function of (spec, class, speaker, session)."""
    spec.validate()
    if class_label not in spec.classes:
        raise InvalidSpec(f"class {class_label!r} not in spec")
    prof = spec.profiles[class_label]
    sr = spec.sample_rate
    n_total = int(round(spec.session_duration_s * sr))
    ci = CLASS_LABELS.index(class_label)
    base_f0 = speaker_f0(spec, class_label, speaker)
    rng = _rng(spec, ci, speaker, session + 1)

    x = np.zeros(n_total)
    t = rng.uniform(0.02, 0.2)
    while True:
        dur = rng.uniform(0.12, 0.25)
        start = int(round(t * sr))
        n = int(round(dur * sr))
        if start + n > n_total:
            break
        f0 = base_f0 * (1.0 + 0.04 * rng.standard_normal())
        amp = 0.25 * rng.uniform(0.6, 1.0)
        x[start : start + n] += amp * _syllable(rng, f0, prof.jitter, prof.am_depth, n, sr)
        gap = max(0.03, 1.0 / prof.rate - dur + rng.uniform(-0.05, 0.05))
        t += dur + gap
    x += 1e-3 * rng.standard_normal(n_total)

    lo, hi = MMSE_RANGES[class_label]
    mmse = int(rng.integers(lo, hi + 1))
    sid = f"{class_label}{speaker:03d}_s{session}"
    record = SessionRecord(
        session_id=sid,
        speaker_id=f"spk_{class_label}{speaker:03d}",
        class_label=class_label,
        mmse=mmse,
        duration_s=spec.session_duration_s,
        dataset="synthetic",
    )
    return AudioClip(np.clip(x, -1.0, 1.0), sr), record


def synth_dataset(spec: SynthSpec, out_dir) -> tuple[Path, list[SessionRecord]]:
    """Write WAVs under ``out_dir/wav`` plus ``out_dir/manifest.jsonl``."""
    spec.validate()
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for cls in spec.classes:
        for speaker in range(spec.speakers_per_class):
            for session in range(spec.sessions_per_speaker):
                clip, rec = synth_session(spec, cls, speaker, session)
                path = wav_dir / f"{rec.session_id}.wav"
                write_wav(path, clip)
                rec.patient_wav = str(path)
                records.append(rec)
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest, records


_PROFILE_KEYS = {"f0_mean", "f0_std", "jitter", "rate", "am_depth"}


def parse_synth_spec(text: str) -> SynthSpec:
    top = {}
    overrides: dict[str, dict] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidSpec(f"line {lineno}: expected key = value")
        key, value = key.strip(), value.strip()
        try:
            _assign(key, value, top, overrides)
        except ValueError as exc:
            raise InvalidSpec(f"line {lineno}: {exc}") from exc
    profiles = dict(DEFAULT_PROFILES)
    for cls, attrs in overrides.items():
        profiles[cls] = replace(profiles[cls], **attrs)
    spec = SynthSpec(profiles=profiles, **top)
    spec.validate()
    return spec


def _assign(key: str, value: str, top: dict, overrides: dict) -> None:
    if "." in key:
        cls, attr = key.split(".", 1)
        if cls not in CLASS_LABELS or attr not in _PROFILE_KEYS:
            raise ValueError(f"unknown profile key {key!r}")
        overrides.setdefault(cls, {})[attr] = float(value)
    elif key in ("speakers_per_class", "sessions_per_speaker", "sample_rate", "seed"):
        top[key] = int(value)
    elif key == "session_duration_s":
        top[key] = float(value)
    elif key == "classes":
        top[key] = tuple(c.strip() for c in value.split(",") if c.strip())
    else:
        raise ValueError(f"unknown key {key!r}")


def load_synth_spec(path) -> SynthSpec:
    return parse_synth_spec(Path(path).read_text())
