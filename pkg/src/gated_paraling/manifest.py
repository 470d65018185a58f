"""Session manifests: one JSON object per line.

Keys: ``session_id``, ``speaker_id``, ``patient_wav`` (required);
``interviewer_wav``, ``mmse``, ``class_label``, ``turns``, ``dataset``
(optional). Relative paths resolve against the manifest's directory. At least
one of ``mmse`` / ``class_label`` must be present.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from .errors import ConfigError, DataError
from .evaluation import SessionRecord

_FIELDS = ("session_id", "speaker_id", "patient_wav", "interviewer_wav", "mmse", "class_label", "turns", "dataset")


def load_manifest(path, check_files: bool = False) -> list[SessionRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    records, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        unknown = set(obj) - set(_FIELDS)
        if unknown:
            raise ConfigError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
        for key in ("session_id", "speaker_id", "patient_wav"):
            if not obj.get(key):
                raise DataError(f"{path}:{lineno}: missing {key}")
        if obj["session_id"] in seen:
            raise DataError(f"{path}:{lineno}: duplicate session_id {obj['session_id']!r}")
        seen.add(obj["session_id"])
        for key in ("patient_wav", "interviewer_wav", "turns"):
            if obj.get(key):
                obj[key] = str((base / obj[key]).resolve()) if not Path(obj[key]).is_absolute() else obj[key]
                if check_files and not Path(obj[key]).is_file():
                    raise DataError(f"{path}:{lineno}: {key} file not found: {obj[key]}")
        try:
            records.append(
                SessionRecord(
                    session_id=str(obj["session_id"]),
                    speaker_id=str(obj["speaker_id"]),
                    class_label=obj.get("class_label"),
                    mmse=None if obj.get("mmse") is None else int(obj["mmse"]),
                    patient_wav=obj["patient_wav"],
                    interviewer_wav=obj.get("interviewer_wav"),
                    turns=obj.get("turns"),
                    dataset=obj.get("dataset", ""),
                )
            )
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_manifest(path, records: Sequence[SessionRecord]) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w") as fh:
        for r in records:
            obj = {"session_id": r.session_id, "speaker_id": r.speaker_id}
            for key in ("patient_wav", "interviewer_wav", "turns"):
                value = getattr(r, key)
                if value:
                    p = Path(value)
                    try:
                        value = str(p.resolve().relative_to(base))
                    except ValueError:
                        value = str(p)
                    obj[key] = value
            if r.mmse is not None:
                obj["mmse"] = r.mmse
            obj["class_label"] = r.class_label
            if r.dataset:
                obj["dataset"] = r.dataset
            fh.write(json.dumps(obj, sort_keys=False) + "\n")
