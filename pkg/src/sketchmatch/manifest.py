"""JSON-Lines manifests binding images to identities, modalities, and splits.

One record per image. Serialization is canonical (sorted keys, fixed
separators) so identical corpora produce byte-identical manifests.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ManifestError

MODALITIES = ("photo", "sketch")
SPLITS = ("train", "test")

_REQUIRED = ("id", "path", "modality", "split", "seed")


@dataclass
class ManifestEntry:
    """One image record: identity id, relative path, modality, split, seed."""

    id: int
    path: str
    modality: str
    style: int | None
    split: str
    seed: int
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ManifestError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.modality == "sketch" and self.style is None:
            raise ManifestError("sketch entries require a style")
        if self.modality == "photo" and self.style is not None:
            raise ManifestError("photo entries must not carry a style")

    def to_json(self) -> str:
        record = {
            "id": self.id,
            "path": self.path,
            "modality": self.modality,
            "split": self.split,
            "seed": self.seed,
        }
        if self.style is not None:
            record["style"] = self.style
        if self.extras:
            record["extras"] = self.extras
        return json.dumps(record, sort_keys=True, separators=(",", ":"))


def parse_manifest(path, *, check_paths: bool = False) -> list[ManifestEntry]:
    """Strictly parse a JSONL manifest; errors carry the offending line number."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    entries: list[ManifestEntry] = []
    base = path.parent
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise ManifestError(f"{path}:{lineno}: record must be a JSON object")
            for key in _REQUIRED:
                if key not in record:
                    raise ManifestError(f"{path}:{lineno}: missing required field {key!r}")
            known = set(_REQUIRED) | {"style", "extras"}
            unknown = set(record) - known
            if unknown:
                raise ManifestError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
            try:
                entry = ManifestEntry(
                    id=int(record["id"]),
                    path=str(record["path"]),
                    modality=str(record["modality"]),
                    style=None if record.get("style") is None else int(record["style"]),
                    split=str(record["split"]),
                    seed=int(record["seed"]),
                    extras=dict(record.get("extras") or {}),
                )
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if check_paths and not (base / entry.path).exists():
                raise ManifestError(f"{path}:{lineno}: image file missing: {entry.path}")
            entries.append(entry)
    return entries


def write_manifest(entries, path) -> None:
    """Write entries as canonical JSONL, atomically (write-temp-then-rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(entry.to_json() + "\n")
    os.replace(tmp, path)


def filter_entries(entries, *, modality=None, split=None, style=None):
    out = list(entries)
    if modality is not None:
        out = [e for e in out if e.modality == modality]
    if split is not None:
        out = [e for e in out if e.split == split]
    if style is not None:
        out = [e for e in out if e.style == style]
    return out


def identities(entries) -> list[int]:
    return sorted({e.id for e in entries})
