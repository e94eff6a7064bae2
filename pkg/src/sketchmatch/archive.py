"""Versioned parameter archives for encoders and the denoiser backbone."""

from __future__ import annotations

from pathlib import Path

import torch

from .errors import CheckpointError

FORMAT_VERSION = 1


def save_archive(payload: dict, kind: str, path) -> None:
    """Atomically write a checkpoint dict tagged with kind and format version."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"format_version": FORMAT_VERSION, "kind": kind, **payload}, tmp)
    tmp.replace(path)


def load_archive(path, kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        data = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(data, dict) or data.get("kind") != kind:
        raise CheckpointError(f"{path} is not a {kind!r} archive")
    if data.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {data.get('format_version')} unsupported (expected {FORMAT_VERSION})"
        )
    return data
