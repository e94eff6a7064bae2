"""Dataset production: turn every mugshot into sketches across the style
catalog, audit identity preservation, and emit a manifest that joins back to
the source corpus.

Generation is resumable at record granularity. A record is keyed by
(source_id, style_id, seed); records already present in the output manifest
whose image file exists are skipped, and every record's noise stream comes
from its own derived seed, so an interrupted run resumed later is
byte-identical to an uninterrupted one.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import derive_seed, load_png, save_png
from .diffusion import NoiseSchedule, sample
from .encoders import IdentityEncoder, SemanticEncoder, TextEncoder, build_condition
from .errors import ManifestError
from .manifest import ManifestEntry, filter_entries, parse_manifest, write_manifest


@dataclass(frozen=True)
class StylePrompt:
    """One catalog entry: a caption plus its style family tags."""

    style_id: int
    caption: str
    medium: str  # "hand-drawn" or "software-generated"
    viewed: bool


def style_catalog() -> list[StylePrompt]:
    """The fixed eight-entry prompt catalog.

    Styles 0-3 pair with the hand-drawn corpus renderings, 4-7 with the
    software-generated ones; each medium carries viewed and non-viewed
    variants.
    """
    return [
        StylePrompt(0, "a viewed hand-drawn sketch of a face", "hand-drawn", True),
        StylePrompt(1, "a hand-drawn sketch of a face", "hand-drawn", True),
        StylePrompt(2, "a non-viewed hand-drawn sketch of a face", "hand-drawn", False),
        StylePrompt(3, "a non-viewed hand-drawn sketch of a person", "hand-drawn", False),
        StylePrompt(4, "a viewed software-generated sketch of a face", "software-generated", True),
        StylePrompt(5, "a software-generated sketch of a face", "software-generated", True),
        StylePrompt(6, "a non-viewed software-generated sketch of a face", "software-generated", False),
        StylePrompt(7, "a non-viewed software-generated sketch of a person", "software-generated", False),
    ]


def style_captions() -> dict[int, str]:
    return {p.style_id: p.caption for p in style_catalog()}


@dataclass
class SynthesisRecord:
    """Provenance and identity audit for one generated sketch."""

    source_id: int
    style_id: int
    path: str
    seed: int
    identity_similarity: float
    flagged: bool

    def __post_init__(self):
        if not (-1.0 - 1e-9 <= self.identity_similarity <= 1.0 + 1e-9):
            raise ValueError(f"similarity {self.identity_similarity} outside [-1, 1]")


@dataclass
class Generators:
    """The frozen encoders and trained denoiser used during synthesis."""

    model: torch.nn.Module
    schedule: NoiseSchedule
    text_encoder: TextEncoder
    semantic_encoder: SemanticEncoder
    identity_encoder: IdentityEncoder


def generate_sketch(
    mugshot: np.ndarray,
    style: StylePrompt,
    gen: Generators,
    seed: int,
    *,
    num_steps: int | None = None,
    audit_floor: float = 0.1,
) -> tuple[np.ndarray, SynthesisRecord]:
    """Generate one sketch and score how well it preserves the identity.

    The similarity is the cosine between the frozen identity embeddings of
    the source mugshot and the generated sketch. Low-similarity records are
    flagged, never rejected.
    """
    condition = build_condition(
        mugshot,
        style.caption,
        gen.model.projection,
        text_encoder=gen.text_encoder,
        semantic_encoder=gen.semantic_encoder,
        identity_encoder=gen.identity_encoder,
    )
    shape = tuple(mugshot.shape)
    with torch.no_grad():
        image = sample(gen.model, condition, gen.schedule, seed, shape=shape, num_steps=num_steps)
    image_np = image.numpy().astype(np.float32)
    emb_src = gen.identity_encoder.encode(mugshot)
    emb_gen = gen.identity_encoder.encode(image_np)
    similarity = float(np.clip(np.dot(emb_src, emb_gen), -1.0, 1.0))
    record = SynthesisRecord(
        source_id=-1,
        style_id=style.style_id,
        path="",
        seed=seed,
        identity_similarity=similarity,
        flagged=similarity < audit_floor,
    )
    return image_np, record


def synthesize_dataset(
    manifest_in,
    base_dir,
    gen: Generators,
    out_dir,
    *,
    styles: list[int] | None = None,
    seeds_per_style: int = 1,
    num_steps: int | None = None,
    audit_floor: float = 0.1,
    master_seed: int = 0,
    limit: int | None = None,
) -> list[ManifestEntry]:
    """Generate |identities| x |styles| x seeds_per_style sketches.

    ``manifest_in`` supplies the mugshots (first photo per identity). Output
    records inherit the source identity and split. Already-complete records
    are skipped, so interrupted runs resume to the identical final state;
    ``limit`` caps the number of newly generated records (used to exercise
    exactly that).
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"

    catalog = {p.style_id: p for p in style_catalog()}
    style_ids = sorted(styles) if styles is not None else sorted(catalog)
    unknown = [s for s in style_ids if s not in catalog]
    if unknown:
        raise ValueError(f"unknown style ids {unknown}")
    if seeds_per_style < 1:
        raise ValueError("seeds_per_style must be >= 1")

    photos: dict[int, ManifestEntry] = {}
    for e in sorted(filter_entries(manifest_in, modality="photo"), key=lambda e: e.path):
        photos.setdefault(e.id, e)
    if not photos:
        raise ManifestError("input manifest has no photo entries to condition on")

    done: dict[tuple[int, int, int], ManifestEntry] = {}
    if manifest_path.exists():
        for e in parse_manifest(manifest_path):
            key = (e.id, e.style, int(e.extras.get("seed_index", -1)))
            if (out_dir / e.path).exists():
                done[key] = e

    worklist = [
        (source_id, style_id, k)
        for source_id in sorted(photos)
        for style_id in style_ids
        for k in range(seeds_per_style)
        if (source_id, style_id, k) not in done
    ]
    if limit is not None:
        worklist = worklist[:limit]

    entries: list[ManifestEntry] = list(done.values())
    base = Path(base_dir)
    mugshot_cache: dict[int, np.ndarray] = {}
    with open(manifest_path, "a", encoding="utf-8") as appender:
        for source_id, style_id, k in worklist:
            src = photos[source_id]
            if source_id not in mugshot_cache:
                mugshot_cache.clear()  # one mugshot in memory at a time
                mugshot_cache[source_id] = load_png(base / src.path)
            seed = derive_seed(master_seed, source_id, style_id, k)
            image, record = generate_sketch(
                mugshot_cache[source_id], catalog[style_id], gen, seed,
                num_steps=num_steps, audit_floor=audit_floor,
            )
            rel = f"images/src{source_id:05d}_style{style_id}_{k}.png"
            save_png(image, out_dir / rel)
            entry = ManifestEntry(
                id=source_id,
                path=rel,
                modality="sketch",
                style=style_id,
                split=src.split,
                seed=seed,
                extras={
                    "caption": catalog[style_id].caption,
                    "identity_similarity": round(record.identity_similarity, 6),
                    "flagged": record.flagged,
                    "seed_index": k,
                    "source_path": src.path,
                },
            )
            appender.write(entry.to_json() + "\n")
            appender.flush()
            entries.append(entry)

    entries.sort(key=lambda e: (e.id, e.style, e.extras.get("seed_index", 0)))
    write_manifest(entries, manifest_path)
    return entries


def audit_summary(entries) -> dict:
    """Fraction of records whose identity similarity fell below the floor."""
    sims = [e.extras["identity_similarity"] for e in entries if "identity_similarity" in e.extras]
    flagged = [e for e in entries if e.extras.get("flagged")]
    if not sims:
        return {"records": 0, "mean_similarity": float("nan"), "flagged_fraction": float("nan")}
    return {
        "records": len(sims),
        "mean_similarity": float(np.mean(sims)),
        "flagged_fraction": len(flagged) / len(sims),
    }
