"""Experiment protocol glue: turning corpora and encoders into score sets,
galleries, and probe collections.

The open/closed-set protocol enrolls a mugshot gallery (mated identities
plus distractors) and probes it with sketches: mated probes share an
identity with the gallery, nonmated probes never appear in it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import RenderSpec, render_photo, render_reference_sketch, sample_identity
from .corpus import derive_seed
from .encoders import IdentityEncoder
from .manifest import filter_entries
from .metrics import GalleryProbeSet, ScoreSet, genuine_imposter_scores
from .training import load_images


def embed_entries(encoder: IdentityEncoder, entries, base_dir) -> tuple[np.ndarray, np.ndarray]:
    entries = sorted(entries, key=lambda e: e.path)
    images = load_images(entries, base_dir)
    return encoder.transform(images), np.array([e.id for e in entries])


def sketch_photo_scores(encoder, entries, base_dir, *, split: str = "test") -> ScoreSet:
    """Cross-modal verification scores: every test sketch against every test photo."""
    sketches = filter_entries(entries, modality="sketch", split=split)
    photos = filter_entries(entries, modality="photo", split=split)
    if not sketches or not photos:
        raise ValueError(f"split {split!r} lacks sketches or photos")
    emb_s, ids_s = embed_entries(encoder, sketches, base_dir)
    emb_p, ids_p = embed_entries(encoder, photos, base_dir)
    return genuine_imposter_scores(emb_s, ids_s, emb_p, ids_p)


def photo_photo_scores(encoder, entries, base_dir, *, split: str = "test") -> ScoreSet:
    """Same-modality verification scores over unordered photo pairs."""
    photos = filter_entries(entries, modality="photo", split=split)
    if not photos:
        raise ValueError(f"split {split!r} has no photos")
    emb, ids = embed_entries(encoder, photos, base_dir)
    return genuine_imposter_scores(emb, ids)


@dataclass
class EvalPool:
    """Freshly rendered identities for an open/closed-set evaluation round."""

    gallery_images: np.ndarray
    gallery_ids: list[int]
    mated_probe_images: np.ndarray
    mated_ids: list[int]
    nonmated_probe_images: np.ndarray


def build_eval_pool(
    seed: int,
    *,
    n_mated: int = 100,
    n_nonmated: int = 100,
    gallery_distractors: int = 500,
    probe_modality: str = "sketch",
    probe_style: int = 1,
    pose_jitter: float = 0.03,
    illumination: float = 0.10,
    noise: float = 0.02,
) -> EvalPool:
    """Render a disposable identity pool for one evaluation.

    Gallery = mugshots of the mated identities plus distractor mugshots.
    Probes are renderings (sketch by default) of the mated identities and of
    identities absent from the gallery.
    """
    photo_spec = RenderSpec("photo", pose_jitter=pose_jitter, illumination=illumination, noise=noise)
    if probe_modality == "sketch":
        probe_spec = RenderSpec("sketch", style_id=probe_style)
    elif probe_modality == "photo":
        probe_spec = RenderSpec("photo", pose_jitter=pose_jitter, illumination=illumination, noise=noise)
    else:
        raise ValueError(f"unknown probe modality {probe_modality!r}")

    total = n_mated + n_nonmated + gallery_distractors
    identities = [sample_identity(derive_seed(seed, "eval-id", i), id=i) for i in range(total)]
    mated = identities[:n_mated]
    nonmated = identities[n_mated : n_mated + n_nonmated]
    distractors = identities[n_mated + n_nonmated :]

    gallery_imgs, gallery_ids = [], []
    for ident in mated + distractors:
        gallery_imgs.append(render_photo(ident, photo_spec, derive_seed(seed, "gal", ident.id)))
        gallery_ids.append(ident.id)

    def probe(ident):
        s = derive_seed(seed, "probe", ident.id)
        if probe_spec.modality == "sketch":
            return render_reference_sketch(ident, probe_spec, s)
        return render_photo(ident, probe_spec, s)

    return EvalPool(
        gallery_images=np.stack(gallery_imgs),
        gallery_ids=gallery_ids,
        mated_probe_images=np.stack([probe(i) for i in mated]),
        mated_ids=[i.id for i in mated],
        nonmated_probe_images=np.stack([probe(i) for i in nonmated]),
    )


def gallery_probe_set(encoder: IdentityEncoder, pool: EvalPool) -> GalleryProbeSet:
    return GalleryProbeSet(
        gallery_ids=pool.gallery_ids,
        gallery=encoder.transform(pool.gallery_images),
        mated_probes=encoder.transform(pool.mated_probe_images),
        mated_ids=pool.mated_ids,
        nonmated_probes=encoder.transform(pool.nonmated_probe_images),
    )
