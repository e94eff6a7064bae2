"""Reusable experiment drivers behind the CLI subcommands.

Three studies mirror the evaluation protocol this package reproduces at toy
scale: a realism analysis comparing generated to reference sketches, a
fine-tuning sweep over the synthetic-identity fraction, and an open/closed
set identification round on a distractor gallery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import derive_seed, load_png
from .encoders import IdentityEncoder
from .manifest import filter_entries
from .metrics import (
    MetricsRecord,
    ScoreSet,
    dprime,
    genuine_imposter_scores,
    identify_closed,
    identify_open,
    project_2d,
    tar_at_far,
)
from .protocol import build_eval_pool, gallery_probe_set, photo_photo_scores, sketch_photo_scores
from .synthesis import Generators, generate_sketch, style_catalog
from .training import TrainConfig, finetune_fr, load_images


# --------------------------------------------------------------------------
# realism analysis (score distributions + embedding clustering)


@dataclass
class RealismResult:
    reference_scores: ScoreSet
    generated_scores: ScoreSet
    dprime_reference: float
    dprime_generated: float
    embeddings: np.ndarray
    embedding_tags: list[str]
    embedding_ids: list[int]
    generated_images: np.ndarray

    @property
    def dprime_ratio(self) -> float:
        return self.dprime_generated / self.dprime_reference


def realism_analysis(
    entries,
    base_dir,
    gen: Generators,
    *,
    split: str = "test",
    n_identities: int = 50,
    style: int = 1,
    num_steps: int | None = None,
    seed: int = 0,
) -> RealismResult:
    """Compare generated sketches against reference renderings of the same
    identities: genuine/imposter score distributions under the frozen
    identity encoder, their d-prime separations, and a joint embedding set
    for projection."""
    catalog = {p.style_id: p for p in style_catalog()}
    if style not in catalog:
        raise ValueError(f"unknown style {style}")
    photos: dict[int, object] = {}
    for e in sorted(filter_entries(entries, modality="photo", split=split), key=lambda e: e.path):
        photos.setdefault(e.id, e)
    sketches = {e.id: e for e in filter_entries(entries, modality="sketch", split=split)
                if e.style == style}
    ids = sorted(set(photos) & set(sketches))[:n_identities]
    if len(ids) < 3:
        raise ValueError(f"need at least 3 identities with photo+style-{style} sketch, got {len(ids)}")

    from pathlib import Path

    base = Path(base_dir)
    mugshots = np.stack([load_png(base / photos[i].path) for i in ids])
    references = np.stack([load_png(base / sketches[i].path) for i in ids])
    generated = []
    for k, ident in enumerate(ids):
        img, _ = generate_sketch(
            mugshots[k], catalog[style], gen, derive_seed(seed, "realism", ident), num_steps=num_steps
        )
        generated.append(img)
    generated = np.stack(generated)

    enc = gen.identity_encoder
    emb_mug = enc.transform(mugshots)
    emb_ref = enc.transform(references)
    emb_gen = enc.transform(generated)
    id_arr = np.array(ids)
    ref_scores = genuine_imposter_scores(emb_ref, id_arr, emb_mug, id_arr)
    gen_scores = genuine_imposter_scores(emb_gen, id_arr, emb_mug, id_arr)

    embeddings = np.concatenate([emb_mug, emb_ref, emb_gen])
    tags = ["mugshot"] * len(ids) + ["reference"] * len(ids) + ["generated"] * len(ids)
    return RealismResult(
        reference_scores=ref_scores,
        generated_scores=gen_scores,
        dprime_reference=dprime(ref_scores),
        dprime_generated=dprime(gen_scores),
        embeddings=embeddings,
        embedding_tags=tags,
        embedding_ids=list(ids) * 3,
        generated_images=generated,
    )


def realism_projection(result: RealismResult):
    return project_2d(result.embeddings)


# --------------------------------------------------------------------------
# fine-tuning sweep over the synthetic fraction


@dataclass
class SweepOutcome:
    rows: list[dict]
    pretrained: dict
    encoders: dict  # (fraction, seed) -> IdentityEncoder


def finetune_sweep(
    corpus_entries,
    corpus_dir,
    synth_entries,
    synth_dir,
    pretrained: IdentityEncoder,
    *,
    fractions=(0.25, 0.5, 0.75, 1.0),
    seeds=(0, 1, 2),
    far_target: float = 0.01,
    epochs: int = 4,
    batch_size: int = 64,
    lr: float = 1e-4,
    augment_p: float = 0.2,
    mix_ratio: float = 1.0,
    keep_encoders: bool = False,
) -> SweepOutcome:
    """Fine-tune on photo + synthetic-sketch mixes at each synthetic-identity
    fraction, and score verification on held-out reference data.

    Returns one row per (fraction, seed) with sketch-photo and photo-photo
    TAR at the requested FAR, plus the pretrained encoder's row for the
    degradation comparison.
    """
    real_photos = filter_entries(corpus_entries, modality="photo", split="train")
    real_images = load_images(real_photos, corpus_dir)
    real_labels = np.array([e.id for e in real_photos])
    synth_train = filter_entries(synth_entries, modality="sketch", split="train")
    if not synth_train:
        raise ValueError("synthetic manifest has no train-split sketches")
    synth_images = load_images(synth_train, synth_dir)
    synth_labels = np.array([e.id for e in synth_train])

    def verify(encoder) -> dict:
        sp = tar_at_far(sketch_photo_scores(encoder, corpus_entries, corpus_dir), far_target)[0]
        pp = tar_at_far(photo_photo_scores(encoder, corpus_entries, corpus_dir), far_target)[0]
        return {"sketch_photo_tar": sp, "photo_photo_tar": pp}

    pretrained_row = {"fraction": 0.0, "seed": "pretrained", **verify(pretrained)}

    rows, encoders = [], {}
    for fraction in fractions:
        for seed in seeds:
            cfg = TrainConfig(
                batch_size=batch_size, epochs=epochs, lr=lr, seed=seed,
                augment_p=augment_p, synthetic_fraction=fraction, mix_ratio=mix_ratio,
            )
            result = finetune_fr(pretrained, real_images, real_labels, synth_images, synth_labels, cfg)
            rows.append({"fraction": fraction, "seed": seed, **verify(result.encoder)})
            if keep_encoders:
                encoders[(fraction, seed)] = result.encoder
    return SweepOutcome(rows=rows, pretrained=pretrained_row, encoders=encoders)


# --------------------------------------------------------------------------
# open/closed-set identification round


def open_closed_eval(
    systems: list[tuple[str, IdentityEncoder]],
    *,
    gallery_size: int = 500,
    n_mated: int = 100,
    n_nonmated: int = 100,
    fpir_targets=(0.02,),
    far_targets=(0.01,),
    probe_modality: str = "sketch",
    probe_style: int = 1,
    pose_jitter: float = 0.03,
    illumination: float = 0.10,
    noise: float = 0.02,
    seed: int = 0,
    config_hash: str = "",
) -> list[MetricsRecord]:
    """Evaluate each system on one shared gallery/probe draw.

    Emits a record per system: closed-set rank-1, FNIR at each FPIR target,
    verification TAR over the mated-probe scores, and the d-prime of the
    mated/nonmated top-score distributions.
    """
    pool = build_eval_pool(
        seed,
        n_mated=n_mated,
        n_nonmated=n_nonmated,
        gallery_distractors=gallery_size,
        probe_modality=probe_modality,
        probe_style=probe_style,
        pose_jitter=pose_jitter,
        illumination=illumination,
        noise=noise,
    )
    records = []
    for tag, encoder in systems:
        gp = gallery_probe_set(encoder, pool)
        rank1 = identify_closed(gp, rank=1)
        fnir = {f: identify_open(gp, f)[0] for f in fpir_targets}
        probe_scores = genuine_imposter_scores(
            gp.mated_probes, np.array(gp.mated_ids), gp.gallery, np.array(gp.gallery_ids)
        )
        tar = {f: tar_at_far(probe_scores, f)[0] for f in far_targets}
        try:
            dp = dprime(probe_scores)
        except ValueError:
            dp = None
        records.append(
            MetricsRecord(
                tag=tag, tar_at_far=tar, rank1=rank1, fnir_at_fpir=fnir,
                dprime=dp, seed=seed, config_hash=config_hash,
            )
        )
    return records
