"""Biometric evaluation mathematics.

Verification (TAR@FAR, ROC/DET), closed-set identification (rank-k),
open-set identification (FNIR@FPIR), score-distribution separation
(d-prime), and a deterministic 2-D PCA projection.

Conventions, chosen for exact reproducibility and oracle checking:

- Match scores are cosine similarities.
- The accept rule is ``score >= threshold``; thresholds are always observed
  score values, or +inf when no observed value satisfies the rate target.
- An open-set mated probe fails when its top score is below threshold or the
  top-scoring gallery identity is wrong (ties broken by gallery order).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import check_embeddings, check_probability, check_scores


@dataclass
class ScoreSet:
    """Genuine and imposter similarity scores for one evaluation."""

    genuine: np.ndarray
    imposter: np.ndarray

    def __post_init__(self):
        self.genuine = check_scores(self.genuine, name="genuine scores")
        self.imposter = check_scores(self.imposter, name="imposter scores")


@dataclass
class GalleryProbeSet:
    """Enrolled gallery plus mated and nonmated probe embeddings.

    Gallery order is significant: identification ties resolve to the earliest
    enrolled entry.
    """

    gallery_ids: list[int]
    gallery: np.ndarray
    mated_probes: np.ndarray
    mated_ids: list[int]
    nonmated_probes: np.ndarray

    def __post_init__(self):
        self.gallery = check_embeddings(self.gallery, name="gallery")
        self.mated_probes = check_embeddings(self.mated_probes, name="mated probes")
        if len(self.gallery_ids) != self.gallery.shape[0]:
            raise ValueError("gallery ids and embeddings disagree in length")
        if len(self.mated_ids) != self.mated_probes.shape[0]:
            raise ValueError("mated ids and embeddings disagree in length")
        if len(set(self.gallery_ids)) != len(self.gallery_ids):
            raise ValueError("gallery ids must be unique")
        missing = set(self.mated_ids) - set(self.gallery_ids)
        if missing:
            raise ValueError(f"mated probe ids missing from gallery: {sorted(missing)[:5]}")
        if self.nonmated_probes is not None and len(self.nonmated_probes):
            self.nonmated_probes = check_embeddings(self.nonmated_probes, name="nonmated probes")


def score_matrix(probes, gallery) -> np.ndarray:
    """Cosine similarity matrix: entry (i, j) compares probe i to gallery j."""
    p = check_embeddings(probes, name="probes")
    g = check_embeddings(gallery, name="gallery")
    if p.shape[1] != g.shape[1]:
        raise ValueError(f"embedding dims differ: {p.shape[1]} vs {g.shape[1]}")
    pn = np.linalg.norm(p, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if (pn == 0).any() or (gn == 0).any():
        raise ValueError("zero-norm embedding has no defined cosine similarity")
    return (p / pn[:, None]) @ (g / gn[:, None]).T


def genuine_imposter_scores(emb_a, ids_a, emb_b=None, ids_b=None) -> ScoreSet:
    """All-pairs score set. With one set, pairs are unordered (i < j); with
    two sets, pairs are the full cross product."""
    ids_a = np.asarray(ids_a)
    if emb_b is None:
        mat = score_matrix(emb_a, emb_a)
        same = ids_a[:, None] == ids_a[None, :]
        iu = np.triu_indices(len(ids_a), k=1)
        return ScoreSet(genuine=mat[iu][same[iu]], imposter=mat[iu][~same[iu]])
    ids_b = np.asarray(ids_b)
    mat = score_matrix(emb_a, emb_b)
    same = ids_a[:, None] == ids_b[None, :]
    return ScoreSet(genuine=mat[same], imposter=mat[~same])


def _far_curve(imposter_sorted: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    n = imposter_sorted.size
    return (n - np.searchsorted(imposter_sorted, thresholds, side="left")) / n


def tar_at_far(scores: ScoreSet, far_target: float) -> tuple[float, float]:
    """True accept rate at the smallest observed threshold meeting the FAR
    target. Returns (tar, threshold); the threshold is +inf when no observed
    score keeps FAR at or under the target."""
    check_probability(far_target, name="far_target", open_interval=True)
    candidates = np.unique(np.concatenate([scores.genuine, scores.imposter]))
    imp = np.sort(scores.imposter)
    fars = _far_curve(imp, candidates)
    ok = np.nonzero(fars <= far_target)[0]
    if ok.size == 0:
        return 0.0, float("inf")
    threshold = float(candidates[ok[0]])
    tar = float(np.mean(scores.genuine >= threshold))
    return tar, threshold


@dataclass
class RocCurve:
    """Operating points over every distinct threshold, monotone in FAR."""

    thresholds: np.ndarray
    far: np.ndarray
    tar: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.far, self.tar])

    @property
    def det_points(self) -> np.ndarray:
        """(false accept, false reject) pairs for DET-style plots."""
        return np.column_stack([self.far, 1.0 - self.tar])


def roc_det_points(scores: ScoreSet) -> RocCurve:
    """Full ROC/DET curve. Thresholds run from min observed score (FAR=1,
    TAR=1) to a +inf sentinel (FAR=0, TAR=0)."""
    candidates = np.unique(np.concatenate([scores.genuine, scores.imposter]))
    thresholds = np.concatenate([candidates, [np.inf]])
    imp = np.sort(scores.imposter)
    gen = np.sort(scores.genuine)
    far = _far_curve(imp, thresholds)
    tar = _far_curve(gen, thresholds)
    # both rates fall as the threshold rises; reversing gives the curve in
    # ascending-FAR order with TAR monotone even across FAR ties
    return RocCurve(thresholds=thresholds[::-1], far=far[::-1], tar=tar[::-1])


def _top_match(gp: GalleryProbeSet, probes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mat = score_matrix(probes, gp.gallery)
    best_idx = np.argmax(mat, axis=1)  # first occurrence wins ties
    return mat[np.arange(mat.shape[0]), best_idx], best_idx


def identify_closed(gp: GalleryProbeSet, rank: int = 1) -> float:
    """Fraction of mated probes whose true identity is among the top ``rank``
    gallery scores (ties resolved by gallery order)."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    mat = score_matrix(gp.mated_probes, gp.gallery)
    id_to_col = {g: i for i, g in enumerate(gp.gallery_ids)}
    hits = 0
    order = np.argsort(-mat, axis=1, kind="stable")
    for row, true_id in enumerate(gp.mated_ids):
        true_col = id_to_col[true_id]
        if true_col in order[row, :rank]:
            hits += 1
    return hits / len(gp.mated_ids)


def identify_open(gp: GalleryProbeSet, fpir_target: float) -> tuple[float, float]:
    """False negative identification rate at the smallest observed threshold
    whose FPIR meets the target.

    FPIR: fraction of nonmated probes whose top gallery score clears the
    threshold. FNIR: fraction of mated probes that score below it or whose
    top match is the wrong identity.
    """
    check_probability(fpir_target, name="fpir_target", open_interval=True)
    if gp.nonmated_probes is None or len(gp.nonmated_probes) == 0:
        raise ValueError("open-set identification requires nonmated probes")
    nm_top, _ = _top_match(gp, gp.nonmated_probes)
    m_top, m_idx = _top_match(gp, gp.mated_probes)
    correct = np.array(
        [gp.gallery_ids[m_idx[i]] == gp.mated_ids[i] for i in range(len(gp.mated_ids))]
    )
    candidates = np.unique(np.concatenate([nm_top, m_top]))
    fpirs = _far_curve(np.sort(nm_top), candidates)
    ok = np.nonzero(fpirs <= fpir_target)[0]
    threshold = float(candidates[ok[0]]) if ok.size else float("inf")
    fnir = float(np.mean((m_top < threshold) | ~correct))
    return fnir, threshold


def dprime(scores: ScoreSet) -> float:
    """(mean_g - mean_i) / sqrt((var_g + var_i) / 2), sample variances."""
    if scores.genuine.size < 2 or scores.imposter.size < 2:
        raise ValueError("d-prime needs at least two scores per side")
    var_g = scores.genuine.var(ddof=1)
    var_i = scores.imposter.var(ddof=1)
    pooled = (var_g + var_i) / 2.0
    if pooled == 0.0:
        raise ValueError("zero pooled variance; d-prime undefined")
    return float((scores.genuine.mean() - scores.imposter.mean()) / np.sqrt(pooled))


@dataclass
class Projection2D:
    """Mean-centered PCA projection onto the top-2 principal directions."""

    points: np.ndarray
    components: np.ndarray
    explained: np.ndarray  # top-2 eigenvalues of the scatter matrix
    degenerate: bool = False


def project_2d(embeddings) -> Projection2D:
    """Deterministic 2-D embedding projection.

    Sign convention: each component's largest-magnitude coordinate is made
    positive. Rank-deficient input (all points identical) is flagged and maps
    everything to the origin.
    """
    x = check_embeddings(embeddings, name="embeddings")
    if x.shape[0] < 3:
        raise ValueError("projection needs at least 3 embeddings")
    centered = x - x.mean(axis=0, keepdims=True)
    if not np.any(np.abs(centered) > 0):
        d = x.shape[1]
        comps = np.zeros((2, d))
        return Projection2D(
            points=np.zeros((x.shape[0], 2)), components=comps, explained=np.zeros(2), degenerate=True
        )
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2].copy()
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros_like(comps[0])])
        svals = np.concatenate([svals, [0.0]])
    for k in range(2):
        j = np.argmax(np.abs(comps[k]))
        if comps[k, j] < 0:
            comps[k] = -comps[k]
    points = centered @ comps.T
    explained = (svals[:2] ** 2).astype(np.float64)
    return Projection2D(points=points, components=comps, explained=explained)


@dataclass
class MetricsRecord:
    """One evaluation row: the shape of the reported comparison tables."""

    tag: str
    tar_at_far: dict[float, float] = field(default_factory=dict)
    rank1: float | None = None
    fnir_at_fpir: dict[float, float] = field(default_factory=dict)
    dprime: float | None = None
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self):
        for rate in list(self.tar_at_far.values()) + list(self.fnir_at_fpir.values()):
            if not (0.0 <= rate <= 1.0):
                raise ValueError(f"rates must lie in [0, 1], got {rate}")
        if self.rank1 is not None and not (0.0 <= self.rank1 <= 1.0):
            raise ValueError(f"rank1 must lie in [0, 1], got {self.rank1}")
