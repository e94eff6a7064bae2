"""Optimization loops: encoder pretraining, diffusion training under the
adapter freeze policy, and recognition fine-tuning on synthetic sketches.

The diffusion trainer runs two phases. A warmup phase fits the text-
conditioned backbone (the stand-in for a large pretrained text-to-image
model, which this package deliberately does not download). The adapter phase
then freezes the backbone and text attention and trains only the image
attention, the projection network, and the control branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
import torch

from .backbone import ConditionalDenoiser, ParamPartition, build_partition
from .corpus import derive_seed, load_png
from .diffusion import NoiseSchedule, diffusion_loss, torch_generator
from .encoders import ConditionBundle, IdentityEncoder, SemanticEncoder, TextEncoder
from .edges import canny_edges, edge_map_tensor
from .errors import DivergenceError
from .manifest import ManifestEntry, filter_entries
from .validation import check_probability

DIFFUSION_TRAINABLE = frozenset({"image_attention", "projection", "control"})
WARMUP_TRAINABLE = frozenset({"backbone", "text_attention"})


@dataclass
class TrainConfig:
    """Shared optimization settings, validated on construction."""

    batch_size: int = 64
    epochs: int = 10
    warmup_epochs: int = 0
    lr: float = 1e-3
    decay_every: int = 3
    decay_factor: float = 0.5
    seed: int = 0
    augment_p: float = 0.2
    synthetic_fraction: float = 1.0
    mix_ratio: float = 1.0  # synthetic sketches per real photo within a batch

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1 or self.warmup_epochs < 0:
            raise ValueError("epochs must be >= 1 and warmup_epochs >= 0")
        check_probability(self.augment_p, name="augment_p")
        if not (0.0 < self.synthetic_fraction <= 1.0):
            raise ValueError("synthetic_fraction must be in (0, 1]")
        if self.mix_ratio <= 0:
            raise ValueError("mix_ratio must be positive")


@dataclass(frozen=True)
class FreezePolicy:
    """Which parameter groups an optimization phase may update."""

    trainable: frozenset

    def validate(self, partition: ParamPartition) -> None:
        unknown = set(self.trainable) - set(partition.groups)
        if unknown:
            raise ValueError(f"unknown parameter groups in policy: {sorted(unknown)}")


def apply_freeze_policy(partition: ParamPartition, policy: FreezePolicy) -> ParamPartition:
    """Set trainability flags (and requires_grad) exactly per the policy."""
    policy.validate(partition)
    for group, params in partition.groups.items():
        flag = group in policy.trainable
        partition.trainable[group] = flag
        for p in params.values():
            p.requires_grad_(flag)
    return partition


# --------------------------------------------------------------------------
# augmentations


@dataclass(frozen=True)
class AugmentPlan:
    crop: bool
    photometric: bool
    blur: bool


def draw_augment_plan(p: float, rng: np.random.Generator) -> AugmentPlan:
    """Three independent Bernoulli(p) draws, one per augmentation."""
    fires = rng.uniform(size=3) < p
    return AugmentPlan(crop=bool(fires[0]), photometric=bool(fires[1]), blur=bool(fires[2]))


def augment(image: np.ndarray, p: float, rng_seed) -> np.ndarray:
    """Apply crop-rescale / photometric jitter / resolution blur, each with
    probability ``p``. Deterministic given the seed."""
    check_probability(p, name="p")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    plan = draw_augment_plan(p, rng)
    out = np.asarray(image, dtype=np.float32).copy()
    chan, h, w = out.shape
    if plan.crop:
        frac = rng.uniform(0.72, 0.92)
        ch, cw = max(4, int(h * frac)), max(4, int(w * frac))
        top = rng.integers(0, h - ch + 1)
        left = rng.integers(0, w - cw + 1)
        crop = out[:, top : top + ch, left : left + cw]
        out = np.stack([ndi.zoom(crop[c], (h / ch, w / cw), order=1, mode="nearest") for c in range(chan)])
        out = np.ascontiguousarray(out[:, :h, :w], dtype=np.float32)
    if plan.photometric:
        gain = rng.uniform(0.7, 1.3)
        bias = rng.uniform(-0.15, 0.15)
        out = out * gain + bias
    if plan.blur:
        factor = int(rng.integers(2, 5))
        small = out[:, ::factor, ::factor]
        out = np.stack([ndi.zoom(small[c], (h / small.shape[1], w / small.shape[2]), order=1, mode="nearest") for c in range(chan)])
        out = np.ascontiguousarray(out[:, :h, :w], dtype=np.float32)
    return np.clip(out, -1.0, 1.0)


# --------------------------------------------------------------------------
# data assembly


def load_images(entries, base_dir) -> np.ndarray:
    base = Path(base_dir)
    return np.stack([load_png(base / e.path) for e in entries])


def mugshot_by_identity(entries, base_dir) -> dict[int, np.ndarray]:
    """First photo (by path order) of each identity."""
    photos: dict[int, ManifestEntry] = {}
    for e in sorted(filter_entries(entries, modality="photo"), key=lambda e: e.path):
        photos.setdefault(e.id, e)
    base = Path(base_dir)
    return {i: load_png(base / e.path) for i, e in photos.items()}


@dataclass
class DiffusionBatchSource:
    """Precomputed (target sketch, condition) pairs for diffusion training."""

    targets: torch.Tensor
    conditions: list[ConditionBundle]

    def __len__(self) -> int:
        return self.targets.shape[0]


def build_diffusion_data(
    entries,
    base_dir,
    text_encoder: TextEncoder,
    semantic_encoder: SemanticEncoder,
    identity_encoder: IdentityEncoder,
    style_captions: dict[int, str],
    *,
    split: str = "train",
) -> DiffusionBatchSource:
    """Pair each training sketch with a condition built from its identity's
    mugshot and its style caption. Encoders are frozen, so per-identity and
    per-style pieces are computed once and shared."""
    sketches = filter_entries(entries, modality="sketch", split=split)
    if not sketches:
        raise ValueError(f"no sketch entries in split {split!r}")
    mugshots = mugshot_by_identity([e for e in entries if e.split == split], base_dir)

    text_cache = {s: text_encoder.encode(c) for s, c in style_captions.items()}
    cond_cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
    for ident, mug in mugshots.items():
        semantic = semantic_encoder.encode(mug)
        identity = identity_encoder.encode(mug)
        combined = torch.from_numpy(np.concatenate([semantic, identity]).astype(np.float32))
        edge = edge_map_tensor(canny_edges(mug))
        cond_cache[ident] = (combined, edge)

    targets, conditions = [], []
    base = Path(base_dir)
    for e in sorted(sketches, key=lambda e: e.path):
        if e.id not in cond_cache:
            raise ValueError(f"identity {e.id} has sketches but no mugshot in split {split!r}")
        combined, edge = cond_cache[e.id]
        targets.append(torch.from_numpy(load_png(base / e.path)))
        conditions.append(
            ConditionBundle(text=text_cache[e.style], combined=combined, edge_map=edge)
        )
    return DiffusionBatchSource(targets=torch.stack(targets), conditions=conditions)


# --------------------------------------------------------------------------
# diffusion training


@dataclass
class TrainTrace:
    rows: list[dict] = field(default_factory=list)

    def add(self, **kw):
        self.rows.append(kw)

    def epoch_losses(self, phase: str) -> list[float]:
        return [r["loss"] for r in self.rows if r["phase"] == phase]


def run_training_phase(
    model: ConditionalDenoiser,
    partition: ParamPartition,
    policy: FreezePolicy,
    data: DiffusionBatchSource,
    schedule: NoiseSchedule,
    config: TrainConfig,
    *,
    phase: str,
    epochs: int,
    trace: TrainTrace,
    max_steps: int | None = None,
    on_epoch=None,
) -> None:
    """One optimization phase under one freeze policy.

    Aborts with :class:`DivergenceError` when an epoch's mean loss exceeds
    ten times the first epoch's.
    """
    apply_freeze_policy(partition, policy)
    params = partition.trainable_parameters()
    if not params or epochs == 0:
        return
    opt = torch.optim.Adam(params, lr=config.lr)
    scheduler = torch.optim.lr_scheduler.StepLR(opt, step_size=config.decay_every, gamma=config.decay_factor)
    gen = torch_generator(derive_seed(config.seed, phase, "order"))
    first_epoch_loss = None
    steps_done = 0
    for epoch in range(epochs):
        order = torch.randperm(len(data), generator=gen)
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = data.targets[idx]
            conds = [data.conditions[i] for i in idx.tolist()]
            loss = diffusion_loss(
                model, batch, conds, schedule, derive_seed(config.seed, phase, epoch, start)
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss))
            steps_done += 1
            if max_steps is not None and steps_done >= max_steps:
                trace.add(phase=phase, epoch=epoch, loss=float(np.mean(losses)), lr=opt.param_groups[0]["lr"])
                return
        epoch_loss = float(np.mean(losses))
        trace.add(phase=phase, epoch=epoch, loss=epoch_loss, lr=opt.param_groups[0]["lr"])
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        if not np.isfinite(epoch_loss):
            raise DivergenceError(f"{phase} loss became non-finite at epoch {epoch}")
        if first_epoch_loss is None:
            first_epoch_loss = epoch_loss
        elif epoch_loss > 10.0 * first_epoch_loss:
            raise DivergenceError(
                f"{phase} loss {epoch_loss:.4f} exceeded 10x initial {first_epoch_loss:.4f}"
            )
        scheduler.step()


@dataclass
class DiffusionTrainResult:
    model: ConditionalDenoiser
    trace: TrainTrace
    checkpoint_path: Path | None
    best_loss: float


def train_diffusion(
    config: TrainConfig,
    data: DiffusionBatchSource,
    model: ConditionalDenoiser,
    schedule: NoiseSchedule,
    *,
    checkpoint_path=None,
) -> DiffusionTrainResult:
    """Warmup the text backbone, then train the adapters with the backbone
    frozen. Checkpoints the best adapter-phase epoch."""
    partition = build_partition(model)
    trace = TrainTrace()
    if config.warmup_epochs > 0:
        run_training_phase(
            model, partition, FreezePolicy(WARMUP_TRAINABLE), data, schedule, config,
            phase="warmup", epochs=config.warmup_epochs, trace=trace,
        )
    path = Path(checkpoint_path) if checkpoint_path is not None else None
    best = {"loss": float("inf")}

    def keep_best(epoch: int, loss: float) -> None:
        if loss < best["loss"]:
            best["loss"] = loss
            if path is not None:
                model.save(path, extra_meta={"epoch": epoch, "loss": loss})

    run_training_phase(
        model, partition, FreezePolicy(DIFFUSION_TRAINABLE), data, schedule, config,
        phase="adapter", epochs=config.epochs, trace=trace, on_epoch=keep_best,
    )
    return DiffusionTrainResult(model=model, trace=trace, checkpoint_path=path, best_loss=best["loss"])


# --------------------------------------------------------------------------
# recognition fine-tuning


def select_synthetic_identities(identities, fraction: float, seed: int) -> list[int]:
    """Seeded permutation prefix: floor(fraction * n) identities, nested
    across fractions for a fixed seed."""
    ids = sorted(set(identities))
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    count = int(len(ids) * fraction)
    if count == 0:
        raise ValueError(f"fraction {fraction} selects zero of {len(ids)} identities")
    order = np.random.default_rng(derive_seed(seed, "fraction-subset")).permutation(len(ids))
    return sorted(int(ids[i]) for i in order[:count])


@dataclass
class FinetuneResult:
    encoder: IdentityEncoder
    selected_identities: list[int]
    history: list[float]


def finetune_fr(
    encoder: IdentityEncoder,
    real_images: np.ndarray,
    real_labels: np.ndarray,
    synth_images: np.ndarray,
    synth_labels: np.ndarray,
    config: TrainConfig,
) -> FinetuneResult:
    """Fine-tune a frozen identity encoder on a photo + synthetic-sketch mix.

    ``synthetic_fraction`` restricts the synthetic identities (images of the
    others are dropped); photos always participate in full. Batches mix the
    two pools at ``mix_ratio`` sketches per photo. All encoder parameters are
    trainable here, starting from the pretrained weights.
    """
    if not hasattr(encoder, "net_"):
        raise ValueError("encoder must be fitted before fine-tuning")
    selected = select_synthetic_identities(sorted(set(int(v) for v in synth_labels)),
                                           config.synthetic_fraction, config.seed)
    keep = np.isin(synth_labels, selected)
    synth_images, synth_labels = synth_images[keep], synth_labels[keep]

    all_labels = sorted(set(int(v) for v in real_labels) | set(int(v) for v in synth_labels))
    remap = {ident: k for k, ident in enumerate(all_labels)}
    y_real = np.array([remap[int(v)] for v in real_labels])
    y_synth = np.array([remap[int(v)] for v in synth_labels])

    import copy

    import torch.nn.functional as F

    tuned = copy.deepcopy(encoder)
    net = tuned.net_
    net.train().requires_grad_(True)
    classes = len(all_labels)
    class_weights = torch.nn.Parameter(torch.empty(classes, tuned.embed_dim))
    torch.nn.init.normal_(class_weights, std=0.05, generator=torch_generator(derive_seed(config.seed, "ft-head")))
    opt = torch.optim.Adam([*net.parameters(), class_weights], lr=config.lr)

    rng = np.random.default_rng(derive_seed(config.seed, "ft-batches"))
    n_sketch = int(round(config.batch_size * config.mix_ratio / (1.0 + config.mix_ratio)))
    n_photo = config.batch_size - n_sketch
    steps_per_epoch = max(1, (len(y_real) + len(y_synth)) // config.batch_size)
    history = []
    for epoch in range(config.epochs):
        epoch_losses = []
        for _ in range(steps_per_epoch):
            pi = rng.integers(0, len(y_real), size=n_photo)
            si = rng.integers(0, len(y_synth), size=n_sketch) if len(y_synth) else np.array([], dtype=int)
            imgs = np.concatenate([real_images[pi], synth_images[si]]) if len(si) else real_images[pi]
            labels = np.concatenate([y_real[pi], y_synth[si]]) if len(si) else y_real[pi]
            if config.augment_p > 0:
                imgs = np.stack([augment(im, config.augment_p, rng) for im in imgs])
            x = torch.from_numpy(np.ascontiguousarray(imgs))
            y = torch.from_numpy(labels).long()
            z = F.normalize(net(x), dim=1)
            w = F.normalize(class_weights, dim=1)
            logits = tuned.scale * (z @ w.t() - tuned.margin * F.one_hot(y, classes))
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss))
        history.append(float(np.mean(epoch_losses)))
    net.eval().requires_grad_(False)
    return FinetuneResult(encoder=tuned, selected_identities=selected, history=history)


# --------------------------------------------------------------------------
# encoder pretraining orchestration


def pretrain_encoders(
    entries,
    base_dir,
    style_captions: dict[int, str],
    *,
    text_params: dict | None = None,
    identity_params: dict | None = None,
    semantic_params: dict | None = None,
    appearance: dict[int, np.ndarray] | None = None,
) -> tuple[TextEncoder, SemanticEncoder, IdentityEncoder]:
    """Fit all three stand-in encoders on the train split and freeze them.

    The identity encoder sees photos only (the recognition model it stands in
    for is a photo model); the semantic encoder sees both modalities with the
    rendering class as its label.
    """
    train = filter_entries(entries, split="train")
    photos = filter_entries(train, modality="photo")
    if not photos:
        raise ValueError("train split has no photos")

    text_enc = TextEncoder(**(text_params or {}))
    captions = [style_captions[s] for s in sorted(style_captions)]
    text_enc.fit(captions, sorted(style_captions))

    id_images = load_images(photos, base_dir)
    ident_list = sorted({e.id for e in photos})
    ident_map = {v: k for k, v in enumerate(ident_list)}
    id_labels = np.array([ident_map[e.id] for e in photos])
    identity_enc = IdentityEncoder(**(identity_params or {}))
    identity_enc.fit(id_images, id_labels)

    sem_entries = sorted(train, key=lambda e: e.path)
    sem_images = load_images(sem_entries, base_dir)
    sem_labels = np.array([0 if e.modality == "photo" else 1 + e.style for e in sem_entries])
    sem_attrs = None
    if appearance is not None:
        sem_attrs = np.stack([appearance[e.id] for e in sem_entries])
    semantic_enc = SemanticEncoder(**(semantic_params or {}))
    semantic_enc.fit(sem_images, sem_labels, appearance=sem_attrs)

    return text_enc, semantic_enc, identity_enc
