"""Procedural face-like corpus with ground-truth identity labels.

Each identity is a 10-parameter geometry vector; images are rendered from it
in two modalities: a shaded "photo" (the mugshot stand-in) and eight
line-art "sketch" styles (four with hand-drawn stroke wobble, four with
clean software-style strokes). Rendering is a pure function of
(identity, spec, seed), which is what makes every downstream experiment
reproducible and lets tests know the true identity of every pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .manifest import ManifestEntry, write_manifest

SUPERSAMPLE = 4
N_STYLES = 8
HAND_DRAWN_STYLES = (0, 1, 2, 3)
SOFTWARE_STYLES = (4, 5, 6, 7)

# name, low, high
GEOMETRY_RANGES = (
    ("face_aspect", 0.70, 0.95),
    ("eye_spacing", 0.18, 0.32),
    ("eye_size", 0.045, 0.080),
    ("brow_tilt", -0.30, 0.30),
    ("nose_length", 0.15, 0.30),
    ("mouth_width", 0.15, 0.30),
    ("mouth_curve", -0.15, 0.15),
    ("jaw_width", 0.45, 0.90),
    ("hair_height", 0.10, 0.35),
    ("skin_tone", 0.45, 0.80),
)

FACE_SEMI_HEIGHT = 0.72

# per style: stroke width, darkness, wobble amplitude, hatch spacing (0 = none)
_STYLE_TABLE = {
    0: dict(width=0.034, contrast=0.85, wobble=0.012, hatch=0.070),
    1: dict(width=0.050, contrast=0.70, wobble=0.016, hatch=0.0),
    2: dict(width=0.024, contrast=0.95, wobble=0.009, hatch=0.055),
    3: dict(width=0.060, contrast=0.55, wobble=0.022, hatch=0.100),
    4: dict(width=0.018, contrast=1.00, wobble=0.0, hatch=0.050),
    5: dict(width=0.040, contrast=0.85, wobble=0.0, hatch=0.0),
    6: dict(width=0.030, contrast=0.65, wobble=0.0, hatch=0.075),
    7: dict(width=0.052, contrast=0.90, wobble=0.0, hatch=0.040),
}


@dataclass(frozen=True)
class ToyIdentity:
    """One synthetic person: an integer id plus its face geometry vector."""

    id: int
    geometry: np.ndarray

    def __post_init__(self):
        geo = np.asarray(self.geometry, dtype=np.float64)
        if geo.shape != (len(GEOMETRY_RANGES),):
            raise ValueError(f"geometry must have {len(GEOMETRY_RANGES)} entries, got {geo.shape}")
        for value, (name, lo, hi) in zip(geo, GEOMETRY_RANGES):
            if not (lo <= value <= hi):
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
        object.__setattr__(self, "geometry", geo)

    def param(self, name: str) -> float:
        names = [n for n, _, _ in GEOMETRY_RANGES]
        return float(self.geometry[names.index(name)])


@dataclass(frozen=True)
class RenderSpec:
    """Modality, style, and nuisance amplitudes for one rendering."""

    modality: str
    style_id: int | None = None
    pose_jitter: float = 0.0
    illumination: float = 0.0
    noise: float = 0.0

    def __post_init__(self):
        if self.modality not in ("photo", "sketch"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality == "sketch":
            if self.style_id is None or not (0 <= self.style_id < N_STYLES):
                raise ValueError(f"sketch requires style_id in [0, {N_STYLES}), got {self.style_id}")
        elif self.style_id is not None:
            raise ValueError("photo spec must not carry a style_id")


def sample_identity(rng_seed, id: int = 0) -> ToyIdentity:
    """Draw a fresh identity uniformly from the documented parameter ranges."""
    rng = _rng(rng_seed)
    lows = np.array([lo for _, lo, _ in GEOMETRY_RANGES])
    highs = np.array([hi for _, _, hi in GEOMETRY_RANGES])
    return ToyIdentity(id=id, geometry=rng.uniform(lows, highs))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def derive_seed(*parts) -> int:
    """Stable 32-bit seed derived from a tuple of ints/strings."""
    entropy = [abs(hash(p)) % (2**32) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


# --------------------------------------------------------------------------
# geometry helpers on the supersampled coordinate grid


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    x, y = np.meshgrid(coords, -coords)  # y axis points up
    return x, y


def _downsample(img: np.ndarray, size: int) -> np.ndarray:
    return img.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def _segment_dist(x, y, p0, p1):
    vx, vy = p1[0] - p0[0], p1[1] - p0[1]
    denom = max(vx * vx + vy * vy, 1e-12)
    t = np.clip(((x - p0[0]) * vx + (y - p0[1]) * vy) / denom, 0.0, 1.0)
    return np.hypot(x - (p0[0] + t * vx), y - (p0[1] + t * vy))


def _polyline_dist(x, y, pts):
    d = np.full(x.shape, np.inf)
    for p0, p1 in zip(pts[:-1], pts[1:]):
        d = np.minimum(d, _segment_dist(x, y, p0, p1))
    return d


@dataclass
class _FaceParts:
    face: np.ndarray
    hair: np.ndarray
    eyes: np.ndarray
    outline_dist: np.ndarray
    eye_ring_dist: np.ndarray
    stroke_dist: np.ndarray  # brows + nose + mouth combined
    field: dict = field(default_factory=dict)


def _face_parts(identity: ToyIdentity, x: np.ndarray, y: np.ndarray) -> _FaceParts:
    (aspect, eye_sp, eye_sz, brow_tilt, nose_len, mouth_w, mouth_c, jaw_w, hair_h, _skin) = (
        identity.geometry
    )
    b = FACE_SEMI_HEIGHT
    a = aspect * b

    # jaw taper narrows the lower half of the ellipse
    taper = np.where(y < 0, 1.0 + (jaw_w - 1.0) * np.clip(-y / b, 0.0, 1.0), 1.0)
    r = np.sqrt((x / (a * taper)) ** 2 + (y / b) ** 2)
    face = r <= 1.0
    outline_dist = np.abs(r - 1.0) * min(a, b)

    hair = face & (y > b * (1.0 - 2.0 * hair_h))

    ey = 0.18
    eye_l = ((x + eye_sp) / (1.4 * eye_sz)) ** 2 + ((y - ey) / eye_sz) ** 2
    eye_r = ((x - eye_sp) / (1.4 * eye_sz)) ** 2 + ((y - ey) / eye_sz) ** 2
    eyes = (eye_l <= 1.0) | (eye_r <= 1.0)
    eye_ring_dist = np.minimum(np.abs(np.sqrt(eye_l) - 1.0), np.abs(np.sqrt(eye_r) - 1.0)) * eye_sz

    strokes = []
    half = 1.6 * eye_sz
    for sign in (-1.0, 1.0):
        cx, cy = sign * eye_sp, 0.32
        tilt = -sign * brow_tilt
        strokes.append(
            [(cx - half * np.cos(tilt), cy - half * np.sin(tilt)),
             (cx + half * np.cos(tilt), cy + half * np.sin(tilt))]
        )
    nose_tip = 0.10 - nose_len
    strokes.append([(0.0, 0.10), (0.0, nose_tip)])
    strokes.append([(-0.045, nose_tip), (0.045, nose_tip)])
    mouth_pts = []
    for u in np.linspace(-1.0, 1.0, 17):
        mouth_pts.append((u * mouth_w, -0.34 + mouth_c * (u * u - 0.5)))
    strokes.append(mouth_pts)

    stroke_dist = np.full(x.shape, np.inf)
    for pts in strokes:
        stroke_dist = np.minimum(stroke_dist, _polyline_dist(x, y, pts))

    return _FaceParts(
        face=face,
        hair=hair,
        eyes=eyes,
        outline_dist=outline_dist,
        eye_ring_dist=eye_ring_dist,
        stroke_dist=stroke_dist,
    )


def _pose(x, y, rng: np.random.Generator, amplitude: float):
    # rigid jitter of the whole coordinate frame; identity geometry untouched
    if amplitude <= 0:
        rng.uniform(size=3)  # keep the draw stream aligned across specs
        return x, y
    dx, dy, rot = rng.uniform(-1.0, 1.0, size=3)
    dx, dy = dx * amplitude, dy * amplitude
    ang = rot * amplitude * 1.5
    ca, sa = np.cos(ang), np.sin(ang)
    xr = ca * x + sa * y - dx
    yr = -sa * x + ca * y - dy
    return xr, yr


def render_photo(identity: ToyIdentity, spec: RenderSpec, rng_seed) -> np.ndarray:
    """Shaded anti-aliased rendering; returns a float32 (1, H, W) image in [-1, 1]."""
    return _render(identity, spec, rng_seed, want="photo")


def render_reference_sketch(identity: ToyIdentity, spec: RenderSpec, rng_seed) -> np.ndarray:
    """Line-art rendering in the style given by ``spec.style_id``."""
    return _render(identity, spec, rng_seed, want="sketch")


def _render(identity: ToyIdentity, spec: RenderSpec, rng_seed, *, want: str, size: int = 48) -> np.ndarray:
    if spec.modality != want:
        raise ValueError(f"spec modality {spec.modality!r} does not match renderer {want!r}")
    rng = _rng(rng_seed)
    x, y = _grid(size)
    x, y = _pose(x, y, rng, spec.pose_jitter)

    if want == "sketch":
        style = _STYLE_TABLE[spec.style_id]
        if style["wobble"] > 0:
            fx1, fx2, ph1, ph2 = rng.uniform(2.0, 4.5, size=4)
            x = x + style["wobble"] * np.sin(2 * np.pi * (fx1 * y + ph1))
            y = y + style["wobble"] * np.sin(2 * np.pi * (fx2 * x + ph2))
        else:
            rng.uniform(2.0, 4.5, size=4)
        lum = _render_sketch(identity, x, y, style)
    else:
        lum = _render_photo(identity, x, y)

    gain = 1.0 + spec.illumination * rng.uniform(-1.0, 1.0)
    lum = np.clip(lum * gain, 0.0, 1.0)
    lum = _downsample(lum, size)
    if spec.noise > 0:
        lum = lum + rng.normal(0.0, spec.noise, size=lum.shape)
    else:
        rng.normal(0.0, 1.0, size=lum.shape)
    img = np.clip(lum * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)
    return img[None, :, :]


def _render_photo(identity: ToyIdentity, x, y) -> np.ndarray:
    parts = _face_parts(identity, x, y)
    skin = identity.param("skin_tone")
    lum = np.full(x.shape, 0.08)
    # mild top-lit shading keeps the face from being a flat disk
    shade = 1.0 - 0.18 * np.clip((FACE_SEMI_HEIGHT - y) / (2 * FACE_SEMI_HEIGHT), 0.0, 1.0)
    lum = np.where(parts.face, skin * shade, lum)
    lum = np.where(parts.hair, 0.16, lum)
    lum = np.where(parts.stroke_dist < 0.016, 0.12, lum)
    lum = np.where(parts.eyes, 0.06, lum)
    return lum


def _render_sketch(identity: ToyIdentity, x, y, style: dict) -> np.ndarray:
    parts = _face_parts(identity, x, y)
    w = style["width"] / 2.0
    ink = np.zeros(x.shape, dtype=bool)
    ink |= parts.outline_dist < w
    ink |= parts.eye_ring_dist < w
    ink |= parts.stroke_dist < w
    if style["hatch"] > 0:
        diag = (x + y) / np.sqrt(2.0)
        hatch = np.mod(diag, style["hatch"]) < style["width"] * 0.8
        ink |= parts.hair & hatch
    else:
        ink |= parts.hair & (parts.outline_dist < 2.5 * w)
    lum = np.full(x.shape, 0.95)
    lum[ink] = 0.95 - style["contrast"]
    return lum


# --------------------------------------------------------------------------
# corpus assembly


def build_corpus(
    n_identities: int,
    photos_per_id: int,
    sketches_per_id: int,
    seed: int,
    out_dir,
    *,
    pose_jitter: float = 0.05,
    illumination: float = 0.15,
    noise: float = 0.02,
    train_fraction: float = 0.8,
) -> list[ManifestEntry]:
    """Render a full corpus to ``out_dir`` and write its JSONL manifest.

    Identities are split 80/20 into disjoint train/test groups. Returns the
    manifest entries; images land under ``out_dir/images`` as 8-bit grayscale
    PNG, and the manifest at ``out_dir/manifest.jsonl``.
    """
    if n_identities < 1 or photos_per_id < 1 or sketches_per_id < 1:
        raise ValueError("all corpus counts must be >= 1")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    order = np.random.default_rng(derive_seed(seed, "split")).permutation(n_identities)
    n_train = int(round(train_fraction * n_identities))
    train_ids = set(int(i) for i in order[:n_train])

    entries: list[ManifestEntry] = []
    for ident_id in range(n_identities):
        identity = sample_identity(derive_seed(seed, "identity", ident_id), id=ident_id)
        split = "train" if ident_id in train_ids else "test"
        for k in range(photos_per_id):
            s = derive_seed(seed, "photo", ident_id, k)
            spec = RenderSpec("photo", pose_jitter=pose_jitter, illumination=illumination, noise=noise)
            img = render_photo(identity, spec, s)
            rel = f"images/id{ident_id:05d}_photo_{k}.png"
            save_png(img, out_dir / rel)
            entries.append(ManifestEntry(id=ident_id, path=rel, modality="photo", style=None, split=split, seed=s))
        for k in range(sketches_per_id):
            style = k % N_STYLES
            s = derive_seed(seed, "sketch", ident_id, k)
            spec = RenderSpec("sketch", style_id=style)
            img = render_reference_sketch(identity, spec, s)
            rel = f"images/id{ident_id:05d}_sketch_s{style}_{k}.png"
            save_png(img, out_dir / rel)
            entries.append(ManifestEntry(id=ident_id, path=rel, modality="sketch", style=style, split=split, seed=s))

    write_manifest(entries, out_dir / "manifest.jsonl")
    meta = {
        "n_identities": n_identities,
        "photos_per_id": photos_per_id,
        "sketches_per_id": sketches_per_id,
        "seed": seed,
        "pose_jitter": pose_jitter,
        "illumination": illumination,
        "noise": noise,
    }
    (out_dir / "corpus.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return entries


def save_png(img: np.ndarray, path) -> None:
    """Write a (1, H, W) [-1, 1] image as 8-bit grayscale PNG."""
    from PIL import Image

    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[0]
    byte = np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(byte, mode="L").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Read a grayscale PNG back to a float32 (1, H, W) image in [-1, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return (arr / 127.5 - 1.0)[None, :, :]
