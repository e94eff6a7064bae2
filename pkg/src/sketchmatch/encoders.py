"""Conditioning encoders: style captions, identity, and image semantics.

Three small estimators stand in for large pretrained models. Each follows
the scikit-learn surface (``fit`` / ``transform`` / ``get_params``), trains
on the toy corpus, and is frozen afterwards; the diffusion model only ever
sees their outputs.

- :class:`TextEncoder` embeds style captions (token lookup + learned
  positions + one self-attention block).
- :class:`IdentityEncoder` maps images to unit-norm identity vectors via an
  additive-margin classifier over identity labels.
- :class:`SemanticEncoder` maps images to style/appearance-aware vectors.

:func:`build_condition` assembles the full conditioning state of one
generation: the caption embedding, the concatenated [semantic, identity]
vector, its projected tokens, and the canny edge map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator

from .archive import load_archive, save_archive
from .diffusion import torch_generator
from .edges import DEFAULT_SIGMA, DEFAULT_T_HIGH, DEFAULT_T_LOW, canny_edges, edge_map_tensor
from .errors import CheckpointError
from .validation import check_image_batch

VOCABULARY = (
    "<pad>",
    "<start>",
    "<unk>",
    "a",
    "viewed",
    "non-viewed",
    "hand-drawn",
    "software-generated",
    "sketch",
    "of",
    "face",
    "person",
)
PAD, START, UNK = 0, 1, 2
MAX_TOKENS = 8


@dataclass
class TextEmbedding:
    """Token ids, per-position vectors, and validity mask for one caption."""

    tokens: list[int]
    vectors: torch.Tensor
    mask: torch.Tensor

    def pooled(self) -> torch.Tensor:
        m = self.mask.to(self.vectors.dtype)[:, None]
        return (self.vectors * m).sum(dim=0) / m.sum().clamp_min(1.0)


def tokenize(caption: str) -> tuple[list[int], list[bool]]:
    """Whitespace tokenization onto the fixed vocabulary; unknowns map to <unk>."""
    index = {w: i for i, w in enumerate(VOCABULARY)}
    ids = [START]
    for word in caption.strip().lower().split():
        ids.append(index.get(word, UNK))
    ids = ids[:MAX_TOKENS]
    mask = [True] * len(ids)
    while len(ids) < MAX_TOKENS:
        ids.append(PAD)
        mask.append(False)
    return ids, mask


def _init_module(module: nn.Module, seed: int) -> None:
    """Seeded re-initialization; norm layers keep their identity defaults."""
    gen = torch_generator(seed)
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_uniform_(m.weight, a=5**0.5, generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=0.02, generator=gen)


class _TextNet(nn.Module):
    def __init__(self, vocab: int, dim: int, max_len: int):
        super().__init__()
        self.embed = nn.Embedding(vocab, dim)
        self.pos = nn.Parameter(torch.zeros(max_len, dim))
        self.norm = nn.LayerNorm(dim)
        self.to_qkv = nn.Linear(dim, 3 * dim)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.embed(ids) + self.pos[None, : ids.shape[1]]
        q, k, v = self.to_qkv(self.norm(h)).chunk(3, dim=-1)
        scores = q @ k.transpose(-1, -2) / (q.shape[-1] ** 0.5)
        scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        h = h + self.to_out(torch.softmax(scores, dim=-1) @ v)
        return h * mask[..., None]


class TextEncoder(BaseEstimator):
    """Caption embedder over the style-prompt vocabulary."""

    def __init__(self, embed_dim=64, steps=300, lr=5e-3, seed=0):
        self.embed_dim = embed_dim
        self.steps = steps
        self.lr = lr
        self.seed = seed

    def fit(self, captions, labels):
        """Pretrain by classifying which catalog style a caption names, then freeze."""
        net = _TextNet(len(VOCABULARY), self.embed_dim, MAX_TOKENS)
        _init_module(net, self.seed)
        labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        head = nn.Linear(self.embed_dim, int(labels.max()) + 1)
        _init_module(head, self.seed + 1)
        ids, mask = _batch_tokens(captions)
        opt = torch.optim.Adam([*net.parameters(), *head.parameters()], lr=self.lr)
        for _ in range(self.steps):
            out = net(ids, mask)
            pooled = (out * mask[..., None]).sum(1) / mask.sum(1, keepdim=True)
            loss = F.cross_entropy(head(pooled), labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
        net.eval().requires_grad_(False)
        self.net_ = net
        return self

    def transform(self, captions) -> list[TextEmbedding]:
        self._check_fitted()
        ids, mask = _batch_tokens(captions)
        with torch.no_grad():
            out = self.net_(ids, mask)
        return [
            TextEmbedding(tokens=ids[i].tolist(), vectors=out[i], mask=mask[i])
            for i in range(len(captions))
        ]

    def encode(self, caption: str) -> TextEmbedding:
        return self.transform([caption])[0]

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise RuntimeError("TextEncoder is not fitted")

    def param_hash(self) -> str:
        return _hash_state(self.net_)

    def save(self, path):
        self._check_fitted()
        save_archive(
            {"params": self.get_params(), "meta": {"embed_dim": self.embed_dim},
             "state_dict": self.net_.state_dict()},
            "text-encoder",
            path,
        )

    @classmethod
    def load(cls, path, expect_dim: int | None = None) -> "TextEncoder":
        data = load_archive(path, "text-encoder")
        enc = cls(**data["params"])
        if expect_dim is not None and data["meta"]["embed_dim"] != expect_dim:
            raise CheckpointError(
                f"text encoder dim {data['meta']['embed_dim']} != expected {expect_dim}"
            )
        net = _TextNet(len(VOCABULARY), enc.embed_dim, MAX_TOKENS)
        try:
            net.load_state_dict(data["state_dict"])
        except RuntimeError as exc:
            raise CheckpointError(f"text encoder state mismatch: {exc}") from exc
        net.eval().requires_grad_(False)
        enc.net_ = net
        return enc


def _batch_tokens(captions) -> tuple[torch.Tensor, torch.Tensor]:
    ids, masks = zip(*(tokenize(c) for c in captions))
    return torch.tensor(ids, dtype=torch.long), torch.tensor(masks, dtype=torch.bool)


class _ConvTrunk(nn.Module):
    def __init__(self, width: int, out_dim: int, image_size: int):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(1, w, 3, stride=2, padding=1), nn.GroupNorm(4, w), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.GroupNorm(4, 2 * w), nn.SiLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.GroupNorm(4, 4 * w), nn.SiLU(),
        )
        side = image_size // 8
        self.head = nn.Linear(4 * w * side * side, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return self.head(h.flatten(1))


class _ImageEncoderBase(BaseEstimator):
    _kind = ""
    _normalize = False

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        X = _as_batch(X)
        embs = []
        with torch.no_grad():
            for i in range(0, X.shape[0], 256):
                z = self.net_(X[i : i + 256])
                if self._normalize:
                    z = F.normalize(z, dim=1)
                embs.append(z)
        return torch.cat(embs).numpy().astype(np.float32)

    def encode(self, image) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        return self.transform(arr[None])[0]

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise RuntimeError(f"{type(self).__name__} is not fitted")

    def param_hash(self) -> str:
        return _hash_state(self.net_)

    def save(self, path):
        self._check_fitted()
        save_archive(
            {"params": self.get_params(),
             "meta": {"embed_dim": self.embed_dim, "image_size": self.image_size},
             "state_dict": self.net_.state_dict()},
            self._kind,
            path,
        )

    @classmethod
    def load(cls, path, expect_dim: int | None = None):
        data = load_archive(path, cls._kind)
        enc = cls(**data["params"])
        if expect_dim is not None and data["meta"]["embed_dim"] != expect_dim:
            raise CheckpointError(
                f"{cls._kind} dim {data['meta']['embed_dim']} != expected {expect_dim}"
            )
        net = _ConvTrunk(enc.width, enc.embed_dim, enc.image_size)
        try:
            net.load_state_dict(data["state_dict"])
        except RuntimeError as exc:
            raise CheckpointError(f"{cls._kind} state mismatch: {exc}") from exc
        net.eval().requires_grad_(False)
        enc.net_ = net
        return enc


class IdentityEncoder(_ImageEncoderBase):
    """Face-identity embedder trained with an additive-margin classifier.

    Embeddings are unit L2 norm; after :meth:`fit` the weights are frozen and
    ``transform`` is a pure function.
    """

    _kind = "identity-encoder"
    _normalize = True

    def __init__(self, embed_dim=32, width=32, image_size=48, epochs=30, batch_size=64,
                 lr=2e-3, margin=0.2, scale=30.0, augment_p=0.0, augment_copies=0, seed=0):
        self.embed_dim = embed_dim
        self.width = width
        self.image_size = image_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.margin = margin
        self.scale = scale
        self.augment_p = augment_p
        self.augment_copies = augment_copies
        self.seed = seed

    def fit(self, X, y):
        X = _as_batch(X)
        y = torch.as_tensor(np.asarray(y), dtype=torch.long)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} images for {y.shape[0]} labels")
        if self.augment_copies > 0 and self.augment_p > 0:
            # expand once with seeded augmented copies instead of per-batch work
            from .training import augment

            rng = np.random.default_rng(self.seed + 7919)
            base = X.numpy()
            copies = [base]
            for _ in range(self.augment_copies):
                copies.append(np.stack([augment(im, self.augment_p, rng) for im in base]))
            X = torch.from_numpy(np.concatenate(copies))
            y = y.repeat(self.augment_copies + 1)
        classes = int(y.max()) + 1
        net = _ConvTrunk(self.width, self.embed_dim, self.image_size)
        _init_module(net, self.seed)
        class_weights = nn.Parameter(torch.empty(classes, self.embed_dim))
        nn.init.normal_(class_weights, std=0.05, generator=torch_generator(self.seed + 1))
        opt = torch.optim.Adam([*net.parameters(), class_weights], lr=self.lr)
        gen = torch_generator(self.seed + 2)
        for _ in range(self.epochs):
            order = torch.randperm(X.shape[0], generator=gen)
            for i in range(0, len(order), self.batch_size):
                idx = order[i : i + self.batch_size]
                z = F.normalize(net(X[idx]), dim=1)
                w = F.normalize(class_weights, dim=1)
                cos = z @ w.t()
                logits = self.scale * (cos - self.margin * F.one_hot(y[idx], classes))
                loss = F.cross_entropy(logits, y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        net.eval().requires_grad_(False)
        self.net_ = net
        self.classes_ = classes
        return self


class SemanticEncoder(_ImageEncoderBase):
    """Style/appearance embedder; deliberately modality-sensitive."""

    _kind = "semantic-encoder"
    _normalize = False

    def __init__(self, embed_dim=64, width=16, image_size=48, epochs=20, batch_size=64,
                 lr=2e-3, seed=0):
        self.embed_dim = embed_dim
        self.width = width
        self.image_size = image_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y, appearance=None):
        """Train to predict the rendering class (photo or sketch style) of each
        image, plus coarse appearance attributes when given."""
        X = _as_batch(X)
        y = torch.as_tensor(np.asarray(y), dtype=torch.long)
        net = _ConvTrunk(self.width, self.embed_dim, self.image_size)
        _init_module(net, self.seed)
        style_head = nn.Linear(self.embed_dim, int(y.max()) + 1)
        _init_module(style_head, self.seed + 1)
        params = [*net.parameters(), *style_head.parameters()]
        attr = None
        if appearance is not None:
            attr = torch.as_tensor(np.asarray(appearance), dtype=torch.float32)
            attr_head = nn.Linear(self.embed_dim, attr.shape[1])
            _init_module(attr_head, self.seed + 2)
            params += list(attr_head.parameters())
        opt = torch.optim.Adam(params, lr=self.lr)
        gen = torch_generator(self.seed + 3)
        for _ in range(self.epochs):
            order = torch.randperm(X.shape[0], generator=gen)
            for i in range(0, len(order), self.batch_size):
                idx = order[i : i + self.batch_size]
                z = net(X[idx])
                loss = F.cross_entropy(style_head(z), y[idx])
                if attr is not None:
                    loss = loss + F.mse_loss(attr_head(z), attr[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        net.eval().requires_grad_(False)
        self.net_ = net
        return self


def _as_batch(X) -> torch.Tensor:
    if isinstance(X, torch.Tensor):
        t = X.float()
    else:
        t = torch.from_numpy(np.ascontiguousarray(np.asarray(X, dtype=np.float32)))
    check_image_batch(t)
    return t


def _hash_state(module: nn.Module) -> str:
    import hashlib

    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


@dataclass
class ConditionBundle:
    """The full conditioning state of one generation."""

    text: TextEmbedding
    combined: torch.Tensor
    edge_map: torch.Tensor
    image_tokens: torch.Tensor | None = None

    def __post_init__(self):
        if self.combined.ndim != 1:
            raise ValueError(f"combined embedding must be 1-D, got {tuple(self.combined.shape)}")
        if self.image_tokens is not None and self.image_tokens.shape[1] != self.text.vectors.shape[1]:
            raise ValueError("image tokens must live in the text embedding space")


def build_condition(
    mugshot,
    caption: str,
    projection=None,
    *,
    text_encoder: TextEncoder,
    semantic_encoder: SemanticEncoder,
    identity_encoder: IdentityEncoder,
    sigma: float = DEFAULT_SIGMA,
    t_low: float = DEFAULT_T_LOW,
    t_high: float = DEFAULT_T_HIGH,
) -> ConditionBundle:
    """Encode one mugshot + caption into a :class:`ConditionBundle`.

    The combined vector is the concatenation [semantic, identity]; the
    projection (when given) maps it to tokens in the text embedding space.
    """
    semantic = semantic_encoder.encode(mugshot)
    identity = identity_encoder.encode(mugshot)
    combined = torch.from_numpy(np.concatenate([semantic, identity]).astype(np.float32))
    edges = edge_map_tensor(canny_edges(mugshot, sigma=sigma, t_low=t_low, t_high=t_high))
    tokens = None
    if projection is not None:
        with torch.no_grad():
            tokens = projection(combined[None])[0]
    return ConditionBundle(
        text=text_encoder.encode(caption),
        combined=combined,
        edge_map=edges,
        image_tokens=tokens,
    )
