"""Conditional noise predictor: a small U-shaped conv net with decoupled
text/image cross-attention and an edge-map control branch.

Every parameter belongs to exactly one of five named groups:

- ``backbone``: convolutions, time embedding, up/down paths.
- ``text_attention``: query/output projections and the text key/value maps
  of each cross-attention block.
- ``image_attention``: the key/value maps for the projected image tokens
  plus their zero-initialized output map.
- ``projection``: the two-layer network mapping the combined
  [semantic, identity] vector to image tokens.
- ``control``: the edge-map encoder whose per-stage residuals are added to
  the encoder activations through zero-initialized 1x1 convs.

Zero initialization of the image-attention output map and the control output
convs means a freshly built model is exactly the text-conditioned backbone:
image tokens and edge maps contribute nothing until trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive, save_archive
from .diffusion import torch_generator
from .errors import CheckpointError

GROUP_NAMES = ("backbone", "text_attention", "image_attention", "projection", "control")


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos position features for integer timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
    angles = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    return emb.to(t.device)


class ProjectionNetwork(nn.Module):
    """Two-layer feed-forward map from the combined embedding to K tokens."""

    def __init__(self, in_dim: int, hidden_dim: int, num_tokens: int, token_dim: int):
        super().__init__()
        self.num_tokens = num_tokens
        self.token_dim = token_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, num_tokens * token_dim)

    def forward(self, combined: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.fc1(combined))
        return self.fc2(h).view(-1, self.num_tokens, self.token_dim)


class DecoupledCrossAttention(nn.Module):
    """hidden + Attn(hidden, text) + lambda * Attn(hidden, image tokens).

    Both attentions share the query computed from the normalized hidden
    stream; the image branch has its own key/value/output maps, with the
    output map zero-initialized so the branch is silent until trained.
    """

    def __init__(self, channels: int, context_dim: int, lambda_image: float = 1.0):
        super().__init__()
        if lambda_image < 0:
            raise ValueError(f"lambda_image must be >= 0, got {lambda_image}")
        self.channels = channels
        self.lambda_image = lambda_image
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k_text = nn.Linear(context_dim, channels, bias=False)
        self.to_v_text = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.to_k_image = nn.Linear(context_dim, channels, bias=False)
        self.to_v_image = nn.Linear(context_dim, channels, bias=False)
        self.to_out_image = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out_image.weight)
        nn.init.zeros_(self.to_out_image.bias)

    def _attend(self, q, k, v, mask=None):
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.channels)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        return weights @ v, weights

    def forward(self, h, text_ctx, text_mask, image_tokens, *, return_weights: bool = False):
        if text_ctx.shape[1] == 0 or image_tokens.shape[1] == 0:
            raise ValueError("attention contexts must be non-empty")
        b, c, height, width = h.shape
        tokens = self.norm(h).flatten(2).transpose(1, 2)
        q = self.to_q(tokens)
        text_out, text_w = self._attend(q, self.to_k_text(text_ctx), self.to_v_text(text_ctx), text_mask)
        img_out, img_w = self._attend(q, self.to_k_image(image_tokens), self.to_v_image(image_tokens))
        mixed = self.to_out(text_out) + self.lambda_image * self.to_out_image(img_out)
        out = h + mixed.transpose(1, 2).reshape(b, c, height, width)
        if return_weights:
            return out, text_w, img_w
        return out


class ControlBranch(nn.Module):
    """Edge-map encoder emitting one residual per backbone encoder stage."""

    def __init__(self, widths: tuple[int, int, int]):
        super().__init__()
        w1, w2, w3 = widths
        self.stem = nn.Conv2d(1, w1, 3, padding=1)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.out0 = nn.Conv2d(w1, w1, 1)
        self.out1 = nn.Conv2d(w2, w2, 1)
        self.out2 = nn.Conv2d(w3, w3, 1)
        for conv in (self.out0, self.out1, self.out2):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, edge: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h0 = F.silu(self.stem(edge))
        h1 = F.silu(self.down1(h0))
        h2 = F.silu(self.down2(h1))
        return self.out0(h0), self.out1(h1), self.out2(h2)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass
class ModelConfig:
    image_size: int = 48
    widths: tuple[int, int, int] = (16, 32, 64)
    context_dim: int = 64
    combined_dim: int = 96
    num_tokens: int = 4
    proj_hidden: int = 128
    time_dim: int = 64
    lambda_image: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lambda_image < 0:
            raise ValueError("lambda_image must be >= 0")
        if self.image_size % 4 != 0:
            raise ValueError("image_size must be divisible by 4")


class ConditionalDenoiser(nn.Module):
    """The noise predictor consumed by the diffusion loss and samplers."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        w1, w2, w3 = cfg.widths

        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim)
        )
        self.conv_in = nn.Conv2d(1, w1, 3, padding=1)
        self.enc1 = ResBlock(w1, w1, cfg.time_dim)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(w2, w2, cfg.time_dim)
        self.attn2 = DecoupledCrossAttention(w2, cfg.context_dim, cfg.lambda_image)
        self.down2 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.enc3 = ResBlock(w3, w3, cfg.time_dim)
        self.attn3 = DecoupledCrossAttention(w3, cfg.context_dim, cfg.lambda_image)
        self.mid = ResBlock(w3, w3, cfg.time_dim)
        self.up2 = nn.ConvTranspose2d(w3, w2, 4, stride=2, padding=1)
        self.dec2 = ResBlock(w2 + w2, w2, cfg.time_dim)
        self.up1 = nn.ConvTranspose2d(w2, w1, 4, stride=2, padding=1)
        self.dec1 = ResBlock(w1 + w1, w1, cfg.time_dim)
        self.norm_out = nn.GroupNorm(8, w1)
        self.conv_out = nn.Conv2d(w1, 1, 3, padding=1)

        self.control = ControlBranch(cfg.widths)
        self.projection = ProjectionNetwork(
            cfg.combined_dim, cfg.proj_hidden, cfg.num_tokens, cfg.context_dim
        )
        self._seeded_init(cfg.seed)

    # -- initialization ----------------------------------------------------

    def set_lambda(self, value: float) -> None:
        """Adjust the image-attention mixing weight on every attention block."""
        if value < 0:
            raise ValueError("lambda_image must be >= 0")
        for m in self.modules():
            if isinstance(m, DecoupledCrossAttention):
                m.lambda_image = value

    def zero_init_names(self) -> list[str]:
        names = []
        for mod_name, module in self.named_modules():
            if isinstance(module, DecoupledCrossAttention):
                names += [f"{mod_name}.to_out_image.weight", f"{mod_name}.to_out_image.bias"]
        for conv in ("out0", "out1", "out2"):
            names += [f"control.{conv}.weight", f"control.{conv}.bias"]
        return names

    def _seeded_init(self, seed: int) -> None:
        gen = torch_generator(seed)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_uniform_(m.weight, a=5**0.5, generator=gen)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        zero = set(self.zero_init_names())
        for name, p in self.named_parameters():
            if name in zero:
                nn.init.zeros_(p)

    # -- conditioning ------------------------------------------------------

    def _stack_conditions(self, conditions, dtype, device):
        text = torch.stack([c.text.vectors for c in conditions]).to(dtype=dtype, device=device)
        mask = torch.stack([c.text.mask for c in conditions]).to(device=device)
        combined = torch.stack([c.combined for c in conditions]).to(dtype=dtype, device=device)
        edges = torch.stack([c.edge_map for c in conditions]).to(dtype=dtype, device=device)
        return text, mask, combined, edges

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, conditions) -> torch.Tensor:
        if len(conditions) != x_t.shape[0]:
            raise ValueError(f"{len(conditions)} conditions for batch of {x_t.shape[0]}")
        text, mask, combined, edges = self._stack_conditions(conditions, x_t.dtype, x_t.device)
        tokens = self.projection(combined)
        r0, r1, r2 = self.control(edges)

        temb = self.time_mlp(sinusoidal_embedding(t, self.config.time_dim).to(x_t.dtype))
        h1 = self.enc1(self.conv_in(x_t), temb) + r0
        h2 = self.enc2(self.down1(h1), temb) + r1
        h2 = self.attn2(h2, text, mask, tokens)
        h3 = self.enc3(self.down2(h2), temb) + r2
        h3 = self.attn3(h3, text, mask, tokens)
        m = self.mid(h3, temb)
        d2 = self.dec2(torch.cat([self.up2(m), h2], dim=1), temb)
        d1 = self.dec1(torch.cat([self.up1(d2), h1], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(d1)))

    predict_noise = forward

    # -- persistence ---------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None) -> None:
        partition = build_partition(self)
        save_archive(
            {
                "config": self.config.__dict__ | {"widths": list(self.config.widths)},
                "group_sizes": partition.sizes(),
                "zero_init": self.zero_init_names(),
                "state_dict": self.state_dict(),
                "meta": extra_meta or {},
            },
            "denoiser",
            path,
        )

    @classmethod
    def load(cls, path) -> "ConditionalDenoiser":
        data = load_archive(path, "denoiser")
        raw = dict(data["config"])
        raw["widths"] = tuple(raw["widths"])
        model = cls(ModelConfig(**raw))
        try:
            model.load_state_dict(data["state_dict"])
        except RuntimeError as exc:
            raise CheckpointError(f"denoiser state mismatch: {exc}") from exc
        return model


@dataclass
class ParamPartition:
    """Disjoint, exhaustive grouping of model parameters with trainability flags."""

    groups: dict[str, dict[str, nn.Parameter]]
    trainable: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.groups:
            self.trainable.setdefault(name, True)

    def sizes(self) -> dict[str, int]:
        return {g: sum(p.numel() for p in ps.values()) for g, ps in self.groups.items()}

    def total(self) -> int:
        return sum(self.sizes().values())

    def parameters(self, group: str):
        return list(self.groups[group].values())

    def trainable_parameters(self) -> list[nn.Parameter]:
        out = []
        for g, ps in self.groups.items():
            if self.trainable[g]:
                out += list(ps.values())
        return out

    def group_bytes(self, group: str) -> bytes:
        chunks = []
        for name in sorted(self.groups[group]):
            chunks.append(self.groups[group][name].detach().cpu().numpy().tobytes())
        return b"".join(chunks)

    def check_exhaustive(self, model: nn.Module) -> None:
        """Every model parameter in exactly one group, by count and identity."""
        seen: dict[int, str] = {}
        for g, ps in self.groups.items():
            for name, p in ps.items():
                if id(p) in seen:
                    raise ValueError(f"parameter {name} in both {seen[id(p)]} and {g}")
                seen[id(p)] = g
        model_params = dict(model.named_parameters())
        if set(seen) != {id(p) for p in model_params.values()}:
            raise ValueError("partition does not cover the model's parameters exactly")
        if self.total() != sum(p.numel() for p in model_params.values()):
            raise ValueError("partition sizes do not sum to the model total")


def build_partition(model: ConditionalDenoiser) -> ParamPartition:
    """Assign every parameter of the denoiser to its named group."""
    image_parts = ("to_k_image", "to_v_image", "to_out_image")
    attn_prefixes = tuple(
        name + "." for name, m in model.named_modules() if isinstance(m, DecoupledCrossAttention)
    )
    groups: dict[str, dict[str, nn.Parameter]] = {g: {} for g in GROUP_NAMES}
    for name, p in model.named_parameters():
        if name.startswith("projection."):
            groups["projection"][name] = p
        elif name.startswith("control."):
            groups["control"][name] = p
        elif name.startswith(attn_prefixes):
            leaf = name.rsplit(".", 2)[-2]
            key = "image_attention" if leaf in image_parts else "text_attention"
            groups[key][name] = p
        else:
            groups["backbone"][name] = p
    partition = ParamPartition(groups=groups)
    partition.check_exhaustive(model)
    return partition


def control_apply(edge_map: torch.Tensor, control: ControlBranch):
    """Residuals for each encoder stage from a batch of edge maps."""
    if edge_map.ndim != 4 or edge_map.shape[1] != 1:
        raise ValueError(f"edge maps must be (N, 1, H, W), got {tuple(edge_map.shape)}")
    return control(edge_map)
