"""Contrastive spike representation network with a denoising branch.

The online branch is conv frontend → transformer encoder → projection →
prediction. The target branch is a momentum copy of encoder + projection fed
from the same conv frontend without gradient. A small denoising autoencoder
maps the conv tokens of a noised view back towards the clean view's tokens.
"""
import copy
import logging
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from spikerep.utils.errors import PipelineError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    conv_out_dim: int = 32
    conv_kernel: int = 5
    n_transformer_layers: int = 2
    n_heads: int = 4
    feedforward_dim: int = 64
    rep_dim: int = 32
    proj_dim: int = 64
    pred_hidden_dim: int = 64
    dae_hidden_dim: int = 64
    temperature: float = 0.2
    momentum: float = 0.99
    alpha: float = 0.2
    snippet_samples: int = 121
    snippet_channels: int = 21
    positional_encoding: bool = True
    input_scale_uv: float = 100.0

    def __post_init__(self):
        problems = []
        if self.rep_dim < 1:
            problems.append("rep_dim must be ≥ 1")
        if not self.temperature > 0:
            problems.append("temperature must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            problems.append("momentum must lie in [0, 1]")
        if self.alpha < 0:
            problems.append("alpha must be ≥ 0")
        if self.conv_out_dim % self.n_heads != 0:
            problems.append("conv_out_dim must be divisible by n_heads")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            problems.append("conv_kernel must be odd")
        if not self.input_scale_uv > 0:
            problems.append("input_scale_uv must be positive")
        if problems:
            raise PipelineError("Invalid model config: " + "; ".join(problems), "invalid_spec", {"problems": problems})


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 256
    peak_lr: float = 1e-4
    warmup_epochs: int = 10
    weight_decay: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs or self.batch_size < 2:
            raise PipelineError(
                "Training needs epochs ≥ 1, 0 ≤ warmup_epochs < epochs and batch_size ≥ 2",
                "invalid_spec",
                {"epochs": self.epochs, "warmup_epochs": self.warmup_epochs, "batch_size": self.batch_size},
            )


class ConvFrontend(nn.Module):
    """Cross-channel convolution: C input channels → E features per time step, bias-free."""

    def __init__(self, n_channels: int, out_dim: int, kernel: int = 5):
        super().__init__()
        self.conv = nn.Conv1d(n_channels, out_dim, kernel, padding=kernel // 2, bias=False)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if x.dim() != 3 or x.shape[2] != self.conv.in_channels:
            raise PipelineError(
                f"Expected B×T×{self.conv.in_channels} snippets, got {tuple(x.shape)}",
                "shape_mismatch",
                {"shape": list(x.shape)},
            )
        if mask is not None:
            x = x * mask[:, None, :].to(x.dtype)
        return self.conv(x.transpose(1, 2)).transpose(1, 2)


class TransformerEncoder(nn.Module):
    """Pre-norm transformer over time tokens, mean-pooled to a rep_dim vector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.positional = None
        if cfg.positional_encoding:
            self.positional = nn.Parameter(torch.randn(1, cfg.snippet_samples, cfg.conv_out_dim) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.conv_out_dim,
            nhead=cfg.n_heads,
            dim_feedforward=cfg.feedforward_dim,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.layers = nn.TransformerEncoder(layer, cfg.n_transformer_layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.conv_out_dim)
        self.head = nn.Linear(cfg.conv_out_dim, cfg.rep_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if self.positional is not None:
            tokens = tokens + self.positional[:, : tokens.shape[1]]
        hidden = self.norm(self.layers(tokens))
        return self.head(hidden.mean(dim=1))


def _mlp(in_dim: int, hidden_dim: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.GELU(), nn.Linear(hidden_dim, out_dim))


class DenoisingAutoencoder(nn.Module):
    """Token-wise encoder + feature decoder; the decoder starts at zero."""

    def __init__(self, embed_dim: int, hidden_dim: int):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Linear(embed_dim, hidden_dim), nn.GELU(), nn.Linear(hidden_dim, hidden_dim), nn.GELU()
        )
        self.decoder = nn.Linear(hidden_dim, embed_dim)
        nn.init.zeros_(self.decoder.weight)
        nn.init.zeros_(self.decoder.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(tokens))


class SpikeRepNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.conv = ConvFrontend(cfg.snippet_channels, cfg.conv_out_dim, cfg.conv_kernel)
        self.encoder = TransformerEncoder(cfg)
        self.projector = _mlp(cfg.rep_dim, cfg.proj_dim, cfg.proj_dim)
        self.predictor = _mlp(cfg.proj_dim, cfg.pred_hidden_dim, cfg.proj_dim)
        self.dae = DenoisingAutoencoder(cfg.conv_out_dim, cfg.dae_hidden_dim)
        self.target_encoder = copy.deepcopy(self.encoder)
        self.target_projector = copy.deepcopy(self.projector)
        for p in self.target_parameters():
            p.requires_grad = False

    def online_parameters(self) -> Iterator[nn.Parameter]:
        for module in (self.conv, self.encoder, self.projector, self.predictor, self.dae):
            yield from module.parameters()

    def target_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.target_encoder.parameters()
        yield from self.target_projector.parameters()

    def embed_tokens(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.conv(x / self.cfg.input_scale_uv, mask)

    def query(self, tokens: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.predictor(self.projector(self.encoder(tokens))), dim=1)

    @torch.no_grad()
    def key(self, tokens: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.target_projector(self.target_encoder(tokens)), dim=1)

    def represent(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None, use_dae: bool = False) -> torch.Tensor:
        tokens = self.embed_tokens(x, mask)
        if use_dae:
            tokens = self.dae(tokens)
        return self.encoder(tokens)


def info_nce(q: torch.Tensor, k: torch.Tensor, temperature: float) -> torch.Tensor:
    """Row i's positive is k[i]; every other row of k is a negative."""
    if q.shape[0] < 2 or q.shape != k.shape:
        raise PipelineError(
            "InfoNCE needs matching query/key batches of at least 2 rows",
            "batch_too_small",
            {"q": list(q.shape), "k": list(k.shape)},
        )
    logits = q @ k.T / temperature
    return F.cross_entropy(logits, torch.arange(q.shape[0], device=q.device))


def denoise_loss(v: torch.Tensor, v_hat: torch.Tensor) -> torch.Tensor:
    if v.shape != v_hat.shape:
        raise PipelineError(
            "Reconstruction shape differs from its target",
            "shape_mismatch",
            {"v": list(v.shape), "v_hat": list(v_hat.shape)},
        )
    return F.mse_loss(v_hat, v)


@dataclass
class LossTerms:
    contrastive: torch.Tensor
    denoise: torch.Tensor
    total: torch.Tensor
    keys: Tuple[torch.Tensor, torch.Tensor]


def compute_losses(model: SpikeRepNet, view1: torch.Tensor, view2: torch.Tensor, clean: torch.Tensor,
                   mask1: torch.Tensor, mask2: torch.Tensor,
                   keys: Optional[Tuple[torch.Tensor, torch.Tensor]] = None) -> LossTerms:
    """Symmetrized InfoNCE plus alpha-weighted reconstruction of the clean tokens.

    ``keys`` may be supplied to hold the target outputs fixed.
    """
    cfg = model.cfg
    e1 = model.embed_tokens(view1, mask1)
    e2 = model.embed_tokens(view2, mask2)
    if keys is None:
        keys = (model.key(e1), model.key(e2))
    k1, k2 = keys
    q1, q2 = model.query(e1), model.query(e2)
    contrastive = info_nce(q1, k2, cfg.temperature) + info_nce(q2, k1, cfg.temperature)
    v = model.embed_tokens(clean, mask1)
    denoise = denoise_loss(v, model.dae(e1))
    total = contrastive + cfg.alpha * denoise if cfg.alpha > 0 else contrastive
    return LossTerms(contrastive, denoise, total, keys)


@torch.no_grad()
def momentum_update(model: SpikeRepNet, m: float) -> None:
    """target ← m·target + (1−m)·online, elementwise."""
    if m == 1.0:
        return
    pairs = list(zip(model.encoder.parameters(), model.target_encoder.parameters()))
    pairs += list(zip(model.projector.parameters(), model.target_projector.parameters()))
    for online, target in pairs:
        if m == 0.0:
            target.copy_(online)
        else:
            target.mul_(m).add_(online, alpha=1.0 - m)


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warm-up to peak_lr, then cosine decay to zero at the last epoch."""
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warmup:
        return cfg.peak_lr * step / warmup
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_optimizer(model: SpikeRepNet, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(list(model.online_parameters()), lr=0.0, weight_decay=cfg.weight_decay)
