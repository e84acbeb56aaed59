"""Network building blocks: image encoder, prototype encoder, prototype
attention, feature fusion, voxel decoder, generator and discriminator.

Tensors follow torch conventions: images ``(B, 1, H, W)``, voxel grids
``(B, 1, r, r, r)``.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


class VoxelEncoder(nn.Module):
    """Three stride-2 Conv3d blocks, flatten, linear to ``out_dim``."""

    def __init__(self, channels, out_dim, r_v):
        super().__init__()
        if r_v % 8:
            raise ConfigError(f"VoxelEncoder needs r_v divisible by 8, got {r_v}")
        self.r_v = r_v
        layers, cin = [], 1
        for c in channels:
            layers += [nn.Conv3d(cin, c, 3, stride=2, padding=1), nn.SiLU()]
            cin = c
        self.features = nn.Sequential(*layers)
        self.linear = nn.Linear(cin * (r_v // 8) ** 3, out_dim)

    def forward(self, x):
        if x.shape[-3:] != (self.r_v,) * 3:
            raise ShapeError(f"expected {self.r_v}^3 voxels, got {tuple(x.shape[-3:])}")
        x = x.reshape(-1, 1, self.r_v, self.r_v, self.r_v)
        return self.linear(self.features(x).flatten(1))


class VoxelDecoder(nn.Module):
    """Linear to a coarse grid, then stride-2 ConvTranspose3d stages up to ``r_v``.

    Hidden stages are GroupNorm(1)-normalized. Returns probabilities (sigmoid applied).
    """

    def __init__(self, in_dim, channels, r_v, norm=True):
        super().__init__()
        self.start = r_v // 2 ** len(channels)
        if self.start * 2 ** len(channels) != r_v or self.start < 1:
            raise ConfigError(f"{len(channels)} decoder stages cannot reach r_v={r_v}")
        self.channels = tuple(channels)
        self.linear = nn.Linear(in_dim, channels[0] * self.start ** 3)
        layers = []
        outs = list(channels[1:]) + [1]
        for i, (cin, cout) in enumerate(zip(channels, outs)):
            layers.append(nn.ConvTranspose3d(cin, cout, 4, stride=2, padding=1))
            if i < len(outs) - 1:
                if norm:
                    layers.append(nn.GroupNorm(1, cout))
                layers.append(nn.SiLU())
        self.upsample = nn.Sequential(*layers)

    def logits(self, z):
        s = self.start
        x = F.silu(self.linear(z)).reshape(-1, self.channels[0], s, s, s)
        return self.upsample(x)

    def forward(self, z):
        return torch.sigmoid(self.logits(z))


class ImageEncoder(nn.Module):
    """Stride-2 Conv2d blocks, global average pool, linear to the query dimension."""

    def __init__(self, channels, out_dim, image_size, norm=True):
        super().__init__()
        self.image_size = image_size
        layers, cin = [], 1
        for c in channels:
            layers.append(nn.Conv2d(cin, c, 3, stride=2, padding=1))
            if norm:
                # single-group norm: per-sample, no running statistics for the EMA to track
                layers.append(nn.GroupNorm(1, c))
            layers.append(nn.SiLU())
            cin = c
        self.features = nn.Sequential(*layers)
        self.linear = nn.Linear(cin, out_dim)

    def forward(self, images):
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ShapeError(f"expected {self.image_size}x{self.image_size} images, got {tuple(images.shape[-2:])}")
        return self.linear(self.features(images).mean(dim=(2, 3)))


def attention_prior(query, tokens, w_q, w_k, w_v, heads, return_weights=False):
    """Multi-head attention of image queries over prototype tokens.

    query: (B, C), tokens: (n, D), w_q: (C, D), w_k, w_v: (D, D).
    Returns the (B, D) prior feature (heads concatenated) and optionally the
    (B, heads, n) attention weights.
    """
    d_model = w_q.shape[1]
    if d_model % heads:
        raise ConfigError(f"heads={heads} does not divide D={d_model}")
    if tokens.dim() != 2 or tokens.shape[0] == 0:
        raise ShapeError("need a non-empty (n, D) token matrix")
    d_head = d_model // heads
    n = tokens.shape[0]
    q = (query @ w_q).reshape(-1, heads, d_head)  # (B, h, d)
    k = (tokens @ w_k).reshape(n, heads, d_head).transpose(0, 1)  # (h, n, d)
    v = (tokens @ w_v).reshape(n, heads, d_head).transpose(0, 1)
    scores = torch.einsum("bhd,hnd->bhn", q, k) / math.sqrt(d_head)
    weights = torch.softmax(scores, dim=-1)
    prior = torch.einsum("bhn,hnd->bhd", weights, v).reshape(-1, d_model)
    if return_weights:
        return prior, weights
    return prior


class PrototypeAttention(nn.Module):
    def __init__(self, query_dim, token_dim, heads):
        super().__init__()
        if token_dim % heads:
            raise ConfigError(f"heads={heads} does not divide token_dim={token_dim}")
        self.heads = heads
        self.w_q = nn.Parameter(torch.randn(query_dim, token_dim) / math.sqrt(query_dim))
        self.w_k = nn.Parameter(torch.randn(token_dim, token_dim) / math.sqrt(token_dim))
        self.w_v = nn.Parameter(torch.randn(token_dim, token_dim) / math.sqrt(token_dim))

    def forward(self, query, tokens, return_weights=False):
        return attention_prior(query, tokens, self.w_q, self.w_k, self.w_v, self.heads, return_weights)

    def average(self, query, tokens):
        """Ablation: mean of value-projected tokens, broadcast over the batch."""
        v = (tokens @ self.w_v).mean(dim=0)
        return v.expand(query.shape[0], -1)


class Generator(nn.Module):
    """Image encoder, prototype attention prior, fusion and voxel decoder.

    Ablation flags only change the forward pass; every submodule is always
    built in the same order so ablated and full models share initialization.
    """

    def __init__(self, cfg):
        super().__init__()
        self.use_pam = cfg.use_pam
        self.fusion_mode = cfg.fusion
        self.token_dim = cfg.token_dim
        self.encoder2d = ImageEncoder(cfg.enc2d_channels, cfg.query_dim, cfg.image_size)
        self.encoder3d = VoxelEncoder(cfg.enc3d_channels, cfg.token_dim, cfg.r_v)
        self.attention = PrototypeAttention(cfg.query_dim, cfg.token_dim, cfg.heads)
        self.fusion = nn.Linear(cfg.query_dim + cfg.token_dim, cfg.fusion_dim)
        self.decoder = VoxelDecoder(cfg.fusion_dim, cfg.dec_channels, cfg.r_v)

    def encode_image(self, images):
        return self.encoder2d(images)

    def encode_prototypes(self, prototypes):
        if prototypes is None or len(prototypes) == 0:
            raise ShapeError("prototype bank is empty")
        return self.encoder3d(prototypes)

    def prior(self, query, tokens):
        if self.fusion_mode == "average":
            return self.attention.average(query, tokens)
        return self.attention(query, tokens)

    def fuse(self, query, prior=None):
        if prior is None:
            prior = query.new_zeros(query.shape[0], self.token_dim)
        return self.fusion(torch.cat([query, prior], dim=1))

    def decode(self, fused):
        return self.decoder(fused)

    def forward(self, images, prototypes=None, tokens=None):
        query = self.encode_image(images)
        prior = None
        if self.use_pam:
            if tokens is None:
                tokens = self.encode_prototypes(prototypes)
            prior = self.prior(query, tokens)
        return self.decode(self.fuse(query, prior))


class Discriminator(nn.Module):
    """Voxel grid to one logit; ``forward`` returns the sigmoid score."""

    def __init__(self, cfg):
        super().__init__()
        self.net = VoxelEncoder(cfg.disc_channels, 1, cfg.r_v)

    def logits(self, voxels):
        return self.net(voxels).squeeze(1)

    def forward(self, voxels):
        return torch.sigmoid(self.logits(voxels))


def discriminate(disc, voxels):
    """Sigmoid naturalness scores, one per grid in the batch."""
    return disc(voxels)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
