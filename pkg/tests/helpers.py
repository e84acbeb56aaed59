import torch

from protorecon.config import TrainConfig


def tiny_config(**overrides):
    """Gradient-check sized model: r_v=8, C=32, D=16, h=2, under 5k parameters."""
    values = dict(r_v=8, image_size=16, query_dim=32, token_dim=16, heads=2, fusion_dim=16,
                  enc2d_channels=(2, 4, 4, 4), enc3d_channels=(2, 4, 4), dec_channels=(4, 2),
                  disc_channels=(2, 2, 4), batch_size=4, ae_latent=8)
    values.update(overrides)
    return TrainConfig(**values)


def random_batch(cfg, n, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(n, 1, cfg.image_size, cfg.image_size, generator=g, dtype=dtype)
    voxels = (torch.rand(n, 1, cfg.r_v, cfg.r_v, cfg.r_v, generator=g) > 0.6).to(dtype)
    return images, voxels


def spread_parameters(module, scale=0.3, seed=0):
    """Redraw every parameter from N(0, scale^2).

    Default initialization leaves the tiny model's prototype tokens nearly
    identical, which drives the W_q/W_k gradients down to finite-difference
    noise; a wider draw gives every parameter group a measurable gradient
    while keeping sigmoid outputs clear of the loss clamp.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module
