"""Training objectives. All losses are non-negative quantities to minimize."""

import logging

import torch

from .errors import DataError, ShapeError

logger = logging.getLogger(__name__)

EPS = 1e-7


def _clamp(pred):
    clamped = pred.clamp(EPS, 1.0 - EPS)
    if logger.isEnabledFor(logging.DEBUG) and bool((clamped != pred).any()):
        logger.debug("clamped %d saturated predictions", int((clamped != pred).sum()))
    return clamped


def voxel_bce(pred, target):
    """Per-sample mean binary cross-entropy over voxels, shape (B,)."""
    if pred.shape != target.shape:
        raise ShapeError(f"resolution mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = _clamp(pred)
    ll = target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)
    return -ll.flatten(1).mean(dim=1)


def rec_loss(pred, gt):
    """Binary cross-entropy averaged over voxels and batch."""
    if pred.dim() == 3:
        pred, gt = pred.unsqueeze(0), gt.unsqueeze(0)
    return voxel_bce(pred, gt.to(pred.dtype)).mean()


def _bce_prob(prob, label):
    p = _clamp(prob)
    return -(label * torch.log(p) + (1.0 - label) * torch.log(1.0 - p))


def disc_loss(disc, real_batch, fake_batch):
    """BCE over the pooled batch: label 1 for real shapes, 0 for generated ones."""
    if len(real_batch) == 0 or len(fake_batch) == 0:
        raise DataError("disc_loss needs non-empty real and fake batches")
    real = disc(real_batch)
    fake = disc(fake_batch)
    losses = torch.cat([_bce_prob(real, torch.ones_like(real)), _bce_prob(fake, torch.zeros_like(fake))])
    return losses.mean()


def gen_adv_loss(disc, fake_batch):
    """Non-saturating generator term, ``-E[log D(fake)]`` (unscaled)."""
    if len(fake_batch) == 0:
        raise DataError("gen_adv_loss needs a non-empty batch")
    return -torch.log(_clamp(disc(fake_batch))).mean()


def unsup_loss(preds, pseudo, scores, kind="l2"):
    """Score-weighted sum over samples of the per-voxel mean squared error.

    ``scores`` are treated as constants. ``kind="bce"`` swaps in binary
    cross-entropy against the pseudo-labels.
    """
    if len(preds) != len(pseudo) or len(preds) != len(scores):
        raise DataError(f"length mismatch: {len(preds)} preds, {len(pseudo)} labels, {len(scores)} scores")
    if len(preds) == 0:
        return torch.zeros(())
    preds = torch.stack(list(preds)) if isinstance(preds, (list, tuple)) else preds
    pseudo = torch.stack(list(pseudo)) if isinstance(pseudo, (list, tuple)) else pseudo
    if preds.shape != pseudo.shape:
        raise ShapeError(f"resolution mismatch: {tuple(preds.shape)} vs {tuple(pseudo.shape)}")
    pseudo = pseudo.to(preds.dtype)
    scores = torch.as_tensor(scores, dtype=preds.dtype).detach()
    if kind == "bce":
        per_sample = voxel_bce(preds, pseudo)
    else:
        per_sample = ((preds - pseudo) ** 2).flatten(1).mean(dim=1)
    return (scores * per_sample).sum()
