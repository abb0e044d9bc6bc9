"""Patch discriminators and adversarial losses.

Two discriminator kinds: "feature" scores latent maps (128 channels at
1/16 resolution), "depth" scores single-channel depth maps at half input
resolution.  Both are small strided conv stacks with LeakyReLU and a 1x1
scoring head; outputs are per-patch logits, and losses average over
patches so the loss scale does not depend on discriminator geometry.

Both the least-squares form (the stable default) and the logarithmic
cross-entropy form are provided.  The log form is computed through
softplus for numerical safety: -log sigmoid(z) == softplus(-z).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError

FEATURE_CHANNELS = 128
LOSS_FORMS = ("log", "lsq")


class Discriminator(nn.Module):
    """One patch discriminator of a fixed kind ("feature" or "depth")."""

    def __init__(self, kind: str):
        super().__init__()
        if kind == "feature":
            # latent maps are already tiny (8x10): two stride-2 layers
            self.in_channels = FEATURE_CHANNELS
            self.body = nn.Sequential(
                nn.Conv2d(FEATURE_CHANNELS, 64, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Conv2d(64, 64, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
            )
            head_in = 64
        elif kind == "depth":
            # three stride-2 layers with kernel 6 give a patch receptive
            # field of 36 pixels on the 64x80 prediction
            self.in_channels = 1
            self.body = nn.Sequential(
                nn.Conv2d(1, 32, 6, stride=2, padding=2),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Conv2d(32, 64, 6, stride=2, padding=2),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Conv2d(64, 128, 6, stride=2, padding=2),
                nn.LeakyReLU(0.2, inplace=True),
            )
            head_in = 128
        else:
            raise ConfigError(f"unknown discriminator kind {kind!r}")
        self.kind = kind
        self.head = nn.Conv2d(head_in, 1, 1)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"{self.kind} discriminator expects (B, {self.in_channels}, H, W), "
                f"got {tuple(x.shape)}"
            )
        min_hw = 8 if self.kind == "depth" else 4
        if x.shape[2] < min_hw or x.shape[3] < min_hw:
            raise ShapeError(
                f"{self.kind} discriminator input {tuple(x.shape[2:])} too small"
            )
        return self.head(self.body(x))


def init_discriminators(seed: int):
    """(feature-kind, depth-kind) pair, deterministic in seed."""
    torch.manual_seed(seed)
    return Discriminator("feature"), Discriminator("depth")


def disc_forward(d: Discriminator, x):
    return d(x)


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite logits in adversarial loss")


def _check_form(form):
    if form not in LOSS_FORMS:
        raise ConfigError(f"adversarial loss form must be one of {LOSS_FORMS}, got {form!r}")


def adv_loss_D(real_logits, fake_logits, form: str):
    """Discriminator objective (minimized): push real up, fake down."""
    _check_form(form)
    _check_finite(real_logits, fake_logits)
    if form == "log":
        return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    return ((real_logits - 1.0) ** 2).mean() + (fake_logits**2).mean()


def adv_loss_G(fake_logits, form: str):
    """Generator objective (minimized): make fakes score as real.

    The log form is the non-saturating variant, -E log sigmoid(fake).
    """
    _check_form(form)
    _check_finite(fake_logits)
    if form == "log":
        return F.softplus(-fake_logits).mean()
    return ((fake_logits - 1.0) ** 2).mean()
