"""Content-congruency regularizers for the adaptation phase.

Three interchangeable ways to keep the adapted encoder from drifting into
mode collapse while the adversarial losses pull it toward the target
distribution:

* latent anchoring: element-mean L1 between the frozen source encoder's
  latent and the adapted encoder's latent on the same target image;
* residual transfer: the adapted latent is the source latent plus a small
  trainable increment branch, penalized by its RMS magnitude;
* feature reconstruction: a decoder-like branch maps the latent back to
  the mid-level trunk feature and is scored by element-mean L1.

The reconstruction branch gets its own pre-training pass (with the
adapted encoder still equal to the source encoder) before adversarial
updates begin, which is what makes it usable as a stabilizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import NumericError, ShapeError
from .model import DepthNet, ResidualBlock

_CT_BATCH_SALT = 0xC7


def dcr_loss(f_src, f_tgt):
    """Element-mean L1 between two feature maps of equal shape."""
    if f_src.shape != f_tgt.shape:
        raise ShapeError(f"shape mismatch: {tuple(f_src.shape)} vs {tuple(f_tgt.shape)}")
    return (f_src - f_tgt).abs().mean()


class ResidualBranch(nn.Module):
    """Trainable increment from the trunk feature to latent shape.

    Two resolution-preserving residual blocks, one stride-2 block up to
    latent channels, then a zero-initialized 1x1 conv so the increment is
    exactly zero for every input at initialization.
    """

    def __init__(self, in_ch=64, out_ch=128):
        super().__init__()
        self.blocks = nn.Sequential(
            ResidualBlock(in_ch, in_ch, 1),
            ResidualBlock(in_ch, in_ch, 1),
            ResidualBlock(in_ch, out_ch, 2),
        )
        self.out = nn.Conv2d(out_ch, out_ch, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return self.out(self.blocks(x))


def init_residual_branch(seed: int, in_ch=64, out_ch=128) -> ResidualBranch:
    torch.manual_seed(seed)
    return ResidualBranch(in_ch, out_ch)


def rtf_apply(branch: ResidualBranch, trunk_feat, latent_src):
    """(adapted latent, increment); adapted = source latent + branch(trunk)."""
    residual = branch(trunk_feat)
    if residual.shape != latent_src.shape:
        raise ShapeError(
            f"increment shape {tuple(residual.shape)} != latent {tuple(latent_src.shape)}"
        )
    return latent_src + residual, residual


def rtf_penalty(residual):
    """Root-mean-square of the increment; exactly 0 (with zero gradient)
    for an all-zero increment."""
    if not torch.isfinite(residual).all():
        raise NumericError("non-finite increment in RMS penalty")
    ms = (residual * residual).mean()
    # sqrt has an infinite slope at 0; route the all-zero case through the
    # mean-square itself so both value and gradient are exactly 0 there
    safe = torch.sqrt(torch.clamp(ms, min=1e-24))
    return torch.where(ms > 0, safe, ms)


class ReconBranch(nn.Module):
    """Maps the latent back to the trunk feature's shape (one 2x upsample)."""

    def __init__(self, in_ch=128, out_ch=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, in_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(in_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(in_ch, in_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(in_ch),
            nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


def init_recon_branch(seed: int, in_ch=128, out_ch=64) -> ReconBranch:
    torch.manual_seed(seed)
    return ReconBranch(in_ch, out_ch)


def fcf_loss(branch, latent, trunk_feat):
    """Element-mean L1 between the trunk feature and its reconstruction."""
    recon = branch(latent)
    if recon.shape != trunk_feat.shape:
        raise ShapeError(
            f"reconstruction shape {tuple(recon.shape)} != target {tuple(trunk_feat.shape)}"
        )
    return (recon - trunk_feat).abs().mean()


def encode_corpus(net: DepthNet, dataset, batch_size=16):
    """Frozen-encoder features for a whole split: (trunk feats, latents).

    Eval mode, no gradients; used to cache everything upstream of the
    adaptable head once per run.
    """
    was_training = net.training
    net.eval()
    trunks, latents = [], []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idxs = np.arange(start, min(start + batch_size, len(dataset)))
            x = torch.from_numpy(dataset.image_batch(idxs))
            feats = net.encode(x)
            trunks.append(feats[-2])
            latents.append(feats[-1])
    if was_training:
        net.train()
    return torch.cat(trunks), torch.cat(latents)


@dataclass
class CtPretrainResult:
    branch: ReconBranch
    initial_holdout_loss: float
    final_holdout_loss: float
    warning: str | None = None


def pretrain_ct_on_features(
    trunk_feats, latents, steps, seed, batch_size=8, lr=1e-3, holdout_frac=0.1
) -> CtPretrainResult:
    """Train a fresh reconstruction branch on cached encoder features.

    The last `holdout_frac` of the corpus is held out; the returned result
    records the held-out loss before and after training.
    """
    n = trunk_feats.shape[0]
    n_hold = max(1, int(round(holdout_frac * n))) if n > 1 else 0
    n_train = max(1, n - n_hold)
    hold_idx = np.arange(n_train, n) if n_hold else np.arange(n)

    branch = init_recon_branch(seed, latents.shape[1], trunk_feats.shape[1])

    def holdout_loss():
        branch.eval()
        with torch.no_grad():
            vals = []
            for start in range(0, len(hold_idx), 32):
                sl = hold_idx[start : start + 32]
                vals.append(
                    fcf_loss(branch, latents[sl], trunk_feats[sl]).item() * len(sl)
                )
        return sum(vals) / len(hold_idx)

    initial = holdout_loss()
    if steps > 0:
        opt = torch.optim.Adam(branch.parameters(), lr=lr)
        branch.train()
        for step in range(steps):
            rng = np.random.default_rng([seed, _CT_BATCH_SALT, step])
            idx = rng.choice(n_train, size=min(batch_size, n_train), replace=False)
            opt.zero_grad()
            loss = fcf_loss(branch, latents[idx], trunk_feats[idx])
            if not torch.isfinite(loss):
                raise NumericError(f"reconstruction pretrain loss non-finite at step {step}")
            loss.backward()
            opt.step()
    final = holdout_loss()
    warning = None
    if steps > 0 and final >= initial:
        warning = (
            f"reconstruction branch did not improve on held-out data "
            f"({initial:.4f} -> {final:.4f} after {steps} steps)"
        )
    return CtPretrainResult(branch, initial, final, warning)


def pretrain_ct(net: DepthNet, target_train, steps=2000, seed=0, batch_size=8, lr=1e-3):
    """Pre-train the reconstruction branch against the frozen encoder on
    target images (loaded from a manifest)."""
    from .data import ArrayDataset

    dataset = ArrayDataset(target_train, with_depth=False)
    trunk_feats, latents = encode_corpus(net, dataset)
    return pretrain_ct_on_features(
        trunk_feats, latents, steps=steps, seed=seed, batch_size=batch_size, lr=lr
    )
