"""Optimization loops: supervised pretraining, adversarial adaptation,
the semi-supervised alternating variant, and the head-depth sweep.

The adaptation loop exploits the freeze contract hard: everything
upstream of the adaptable head is run once over both corpora in eval
mode and cached, so each iteration touches only the head (or its
increment branch), the decoder, and the discriminators.  Batch sampling
uses counter-based RNG streams keyed on (seed, stream, iteration), which
is what makes checkpoint resume reproduce an uninterrupted run exactly.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .adversary import LOSS_FORMS, Discriminator, adv_loss_D, adv_loss_G, init_discriminators
from .congruency import (
    CtPretrainResult,
    ReconBranch,
    ResidualBranch,
    dcr_loss,
    fcf_loss,
    init_recon_branch,
    init_residual_branch,
    pretrain_ct_on_features,
    rtf_penalty,
)
from .data import ArrayDataset, DatasetManifest
from .errors import CheckpointError, ConfigError, DivergenceError, NumericError
from .evalkit import EvalConfig, aggregate_reports, compute_metrics, evaluate_dataset
from .model import ArchConfig, DepthNet, berhu_loss, init_network, partition_tags

REGULARIZERS = ("dcr", "rtf", "fcf")

_PRETRAIN_SALT = 0x5AE
_SRC_SALT = 0xADA2
_TGT_SALT = 0xADA1
_GEN_SALT = 0xADA3
_LABELED_SALT = 0x1AB

COLLAPSE_WINDOW = 20
COLLAPSE_FRACTION = 0.01


def _derive_seed(seed, salt):
    return int(np.random.SeedSequence([int(seed), int(salt)]).generate_state(1)[0])


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 12
    batch_size: int = 10
    lr: float = 0.01
    lr_decay: float = 0.1
    plateau_patience: int = 2
    holdout_frac: float = 0.1
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch-norm needs it)")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("bad learning-rate settings")
        if not 0 <= self.holdout_frac < 1:
            raise ConfigError("holdout_frac must be in [0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")


@dataclass(frozen=True)
class AdaptConfig:
    regularizer: str = "dcr"
    content_weight: float = 10.0  # the config file calls this "lambda"
    gan_form: str = "lsq"
    use_depth_disc: bool = True
    k_outer: int = 300
    m_inner: int = 1
    batch_size: int = 8
    lr: float = 1e-4
    disc_lr: float = 1e-3  # discriminators need a higher rate to stay informative
    momentum: float = 0.9
    adapt_depth: int = 1
    seed: int = 0
    ct_steps: int = 2000
    semi_unlabeled_per_labeled: int = 1

    @property
    def reg(self):
        return self.regularizer.lower()

    def validate(self, n_stages=4):
        if self.reg not in REGULARIZERS:
            raise ConfigError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.content_weight < 0:
            raise ConfigError(f"lambda (content weight) must be >= 0, got {self.content_weight}")
        if self.gan_form not in LOSS_FORMS:
            raise ConfigError(f"gan_form must be one of {LOSS_FORMS}")
        if self.k_outer < 0:
            raise ConfigError("k_outer must be >= 0")
        if self.m_inner < 1:
            raise ConfigError("m_inner must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.adapt_depth <= n_stages:
            raise ConfigError(f"adapt_depth must be in [0, {n_stages}]")
        if self.reg in ("rtf", "fcf") and self.adapt_depth != 1:
            raise ConfigError(f"{self.reg} requires adapt_depth == 1 (fixed branch geometry)")
        if self.lr <= 0 or self.disc_lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("bad optimizer settings")
        if self.ct_steps < 0 or self.semi_unlabeled_per_labeled < 0 or self.seed < 0:
            raise ConfigError("negative budget or seed")


class TrainLog:
    """Per-iteration records, serialized as newline-delimited JSON."""

    def __init__(self, seed=0, kind=""):
        self.seed = seed
        self.kind = kind
        self.records = []

    def append(self, **record):
        self.records.append(record)
        return record

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps({"log": self.kind, "seed": self.seed}, sort_keys=True) + "\n")
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        log = cls(seed=lines[0].get("seed", 0), kind=lines[0].get("log", ""))
        log.records = lines[1:]
        return log


@dataclass
class AdaptedModel:
    """Inference wrapper: full network plus the optional latent increment."""

    net: DepthNet
    delta_branch: ResidualBranch | None = None

    def predict(self, images: np.ndarray) -> np.ndarray:
        """(B, 3, H, W) float32 in [0,1] -> (B, H/2, W/2) metric depth."""
        self.net.eval()
        if self.delta_branch is not None:
            self.delta_branch.eval()
        with torch.no_grad():
            x = torch.as_tensor(images, dtype=torch.float32)
            feats = self.net.encode(x)
            latent = feats[-1]
            if self.delta_branch is not None:
                latent = latent + self.delta_branch(feats[-2])
            _, depth = self.net.decode(latent)
        return depth[:, 0].numpy()


def _pool_depth(depth_np, mask_np):
    """Ground truth at half resolution: 2x mean pool; a pooled pixel is
    valid only when all four sources are."""
    gt = torch.from_numpy(depth_np)[:, None]
    m = torch.from_numpy(mask_np.astype(np.float32))[:, None]
    pooled = F.avg_pool2d(gt, 2)
    pooled_mask = F.avg_pool2d(m, 2) == 1.0
    return pooled, pooled_mask


def _source_val_rel(model: AdaptedModel, ds: ArrayDataset, idxs, batch_size=16):
    """Unscaled rel error on a held-out slice (native gt resolution)."""
    reports = []
    cfg = EvalConfig(apply_median_scaling=False)
    for start in range(0, len(idxs), batch_size):
        sl = idxs[start : start + batch_size]
        preds = model.predict(ds.image_batch(sl))
        depths, masks = ds.depth_batch(sl)
        for k in range(len(sl)):
            reports.append(compute_metrics(preds[k], depths[k], masks[k], cfg))
    return aggregate_reports(reports).rel


def pretrain_source(source_train: DatasetManifest, cfg: PretrainConfig,
                    arch: ArchConfig = ArchConfig()):
    """Supervised training on the rendered source split.

    Adam at a high starting rate, decayed once by `lr_decay` each time the
    held-out rel error fails to improve for `plateau_patience` epochs.
    Returns (network, log).
    """
    cfg.validate()
    ds = ArrayDataset(source_train, with_depth=True)
    n = len(ds)
    n_hold = max(1, int(round(cfg.holdout_frac * n))) if cfg.holdout_frac > 0 and n > 1 else 0
    train_idx = np.arange(n - n_hold)
    val_idx = np.arange(n - n_hold, n)
    net = init_network(cfg.seed, arch)
    log = TrainLog(cfg.seed, "pretrain")
    if cfg.epochs == 0:
        return net, log
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    cur_lr = cfg.lr
    best_val = float("inf")
    stall = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = np.random.default_rng([cfg.seed, _PRETRAIN_SALT, epoch]).permutation(train_idx)
        net.train()
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            x = torch.from_numpy(ds.image_batch(idx))
            gt, mask = ds.depth_batch(idx)
            pooled, pooled_mask = _pool_depth(gt, mask)
            trace = net(x)
            loss = berhu_loss(trace.depth, pooled, pooled_mask)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"pretrain loss non-finite in epoch {epoch}", iteration=epoch
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_rel = (
            _source_val_rel(AdaptedModel(net), ds, val_idx) if len(val_idx) else float("nan")
        )
        decayed = False
        if len(val_idx):
            if val_rel < best_val - 1e-4:
                best_val = val_rel
                stall = 0
            else:
                stall += 1
                if stall >= cfg.plateau_patience:
                    cur_lr *= cfg.lr_decay
                    for group in opt.param_groups:
                        group["lr"] = cur_lr
                    stall = 0
                    decayed = True
        log.append(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            first_batch_loss=losses[0],
            last_batch_loss=losses[-1],
            val_rel=val_rel,
            lr=cur_lr,
            lr_decayed=decayed,
            wall_s=time.perf_counter() - t0,
        )
    return net, log


# ------------------------------------------------------------ adaptation


@dataclass
class FeatureCache:
    """Everything upstream of the adaptable head, precomputed in eval mode."""

    boundary: int
    tgt_head_in: torch.Tensor  # adaptable-suffix input for each target image
    tgt_src_latent: torch.Tensor  # source-encoder latent of each target image
    src_latent: torch.Tensor  # source-encoder latent of each source image
    src_log_depth: torch.Tensor  # log of 2x-pooled source ground truth


def _encode_upto(net, x, boundary):
    h = net.stem(x)
    for stage in net.stages[:boundary]:
        h = stage(h)
    return h


def build_feature_cache(net: DepthNet, src_ds: ArrayDataset, tgt_ds: ArrayDataset,
                        boundary: int, batch_size=16, base: FeatureCache | None = None):
    """`base` (from another boundary over the same datasets) lets the
    boundary-independent parts be reused."""
    net.eval()
    head_in, tgt_lat = [], []
    with torch.no_grad():
        for start in range(0, len(tgt_ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(tgt_ds)))
            x = torch.from_numpy(tgt_ds.image_batch(idx))
            if base is not None:
                head_in.append(_encode_upto(net, x, boundary))
            else:
                feats = net.encode(x)
                head_in.append(feats[boundary])
                tgt_lat.append(feats[-1])
        if base is not None:
            return FeatureCache(
                boundary=boundary,
                tgt_head_in=torch.cat(head_in),
                tgt_src_latent=base.tgt_src_latent,
                src_latent=base.src_latent,
                src_log_depth=base.src_log_depth,
            )
        src_lat, src_logd = [], []
        for start in range(0, len(src_ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(src_ds)))
            x = torch.from_numpy(src_ds.image_batch(idx))
            src_lat.append(net.encode(x)[-1])
            depth, mask = src_ds.depth_batch(idx)
            pooled, _ = _pool_depth(depth, mask)
            src_logd.append(torch.log(torch.clamp(pooled, min=1e-3)))
    return FeatureCache(
        boundary=boundary,
        tgt_head_in=torch.cat(head_in),
        tgt_src_latent=torch.cat(tgt_lat),
        src_latent=torch.cat(src_lat),
        src_log_depth=torch.cat(src_logd),
    )


@dataclass
class AdaptResult:
    model: AdaptedModel
    log: TrainLog
    d_feat: Discriminator
    d_depth: Discriminator
    recon_branch: ReconBranch | None
    ct_result: CtPretrainResult | None
    config: AdaptConfig
    n_trainable: int


class _AdaptLoop:
    """All mutable state of one adaptation run."""

    def __init__(self, net, source_train, target_train, cfg: AdaptConfig, *,
                 feature_cache=None, datasets=None, ct_result=None,
                 pretrain_recon=True):
        cfg.validate(net.arch.n_stages)
        self.cfg = cfg
        self.boundary = net.arch.n_stages - cfg.adapt_depth
        if datasets is not None:
            self.src_ds, self.tgt_ds = datasets
        else:
            self.src_ds = ArrayDataset(source_train, with_depth=True)
            # unsupervised by interface: depth is never loaded for the target
            self.tgt_ds = ArrayDataset(target_train, with_depth=False)

        self.tgt_net = copy.deepcopy(net)
        self.tgt_net.eval()
        for p in self.tgt_net.parameters():
            p.requires_grad_(False)
        head_stages = self.tgt_net.stages[self.boundary :]
        self.head_params = []
        for stage in head_stages:
            stage.train()
            for name, p in stage.named_parameters():
                p.requires_grad_(True)
                self.head_params.append(p)
        if cfg.reg == "rtf":
            # increment-only training: the copied head stays untouched
            for stage in head_stages:
                stage.eval()
            for p in self.head_params:
                p.requires_grad_(False)
            self.head_params = []

        need_cache = cfg.k_outer > 0 or cfg.reg == "fcf"
        if feature_cache is not None:
            if feature_cache.boundary != self.boundary:
                raise ConfigError(
                    f"feature cache built for boundary {feature_cache.boundary}, "
                    f"need {self.boundary}"
                )
            self.cache = feature_cache
        elif need_cache:
            self.cache = build_feature_cache(net, self.src_ds, self.tgt_ds, self.boundary)
        else:
            self.cache = None

        self.delta = None
        self.recon = None
        self.ct_result = None
        gen_params = list(self.head_params)
        if cfg.reg == "rtf":
            self.delta = init_residual_branch(
                _derive_seed(cfg.seed, 2),
                in_ch=net.arch.stage_channels[-2],
                out_ch=net.arch.stage_channels[-1],
            )
            self.delta.train()
            gen_params += list(self.delta.parameters())
        elif cfg.reg == "fcf":
            if ct_result is None:
                if pretrain_recon:
                    ct_result = pretrain_ct_on_features(
                        self.cache.tgt_head_in, self.cache.tgt_src_latent,
                        steps=cfg.ct_steps, seed=_derive_seed(cfg.seed, 3),
                    )
                else:
                    # a checkpoint load will overwrite the weights anyway
                    ct_result = CtPretrainResult(
                        branch=init_recon_branch(_derive_seed(cfg.seed, 3)),
                        initial_holdout_loss=float("nan"),
                        final_holdout_loss=float("nan"),
                        warning=None,
                    )
            self.ct_result = ct_result
            self.recon = ct_result.branch
            self.recon.train()
            gen_params += list(self.recon.parameters())

        self.d_feat, self.d_depth = init_discriminators(_derive_seed(cfg.seed, 1))
        self.gen_params = gen_params
        self.n_trainable = sum(p.numel() for p in gen_params)
        self.opt_gen = (
            torch.optim.SGD(gen_params, lr=cfg.lr, momentum=cfg.momentum)
            if gen_params else None
        )
        self.opt_df = torch.optim.SGD(self.d_feat.parameters(), lr=cfg.disc_lr,
                                      momentum=cfg.momentum)
        self.opt_dy = torch.optim.SGD(self.d_depth.parameters(), lr=cfg.disc_lr,
                                      momentum=cfg.momentum)
        self.log = TrainLog(cfg.seed, "adapt")
        self.initial_pred_var = None
        self.collapse_streak = 0

    # ------------------------------------------------------------ batches

    def _draw(self, salt, it, n, extra=None):
        key = [self.cfg.seed, salt, it] if extra is None else [self.cfg.seed, salt, it, extra]
        rng = np.random.default_rng(key)
        replace = n < self.cfg.batch_size
        return rng.choice(n, size=min(self.cfg.batch_size, n) if not replace else self.cfg.batch_size,
                          replace=replace)

    def _fake_latent(self, idx):
        """Adapted latent for cached target images; returns (latent, increment)."""
        head_in = self.cache.tgt_head_in[torch.as_tensor(idx)]
        if self.cfg.reg == "rtf":
            resid = self.delta(head_in)
            return self.cache.tgt_src_latent[torch.as_tensor(idx)] + resid, resid
        return self.tgt_net.run_stages(head_in, self.boundary), None

    # --------------------------------------------------------- iterations

    def run_iteration(self, it, labeled=False, labeled_cache=None, phase="unsup"):
        cfg = self.cfg
        t0 = time.perf_counter()
        try:
            df_losses, dy_losses = [], []
            for m in range(cfg.m_inner):
                src_idx = self._draw(_SRC_SALT, it, self.cache.src_latent.shape[0], m)
                tgt_idx = self._draw(_TGT_SALT, it, self.cache.tgt_head_in.shape[0], m)
                with torch.no_grad():
                    fake_latent, _ = self._fake_latent(tgt_idx)
                loss_df = adv_loss_D(
                    self.d_feat(self.cache.src_latent[torch.as_tensor(src_idx)]),
                    self.d_feat(fake_latent),
                    cfg.gan_form,
                )
                self.opt_df.zero_grad()
                loss_df.backward()
                self.opt_df.step()
                df_losses.append(loss_df.item())
                if cfg.use_depth_disc:
                    with torch.no_grad():
                        _, fake_depth = self.tgt_net.decode(fake_latent)
                    loss_dy = adv_loss_D(
                        self.d_depth(self.cache.src_log_depth[torch.as_tensor(src_idx)]),
                        self.d_depth(torch.log(fake_depth)),
                        cfg.gan_form,
                    )
                    self.opt_dy.zero_grad()
                    loss_dy.backward()
                    self.opt_dy.step()
                    dy_losses.append(loss_dy.item())

            if labeled:
                record = self._generator_step_labeled(it, labeled_cache)
            else:
                record = self._generator_step_unlabeled(it)
        except NumericError as exc:
            raise DivergenceError(f"iteration {it}: {exc}", iteration=it) from exc

        record.update(
            iteration=it,
            phase=phase,
            labeled=labeled,
            d_feat_loss=float(np.mean(df_losses)),
            d_depth_loss=float(np.mean(dy_losses)) if dy_losses else 0.0,
        )

        pred_var = record.pop("_pred_var")
        if self.initial_pred_var is None:
            self.initial_pred_var = max(pred_var, 1e-12)
        if pred_var < COLLAPSE_FRACTION * self.initial_pred_var:
            self.collapse_streak += 1
        else:
            self.collapse_streak = 0
        record["pred_var"] = pred_var
        record["collapse_warning"] = self.collapse_streak >= COLLAPSE_WINDOW
        record["wall_s"] = time.perf_counter() - t0
        for key, val in record.items():
            if isinstance(val, float) and not np.isfinite(val):
                raise DivergenceError(f"non-finite {key} at iteration {it}", iteration=it)
        self.log.append(**record)
        return record

    def _content_loss(self, idx, fake_latent, resid):
        cfg = self.cfg
        t_idx = torch.as_tensor(idx)
        if cfg.reg == "dcr":
            return dcr_loss(self.cache.tgt_src_latent[t_idx], fake_latent)
        if cfg.reg == "rtf":
            return rtf_penalty(resid)
        return fcf_loss(self.recon, fake_latent, self.cache.tgt_head_in[t_idx])

    def _generator_step_unlabeled(self, it):
        cfg = self.cfg
        idx = self._draw(_GEN_SALT, it, self.cache.tgt_head_in.shape[0])
        fake_latent, resid = self._fake_latent(idx)
        g_feat = adv_loss_G(self.d_feat(fake_latent), cfg.gan_form)
        if cfg.use_depth_disc:
            _, fake_depth = self.tgt_net.decode(fake_latent)
            g_depth = adv_loss_G(self.d_depth(torch.log(fake_depth)), cfg.gan_form)
        else:
            with torch.no_grad():
                _, fake_depth = self.tgt_net.decode(fake_latent.detach())
            g_depth = fake_latent.new_zeros(())
        content = self._content_loss(idx, fake_latent, resid)
        total = g_depth + g_feat + cfg.content_weight * content
        if not torch.isfinite(total):
            raise NumericError("generator objective non-finite")
        if self.opt_gen is not None:
            self.opt_gen.zero_grad()
            total.backward()
            self.opt_gen.step()
        g_depth_v, g_feat_v, content_v = g_depth.item(), g_feat.item(), content.item()
        return {
            "g_adv_depth": g_depth_v,
            "g_adv_feat": g_feat_v,
            "content": content_v,
            "final": g_depth_v + g_feat_v + cfg.content_weight * content_v,
            "_pred_var": fake_depth.detach().var(dim=0, unbiased=False).mean().item(),
        }

    def _generator_step_labeled(self, it, labeled_cache):
        """Labeled target batch: content term replaced by the supervised loss."""
        cfg = self.cfg
        head_in_all, gt_all, mask_all = labeled_cache
        rng = np.random.default_rng([cfg.seed, _LABELED_SALT, it])
        n = head_in_all.shape[0]
        replace = n < cfg.batch_size
        idx = rng.choice(n, size=cfg.batch_size if replace else min(cfg.batch_size, n),
                         replace=replace)
        t_idx = torch.as_tensor(idx)
        head_in = head_in_all[t_idx]
        if cfg.reg == "rtf":
            resid = self.delta(head_in)
            fake_latent = self.tgt_net.run_stages(head_in, self.boundary) + resid
        else:
            fake_latent = self.tgt_net.run_stages(head_in, self.boundary)
        g_feat = adv_loss_G(self.d_feat(fake_latent), cfg.gan_form)
        _, pred_depth = self.tgt_net.decode(fake_latent)
        if cfg.use_depth_disc:
            g_depth = adv_loss_G(self.d_depth(torch.log(pred_depth)), cfg.gan_form)
        else:
            g_depth = fake_latent.new_zeros(())
        supervised = berhu_loss(pred_depth, gt_all[t_idx], mask_all[t_idx])
        total = g_depth + g_feat + cfg.content_weight * supervised
        if not torch.isfinite(total):
            raise NumericError("labeled generator objective non-finite")
        if self.opt_gen is not None:
            self.opt_gen.zero_grad()
            total.backward()
            self.opt_gen.step()
        g_depth_v, g_feat_v, sup_v = g_depth.item(), g_feat.item(), supervised.item()
        return {
            "g_adv_depth": g_depth_v,
            "g_adv_feat": g_feat_v,
            "content": sup_v,
            "final": g_depth_v + g_feat_v + cfg.content_weight * sup_v,
            "_pred_var": pred_depth.detach().var(dim=0, unbiased=False).mean().item(),
        }

    def build_labeled_cache(self, labeled_ds: ArrayDataset, batch_size=16):
        """(head inputs, pooled gt, pooled mask) for the labeled split.

        The trunk is frozen, so running it through the adapting network
        still yields source-encoder features."""
        head_ins, gts, masks = [], [], []
        with torch.no_grad():
            for start in range(0, len(labeled_ds), batch_size):
                idx = np.arange(start, min(start + batch_size, len(labeled_ds)))
                x = torch.from_numpy(labeled_ds.image_batch(idx))
                head_ins.append(_encode_upto(self.tgt_net, x, self.boundary))
                depth, mask = labeled_ds.depth_batch(idx)
                pooled, pooled_mask = _pool_depth(depth, mask)
                gts.append(pooled)
                masks.append(pooled_mask)
        return torch.cat(head_ins), torch.cat(gts), torch.cat(masks)

    # ------------------------------------------------------- persistence

    def _named_parties(self):
        parties = [("net.", self.tgt_net), ("d_feat.", self.d_feat), ("d_depth.", self.d_depth)]
        if self.delta is not None:
            parties.append(("delta.", self.delta))
        if self.recon is not None:
            parties.append(("recon.", self.recon))
        return parties

    def _named_gen_params(self):
        named = []
        seen = {id(p) for p in self.gen_params}
        for prefix, module in self._named_parties():
            if prefix in ("d_feat.", "d_depth."):
                continue
            for name, p in module.named_parameters():
                if id(p) in seen:
                    named.append((prefix + name, p))
        return named

    def save_state(self, path, iteration):
        arrays = {}
        for prefix, module in self._named_parties():
            arrays.update(ckpt.module_arrays(module, prefix))
        arrays.update(ckpt.sgd_state_arrays(self.opt_df, list(
            ("d_feat." + n, p) for n, p in self.d_feat.named_parameters()), "opt."))
        arrays.update(ckpt.sgd_state_arrays(self.opt_dy, list(
            ("d_depth." + n, p) for n, p in self.d_depth.named_parameters()), "opt."))
        if self.opt_gen is not None:
            arrays.update(ckpt.sgd_state_arrays(self.opt_gen, self._named_gen_params(), "opt."))
        meta = {
            "kind": "adapt-state",
            "config": dataclasses.asdict(self.cfg),
            "iteration": int(iteration),
            "seed": int(self.cfg.seed),
            "initial_pred_var": self.initial_pred_var,
            "collapse_streak": int(self.collapse_streak),
            "partition": partition_tags(self.tgt_net, self.cfg.adapt_depth),
            "arch": dataclasses.asdict(self.tgt_net.arch),
        }
        ckpt.save_checkpoint(path, arrays, meta)

    def load_state(self, path):
        arrays, meta = ckpt.load_checkpoint(path)
        if meta.get("kind") != "adapt-state":
            raise CheckpointError(f"not an adaptation checkpoint: {meta.get('kind')!r}")
        saved_cfg = dict(meta["config"])
        here_cfg = dataclasses.asdict(self.cfg)
        for key in here_cfg:
            if key == "k_outer":
                continue  # resuming with a larger budget is the point
            if saved_cfg.get(key) != here_cfg[key]:
                raise CheckpointError(
                    f"checkpoint config mismatch on {key!r}: "
                    f"{saved_cfg.get(key)!r} != {here_cfg[key]!r}"
                )
        for prefix, module in self._named_parties():
            ckpt.apply_module_arrays(module, prefix, arrays)
        ckpt.load_sgd_state_arrays(self.opt_df, list(
            ("d_feat." + n, p) for n, p in self.d_feat.named_parameters()), "opt.", arrays)
        ckpt.load_sgd_state_arrays(self.opt_dy, list(
            ("d_depth." + n, p) for n, p in self.d_depth.named_parameters()), "opt.", arrays)
        if self.opt_gen is not None:
            ckpt.load_sgd_state_arrays(self.opt_gen, self._named_gen_params(), "opt.", arrays)
        self.initial_pred_var = meta.get("initial_pred_var")
        self.collapse_streak = int(meta.get("collapse_streak", 0))
        return int(meta["iteration"])

    def result(self) -> AdaptResult:
        model = AdaptedModel(self.tgt_net, delta_branch=self.delta)
        self.tgt_net.eval()
        return AdaptResult(
            model=model,
            log=self.log,
            d_feat=self.d_feat,
            d_depth=self.d_depth,
            recon_branch=self.recon,
            ct_result=self.ct_result,
            config=self.cfg,
            n_trainable=self.n_trainable,
        )


def adapt(net, source_train, target_train, cfg: AdaptConfig, *,
          feature_cache=None, datasets=None, ct_result=None, resume=None,
          checkpoint_path=None, checkpoint_every=None) -> AdaptResult:
    """Adversarial adaptation of the head to the unlabeled target split.

    Per outer iteration: `m_inner` discriminator updates (feature-level
    always; depth-level when enabled), then one generator update on
    adversarial terms plus `content_weight` times the congruency loss.
    The input network is not mutated.
    """
    loop = _AdaptLoop(net, source_train, target_train, cfg,
                      feature_cache=feature_cache, datasets=datasets,
                      ct_result=ct_result, pretrain_recon=resume is None)
    start = 0
    if resume is not None:
        start = loop.load_state(resume)
        if start > cfg.k_outer:
            raise CheckpointError(
                f"checkpoint is at iteration {start}, beyond k_outer={cfg.k_outer}"
            )
    for it in range(start, cfg.k_outer):
        loop.run_iteration(it)
        if checkpoint_path is not None and checkpoint_every and (it + 1) % checkpoint_every == 0:
            loop.save_state(checkpoint_path, it + 1)
    return loop.result()


def adapt_semi(net, source_train, target_train, target_labeled, cfg: AdaptConfig, *,
               feature_cache=None, datasets=None, ct_result=None) -> AdaptResult:
    """Adaptation followed by alternating labeled/unlabeled fine-tuning.

    Phase 1 is exactly `adapt`.  Phase 2 runs `k_outer` more iterations;
    every `semi_unlabeled_per_labeled + 1`-th generator step draws from
    the small labeled split and swaps the congruency term for the
    supervised loss on its ground truth.
    """
    labeled_ds = ArrayDataset(target_labeled, with_depth=True)
    if len(labeled_ds) == 0:
        raise ConfigError("labeled split is empty")
    loop = _AdaptLoop(net, source_train, target_train, cfg,
                      feature_cache=feature_cache, datasets=datasets,
                      ct_result=ct_result)
    for it in range(cfg.k_outer):
        loop.run_iteration(it)
    labeled_cache = loop.build_labeled_cache(labeled_ds)
    cycle = cfg.semi_unlabeled_per_labeled + 1
    for j in range(cfg.k_outer):
        labeled = cfg.semi_unlabeled_per_labeled == 0 or (j % cycle == cycle - 1)
        loop.run_iteration(cfg.k_outer + j, labeled=labeled,
                           labeled_cache=labeled_cache, phase="semi")
    return loop.result()


def sweep_sharing(net, source_train, target_train, target_eval, depths, cfg: AdaptConfig,
                  eval_cfg: EvalConfig = EvalConfig(), datasets=None):
    """One adaptation run per head depth (latent-anchoring regularizer),
    each evaluated on the target eval split.  Returns a list of rows."""
    if not depths:
        raise ConfigError("sweep needs at least one depth")
    rows = []
    base_cache = None
    src_ds = tgt_ds = None
    if datasets is not None:
        src_ds, tgt_ds = datasets
    else:
        src_ds = ArrayDataset(source_train, with_depth=True)
        tgt_ds = ArrayDataset(target_train, with_depth=False)
    for depth in depths:
        sub = dataclasses.replace(cfg, adapt_depth=depth, regularizer="dcr")
        sub.validate(net.arch.n_stages)
        boundary = net.arch.n_stages - depth
        cache = build_feature_cache(net, src_ds, tgt_ds, boundary, base=base_cache)
        if base_cache is None:
            base_cache = cache
        res = adapt(net, source_train, target_train, sub,
                    feature_cache=cache, datasets=(src_ds, tgt_ds))
        agg, _ = evaluate_dataset(res.model.predict, target_eval, eval_cfg)
        row = {"adapt_depth": depth, "n_trainable": res.n_trainable}
        row.update(agg.to_dict())
        rows.append(row)
    return rows


# ---------------------------------------------------- model checkpoints


def save_model_checkpoint(path, model: AdaptedModel, extra_meta=None):
    arrays = ckpt.module_arrays(model.net, "net.")
    if model.delta_branch is not None:
        arrays.update(ckpt.module_arrays(model.delta_branch, "delta."))
    meta = {
        "kind": "model",
        "arch": dataclasses.asdict(model.net.arch),
        "has_delta": model.delta_branch is not None,
    }
    if extra_meta:
        meta.update(extra_meta)
    ckpt.save_checkpoint(path, arrays, meta)


def load_model_checkpoint(path):
    arrays, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "model":
        raise CheckpointError(f"not a model checkpoint: {meta.get('kind')!r}")
    arch_raw = dict(meta["arch"])
    for key in ("image_size", "stage_channels", "stage_strides", "decoder_channels"):
        arch_raw[key] = tuple(arch_raw[key])
    arch = ArchConfig(**arch_raw)
    net = DepthNet(arch)
    ckpt.apply_module_arrays(net, "net.", arrays)
    delta = None
    if meta.get("has_delta"):
        delta = ResidualBranch(arch.stage_channels[-2], arch.stage_channels[-1])
        ckpt.apply_module_arrays(delta, "delta.", arrays)
    return AdaptedModel(net, delta_branch=delta), meta
