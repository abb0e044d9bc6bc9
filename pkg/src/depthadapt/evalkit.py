"""Depth evaluation protocol: scaling, capping, upsampling, metric battery.

All math is float64.  Metrics are computed per image after (optionally)
bilinearly upsampling the prediction to ground-truth resolution, dropping
pixels at or beyond the depth cap, and rescaling the prediction so its
masked median matches the ground truth's.  Aggregation over a dataset is
pixel-count weighted, so it is exactly the metric battery evaluated on
the union of all masked pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EvalError, ShapeError
from .data import load_manifest  # noqa: F401  (re-exported for CLI convenience)


@dataclass(frozen=True)
class EvalConfig:
    apply_median_scaling: bool = True
    cap_meters: float | None = None
    upsample_to_gt: bool = True
    global_scale: bool = False  # one shared s across the split instead of per-image

    def validate(self):
        if self.cap_meters is not None and self.cap_meters <= 0:
            raise ConfigError(f"cap must be positive, got {self.cap_meters}")


@dataclass
class MetricsReport:
    rel: float
    sq_rel: float
    rms: float
    rms_log: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int
    scale_factors: list[float] = field(default_factory=list)
    cap: float | None = None

    def to_dict(self):
        return {
            "rel": self.rel,
            "sq_rel": self.sq_rel,
            "rms": self.rms,
            "rms_log": self.rms_log,
            "log10": self.log10,
            "delta1": self.delta1,
            "delta2": self.delta2,
            "delta3": self.delta3,
            "n_pixels": self.n_pixels,
            "scale_factors": self.scale_factors,
            "cap": self.cap,
        }


def median_scale(pred, gt, mask):
    """Rescale pred so its masked median equals gt's; returns (scaled, s)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() == 0:
        raise EvalError("median scaling with an empty mask")
    p_med = float(np.median(np.asarray(pred, dtype=np.float64)[mask]))
    g_med = float(np.median(np.asarray(gt, dtype=np.float64)[mask]))
    if p_med <= 0:
        raise EvalError(f"nonpositive prediction median {p_med}")
    s = g_med / p_med
    return np.asarray(pred, dtype=np.float64) * s, s


def bilinear_resize(img, out_hw):
    """Bilinear resample with half-pixel-center sampling and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {img.shape}")
    h, w = img.shape
    out_h, out_w = out_hw
    if (out_h, out_w) == (h, w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = ys - y0
    wx = xs - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = img[y0c][:, x0c] * (1.0 - wx) + img[y0c][:, x1c] * wx
    bot = img[y1c][:, x0c] * (1.0 - wx) + img[y1c][:, x1c] * wx
    return top * (1.0 - wy)[:, None] + bot * wy[:, None]


def _metric_battery(p, g):
    """All eight metrics from already-masked 1-D float64 arrays."""
    diff = p - g
    rel = float(np.mean(np.abs(diff) / g))
    sq_rel = float(np.mean(diff * diff / g))
    rms = float(np.sqrt(np.mean(diff * diff)))
    log_diff = np.log(p) - np.log(g)
    rms_log = float(np.sqrt(np.mean(log_diff * log_diff)))
    log10 = float(np.mean(np.abs(np.log10(p) - np.log10(g))))
    ratio = np.maximum(p / g, g / p)
    d1 = float(np.mean(ratio < 1.25))
    d2 = float(np.mean(ratio < 1.25**2))
    d3 = float(np.mean(ratio < 1.25**3))
    return rel, sq_rel, rms, rms_log, log10, d1, d2, d3


def compute_metrics(pred, gt, mask, cfg: EvalConfig = EvalConfig()) -> MetricsReport:
    cfg.validate()
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if gt.shape != mask.shape:
        raise ShapeError(f"gt shape {gt.shape} != mask shape {mask.shape}")
    if pred.shape != gt.shape:
        if not cfg.upsample_to_gt:
            raise ShapeError(f"pred shape {pred.shape} != gt shape {gt.shape}")
        pred = bilinear_resize(pred, gt.shape)
    mask = mask & (gt > 0)
    if cfg.cap_meters is not None:
        mask = mask & (gt < cfg.cap_meters)
    if mask.sum() == 0:
        raise EvalError("no pixels left to evaluate after masking/capping")
    if np.any(pred[mask] <= 0):
        raise EvalError("nonpositive predicted depth inside the evaluation mask")
    if cfg.apply_median_scaling:
        pred, s = median_scale(pred, gt, mask)
    else:
        s = 1.0
    rel, sq_rel, rms, rms_log, log10, d1, d2, d3 = _metric_battery(pred[mask], gt[mask])
    return MetricsReport(
        rel=rel, sq_rel=sq_rel, rms=rms, rms_log=rms_log, log10=log10,
        delta1=d1, delta2=d2, delta3=d3,
        n_pixels=int(mask.sum()), scale_factors=[s], cap=cfg.cap_meters,
    )


def aggregate_reports(reports) -> MetricsReport:
    """Pixel-count-weighted combination; equals a joint evaluation of the
    union of all masked pixels."""
    reports = list(reports)
    if not reports:
        raise EvalError("nothing to aggregate")
    caps = {r.cap for r in reports}
    if len(caps) > 1:
        raise EvalError(f"mixed caps in aggregation: {sorted(caps, key=str)}")
    n = sum(r.n_pixels for r in reports)
    wmean = lambda f: sum(f(r) * r.n_pixels for r in reports) / n
    return MetricsReport(
        rel=wmean(lambda r: r.rel),
        sq_rel=wmean(lambda r: r.sq_rel),
        rms=float(np.sqrt(wmean(lambda r: r.rms**2))),
        rms_log=float(np.sqrt(wmean(lambda r: r.rms_log**2))),
        log10=wmean(lambda r: r.log10),
        delta1=wmean(lambda r: r.delta1),
        delta2=wmean(lambda r: r.delta2),
        delta3=wmean(lambda r: r.delta3),
        n_pixels=n,
        scale_factors=[s for r in reports for s in r.scale_factors],
        cap=reports[0].cap,
    )


def evaluate_dataset(predict_fn, manifest, cfg: EvalConfig = EvalConfig(), batch_size=8):
    """Evaluate a predictor over a labeled split.

    `predict_fn` maps a (B, 3, H, W) float32 array to a (B, h, w) depth
    array (any resolution; upsampled here).  Returns (aggregate report,
    list of per-image reports).
    """
    from .data import ArrayDataset

    cfg.validate()
    if not manifest.has_depth:
        raise EvalError(f"split {manifest.domain}/{manifest.split} has no depth labels")
    ds = ArrayDataset(manifest, with_depth=True)

    if cfg.global_scale:
        return _evaluate_global(predict_fn, ds, cfg, batch_size)

    per_image = []
    for start in range(0, len(ds), batch_size):
        idxs = np.arange(start, min(start + batch_size, len(ds)))
        preds = predict_fn(ds.image_batch(idxs))
        depths, masks = ds.depth_batch(idxs)
        for k, i in enumerate(idxs):
            try:
                per_image.append(compute_metrics(preds[k], depths[k], masks[k], cfg))
            except EvalError as exc:
                raise EvalError(f"image {i}: {exc}") from exc
    return aggregate_reports(per_image), per_image


def _evaluate_global(predict_fn, ds, cfg, batch_size):
    """Variant with one shared scale factor for the whole split."""
    preds, gts, masks = [], [], []
    for start in range(0, len(ds), batch_size):
        idxs = np.arange(start, min(start + batch_size, len(ds)))
        p = predict_fn(ds.image_batch(idxs))
        d, m = ds.depth_batch(idxs)
        for k in range(len(idxs)):
            up = bilinear_resize(np.asarray(p[k], dtype=np.float64), d[k].shape)
            preds.append(up)
            gts.append(d[k].astype(np.float64))
            masks.append(m[k])
    pred = np.stack(preds)
    gt = np.stack(gts)
    mask = np.stack(masks) & (gt > 0)
    if cfg.cap_meters is not None:
        mask &= gt < cfg.cap_meters
    if mask.sum() == 0:
        raise EvalError("no pixels left to evaluate after masking/capping")
    if cfg.apply_median_scaling:
        pred, s = median_scale(pred, gt, mask)
    else:
        s = 1.0
    per_image = []
    sub_cfg = EvalConfig(apply_median_scaling=False, cap_meters=cfg.cap_meters,
                         upsample_to_gt=False)
    for i in range(pred.shape[0]):
        try:
            rep = compute_metrics(pred[i], gt[i], mask[i], sub_cfg)
        except EvalError as exc:
            raise EvalError(f"image {i}: {exc}") from exc
        rep.scale_factors = [s]
        per_image.append(rep)
    return aggregate_reports(per_image), per_image


_TEXT_COLUMNS = ("rel", "rms", "log10", "rms_log", "delta1", "delta2", "delta3")


def format_report(report: MetricsReport, label="all") -> str:
    """Aligned-column text in table order: rel, rms, log10/rms_log, deltas."""
    header = f"{'split':<12}" + "".join(f"{c:>9}" for c in _TEXT_COLUMNS)
    row = f"{label:<12}" + "".join(
        f"{getattr(report, c):9.4f}" for c in _TEXT_COLUMNS
    )
    return header + "\n" + row + "\n"


def report_to_json(report: MetricsReport, per_image=None) -> str:
    payload = {"aggregate": report.to_dict()}
    if per_image is not None:
        payload["per_image"] = [r.to_dict() for r in per_image]
    return json.dumps(payload, indent=1, sort_keys=True)
