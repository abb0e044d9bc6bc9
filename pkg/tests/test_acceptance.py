"""End-to-end acceptance gate.

One test per criterion, in order.  Each prints a single summary line
(visible with -s or -rA); the pytest verdict per test is the pass/fail
line per criterion.  Criteria 5, 6 and 7 share one session-scoped
reference workspace (corpus, pretrained network, feature cache) because
the pretraining stage dominates the runtime budget.

Budget notes on a single throttled CPU core: criterion 1 < 1 min,
criterion 4 < 5 min, criterion 8 < 10 min; the shared reference fixture
(pretraining plus nine adaptation runs) dominates and takes about two
hours, so the whole module lands around four hours.  Multi-core hardware
cuts this severalfold.  Run with ``pytest tests/test_acceptance.py -v``
(add ``-s`` for the detail lines).
"""

import dataclasses
import json
import math
import statistics
import sys
import time

import numpy as np
import pytest
import torch

from depthadapt.adversary import adv_loss_D, adv_loss_G
from depthadapt.congruency import (
    dcr_loss,
    fcf_loss,
    init_recon_branch,
    init_residual_branch,
    rtf_penalty,
)
from depthadapt.data import (
    ArrayDataset,
    build_dataset,
    materialize_labeled_split,
)
from depthadapt.evalkit import EvalConfig, compute_metrics, evaluate_dataset
from depthadapt.model import (
    ArchConfig,
    berhu_loss,
    init_network,
    partition_tags,
)
from depthadapt.scenes import SceneSpec
from depthadapt.shift import ShiftConfig
from depthadapt.training import (
    AdaptConfig,
    AdaptedModel,
    PretrainConfig,
    adapt,
    adapt_semi,
    build_feature_cache,
    load_model_checkpoint,
    pretrain_source,
    save_model_checkpoint,
    sweep_sharing,
)
from depthadapt import cli

# Reference-corpus recipe.  Calibrated so the photometric gap is large
# enough for the adaptation criteria yet every knob stays within the
# shift module's validated ranges.
REF_N_TRAIN = 2000
REF_N_EVAL = 200
REF_IMAGE = (128, 160)
REF_SHIFT = ShiftConfig(
    color_gamma=(1.3, 1.1, 0.95),
    noise_sigma=0.03,
    blur_radius=1.0,
    contrast=0.85,
    texture_overlay_strength=0.15,
    seed=0,
)
REF_EPOCHS = 13
REF_SEEDS = (0, 1, 2)


def _report(num, name, ok, detail=""):
    verdict = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {num} {name}: {verdict}" + (f"  ({detail})" if detail else ""),
          file=sys.stderr, flush=True)
    return ok


# ------------------------------------------------------------------ 1


def _fd_grad(fn, x, h=1e-5):
    """Central finite differences of a scalar fn over every element of x."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        hi = fn().item()
        flat[i] = orig - h
        lo = fn().item()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def _grad_close(fn, x, tol=1e-4):
    x.grad = None
    fn().backward()
    an = x.grad.detach().clone()
    with torch.no_grad():
        fd = _fd_grad(fn, x)
    denom = max(an.norm().item(), fd.norm().item(), 1e-12)
    return (an - fd).norm().item() / denom


def test_criterion_1_gradient_suite():
    t0 = time.time()
    rng = np.random.default_rng(11)
    worst = {}

    def check(name, make):
        errs = []
        for _ in range(20):
            fn, x = make()
            errs.append(_grad_close(fn, x))
        worst[name] = max(errs)

    def mk_berhu():
        pred = torch.tensor(rng.uniform(0.5, 4.0, (3, 6)), requires_grad=True)
        gt = torch.tensor(rng.uniform(0.5, 4.0, (3, 6)))
        mask = torch.tensor(rng.random((3, 6)) > 0.2)
        if not mask.any():
            mask[0, 0] = True
        return (lambda: berhu_loss(pred, gt, mask)), pred

    def mk_adv(side, form):
        def make():
            real = torch.tensor(rng.normal(0, 1.5, (2, 1, 3, 4)))
            fake = torch.tensor(rng.normal(0, 1.5, (2, 1, 3, 4)), requires_grad=True)
            if side == "D":
                return (lambda: adv_loss_D(real, fake, form)), fake
            return (lambda: adv_loss_G(fake, form)), fake
        return make

    def mk_dcr():
        a = torch.tensor(rng.normal(0, 1, (2, 3, 4)))
        b = torch.tensor(rng.normal(0, 1, (2, 3, 4)), requires_grad=True)
        return (lambda: dcr_loss(a, b)), b

    def mk_rtf():
        r = torch.tensor(rng.normal(0, 1, (2, 3, 4)), requires_grad=True)
        return (lambda: rtf_penalty(r)), r

    branch = init_recon_branch(5, in_ch=8, out_ch=4).double().eval()

    def mk_fcf():
        latent = torch.tensor(rng.normal(0, 1, (1, 8, 4, 5)), requires_grad=True)
        trunk = torch.tensor(rng.normal(0, 1, (1, 4, 8, 10)))
        return (lambda: fcf_loss(branch, latent, trunk)), latent

    check("berhu", mk_berhu)
    for form in ("log", "lsq"):
        check(f"adv_D_{form}", mk_adv("D", form))
        check(f"adv_G_{form}", mk_adv("G", form))
    check("dcr", mk_dcr)
    check("rtf", mk_rtf)
    check("fcf", mk_fcf)

    elapsed = time.time() - t0
    ok = all(e < 1e-4 for e in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    assert _report(1, "gradient suite", ok, detail)


# ------------------------------------------------------------------ 2


def test_criterion_2_loss_value_oracles():
    cases = {}
    pred = torch.tensor([[2.0, 1.1]], dtype=torch.float64)
    gt = torch.ones_like(pred)
    mask = torch.ones_like(pred, dtype=torch.bool)
    cases["berhu 1.35"] = (berhu_loss(pred, gt, mask).item(), 1.35)

    half = torch.full((2, 1, 4, 5), 0.5, dtype=torch.float64)
    zero = torch.zeros_like(half)
    cases["lsq confused D 0.5"] = (adv_loss_D(half, half, "lsq").item(), 0.5)
    cases["log confused D 2ln2"] = (adv_loss_D(zero, zero, "log").item(), 2 * math.log(2))
    cases["dcr 1.5"] = (
        dcr_loss(torch.tensor([1.0, 2.0], dtype=torch.float64),
                 torch.tensor([2.0, 4.0], dtype=torch.float64)).item(),
        1.5,
    )
    cases["rtf sqrt(12.5)"] = (
        rtf_penalty(torch.tensor([3.0, 4.0], dtype=torch.float64)).item(),
        math.sqrt(12.5),
    )

    class _Rigged(torch.nn.Module):
        def __init__(self, out):
            super().__init__()
            self.out = out

        def forward(self, x):
            return self.out

    target = torch.tensor([[[[1.0, -1.0]]]], dtype=torch.float64)
    rig = _Rigged(torch.zeros_like(target))
    cases["fcf 1.0"] = (fcf_loss(rig, torch.zeros(1, 1, 1, 2), target).item(), 1.0)

    errs = {k: abs(got - want) for k, (got, want) in cases.items()}
    ok = all(e < 1e-9 for e in errs.values())
    assert _report(2, "loss value oracles", ok,
                   ", ".join(f"{k} err {e:.1e}" for k, e in errs.items()))


# ------------------------------------------------------------------ 3


def _oracle_metrics(pred, gt, mask, median_scaling, cap):
    """Independent double-precision restatement of the metric battery."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    keep = np.asarray(mask, dtype=bool) & (gt > 0)
    if cap is not None:
        keep &= gt < cap
    p, g = pred[keep], gt[keep]
    if median_scaling:
        p = p * (np.median(g) / np.median(p))
    n = p.size
    out = {
        "rel": sum(abs(pi - gi) / gi for pi, gi in zip(p, g)) / n,
        "sq_rel": sum((pi - gi) ** 2 / gi for pi, gi in zip(p, g)) / n,
        "rms": math.sqrt(sum((pi - gi) ** 2 for pi, gi in zip(p, g)) / n),
        "rms_log": math.sqrt(sum((math.log(pi) - math.log(gi)) ** 2 for pi, gi in zip(p, g)) / n),
        "log10": sum(abs(math.log10(pi) - math.log10(gi)) for pi, gi in zip(p, g)) / n,
    }
    for i in (1, 2, 3):
        thr = 1.25 ** i
        out[f"delta{i}"] = sum(max(pi / gi, gi / pi) < thr for pi, gi in zip(p, g)) / n
    return out


def test_criterion_3_metric_oracle():
    rng = np.random.default_rng(33)
    worst = 0.0
    for _ in range(50):
        h, w = rng.integers(5, 24, 2)
        gt = rng.uniform(0.2, 9.0, (h, w))
        pred = gt * rng.uniform(0.6, 1.6, (h, w))
        mask = rng.random((h, w)) > 0.15
        mask.flat[0] = True
        cap = 8.0 if rng.random() < 0.5 else None
        scaling = bool(rng.random() < 0.5)
        cfg = EvalConfig(apply_median_scaling=scaling, cap_meters=cap)
        got = compute_metrics(pred, gt, mask, cfg)
        want = _oracle_metrics(pred, gt, mask, scaling, cap)
        for key, w_val in want.items():
            worst = max(worst, abs(getattr(got, key) - w_val))

    plain = EvalConfig(apply_median_scaling=False)
    rep = compute_metrics(np.array([[1.0, 2.0]]), np.array([[2.0, 2.0]]),
                          np.ones((1, 2), bool), plain)
    exact = (rep.rel == 0.25 and rep.delta1 == 0.5 and rep.delta2 == 0.5
             and rep.delta3 == 0.5)
    ok = worst < 1e-9 and exact
    assert _report(3, "metric oracle", ok,
                   f"worst formula err {worst:.1e}, worked example exact={exact}")


# ------------------------------------------------------------------ 4


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    spec = SceneSpec(seed=3, n_objects=4, image_size=(64, 80))
    shift = ShiftConfig(color_gamma=(1.3, 1.1, 1.0), noise_sigma=0.02,
                        blur_radius=0.6, contrast=0.9,
                        texture_overlay_strength=0.3)
    src, tgt, tev = build_dataset(12, 4, spec, shift, root)
    return {"root": root, "src": src, "tgt": tgt, "tev": tev, "spec": spec,
            "shift": shift}


def test_criterion_4_structural_laws(tiny_corpus, tmp_path):
    t0 = time.time()
    arch = ArchConfig(image_size=(64, 80))
    net = init_network(0, arch)
    checks = {}

    cfg = AdaptConfig(k_outer=6, batch_size=4, seed=0)
    res = adapt(net, tiny_corpus["src"], tiny_corpus["tgt"], cfg)
    tags = partition_tags(net, cfg.adapt_depth)
    before = dict(net.state_dict())
    after = dict(res.model.net.state_dict())
    frozen_ok, changed = True, 0
    for name, tag in tags.items():
        same = torch.equal(before[name], after[name])
        if tag in ("trunk", "decoder"):
            frozen_ok &= same
        elif not same:
            changed += 1
    checks["freeze law"] = frozen_ok and changed > 0

    delta = init_residual_branch(7)
    base, with_delta = AdaptedModel(net), AdaptedModel(net, delta_branch=delta)
    probe = ArrayDataset(tiny_corpus["tev"], False).image_batch(np.arange(3))
    checks["rtf zero-init identity"] = np.array_equal(base.predict(probe),
                                                      with_delta.predict(probe))

    noop = adapt(net, tiny_corpus["src"], tiny_corpus["tgt"],
                 dataclasses.replace(cfg, k_outer=0))
    checks["k_outer=0 no-op"] = all(
        torch.equal(before[k], v) for k, v in noop.model.net.state_dict().items()
    )

    ck = tmp_path / "model"
    save_model_checkpoint(ck, res.model)
    loaded, _ = load_model_checkpoint(ck)
    same_arrays = all(
        torch.equal(v, loaded.net.state_dict()[k])
        for k, v in res.model.net.state_dict().items()
    )
    checks["checkpoint round-trip"] = same_arrays and np.array_equal(
        res.model.predict(probe), loaded.predict(probe)
    )

    rng = np.random.default_rng(4)
    gt = rng.uniform(0.5, 9.0, (32, 40))
    pred = gt * rng.uniform(0.7, 1.4, (32, 40))
    mask = rng.random((32, 40)) > 0.1
    ref = compute_metrics(pred, gt, mask)
    alpha_ok = True
    for alpha in (0.5, 2.0, 13.7):
        scaled = compute_metrics(alpha * pred, gt, mask)
        for key in ("rel", "sq_rel", "rms", "rms_log", "log10",
                    "delta1", "delta2", "delta3"):
            alpha_ok &= abs(getattr(scaled, key) - getattr(ref, key)) < 1e-9
    checks["median-scaling alpha-invariance"] = alpha_ok

    elapsed = time.time() - t0
    ok = all(checks.values()) and elapsed < 300
    assert _report(4, "structural laws", ok,
                   ", ".join(f"{k}={'ok' if v else 'BAD'}" for k, v in checks.items())
                   + f"; {elapsed:.1f}s")


# ------------------------------------------------------------------ 5


@pytest.fixture(scope="session")
def reference(tmp_path_factory):
    """Corpus, pretrained network, cache, and the 3x3 adaptation grid."""
    root = tmp_path_factory.mktemp("reference")
    t0 = time.time()
    spec = SceneSpec(seed=0, n_objects=5, image_size=REF_IMAGE)
    src, tgt, tev = build_dataset(REF_N_TRAIN, REF_N_EVAL, spec, REF_SHIFT, root)

    net, _ = pretrain_source(src, PretrainConfig(epochs=REF_EPOCHS, seed=0))
    ecfg = EvalConfig()
    baseline, _ = evaluate_dataset(AdaptedModel(net).predict, tev, ecfg)

    cfg0 = AdaptConfig()
    src_ds = ArrayDataset(src, True)
    tgt_ds = ArrayDataset(tgt, False)
    cache = build_feature_cache(net, src_ds, tgt_ds, net.arch.n_stages - cfg0.adapt_depth)

    rels = {}
    for reg in ("dcr", "rtf", "fcf"):
        for seed in REF_SEEDS:
            cfg = dataclasses.replace(cfg0, regularizer=reg, seed=seed)
            res = adapt(net, src, tgt, cfg, feature_cache=cache,
                        datasets=(src_ds, tgt_ds))
            agg, _ = evaluate_dataset(res.model.predict, tev, ecfg)
            rels[(reg, seed)] = agg.rel
    runtime = time.time() - t0
    return {
        "root": root, "net": net, "src": src, "tgt": tgt, "tev": tev,
        "src_ds": src_ds, "tgt_ds": tgt_ds, "cache": cache, "ecfg": ecfg,
        "baseline": baseline.rel, "rels": rels, "runtime": runtime,
        "cfg0": cfg0,
    }


def test_criterion_5_each_regularizer_improves(reference):
    base = reference["baseline"]
    medians = {
        reg: statistics.median(reference["rels"][(reg, s)] for s in REF_SEEDS)
        for reg in ("dcr", "rtf", "fcf")
    }
    gains = {reg: 1.0 - med / base for reg, med in medians.items()}
    order = sorted(medians, key=medians.get)
    ok = all(g >= 0.15 for g in gains.values())
    detail = (f"baseline rel {base:.4f}; "
              + ", ".join(f"{r} {medians[r]:.4f} ({gains[r] * 100:+.1f}%)" for r in medians)
              + f"; best-first order {order}; {reference['runtime']:.0f}s")
    assert _report(5, "adaptation gain per regularizer", ok, detail)


# ------------------------------------------------------------------ 6


def test_criterion_6a_reconstruction_without_depth_critic(reference):
    rels = []
    for seed in REF_SEEDS:
        cfg = dataclasses.replace(reference["cfg0"], regularizer="fcf",
                                  use_depth_disc=False, seed=seed)
        res = adapt(reference["net"], reference["src"], reference["tgt"], cfg,
                    feature_cache=reference["cache"],
                    datasets=(reference["src_ds"], reference["tgt_ds"]))
        agg, _ = evaluate_dataset(res.model.predict, reference["tev"],
                                  reference["ecfg"])
        rels.append(agg.rel)
    med = statistics.median(rels)
    full = statistics.median(reference["rels"][("fcf", s)] for s in REF_SEEDS)
    ok = med < reference["baseline"]
    assert _report(6, "a: fcf without depth critic", ok,
                   f"rel {med:.4f} vs baseline {reference['baseline']:.4f} "
                   f"(full fcf {full:.4f})")


def _subset(manifest, n):
    return dataclasses.replace(manifest, entries=manifest.entries[:n])


def test_criterion_6b_sharing_sweep_table(reference):
    cfg = dataclasses.replace(reference["cfg0"], k_outer=60, regularizer="dcr")
    rows = sweep_sharing(reference["net"], _subset(reference["src"], 400),
                         _subset(reference["tgt"], 400),
                         _subset(reference["tev"], 60), [0, 1, 2], cfg)
    counts = [r["n_trainable"] for r in rows]
    ok = (len(rows) == 3
          and counts[0] == 0
          and counts == sorted(counts)
          and all("rel" in r and "adapt_depth" in r for r in rows))
    table = "; ".join(f"depth {r['adapt_depth']} params {r['n_trainable']} "
                      f"rel {r['rel']:.4f}" for r in rows)
    assert _report(6, "b: head-depth sweep table", ok, table)


def test_criterion_6c_huge_weight_pins_encoder(reference):
    probe = torch.from_numpy(reference["tgt_ds"].image_batch(np.arange(16)))
    drifts = {}
    for lam in (10.0, 1e6):
        cfg = dataclasses.replace(reference["cfg0"], regularizer="dcr",
                                  content_weight=lam, k_outer=200, seed=0)
        res = adapt(reference["net"], reference["src"], reference["tgt"], cfg,
                    feature_cache=reference["cache"],
                    datasets=(reference["src_ds"], reference["tgt_ds"]))
        with torch.no_grad():
            adapted = res.model.net.encode(probe)[-1]
            source = reference["net"].encode(probe)[-1]
        drifts[lam] = (adapted - source).abs().mean().item()
    ok = drifts[1e6] < 0.1 * drifts[10.0]
    assert _report(6, "c: huge content weight pins encoder", ok,
                   f"drift 1e6 {drifts[1e6]:.5f} vs 10 {drifts[10.0]:.5f}")


# ------------------------------------------------------------------ 7


def test_criterion_7_semi_supervised_ordering(reference):
    labeled = materialize_labeled_split(reference["tgt"], 0.05,
                                        reference["root"] / "labeled")
    rels = []
    for seed in REF_SEEDS:
        cfg = dataclasses.replace(reference["cfg0"], seed=seed)
        res = adapt_semi(reference["net"], reference["src"], reference["tgt"],
                         labeled, cfg, feature_cache=reference["cache"],
                         datasets=(reference["src_ds"], reference["tgt_ds"]))
        agg, _ = evaluate_dataset(res.model.predict, reference["tev"],
                                  reference["ecfg"])
        rels.append(agg.rel)
    semi = statistics.median(rels)
    unsup = statistics.median(
        reference["rels"][(reference["cfg0"].reg, s)] for s in REF_SEEDS
    )
    ok = semi <= unsup
    assert _report(7, "semi-supervised ordering", ok,
                   f"semi rel {semi:.4f} <= unsupervised {unsup:.4f}")


# ------------------------------------------------------------------ 8


def test_criterion_8_pipeline_determinism(tmp_path):
    t0 = time.time()
    outs = []
    for run in ("a", "b"):
        base = tmp_path / run
        config = {
            "data": {
                "n_train": REF_N_TRAIN // 10,
                "n_eval": REF_N_EVAL // 10,
                "image_size": list(REF_IMAGE),
                "shift": {
                    "color_gamma": list(REF_SHIFT.color_gamma),
                    "noise_sigma": REF_SHIFT.noise_sigma,
                    "blur_radius": REF_SHIFT.blur_radius,
                    "contrast": REF_SHIFT.contrast,
                    "texture_overlay_strength": REF_SHIFT.texture_overlay_strength,
                },
            },
            "pretrain": {"epochs": 1},
            "adapt": {"k_outer": 30, "ct_steps": 200},
            "paths": {
                "dataset": str(base / "data"),
                "pretrained": str(base / "pre" / "model"),
                "adapted": str(base / "ad" / "model"),
            },
        }
        cfg_path = tmp_path / f"smoke_{run}.json"
        cfg_path.write_text(json.dumps(config))
        for cmd, out in (
            ("gen", base / "data"),
            ("pretrain", base / "pre"),
            ("adapt", base / "ad"),
            ("eval", base / "ev"),
        ):
            rc = cli.main([cmd, "--config", str(cfg_path), "--out", str(out)])
            assert rc == 0, f"{cmd} failed with {rc}"
        outs.append((base / "ev" / "metrics.json").read_bytes())
    elapsed = time.time() - t0
    ok = outs[0] == outs[1] and elapsed < 600
    assert _report(8, "pipeline determinism", ok,
                   f"metrics.json identical={outs[0] == outs[1]}, {elapsed:.1f}s")
