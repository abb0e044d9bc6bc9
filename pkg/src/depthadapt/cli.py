"""Command-line pipeline driver.

Five subcommands cover the full workflow::

    depthadapt gen      --config c.json --out runs/data
    depthadapt pretrain --config c.json --out runs/pretrain
    depthadapt adapt    --config c.json --out runs/adapt [--semi]
    depthadapt eval     --config c.json --out runs/eval [--model DIR]
    depthadapt sweep    --config c.json --out runs/sweep --depths 1 2 4

Every command validates its configuration and loads its inputs before
creating or touching the output directory, writes the fully resolved
config echo there, and refuses to overwrite an existing non-empty
directory unless ``--force`` is given.  Failures print one
machine-parsable JSON line to stderr and map the error class to the exit
code (2 config, 3 dataset, 4 divergence, 1 anything else).
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import training as T
from .config import load_run_config
from .data import ArrayDataset, build_dataset, load_manifest, materialize_labeled_split
from .errors import ConfigError, DepthAdaptError
from .evalkit import evaluate_dataset, format_report, report_to_json
from .viz import export_viz


def _prepare_out(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(
                f"output directory {out} already exists; pass --force to replace it"
            )
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_dir(cfg):
    if not cfg.paths["dataset"]:
        raise ConfigError("paths.dataset is not set in the config")
    return Path(cfg.paths["dataset"])


def _load_split(cfg, split):
    return load_manifest(_dataset_dir(cfg) / split)


def _cmd_gen(cfg, args):
    out = _prepare_out(args.out, args.force)
    cfg.echo(out)
    build_dataset(cfg.n_train, cfg.n_eval, cfg.scene, cfg.shift, out)
    return 0


def _cmd_pretrain(cfg, args):
    src = _load_split(cfg, "source_train")
    out = _prepare_out(args.out, args.force)
    cfg.echo(out)
    net, log = T.pretrain_source(src, cfg.pretrain, cfg.arch)
    T.save_model_checkpoint(
        out / "model", T.AdaptedModel(net), {"stage": "pretrain", "seed": cfg.seed}
    )
    log.save(out / "trainlog.ndjson")
    return 0


def _cmd_adapt(cfg, args):
    src = _load_split(cfg, "source_train")
    tgt = _load_split(cfg, "target_train")
    if not cfg.paths["pretrained"]:
        raise ConfigError("paths.pretrained is not set in the config")
    model, _ = T.load_model_checkpoint(cfg.paths["pretrained"])
    labeled_frac = args.labeled_frac if args.labeled_frac is not None else cfg.labeled_frac
    if not 0.0 < labeled_frac <= 1.0:
        raise ConfigError(f"labeled fraction must be in (0, 1], got {labeled_frac}")
    out = _prepare_out(args.out, args.force)
    cfg.echo(out)
    if args.semi:
        labeled = materialize_labeled_split(tgt, labeled_frac, out / "labeled")
        result = T.adapt_semi(model.net, src, tgt, labeled, cfg.adapt)
    else:
        result = T.adapt(model.net, src, tgt, cfg.adapt)
    T.save_model_checkpoint(
        out / "model",
        result.model,
        {
            "stage": "adapt",
            "seed": cfg.seed,
            "regularizer": cfg.adapt.reg,
            "semi": bool(args.semi),
        },
    )
    result.log.save(out / "trainlog.ndjson")
    return 0


def _cmd_eval(cfg, args):
    tev = _load_split(cfg, "target_eval")
    model_path = args.model or cfg.paths["adapted"] or cfg.paths["pretrained"]
    if not model_path:
        raise ConfigError(
            "no model to evaluate: pass --model or set paths.adapted/paths.pretrained"
        )
    model, _ = T.load_model_checkpoint(model_path)
    out = _prepare_out(args.out, args.force)
    cfg.echo(out)
    aggregate, per_image = evaluate_dataset(model.predict, tev, cfg.eval_cfg)
    with open(out / "metrics.json", "w") as fh:
        fh.write(report_to_json(aggregate, per_image))
        fh.write("\n")
    with open(out / "metrics.txt", "w") as fh:
        fh.write(format_report(aggregate))
    if args.viz > 0:
        viz_dir = out / "viz"
        viz_dir.mkdir()
        ds = ArrayDataset(tev, with_depth=False)
        n = min(args.viz, len(ds))
        preds = model.predict(ds.image_batch(np.arange(n)))
        for i in range(n):
            export_viz(preds[i], viz_dir / f"pred_{i:03d}.png", cfg.scene.depth_range)
    return 0


def _cmd_sweep(cfg, args):
    src = _load_split(cfg, "source_train")
    tgt = _load_split(cfg, "target_train")
    tev = _load_split(cfg, "target_eval")
    if not cfg.paths["pretrained"]:
        raise ConfigError("paths.pretrained is not set in the config")
    model, _ = T.load_model_checkpoint(cfg.paths["pretrained"])
    depths = args.depths
    out = _prepare_out(args.out, args.force)
    cfg.echo(out)
    rows = T.sweep_sharing(model.net, src, tgt, tev, depths, cfg.adapt, cfg.eval_cfg)
    with open(out / "sweep.json", "w") as fh:
        json.dump(rows, fh, indent=1, sort_keys=True)
        fh.write("\n")
    cols = ["adapt_depth", "n_trainable", "rel", "rms", "log10", "delta1", "delta2", "delta3"]
    lines = ["  ".join(f"{c:>11}" for c in cols)]
    for row in rows:
        cells = []
        for c in cols:
            v = row[c]
            cells.append(f"{v:>11}" if isinstance(v, int) else f"{v:>11.4f}")
        lines.append("  ".join(cells))
    (out / "sweep.txt").write_text("\n".join(lines) + "\n")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="depthadapt",
        description="Adversarial domain adaptation for monocular depth regression.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out", required=True, help="output directory for this run")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed (echoed into the output)")
        p.add_argument("--force", action="store_true",
                       help="replace an existing output directory")

    p = sub.add_parser("gen", help="render the three dataset splits")
    common(p)
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("pretrain", help="supervised training on the source split")
    common(p)
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("adapt", help="adversarial adaptation to the target split")
    common(p)
    p.add_argument("--semi", action="store_true",
                   help="follow adaptation with alternating labeled batches")
    p.add_argument("--labeled-frac", type=float, default=None,
                   help="fraction of target scenes to label for --semi")
    p.set_defaults(fn=_cmd_adapt)

    p = sub.add_parser("eval", help="metric battery on the target eval split")
    common(p)
    p.add_argument("--model", default=None, help="model checkpoint directory")
    p.add_argument("--viz", type=int, default=0,
                   help="also export this many colormapped predictions")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("sweep", help="one adaptation per head depth, tabulated")
    common(p)
    p.add_argument("--depths", type=int, nargs="+", default=[1, 2, 4],
                   help="adapt_depth values to compare")
    p.set_defaults(fn=_cmd_sweep)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.seed)
        return args.fn(cfg, args)
    except DepthAdaptError as exc:
        line = {
            "error": type(exc).__name__,
            "exit_code": exc.exit_code,
            "message": str(exc),
        }
        print(json.dumps(line), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # anything unforeseen still exits nonzero
        line = {"error": type(exc).__name__, "exit_code": 1, "message": str(exc)}
        print(json.dumps(line), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
