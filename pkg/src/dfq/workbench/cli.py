"""Command line entry point: pretrain, distill, eval and viz."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from ..latent import SuperpositionSpec, draw_latent_batch
from ..metrics import FeatureExtraction, feature_cloud, latent_path_samples, pca_project, table4, top1_accuracy
from .config import ConfigError, dumps, load, override, parse_bits
from .io import atomic_write_text, write_csv

log = logging.getLogger("dfq")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


def _bits(text: str) -> str:
    try:
        parse_bits(text)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e)) from None
    return text


def _pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated class indices, got {text!r}") from None
    if a == b:
        raise argparse.ArgumentTypeError("pair classes must differ")
    return a, b


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfq", description="Data-free low-bit quantization workbench.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("pretrain", help="build the toy dataset and train the full-precision teacher")
    pre.add_argument("--config", required=True)
    pre.add_argument("--seed", type=int)

    dist = sub.add_parser("distill", help="data-free quantization run")
    dist.add_argument("--config", required=True)
    dist.add_argument("--seed", type=int)
    dist.add_argument("--bits", type=_bits, help="e.g. 4w4a")
    dist.add_argument("--k", type=int)
    dist.add_argument("--p", type=float)
    dist.add_argument("--sigma-z", type=float)
    dist.add_argument("--freeze-embeddings", action="store_true", default=None)
    dist.add_argument("--dm-layers", type=int)
    dist.add_argument("--no-ee-init", dest="ee_init", action="store_false", default=None)
    dist.add_argument("--baseline", choices=("none", "noise-only", "mixup"))
    dist.add_argument("--out", help="output directory (default: [paths] out_dir)")

    ev = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on a saved split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)

    viz = sub.add_parser("viz", help="diagnostics CSVs and plots from a distillation checkpoint")
    viz.add_argument("kind", choices=("pca", "path", "table4"))
    viz.add_argument("--checkpoint", required=True)
    viz.add_argument("--out", required=True)
    viz.add_argument("--data", help="saved eval split, adds real features to the PCA plot")
    viz.add_argument("--pair", type=_pair, default=(0, 1), help="class pair for the path plot, e.g. 0,1")
    viz.add_argument("--mode", choices=("latent", "mixup"), default="latent", help="path construction for table4")
    viz.add_argument("--per-class", type=int, default=64)
    viz.add_argument("--seed", type=int, default=0)
    return parser


def _echo(out_dir, argv, config_text=None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "command.json"), json.dumps({"argv": list(argv)}, indent=2) + "\n")
    if config_text is not None:
        atomic_write_text(os.path.join(out_dir, "config.cfg"), config_text)


def _resolve(path, base):
    return path if not path or os.path.isabs(path) else os.path.join(base, path)


def _load_config(args):
    cfg = load(args.config)
    base = os.path.dirname(os.path.abspath(args.config))
    for name in ("teacher", "eval_data", "train_data", "out_dir"):
        setattr(cfg.paths, name, _resolve(getattr(cfg.paths, name), base))
    return cfg


def cmd_pretrain(args, argv) -> int:
    from .checkpoint import save_teacher
    from .data import make_toy_dataset
    from .models import ClassifierConfig, pretrain_reference_model

    cfg = override(_load_config(args), seed=args.seed)
    paths = cfg.paths
    if not paths.teacher:
        raise UsageError("[paths] teacher must name the checkpoint to write")
    ds = make_toy_dataset(cfg.data)
    model = pretrain_reference_model(ds, epochs=cfg.teacher.epochs, seed=cfg.seed,
                                     config=ClassifierConfig(in_shape=cfg.data.input_shape,
                                                             num_classes=cfg.data.num_classes,
                                                             width=cfg.teacher.width,
                                                             feature_dim=cfg.teacher.feature_dim))
    acc = top1_accuracy(model, ds.eval)
    save_teacher(paths.teacher, model, {"eval_top1": acc})
    if paths.eval_data:
        ds.eval.save(paths.eval_data)
    if paths.train_data:
        ds.train.save(paths.train_data)
    _echo(os.path.dirname(os.path.abspath(paths.teacher)), argv, dumps(cfg))
    print(f"teacher eval top1 {acc:.4f} -> {paths.teacher}")
    return 0


def cmd_distill(args, argv) -> int:
    from ..trainer import run
    from .data import Split

    cfg = override(_load_config(args), seed=args.seed, bits=args.bits, k=args.k, p=args.p, sigma_z=args.sigma_z,
                   freeze_embeddings=args.freeze_embeddings, dm_layers=args.dm_layers, ee_init=args.ee_init,
                   baseline=args.baseline)
    out_dir = args.out or cfg.paths.out_dir
    for name in ("teacher", "eval_data"):
        path = getattr(cfg.paths, name)
        if path and not os.path.exists(path):
            raise UsageError(f"[paths] {name} does not exist: {path}")
    eval_split = Split.load(cfg.paths.eval_data) if cfg.paths.eval_data else None
    _echo(out_dir, argv, dumps(cfg))
    _, _, history, _ = run(cfg, eval_split=eval_split, out_dir=out_dir)
    if history.evals:
        print(f"final top1 {history.evals[-1][1]:.4f}")
    print(f"wrote {os.path.join(out_dir, 'final.ckpt')}")
    return 0


def cmd_eval(args, argv) -> int:
    from .checkpoint import load_classifier
    from .data import Split

    model = load_classifier(args.checkpoint)
    acc = top1_accuracy(model, Split.load(args.data))
    print(json.dumps({"checkpoint": args.checkpoint, "data": args.data, "top1": acc}))
    return 0


def _pca_rows(bundle, args):
    teacher, gen, table, dm = bundle.teacher, bundle.generator, bundle.table, bundle.dm
    cfg = bundle.meta["config"]
    rng = torch.Generator().manual_seed(args.seed)
    C = table.num_classes
    spec_kw = dict(K=cfg["latent"]["k"], sigma_z=cfg["latent"]["sigma_z"])
    gen.eval()
    clouds = []
    with torch.no_grad():
        for source, p in (("synthetic-regular", 0.0), ("synthetic-superposed", 1.0)):
            if source == "synthetic-superposed" and spec_kw["K"] < 2:
                continue
            batch = draw_latent_batch(SuperpositionSpec(p=p, **spec_kw), args.per_class * C, table, dm, rng)
            samples = gen(batch.vectors, batch.soft_labels)
            clouds.append(feature_cloud(teacher, samples, batch.soft_labels.argmax(dim=1).numpy(), source))
    if args.data:
        from .data import Split

        split = Split.load(args.data)
        clouds.append(feature_cloud(teacher, split.x, split.y.numpy(), "real"))
    merged = FeatureExtraction.concat(clouds)
    points, _, _ = pca_project(merged, 2)
    return [[x, y, int(label), src] for (x, y), label, src in zip(points, merged.labels, merged.source)]


def cmd_viz(args, argv) -> int:
    from .checkpoint import load_distilled
    from .plots import PATH_COLUMNS, PCA_COLUMNS, emit_plots

    bundle = load_distilled(args.checkpoint)
    out = args.out
    _echo(out, argv)
    if args.kind == "table4":
        rows = table4(bundle.generator, bundle.dm, bundle.table, bundle.teacher, mode=args.mode)
        write_csv(os.path.join(out, "table4.csv"), ("pair", "distance_ratio", "intrusion_score"),
                  [[f"{d.pair[0]}-{d.pair[1]}", d.distance_ratio, d.intrusion_score] for d in rows])
        ratio = np.mean([d.distance_ratio for d in rows])
        intr = np.mean([d.intrusion_score for d in rows])
        print(f"{len(rows)} pairs  mean distance ratio {ratio:.4f}  mean intrusion {intr:.5f}")
        return 0
    if args.kind == "pca":
        csv_path = os.path.join(out, "pca.csv")
        write_csv(csv_path, PCA_COLUMNS, _pca_rows(bundle, args))
        files = emit_plots(csv_path, out, "pca")
    else:
        if max(args.pair) >= bundle.table.num_classes:
            raise UsageError(f"pair {args.pair} out of range for {bundle.table.num_classes} classes")
        samples = latent_path_samples(bundle.generator, bundle.dm, bundle.table, args.pair)
        with torch.no_grad():
            feats = bundle.teacher.features(samples).double().numpy()
        points, _, _ = pca_project(feats, 2)
        lam = np.linspace(0.0, 1.0, len(points))
        csv_path = os.path.join(out, "path.csv")
        write_csv(csv_path, PATH_COLUMNS, [[i, lam[i], x, y] for i, (x, y) in enumerate(points)])
        files = emit_plots(csv_path, out, "path")
    print("\n".join(files))
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "distill": cmd_distill, "eval": cmd_eval, "viz": cmd_viz}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except (ConfigError, UsageError) as e:
        print(f"dfq {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - reported, not swallowed
        log.debug("failure", exc_info=True)
        print(f"dfq {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
