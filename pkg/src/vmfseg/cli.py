"""Command-line surface.

Subcommands: pixelsort, train, infer, eval, discover. All output is
line-delimited key=value records on stdout. Exit codes: 0 success,
2 malformed input, 3 invalid configuration, 4 missing mode prerequisite.

Every command accepts --seed and --serial. Reductions in this engine
are always single-threaded and deterministic; --serial asserts that
guarantee rather than switching anything off.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields as dataclass_fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from vmfseg import fileio
from vmfseg.core import (
    ConfigError,
    LabelMap,
    Segmentation,
    ShapeMismatchError,
    TooManyClustersError,
    TrainConfig,
    VmfSegError,
    normalize_map,
)
from vmfseg.kmeans import spherical_kmeans_trace
from vmfseg.metrics import ConfusionMatrix, boundary_match_counts, scores_from_counts
from vmfseg.retrieval import PrototypeStore, finch, infer_with_report
from vmfseg.train import SyntheticScene, fit, make_dataset

EXIT_OK = 0
EXIT_MALFORMED = 2
EXIT_CONFIG = 3
EXIT_PREREQUISITE = 4


class MissingPrerequisiteError(VmfSegError):
    """A mode-specific input (e.g. oversegmentations) is absent."""


def emit(**fields) -> None:
    parts = []
    for key, value in fields.items():
        if isinstance(value, float):
            parts.append(f"{key}={value:.6g}")
        else:
            parts.append(f"{key}={value}")
    print(" ".join(parts))


_INT_KEYS = {
    "num_clusters", "embedding_dim", "em_iters", "bank_depth", "knn",
    "iterations", "batch_size", "seed", "hidden_dim",
}
_CONFIG_KEYS = {f.name for f in dataclass_fields(TrainConfig)}


def parse_config_file(path: Path) -> dict:
    """Flat key=value config; '#' starts a comment."""
    values = {}
    try:
        text = path.read_text()
    except OSError as exc:
        raise fileio.MalformedFileError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = int(raw) if key in _INT_KEYS else float(raw)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {raw!r}") from exc
    return values


def build_config(args: argparse.Namespace) -> TrainConfig:
    """Defaults, overridden by --config file values, overridden by flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(Path(args.config)))
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    try:
        cfg = TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def parse_synthetic_spec(spec: str) -> dict:
    """classes=4,images=20,size=64,seed=7[,start=0]"""
    out = {"classes": 4, "images": 8, "size": 64, "seed": 0, "start": 0}
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ConfigError(f"synthetic spec entries must be key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in out:
            raise ConfigError(f"unknown synthetic spec key {key!r}")
        try:
            out[key] = int(raw)
        except ValueError as exc:
            raise ConfigError(f"bad synthetic spec value for {key}: {raw!r}") from exc
    if out["classes"] < 2 or out["images"] < 0 or out["size"] < 16:
        raise ConfigError("synthetic spec needs classes>=2, images>=0, size>=16")
    return out


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file; flags override it")
    parser.add_argument("--num-clusters", dest="num_clusters", type=int)
    parser.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    parser.add_argument("--kappa", type=float)
    parser.add_argument("--em-iters", dest="em_iters", type=int)
    parser.add_argument("--coord-weight", dest="coord_weight", type=float)
    parser.add_argument("--bank-depth", dest="bank_depth", type=int)
    parser.add_argument("--knn", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument(
        "--serial",
        action="store_true",
        help="force deterministic single-threaded reductions (always on in this engine)",
    )


def cmd_pixelsort(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    emb_file = fileio.read_emb(Path(args.embeddings))
    if emb_file.raw_features:
        raise fileio.MalformedFileError(
            f"{args.embeddings}: raw-feature tensor; pixelsort needs unit embeddings"
        )
    if emb_file.renormalized:
        emit(warning="renormalized_vectors", count=emb_file.renormalized)
    emb = normalize_map(emb_file.data)
    seg, objectives = spherical_kmeans_trace(emb, cfg)
    fileio.write_map(Path(args.out), seg.labels)
    emit(segments=seg.num_segments, objective=float(objectives[-1]))
    return EXIT_OK


def _load_dataset_dir(dataset_dir: Path, require_gt: bool) -> tuple[list[SyntheticScene], list[str]]:
    feature_files = sorted(dataset_dir.glob("*.sgem"))
    if not feature_files:
        raise fileio.MalformedFileError(f"no .sgem files in {dataset_dir}")
    scenes: list[SyntheticScene] = []
    stems: list[str] = []
    for path in feature_files:
        emb_file = fileio.read_emb(path)
        gt_path = path.with_suffix(".sglb")
        gt = None
        if gt_path.exists():
            gt = LabelMap(labels=fileio.read_map(gt_path))
            if (gt.height, gt.width) != emb_file.data.shape[:2]:
                raise ShapeMismatchError(f"{gt_path}: shape differs from {path}")
        elif require_gt:
            raise fileio.MalformedFileError(f"missing ground truth {gt_path}")
        scenes.append(SyntheticScene(image=emb_file.data, gt=gt))
        stems.append(path.stem)
    return scenes, stems


def _load_oversegs(overseg_dir: Optional[str], stems: Sequence[str], shapes) -> list[Segmentation]:
    if overseg_dir is None:
        raise MissingPrerequisiteError(
            "unsupervised mode requires --overseg DIR with one map per image"
        )
    overseg_path = Path(overseg_dir)
    out = []
    for stem, shape in zip(stems, shapes):
        path = overseg_path / f"{stem}.sglb"
        if not path.exists():
            raise MissingPrerequisiteError(f"missing oversegmentation {path}")
        labels = fileio.read_map(path)
        if labels.shape != shape:
            raise ShapeMismatchError(f"{path}: shape differs from its image")
        out.append(Segmentation.from_labels(labels))
    return out


def cmd_train(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    supervised = args.supervised
    if args.synthetic:
        spec = parse_synthetic_spec(args.synthetic)
        if args.seed is None:
            # One seed story per run: the synthetic data seed also seeds
            # the model unless --seed overrides it.
            cfg = replace(cfg, seed=spec["seed"]).validate()
        scenes = make_dataset(
            spec["images"], spec["classes"], spec["size"], spec["seed"], start_index=spec["start"]
        )
        stems = [f"{spec['start'] + i:03d}" for i in range(len(scenes))]
    else:
        scenes, stems = _load_dataset_dir(Path(args.dataset), require_gt=supervised)
    if not scenes:
        raise fileio.MalformedFileError("dataset is empty")

    oversegs = None
    if not supervised:
        oversegs = _load_oversegs(
            args.overseg, stems, [(s.height, s.width) for s in scenes]
        )

    def log_step(step: int, loss: float) -> None:
        emit(step=step, loss=loss)

    model, store = fit(scenes, cfg, supervised, oversegs=oversegs, on_step=log_step)
    fileio.write_checkpoint(Path(args.out_checkpoint), model)
    fileio.write_store(Path(args.out_store), store.prototypes)
    emit(steps=cfg.iterations, prototypes=len(store), labeled=store.labeled)
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    model = fileio.read_checkpoint(Path(args.checkpoint))
    store = PrototypeStore.from_prototypes(fileio.read_store(Path(args.store)))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for image_path in args.images:
        image_path = Path(image_path)
        emb_file = fileio.read_emb(image_path)
        if emb_file.data.shape[2] != model.feature_dim:
            raise fileio.MalformedFileError(
                f"{image_path}: {emb_file.data.shape[2]} channels, checkpoint expects {model.feature_dim}"
            )
        pred, report = infer_with_report(model, emb_file.data, store, cfg)
        fileio.write_map(out_dir / f"{image_path.stem}.sglb", pred.labels)
        for seg_id, neighbors in enumerate(report):
            for rank, (proto, sim) in enumerate(neighbors):
                emit(
                    image=image_path.stem,
                    segment=seg_id,
                    rank=rank,
                    neighbor_image=proto.image_id,
                    neighbor_segment=proto.segment_id,
                    label=proto.semantic_label,
                    cosine=sim,
                )
        emit(image=image_path.stem, prediction=str(out_dir / f"{image_path.stem}.sglb"))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    num_classes = args.num_classes
    if num_classes < 1:
        raise ConfigError(f"num-classes must be >= 1, got {num_classes}")
    if not args.boundary_tol > 0:
        raise ConfigError(f"--boundary tolerance must be positive, got {args.boundary_tol}")
    gt_files = sorted(gt_dir.glob("*.sglb"))
    if not gt_files:
        raise fileio.MalformedFileError(f"no .sglb files in {gt_dir}")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    matched = np.zeros(num_classes, dtype=np.int64)
    pred_count = np.zeros(num_classes, dtype=np.int64)
    gt_count = np.zeros(num_classes, dtype=np.int64)
    for gt_path in gt_files:
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            raise fileio.MalformedFileError(f"missing prediction {pred_path}")
        gt = LabelMap(labels=fileio.read_map(gt_path))
        pred = LabelMap(labels=fileio.read_map(pred_path))
        confusion += ConfusionMatrix.from_maps(pred, gt, num_classes).counts
        m, pc, gc = boundary_match_counts(pred, gt, num_classes, args.boundary_tol)
        matched += m
        pred_count += pc
        gt_count += gc

    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    denom = tp + fp + fn
    bscore = scores_from_counts(matched, pred_count, gt_count)
    ious = []
    for c in range(num_classes):
        iou = tp[c] / denom[c] if denom[c] > 0 else float("nan")
        if denom[c] > 0:
            ious.append(iou)
        emit(
            **{
                "class": c,
                "iou": iou,
                "boundary_p": float(bscore.precision[c]),
                "boundary_r": float(bscore.recall[c]),
                "boundary_f": float(bscore.f_measure[c]),
            }
        )
    miou_val = float(np.mean(ious)) if ious else float("nan")
    emit(images=len(gt_files), miou=miou_val, mean_boundary_f=bscore.mean_f)
    return EXIT_OK


def cmd_discover(args: argparse.Namespace) -> int:
    protos = fileio.read_store(Path(args.store))
    if not protos:
        raise fileio.MalformedFileError(f"{args.store}: empty store")
    if any(p.semantic_label is not None for p in protos):
        selected = [
            (i, p)
            for i, p in enumerate(protos)
            if p.semantic_label is not None and p.semantic_label != args.background
        ]
        if not selected:
            raise fileio.MalformedFileError("store has labels but no foreground prototypes")
    else:
        selected = list(enumerate(protos))
    vectors = np.stack([p.vector for _, p in selected])
    hierarchy = finch(vectors)
    counts = hierarchy.counts
    limit = len(counts) if args.levels is None else min(args.levels, len(counts))
    for level in range(limit):
        labels = hierarchy.levels[level]
        emit(level=level, clusters=counts[level])
        for (proto_idx, proto), cluster in zip(selected, labels):
            emit(
                level=level,
                prototype=proto_idx,
                image=proto.image_id,
                segment=proto.segment_id,
                label=proto.semantic_label if proto.semantic_label is not None else "none",
                cluster=int(cluster),
            )
    emit(levels=len(counts), counts=",".join(str(c) for c in counts))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vmfseg",
        description="Spherical-embedding segmentation engine: cluster, train, retrieve, score.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pixelsort", help="segment one embedding map by spherical K-Means")
    p.add_argument("embeddings", help="SGEM embedding file")
    p.add_argument("--out", required=True, help="output SGLB segment-id map")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pixelsort)

    p = sub.add_parser("train", help="train the toy embedder and build a prototype store")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--dataset", help="directory of .sgem features (+ .sglb ground truth)")
    source.add_argument("--synthetic", help="classes=4,images=20,size=64,seed=7[,start=0]")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--supervised", action="store_true")
    mode.add_argument("--unsupervised", dest="supervised", action="store_false")
    p.add_argument("--overseg", help="directory of per-image oversegmentation maps (unsupervised)")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out-store", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict label maps by prototype retrieval")
    p.add_argument("images", nargs="+", help="SGEM raw-feature files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--num-classes", type=int, required=True)
    p.add_argument("--boundary", dest="boundary_tol", type=float, default=0.01,
                   help="boundary match tolerance as a fraction of the image diagonal")
    p.add_argument("--seed", type=int)
    p.add_argument("--serial", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("discover", help="FINCH visual-group hierarchy over a prototype store")
    p.add_argument("--store", required=True)
    p.add_argument("--levels", type=int, help="emit at most this many levels")
    p.add_argument("--background", type=int, default=0,
                   help="class id excluded by the foreground rule (default 0)")
    p.add_argument("--seed", type=int)
    p.add_argument("--serial", action="store_true")
    p.set_defaults(func=cmd_discover)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TooManyClustersError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except (VmfSegError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MALFORMED


if __name__ == "__main__":
    sys.exit(main())
