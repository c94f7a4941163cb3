"""Command-line surface.

Subcommands: synth, train, fewshot, eval, zeroshot, plot. Every run writes
its fully resolved configuration to the output directory before doing any
work, so a run can be reproduced from that file alone. Failures exit with
a single machine-parseable line: ERROR:<kind>: <message>, where usage
errors exit 2, data errors 3 and numeric failures 4.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from .augment import AugmentationConfig
from .data import (DatasetDescriptor, DatasetRegistry, NormSpec,
                   import_annotations, load_image)
from .errors import DataFormatError, NumericsError
from .evaluation import (evaluate_dataset, export_attention,
                         format_probe_report, linear_probe_protocol,
                         zero_shot_predict)
from .geometry import generate_scratch_shape
from .metrics import CEDCurve, MetricReport, read_ced_csv, write_ced_csv
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .synthetic import SCHEMES, scheme_descriptor, write_synth_dataset
from .training import TrainConfig, fewshot_finetune, train


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataFormatError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"config file {path}: {exc}") from exc


def _write_resolved(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)


def _descriptor_from_entry(entry: dict) -> DatasetDescriptor:
    if "scheme" in entry:
        d = scheme_descriptor(entry["scheme"])
        if entry.get("id", d.dataset_id) != d.dataset_id:
            raise DataFormatError(
                f"scheme {entry['scheme']} datasets must use id {d.dataset_id!r}")
        return d
    try:
        return DatasetDescriptor(
            dataset_id=entry["id"],
            num_landmarks=int(entry["landmark_count"]),
            norm=NormSpec.from_dict(entry["norm"]),
            flip_permutation=None if entry.get("flip_permutation") is None
            else np.asarray(entry["flip_permutation"], dtype=np.int64),
        )
    except KeyError as exc:
        raise DataFormatError(f"dataset entry missing field {exc}") from exc


def _load_registry(dataset_entries, image_size) -> tuple[DatasetRegistry, dict]:
    registry = DatasetRegistry()
    roots = {}
    for entry in dataset_entries:
        descriptor = _descriptor_from_entry(entry)
        path = Path(entry["annotations"])
        samples = import_annotations(path, entry.get("format", "canonical-json"),
                                     descriptor=descriptor)
        root = Path(entry.get("image_root", path.parent))
        for s in samples:
            load_image(s, image_size, root)
        registry.add(descriptor, samples)
        roots[descriptor.dataset_id] = str(root)
    return registry, roots


def _descriptor_for_eval(args, payload) -> DatasetDescriptor:
    """Descriptor for --dataset: config entry, checkpoint extras, or the
    built-in synthetic schemes, in that precedence order."""
    config = _load_config_file(args.config)
    for entry in config.get("datasets", []):
        descriptor = _descriptor_from_entry(entry)
        if descriptor.dataset_id == args.dataset:
            return descriptor
    extras = payload["registry"].get(args.dataset, {}).get("extras") if payload else None
    if extras:
        return DatasetDescriptor.from_dict(extras)
    for scheme in SCHEMES:
        d = scheme_descriptor(scheme)
        if d.dataset_id == args.dataset:
            return d
    raise DataFormatError(
        f"no descriptor available for dataset {args.dataset!r}; describe it "
        "in --config or use a checkpoint that carries it")


def _apply_norm_override(descriptor: DatasetDescriptor, norm: str | None):
    if norm is None or norm == descriptor.norm.mode:
        return descriptor
    if norm == "box":
        from dataclasses import replace
        return replace(descriptor, norm=NormSpec("box"))
    if norm == "pupil":
        from dataclasses import replace

        from .synthetic import PUPIL_GROUPS
        scheme = descriptor.dataset_id.removeprefix("synth")
        if scheme in PUPIL_GROUPS:
            a, b = PUPIL_GROUPS[scheme]
            return replace(descriptor, norm=NormSpec("pupil", a, b))
    raise DataFormatError(
        f"cannot switch dataset {descriptor.dataset_id!r} to {norm!r} "
        "normalization: required landmark indices are unknown")


# ----- subcommands -----

def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataFormatError(
            f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, {"command": "synth", "scheme": args.scheme,
                          "count": args.count, "seed": args.seed,
                          "image_size": args.image_size})
    samples = write_synth_dataset(out, args.scheme, args.count, args.seed,
                                  args.image_size)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config_file(args.config)
    if args.seed is not None:
        config.setdefault("train", {})["seed"] = args.seed
    out = Path(args.out or config.get("out_dir") or "run")
    model_cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in config.get("model", {}).items()})
    train_cfg = TrainConfig.from_dict(config.get("train", {}))
    augment_cfg = (AugmentationConfig.from_dict(config["augment"])
                   if config.get("augment") else None)
    if not config.get("datasets"):
        raise DataFormatError("config has no datasets to train on")
    resolved = dict(config)
    resolved.update({"command": "train", "out_dir": str(out),
                     "model": model_cfg.__dict__ | {},
                     "train": train_cfg.to_dict(),
                     "augment": augment_cfg.to_dict() if augment_cfg else None})
    _write_resolved(out, _jsonable(resolved))

    registry, _ = _load_registry(config["datasets"], model_cfg.image_size)
    model = build_model(model_cfg, seed=train_cfg.seed)
    extras = {d.dataset_id: d.to_dict() for _, (d, _) in registry.items()}
    history = train(model, registry, train_cfg, out_dir=out,
                    augment_cfg=augment_cfg, dataset_extras=extras)
    print(f"trained {train_cfg.epochs} epochs; final mean loss "
          f"{history[-1]['mean_loss']:.6f}; checkpoint at {out / 'checkpoint_final.pt'}")
    return 0


def cmd_fewshot(args) -> int:
    config = _load_config_file(args.config)
    model, payload = load_checkpoint(args.checkpoint)
    out = Path(args.out or config.get("out_dir") or "fewshot_run")
    train_section = dict(config.get("train", {}))
    if args.seed is not None:
        train_section["seed"] = args.seed
    train_cfg = TrainConfig.from_dict(train_section)
    descriptor = _descriptor_for_eval(
        argparse.Namespace(config=args.config, dataset=args.dataset), payload)
    shots = import_annotations(args.shots, args.format, descriptor=descriptor)
    if args.k is not None:
        shots = shots[:args.k]
    root = Path(args.image_root or Path(args.shots).parent)
    for s in shots:
        load_image(s, model.config.image_size, root)
    _write_resolved(out, _jsonable({
        "command": "fewshot", "checkpoint": str(args.checkpoint),
        "dataset": args.dataset, "shots": str(args.shots), "k": len(shots),
        "train": train_cfg.to_dict()}))
    fewshot_finetune(model, descriptor, shots, train_cfg, out_dir=out)
    print(f"fine-tuned on {len(shots)} shots; checkpoint at "
          f"{out / 'checkpoint_final.pt'}")
    return 0


def _load_eval_samples(args, model):
    descriptor = None
    payload = getattr(args, "_payload", None)
    descriptor = _descriptor_for_eval(args, payload)
    samples = import_annotations(args.annotations, args.format,
                                 descriptor=descriptor)
    root = Path(args.image_root or Path(args.annotations).parent)
    for s in samples:
        load_image(s, model.config.image_size, root)
    return descriptor, samples, root


def cmd_eval(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    args._payload = payload
    descriptor, samples, _ = _load_eval_samples(args, model)
    descriptor = _apply_norm_override(descriptor, args.norm)
    out = Path(args.out)
    alphas = args.alpha or [0.1]
    _write_resolved(out, {"command": "eval", "checkpoint": str(args.checkpoint),
                          "dataset": args.dataset,
                          "annotations": str(args.annotations),
                          "alphas": alphas, "norm": descriptor.norm.mode,
                          "seed": args.seed})
    points = None
    if args.points_file:
        points = _read_points_file(args.points_file)
    report, _, ced = evaluate_dataset(model, samples, descriptor,
                                      alphas=alphas, plane_points=points)
    (out / "report.json").write_text(report.to_json())
    write_ced_csv(out / "ced.csv", ced)
    print(f"NME {report.nme_percent:.3f}% over {report.sample_count} samples "
          f"({descriptor.norm.mode}); report at {out / 'report.json'}")
    return 0


def _read_points_file(path) -> np.ndarray:
    try:
        pts = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"cannot parse points file {path}: {exc}") from exc
    if pts.shape[1] != 2:
        raise DataFormatError(f"points file {path} must have two columns (x,y)")
    return pts


def cmd_zeroshot(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    args._payload = payload
    descriptor, samples, root = _load_eval_samples(args, model)
    out = Path(args.out)
    if (args.points_file is None) == (args.n_pre is None):
        raise DataFormatError("pass exactly one of --points-file or --n-pre")
    if args.points_file:
        points = _read_points_file(args.points_file)
    else:
        points = generate_scratch_shape(args.n_pre, seed=args.seed)
    _write_resolved(out, {"command": "zeroshot",
                          "checkpoint": str(args.checkpoint),
                          "dataset": args.dataset,
                          "points_file": args.points_file,
                          "n_pre": args.n_pre, "seed": args.seed})
    images = [s.image for s in samples]
    preds, attn = zero_shot_predict(model, points, images)
    records = [{"image": s.source, "coords": p.tolist()}
               for s, p in zip(samples, preds)]
    (out / "predictions.json").write_text(json.dumps(records, indent=2))
    export_attention(out / "attention.npz", attn)
    if args.overlays:
        _write_overlays(out / "overlays", samples, preds)
    print(f"predicted {preds.shape[1]} landmarks on {len(samples)} images; "
          f"outputs in {out}")
    return 0


def _write_overlays(out_dir: Path, samples, preds, limit: int = 16) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, (sample, coords) in enumerate(zip(samples, preds)):
        if i >= limit:
            break
        img = (sample.image * 255.0).round().astype(np.uint8)
        img = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
        h, w = img.shape[:2]
        for x, y in coords:
            cx = int(round(float(x) * w * 16 - 8))
            cy = int(round(float(y) * h * 16 - 8))
            cv2.circle(img, (cx, cy), 2 * 16, (0, 0, 255), -1,
                       lineType=cv2.LINE_AA, shift=4)
        cv2.imwrite(str(out_dir / f"overlay_{i:04d}.png"), img)


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    max_eps = 0.0
    for path in args.reports:
        path = Path(path)
        if path.suffix == ".csv":
            curve = read_ced_csv(path)
        else:
            report = MetricReport.from_json(path.read_text())
            curve = CEDCurve.from_values(report.per_sample_nme)
        pts = curve.breakpoints()
        eps = [0.0] + [p[0] for p in pts]
        frac = [0.0] + [p[1] for p in pts]
        max_eps = max(max_eps, eps[-1])
        ax.step(eps, frac, where="post", label=path.stem)
    ax.set_xlabel("NME")
    ax.set_ylabel("fraction of samples")
    ax.set_xlim(0, max_eps * 1.05 if max_eps else 1.0)
    ax.set_ylim(0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "ced.png", dpi=150)
    plt.close(fig)
    print(f"wrote {out / 'ced.png'}")
    return 0


def cmd_probe(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    args._payload = payload
    descriptor, samples, root = _load_eval_samples(args, model)
    split = len(samples) // 2
    if args.train_annotations:
        train_samples = import_annotations(args.train_annotations, args.format,
                                           descriptor=descriptor)
        for s in train_samples:
            load_image(s, model.config.image_size,
                       Path(args.image_root or Path(args.train_annotations).parent))
        test_samples = samples
    else:
        train_samples, test_samples = samples[:split], samples[split:]
    seeds = list(range(args.seed, args.seed + args.repeats))
    mean, std, values = linear_probe_protocol(
        model, train_samples, test_samples, args.n_pre, seeds, descriptor)
    out = Path(args.out)
    _write_resolved(out, {"command": "probe", "n_pre": args.n_pre,
                          "seeds": seeds, "dataset": args.dataset})
    (out / "probe.json").write_text(json.dumps(
        {"mean_percent": mean, "std_percent": std, "values_percent": values,
         "n_pre": args.n_pre}, indent=2))
    print(format_probe_report(mean, std, args.n_pre))
    return 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planemark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--scheme", required=True, choices=sorted(SCHEMES))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on the datasets in a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fewshot", help="fine-tune a checkpoint on K shots")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shots", required=True, help="annotation file for the new scheme")
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", default="canonical-json")
    p.add_argument("--image-root")
    p.add_argument("--k", type=int, help="use only the first K shots")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--format", default="canonical-json")
    p.add_argument("--image-root")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, action="append")
    p.add_argument("--norm", choices=["ocular", "pupil", "box"])
    p.add_argument("--points-file", help="evaluate at these plane points instead "
                                         "of the registered anchors")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("zeroshot", help="predict at edited plane points")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--format", default="canonical-json")
    p.add_argument("--image-root")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--points-file")
    p.add_argument("--n-pre", type=int, help="random scratch shape size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overlays", action="store_true")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("probe", help="scratch-shape linear probe protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--annotations", required=True,
                   help="test split (or both splits when --train-annotations is absent)")
    p.add_argument("--train-annotations")
    p.add_argument("--format", default="canonical-json")
    p.add_argument("--image-root")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--n-pre", type=int, default=10)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("plot", help="plot CED curves from reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", None):
        torch.set_num_threads(args.workers)
    try:
        return args.func(args)
    except DataFormatError as exc:
        print(f"ERROR:data: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"ERROR:numeric: {exc}", file=sys.stderr)
        return 4
    except (ValueError, KeyError) as exc:
        print(f"ERROR:usage: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
