"""Command-line front end wiring the stages into reproducible runs.

Subcommands: gen-synth, build-book, train, infer, eval, probe, pipeline.
Exit codes: 0 ok, 2 validation, 3 I/O, 4 numeric. The CAUSE_SEED
environment variable overrides any configured seed. Every command writes
a `<artifact>.run.json` manifest capturing its resolved parameters, seed,
and input hashes, which is enough to reproduce the run.

Heavy imports happen inside the command handlers so that `--threads` can
cap BLAS/numba worker pools before numpy is first loaded.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("causeseg.cli")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _resolve_seed(seed: int) -> int:
    env = os.environ.get("CAUSE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise SystemExit(f"CAUSE_SEED must be an integer, got {env!r}") from exc
    return int(seed)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_run_manifest(anchor: Path, command: str, params: dict,
                        seed: int, inputs: list, outputs: list) -> None:
    doc = {
        "command": command,
        "params": params,
        "seed": seed,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "outputs": [str(p) for p in outputs],
    }
    anchor.with_suffix(anchor.suffix + ".run.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n"
    )


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise SystemExit(f"grid must look like 16x16, got {text!r}") from exc


# ---------------------------------------------------------------------------
# Command handlers


def cmd_gen_synth(args) -> int:
    from .feature_io import SynthSpec, generate_synthetic_dataset, validate_manifest

    seed = _resolve_seed(args.seed)
    spec = SynthSpec(
        n_classes=args.classes,
        subconcepts_per_class=args.subconcepts,
        c=args.dim,
        grid=_parse_grid(args.grid),
        n_images=args.images,
        noise_sigma=args.noise_sigma,
        prototype_separation=args.separation,
        seed=seed,
    )
    manifest = generate_synthetic_dataset(spec, args.out, val_fraction=args.val_fraction)
    failures = validate_manifest(manifest)
    if failures:
        for f in failures:
            log.error("manifest failure: %s", f)
        return EXIT_VALIDATION
    params = vars(args).copy()
    params.pop("func", None)
    _write_run_manifest(Path(args.out) / "manifest.json", "gen-synth", params,
                        seed, [], [str(Path(args.out) / "manifest.json")])
    print(f"wrote {len(manifest.records)} records to {args.out}")
    return EXIT_OK


def cmd_build_book(args) -> int:
    from .clusterbook import (
        fit_clusterbook,
        fit_clusterbook_kmeanspp,
        save_clusterbook,
    )
    from .feature_io import DatasetManifest
    from .rng import RngStream

    seed = _resolve_seed(args.seed)
    manifest = DatasetManifest.load(args.manifest)
    rng = RngStream(seed, "clusterbook")
    if args.method == "modularity":
        book = fit_clusterbook(manifest, k=args.k, tau_mod=args.tau_mod,
                               lr=args.lr, rng=rng, optimizer=args.optimizer,
                               weight_decay=args.weight_decay)
    else:
        book = fit_clusterbook_kmeanspp(manifest, k=args.k,
                                        iters=args.kmeans_iters, rng=rng)
    out = Path(args.out)
    save_clusterbook(book, out)
    params = {k: v for k, v in vars(args).items() if k != "func"}
    _write_run_manifest(out, "build-book", params, seed, [args.manifest], [str(out)])
    print(f"wrote codebook ({book.builder}, k={book.k}, c={book.c}) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .clusterbook import load_clusterbook
    from .feature_io import DatasetManifest
    from .rng import RngStream
    from .seg_head import DEFAULT_OUT_DIM, init_head, save_head
    from .ssl_trainer import TrainConfig, train, write_loss_trace

    seed = _resolve_seed(args.seed)
    manifest = DatasetManifest.load(args.manifest)
    book = load_clusterbook(args.book)
    config = TrainConfig(
        phi_pos=args.phi_pos, phi_neg=args.phi_neg, tau_nce=args.tau_nce,
        lr=args.lr, ema_rate=args.ema_rate, epochs=args.epochs,
        window=args.window, stride=args.stride,
        bank_capacity=args.bank_capacity, seed=seed,
    )
    head = init_head(book.c, args.out_dim, RngStream(seed, "head-init"))
    result = train(manifest, book, head, None, config)
    out = Path(args.out)
    save_head(result.head, result.teacher, out)
    trace_path = out.with_suffix(out.suffix + ".loss.tsv")
    write_loss_trace(result.trace, trace_path)
    params = {k: v for k, v in vars(args).items() if k != "func"}
    _write_run_manifest(out, "train", params, seed,
                        [args.manifest, args.book], [str(out), str(trace_path)])
    print(f"trained head for {args.epochs} epoch(s); "
          f"final mean loss {result.trace[-1].mean_loss:.4f}")
    return EXIT_OK


def _infer_maps(manifest, head_path, n_classes, probe_iters, crf_params, seed,
                split="val", use_teacher=True):
    """Shared by infer and pipeline: returns (image_ids, predicted maps)."""
    import numpy as np

    from .crf import crf_refine
    from .feature_io import read_feature_file
    from .inference_eval import fit_cluster_probe, predict_labels
    from .rng import RngStream
    from .seg_head import head_forward, load_head

    student, teacher = load_head(head_path)
    head = teacher.params if use_teacher else student
    records = [read_feature_file(p) for p in manifest.record_paths(split)]
    if not records:
        raise ValueError(f"manifest has no {split} records")
    outputs = []
    for record in records:
        y, _ = head_forward(record.features, head, mode="infer")
        outputs.append(y)
    pooled = np.vstack(outputs)
    probe = fit_cluster_probe(pooled, n_classes, iters=probe_iters,
                              rng=RngStream(seed, "probe"))
    ids, maps = [], []
    for record, y in zip(records, outputs):
        if record.labels is not None:
            img_h, img_w = record.labels.height, record.labels.width
        elif record.rgb is not None:
            img_h, img_w = record.rgb.shape[:2]
        else:
            img_h, img_w = record.h, record.w
        grid = y.reshape(record.h, record.w, -1)
        pred = predict_labels(grid, probe, img_h, img_w)
        if record.rgb is not None:
            pred = crf_refine(record.rgb, pred, n_classes, crf_params)
        else:
            log.warning("record %s has no rgb; skipping CRF", record.image_id)
        ids.append(record.image_id)
        maps.append(pred)
    return ids, maps


def _crf_params_from_args(args):
    from .crf import CrfParams

    return CrfParams(
        appearance_weight=args.crf_w1, spatial_std=args.crf_theta_alpha,
        color_std=args.crf_theta_beta, smoothness_weight=args.crf_w2,
        smoothness_std=args.crf_theta_gamma, steps=args.crf_steps,
        confidence=args.crf_confidence, max_pixels=args.crf_max_pixels,
    )


def cmd_infer(args) -> int:
    from .feature_io import DatasetManifest
    from .inference_eval import write_label_file, write_label_png

    seed = _resolve_seed(args.seed)
    manifest = DatasetManifest.load(args.manifest)
    n_classes = args.classes or manifest.classes
    ids, maps = _infer_maps(manifest, args.head, n_classes, args.probe_iters,
                            _crf_params_from_args(args), seed, split=args.split)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for image_id, pred in zip(ids, maps):
        raw = out_dir / f"{image_id}.caulab"
        png = out_dir / f"{image_id}.png"
        write_label_file(pred, raw)
        write_label_png(pred, n_classes, png)
        outputs.extend([str(raw), str(png)])
    params = {k: v for k, v in vars(args).items() if k != "func"}
    _write_run_manifest(out_dir / "predictions", "infer", params, seed,
                        [args.manifest, args.head], outputs)
    print(f"wrote {len(ids)} predicted label maps to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .feature_io import DatasetManifest, read_feature_file
    from .inference_eval import evaluate, read_label_file

    manifest = DatasetManifest.load(args.manifest)
    n_classes = args.classes or manifest.classes
    preds, gts = [], []
    for path in manifest.record_paths(args.split):
        record = read_feature_file(path)
        if record.labels is None:
            log.warning("record %s has no ground truth; skipped", record.image_id)
            continue
        pred_path = Path(args.pred_dir) / f"{record.image_id}.caulab"
        preds.append(read_label_file(pred_path))
        gts.append(record.labels)
    report = evaluate(preds, gts, n_classes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    out.with_suffix(".tsv").write_text(report.to_tsv())
    print(f"mIoU {report.miou:.4f}  pAcc {report.pacc:.4f}  "
          f"({report.n_pixels} pixels)")
    return EXIT_OK


def cmd_probe(args) -> int:
    import numpy as np

    from .feature_io import DatasetManifest, majority_downsample, read_feature_file
    from .inference_eval import LinearProbeConfig, linear_probe
    from .seg_head import head_forward, load_head

    seed = _resolve_seed(args.seed)
    manifest = DatasetManifest.load(args.manifest)
    _, teacher = load_head(args.head)

    def collect(split):
        xs, ys = [], []
        for path in manifest.record_paths(split):
            record = read_feature_file(path)
            if record.labels is None:
                continue
            y, _ = head_forward(record.features, teacher.params, mode="infer")
            xs.append(y)
            ys.append(majority_downsample(record.labels, record.h, record.w).reshape(-1))
        if not xs:
            raise ValueError(f"no labeled {split} records")
        return np.vstack(xs), np.concatenate(ys)

    train_x, train_y = collect("train")
    val_x, val_y = collect("val")
    config = LinearProbeConfig(lr=args.lr, epochs=args.epochs, seed=seed)
    report = linear_probe(train_x, train_y, val_x, val_y, manifest.classes, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    out.with_suffix(".tsv").write_text(report.to_tsv())
    print(f"linear probe: mIoU {report.miou:.4f}  pAcc {report.pacc:.4f}")
    return EXIT_OK


_PIPELINE_STAGES = ("generate", "build-book", "train", "infer", "eval")


class _StageFailure(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def run_pipeline(config: dict, out_dir: Path) -> dict:
    """gen/load -> build-book -> train -> infer -> eval; returns metrics doc."""
    import numpy as np

    from .clusterbook import (
        fit_clusterbook,
        fit_clusterbook_kmeanspp,
        load_clusterbook,
        save_clusterbook,
    )
    from .crf import CrfParams
    from .feature_io import DatasetManifest, SynthSpec, generate_synthetic_dataset, read_feature_file
    from .inference_eval import evaluate, write_label_file, write_label_png
    from .rng import RngStream
    from .seg_head import DEFAULT_OUT_DIM, init_head, save_head
    from .ssl_trainer import TrainConfig, train, write_loss_trace

    seed = _resolve_seed(int(config.get("seed", 0)))
    out_dir.mkdir(parents=True, exist_ok=True)

    def stage(name):
        class _Ctx:
            def __enter__(self):
                log.info("pipeline stage: %s", name)

            def __exit__(self, exc_type, exc, tb):
                if exc is not None and not isinstance(exc, _StageFailure):
                    raise _StageFailure(name, exc) from exc
        return _Ctx()

    with stage("generate"):
        if "manifest" in config:
            manifest = DatasetManifest.load(config["manifest"])
        else:
            synth = dict(config["synth"])
            val_fraction = synth.pop("val_fraction", 0.2)
            grid = synth.pop("grid")
            spec = SynthSpec(grid=(int(grid[0]), int(grid[1])), seed=seed, **synth)
            manifest = generate_synthetic_dataset(spec, out_dir / "data",
                                                  val_fraction=val_fraction)

    with stage("build-book"):
        book_cfg = dict(config.get("book", {}))
        method = book_cfg.pop("method", "modularity")
        rng = RngStream(seed, "clusterbook")
        if method == "modularity":
            book = fit_clusterbook(manifest, rng=rng, **book_cfg)
        elif method == "kmeanspp":
            book_cfg.pop("tau_mod", None)
            book_cfg.pop("lr", None)
            book = fit_clusterbook_kmeanspp(manifest, rng=rng, **book_cfg)
        else:
            raise ValueError(f"unknown book method {method!r}")
        book_path = out_dir / "book.causebook"
        save_clusterbook(book, book_path)

    with stage("train"):
        train_cfg = dict(config.get("train", {}))
        out_dim = int(train_cfg.pop("out_dim", DEFAULT_OUT_DIM))
        tconfig = TrainConfig(seed=seed, **train_cfg)
        head = init_head(book.c, out_dim, RngStream(seed, "head-init"))
        result = train(manifest, book, head, None, tconfig)
        head_path = out_dir / "head.causehead"
        save_head(result.head, result.teacher, head_path)
        write_loss_trace(result.trace, out_dir / "loss.tsv")

    with stage("infer"):
        crf_params = CrfParams(**config.get("crf", {}))
        ids, maps = _infer_maps(manifest, head_path, manifest.classes,
                                int(config.get("probe_iters", 50)),
                                crf_params, seed)
        pred_dir = out_dir / "predictions"
        pred_dir.mkdir(exist_ok=True)
        for image_id, pred in zip(ids, maps):
            write_label_file(pred, pred_dir / f"{image_id}.caulab")
            write_label_png(pred, manifest.classes, pred_dir / f"{image_id}.png")

    with stage("eval"):
        gts = []
        for path in manifest.record_paths("val"):
            record = read_feature_file(path)
            gts.append(record.labels)
        report = evaluate(maps, gts, manifest.classes)
        metrics_path = out_dir / "metrics.json"
        metrics_path.write_text(report.to_json())
        (out_dir / "metrics.tsv").write_text(report.to_tsv())

    _write_run_manifest(metrics_path, "pipeline", config, seed,
                        [config["manifest"]] if "manifest" in config else [],
                        [str(metrics_path)])
    return json.loads(report.to_json())


def cmd_pipeline(args) -> int:
    config_path = Path(args.config)
    try:
        config = json.loads(config_path.read_text())
    except OSError as exc:
        log.error("cannot read pipeline config: %s", exc)
        return EXIT_IO
    out_dir = Path(args.out_dir or config.get("out_dir", "pipeline-out"))
    metrics = run_pipeline(config, out_dir)
    print(f"pipeline done: mIoU {metrics['mIoU']:.4f}  pAcc {metrics['pAcc']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="causeseg",
        description="Two-stage unsupervised semantic segmentation over "
                    "pre-extracted patch features.",
    )
    parser.add_argument("--threads", type=int, default=0,
                        help="cap BLAS/numba worker threads (0 = library default)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", formatter_class=fmt,
                       help="generate the synthetic granularity dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--subconcepts", type=int, default=3)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--grid", default="16x16")
    p.add_argument("--images", type=int, default=250)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--separation", type=float, default=25.0,
                   help="minimum pairwise prototype angle, degrees")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("build-book", formatter_class=fmt,
                       help="fit the concept codebook")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=2048, help="number of concept prototypes")
    p.add_argument("--tau-mod", type=float, default=0.1,
                   help="tanh temperature of the modularity objective")
    p.add_argument("--lr", type=float, default=0.001,
                   help="Adam learning rate")
    p.add_argument("--method", choices=("modularity", "kmeanspp"),
                   default="modularity")
    p.add_argument("--kmeans-iters", type=int, default=20)
    p.add_argument("--optimizer", choices=("adam", "adamw"), default="adam")
    p.add_argument("--weight-decay", type=float, default=0.01,
                   help="decoupled weight decay (adamw only)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_book)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="contrastive training of the segmentation head")
    p.add_argument("--manifest", required=True)
    p.add_argument("--book", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=1,
                   help="passes over the train split")
    p.add_argument("--phi-pos", type=float, default=0.3,
                   help="positive relaxation threshold")
    p.add_argument("--phi-neg", type=float, default=0.1,
                   help="negative relaxation threshold")
    p.add_argument("--tau-nce", type=float, default=0.1,
                   help="contrastive temperature")
    p.add_argument("--lr", type=float, default=0.001,
                   help="Adam learning rate")
    p.add_argument("--ema-rate", type=float, default=0.99,
                   help="teacher update rate")
    p.add_argument("--bank-capacity", type=int, default=100,
                   help="stored rows per concept")
    p.add_argument("--window", type=int, default=4,
                   help="anchor sampling window size")
    p.add_argument("--stride", type=int, default=4,
                   help="anchor sampling window stride")
    p.add_argument("--out-dim", type=int, default=90,
                   help="head output dimension")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", formatter_class=fmt,
                       help="predict label maps for a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--classes", type=int, default=0,
                   help="override manifest class count")
    p.add_argument("--probe-iters", type=int, default=50,
                   help="Lloyd iterations for the cluster probe")
    p.add_argument("--crf-steps", type=int, default=10,
                   help="mean-field iterations")
    p.add_argument("--crf-w1", type=float, default=10.0,
                   help="appearance kernel weight")
    p.add_argument("--crf-theta-alpha", type=float, default=80.0,
                   help="appearance spatial std, px")
    p.add_argument("--crf-theta-beta", type=float, default=13.0,
                   help="appearance color std")
    p.add_argument("--crf-w2", type=float, default=3.0,
                   help="smoothness kernel weight")
    p.add_argument("--crf-theta-gamma", type=float, default=3.0,
                   help="smoothness spatial std, px")
    p.add_argument("--crf-confidence", type=float, default=0.9,
                   help="unary confidence of predicted labels")
    p.add_argument("--crf-max-pixels", type=int, default=20000,
                   help="dense message-passing pixel budget")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="score predicted label maps against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--out", default="metrics.json")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--classes", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", formatter_class=fmt,
                       help="linear probing of frozen head outputs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--out", default="probe_metrics.json")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("pipeline", formatter_class=fmt,
                       help="run generate/build/train/infer/eval end to end")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # Thread caps must land before numpy/numba are imported anywhere.
    if "--threads" in argv:
        idx = argv.index("--threads")
        if idx + 1 < len(argv) and argv[idx + 1].isdigit() and int(argv[idx + 1]) > 0:
            n = argv[idx + 1]
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
                os.environ.setdefault(var, n)

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )

    from .errors import ArtifactIOError, NumericError, ValidationError

    try:
        return args.func(args)
    except _StageFailure as exc:
        log.error("%s", exc)
        cause = exc.cause
        if isinstance(cause, (ArtifactIOError, FileNotFoundError, OSError)):
            return EXIT_IO
        if isinstance(cause, NumericError):
            return EXIT_NUMERIC
        if isinstance(cause, (ValidationError, ValueError)):
            return EXIT_VALIDATION
        raise cause
    except (ArtifactIOError, FileNotFoundError) as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ValidationError, ValueError) as exc:
        log.error("validation failure: %s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
