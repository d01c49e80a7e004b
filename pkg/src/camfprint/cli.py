"""``camfprint`` command line: ingest, train, extract, match, evaluate, plot."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as C
from .config import ExperimentConfig, default_output_dir
from .data import (
    Manifest,
    ManifestError,
    SynthConfig,
    build_manifest,
    filter_min_images,
    generate_synthetic,
    load_image,
    stratified_split,
)
from .evaluation import (
    EvaluationError,
    SimilarityMatrix,
    overall_accuracy,
    render_heatmap,
    same_model_report,
    similarity_matrix,
)
from .signature import (
    Signature,
    build_signature_net,
    extract_signatures,
    load_checkpoint,
    save_checkpoint,
    train_phase1,
    truncate,
)
from .similarity import (
    SimilarityNetSpec,
    Threshold,
    build_similarity_net,
    load_similarity,
    make_pairs,
    save_similarity,
    score,
    select_threshold,
    symmetry_gap,
    train_phase2,
    write_pair_file,
)
from .store import SignatureStore, StoreRecord

logger = logging.getLogger("camfprint")

EXIT_ERROR = 1
EXIT_BELOW_FLOOR = 3


class CommandError(RuntimeError):
    pass


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=1) if args.json else text)


def _load_config(args) -> ExperimentConfig:
    """``--config`` wins, then ``<output_dir>/config.json``, then defaults;
    global flags override whichever was loaded."""
    out = args.output_dir or default_output_dir()
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if args.output_dir or cfg.output_dir == "runs/default":
            cfg.output_dir = out
    elif (Path(out) / C.CONFIG).exists():
        cfg = ExperimentConfig.load(Path(out) / C.CONFIG)
        cfg.output_dir = out
    else:
        cfg = ExperimentConfig(output_dir=out)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError(f"{what} not found at {path}; run the upstream command first")
    return path


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CommandError(f"{path} exists; pass --force to recompute it")


def _write_jsonl(path: Path, rows) -> None:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


# --------------------------------------------------------------------------
# ingest


def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    if args.input_size:
        cfg.input_size = tuple(args.input_size)
    if args.train_frac is not None:
        cfg.train_frac = args.train_frac
    if args.val_frac is not None:
        cfg.val_frac = args.val_frac
    _guard(cfg.manifest_file, args.force)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.dresden:
        cfg.dresden_root = args.dresden
        manifest = build_manifest(args.dresden, seed=cfg.seed)
    elif args.synthetic or cfg.synth is not None:
        synth = cfg.synth or SynthConfig()
        overrides = {
            "n_devices": args.devices,
            "images_per_device": args.per_device,
            "image_size": tuple(args.image_size) if args.image_size else None,
            "prnu_strength": args.prnu,
            "fpn_strength": args.fpn,
            "shot_noise_scale": args.shot,
        }
        synth = replace(synth, **{k: v for k, v in overrides.items() if v is not None})
        synth = replace(synth, seed=cfg.stage_seed("synthetic"))
        cfg.synth = synth
        manifest = generate_synthetic(synth, out / "synthetic")
    elif cfg.dresden_root:
        manifest = build_manifest(cfg.dresden_root, seed=cfg.seed)
    else:
        raise CommandError("choose --dresden ROOT or --synthetic")

    n_before = len(manifest.devices)
    manifest = filter_min_images(manifest, cfg.min_images)
    manifest = stratified_split(manifest, cfg.train_frac, cfg.stage_seed("split"), cfg.val_frac)
    manifest.save(cfg.manifest_file)
    cfg.save()
    counts = {s: len(manifest.select(s)) for s in ("train", "val", "test")}
    payload = {
        "manifest": str(cfg.manifest_file),
        "devices": len(manifest.devices),
        "dropped_devices": n_before - len(manifest.devices),
        "images": len(manifest),
        **counts,
    }
    _emit(
        args,
        payload,
        f"{len(manifest)} images from {len(manifest.devices)} devices "
        f"({n_before - len(manifest.devices)} dropped); train {counts['train']}, "
        f"val {counts['val']}, test {counts['test']} -> {cfg.manifest_file}",
    )
    return 0


# --------------------------------------------------------------------------
# train / extract


def _load_extractor(cfg: ExperimentConfig):
    model, mean, blob = load_checkpoint(_require(cfg.path(C.PHASE1_CKPT), "phase-1 checkpoint"))
    return truncate(model, mean), blob


def _ensure_signatures(cfg: ExperimentConfig, manifest: Manifest, records, f_sig) -> List[int]:
    """Store ids for ``records``, extracting only those not yet stored."""
    store = SignatureStore(cfg.path(C.STORE))
    version = f_sig.version
    missing = [r for r in records if store.find(r.path, version) is None]
    if missing:
        logger.info("extracting %d signatures", len(missing))
        sigs = extract_signatures(f_sig, missing, cfg.phase1.batch_size)
        with store.batch():
            for s in sigs:
                store.put(StoreRecord(s.source, s.device_id, version, s.values))
    return [store.find(r.path, version) for r in records]


def _signatures_from_store(store: SignatureStore, ids: List[int]) -> List[Signature]:
    out = []
    for i in ids:
        rec = store.get(i)
        out.append(Signature(rec.values, rec.image_path, rec.device_id, rec.extractor_version))
    return out


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = Manifest.load(_require(cfg.manifest_file, "manifest"))
    if args.phase == 1:
        overrides = {
            "epochs": args.epochs,
            "stop_epoch": args.stop_epoch,
            "learning_rate": args.lr,
            "batch_size": args.batch_size,
        }
        cfg.phase1 = replace(cfg.phase1, **{k: v for k, v in overrides.items() if v is not None})
        if args.input_size:
            cfg.input_size = tuple(args.input_size)
        ckpt = cfg.path(C.PHASE1_CKPT)
        _guard(ckpt, args.force)
        p1 = replace(cfg.phase1, seed=cfg.stage_seed("phase1"))
        model = build_signature_net(len(manifest.devices), cfg.input_size, seed=p1.seed)
        result = train_phase1(model, manifest, p1)
        save_checkpoint(ckpt, result.model, result.channel_mean, result.epoch, manifest.devices, p1)
        _write_jsonl(cfg.path(C.PHASE1_LOG), result.log)
        cfg.save()
        last = result.log[result.epoch - 1]
        payload = {"checkpoint": str(ckpt), "epoch": result.epoch, **last,
                   "extractor_version": result.extractor.version}
        _emit(args, payload, f"phase 1: kept epoch {result.epoch} "
              f"(train_acc {last['train_acc']:.3f}, val_acc {last['val_acc']}) -> {ckpt}")
        return 0

    overrides = {"epochs": args.epochs, "learning_rate": args.lr, "batch_size": args.batch_size,
                 "pair_sampling": args.pair_sampling}
    cfg.phase2 = replace(cfg.phase2, **{k: v for k, v in overrides.items() if v is not None})
    ckpt = cfg.path(C.PHASE2_CKPT)
    _guard(ckpt, args.force)
    f_sig, _ = _load_extractor(cfg)
    pool = manifest.select("train", "val")
    ids = _ensure_signatures(cfg, manifest, pool, f_sig)
    store = SignatureStore(cfg.path(C.STORE))
    sigs = _signatures_from_store(store, ids)
    p2 = replace(cfg.phase2, seed=cfg.stage_seed("phase2"))
    pairs = make_pairs(sigs, p2.pair_sampling, p2.seed)
    is_val = np.array([r.split == "val" for r in pool])
    train_pairs, val_pairs = pairs.split_by_members(is_val)
    write_pair_file(cfg.path(C.PAIRS), train_pairs, ids)
    write_pair_file(cfg.path(C.VAL_PAIRS), val_pairs, ids)
    model = build_similarity_net(SimilarityNetSpec(hidden_units=cfg.hidden_units), seed=p2.seed)
    result = train_phase2(model, train_pairs, p2, val_pairs if len(val_pairs) else None)
    save_similarity(ckpt, result.model, p2)
    _write_jsonl(cfg.path(C.PHASE2_LOG), result.log)
    threshold = select_threshold(result.model, val_pairs if len(val_pairs) else train_pairs,
                                 cfg.eval.grid)
    threshold.save(cfg.path(C.THRESHOLD))
    cfg.save()
    payload = {"checkpoint": str(ckpt), "train_pairs": len(train_pairs),
               "val_pairs": len(val_pairs), "eta": threshold.eta,
               "selection_f1": threshold.selection_f1}
    _emit(args, payload, f"phase 2: {len(train_pairs)} training pairs, eta={threshold.eta} "
          f"(validation F1 {threshold.selection_f1:.3f}) -> {ckpt}")
    return 0


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    manifest = Manifest.load(_require(cfg.manifest_file, "manifest"))
    f_sig, _ = _load_extractor(cfg)
    records = manifest.select(*(args.split or ["train", "val", "test"]))
    ids = _ensure_signatures(cfg, manifest, records, f_sig)
    _emit(args, {"store": str(cfg.path(C.STORE)), "signatures": len(ids),
                 "extractor_version": f_sig.version},
          f"{len(ids)} signatures in {cfg.path(C.STORE)}")
    return 0


# --------------------------------------------------------------------------
# match / evaluate / plot


def cmd_match(args) -> int:
    cfg = _load_config(args)
    f_sig, _ = _load_extractor(cfg)
    f_sim = load_similarity(_require(cfg.path(C.PHASE2_CKPT), "phase-2 checkpoint"))
    threshold = Threshold.load(_require(cfg.path(C.THRESHOLD), "threshold artifact"))
    version = f_sig.version
    sigs = []
    for path in (args.image_a, args.image_b):
        pixels = load_image(path, f_sig.input_size)
        sigs.append(Signature(f_sig.extract(pixels[None])[0], str(path), "", version))
    value = score(f_sim, sigs[0], sigs[1])
    same = value >= threshold.eta
    verdict = "SAME" if same else "DIFFERENT"
    payload = {"image_a": str(args.image_a), "image_b": str(args.image_b), "score": value,
               "eta": threshold.eta, "verdict": verdict}
    _emit(args, payload, f"score {value:.6f} (eta {threshold.eta}) -> {verdict}")
    return 0


def _test_symmetry(store, version, records, f_sim, seed, max_pairs=5000) -> dict:
    S = np.stack([store.get(store.find(r.path, version)).values for r in records])
    left, right = np.triu_indices(len(S), k=1)
    if len(left) > max_pairs:
        keep = np.random.default_rng([seed, 2]).choice(len(left), max_pairs, replace=False)
        left, right = left[np.sort(keep)], right[np.sort(keep)]
    return symmetry_gap(f_sim, S[left], S[right])


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    if args.n_pairs is not None:
        cfg.eval.n_pairs_per_cell = args.n_pairs
    if args.floor is not None:
        cfg.eval.floor = args.floor
    manifest = Manifest.load(_require(cfg.manifest_file, "manifest"))
    f_sig, _ = _load_extractor(cfg)
    f_sim = load_similarity(_require(cfg.path(C.PHASE2_CKPT), "phase-2 checkpoint"))
    threshold = Threshold.load(_require(cfg.path(C.THRESHOLD), "threshold artifact"))
    test = manifest.select("test")
    _ensure_signatures(cfg, manifest, test, f_sig)
    store = SignatureStore(cfg.path(C.STORE))
    seed = cfg.eval.seed if cfg.eval.seed is not None else cfg.stage_seed("eval")
    matrix = similarity_matrix(
        store, f_sim, manifest.devices, cfg.eval.n_pairs_per_cell, threshold.eta, seed,
        extractor_version=f_sig.version, paths={r.path for r in test},
    )
    report = overall_accuracy(matrix)
    report.symmetry = _test_symmetry(store, f_sig.version, test, f_sim, seed)
    diag = same_model_report(report)
    eval_dir = cfg.path(C.EVAL_DIR)
    eval_dir.mkdir(parents=True, exist_ok=True)
    (eval_dir / "report.json").write_text(report.to_json())
    (eval_dir / "matrix.csv").write_text(matrix.to_csv())
    (eval_dir / "same_model.json").write_text(json.dumps(diag.to_dict(), indent=1) + "\n")
    render_heatmap(matrix, eval_dir / "heatmap.png")
    cfg.save()
    payload = {"overall_accuracy": report.overall_accuracy,
               "diagonal_mean": matrix.diagonal_mean, "devices": len(matrix.devices),
               "eta": threshold.eta, "floor": cfg.eval.floor, "report": str(eval_dir / "report.json")}
    _emit(args, payload, f"overall accuracy {report.overall_accuracy:.4f} "
          f"(diagonal mean {matrix.diagonal_mean:.4f}) over {len(matrix.devices)}x"
          f"{len(matrix.devices)} cells -> {eval_dir}")
    if report.overall_accuracy < cfg.eval.floor:
        logger.error("overall accuracy %.4f below floor %.4f", report.overall_accuracy, cfg.eval.floor)
        return EXIT_BELOW_FLOOR
    return 0


def cmd_plot(args) -> int:
    cfg = _load_config(args)
    src = Path(args.report) if args.report else cfg.path(C.EVAL_DIR) / "report.json"
    raw = json.loads(_require(src, "evaluation report").read_text())["matrix"]
    matrix = SimilarityMatrix(raw["devices"], np.array(raw["cells"]), raw["n_pairs_per_cell"],
                              raw["eta"], raw["seed"])
    out = Path(args.out) if args.out else src.parent / "heatmap.png"
    render_heatmap(matrix, out)
    _emit(args, {"heatmap": str(out)}, f"heatmap -> {out}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--output-dir", help=f"artifact directory (default ${C.OUTPUT_DIR_ENV} or runs/default)")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--force", action="store_true", help="recompute existing artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="camfprint", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("ingest", parents=[common], help="build manifest and split")
    src = q.add_mutually_exclusive_group()
    src.add_argument("--dresden", metavar="ROOT", help="Dresden JPEG directory")
    src.add_argument("--synthetic", action="store_true", help="generate synthetic cameras")
    q.add_argument("--devices", type=int)
    q.add_argument("--per-device", type=int)
    q.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"))
    q.add_argument("--prnu", type=float)
    q.add_argument("--fpn", type=float)
    q.add_argument("--shot", type=float)
    q.add_argument("--train-frac", type=float)
    q.add_argument("--val-frac", type=float)
    q.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"))
    q.set_defaults(func=cmd_ingest)

    q = sub.add_parser("train", parents=[common], help="train phase 1 or phase 2")
    q.add_argument("--phase", type=int, choices=(1, 2), required=True)
    q.add_argument("--epochs", type=int)
    q.add_argument("--stop-epoch", type=int)
    q.add_argument("--lr", type=float)
    q.add_argument("--batch-size", type=int)
    q.add_argument("--pair-sampling", choices=("all", "balanced"))
    q.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"))
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("extract", parents=[common], help="store signatures for the manifest")
    q.add_argument("--split", action="append", choices=("train", "val", "test"))
    q.set_defaults(func=cmd_extract)

    q = sub.add_parser("match", parents=[common], help="score two images")
    q.add_argument("image_a")
    q.add_argument("image_b")
    q.set_defaults(func=cmd_match)

    q = sub.add_parser("evaluate", parents=[common], help="device similarity matrix")
    q.add_argument("--n-pairs", type=int)
    q.add_argument("--floor", type=float, help="exit non-zero below this accuracy")
    q.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("plot", parents=[common], help="render the heatmap from a report")
    q.add_argument("--report")
    q.add_argument("--out")
    q.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (CommandError, ManifestError, EvaluationError, ValueError, OSError) as exc:
        print(f"camfprint {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
