"""Command-line pipeline: synth -> pretrain -> fit-padim/fit-igd -> score ->
eval -> report, plus gradcheck and the ablation sweeps.

Every artifact carries the config hash; consumers refuse mixed hashes
unless --allow-hash-mismatch is given. Exit codes: 0 ok, 2 config error,
3 missing artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import detect as detect_mod
from . import evalkit, gradcheck, synth
from .config import RunConfig, config_hash, dump_config, load_config
from .dataset import DatasetOnDisk, load_dataset
from .errors import ConfigError, MissingArtifactError, NumericError, PmsaclError
from .network import load_checkpoint, pretrain, save_checkpoint, encoder_from_checkpoint
from .numerics import RngStream, read_tensor, write_tensor

log = logging.getLogger("pmsacl")

DETECTORS = ("padim", "igd")


def _dataset_path(out: Path) -> Path:
    return out / "dataset"


def _require_dataset(out: Path) -> DatasetOnDisk:
    path = _dataset_path(out)
    if not (path / "manifest.jsonl").exists():
        raise MissingArtifactError(f"no dataset at {path}; run `pmsacl synth` first")
    return load_dataset(path)


def _check_hash(artifact_hash: bytes | str, cfg: RunConfig, what: str, allow: bool) -> None:
    current = config_hash(cfg).hex()
    found = artifact_hash.hex() if isinstance(artifact_hash, bytes) else str(artifact_hash)
    if found != current:
        message = f"{what} was produced under config hash {found[:12]}, current is {current[:12]}"
        if not allow:
            raise ConfigError(message + " (pass --allow-hash-mismatch to proceed)")
        log.warning("%s -- proceeding due to --allow-hash-mismatch", message)


def cmd_synth(cfg: RunConfig, out: Path, args) -> int:
    ds = synth.synth_generate(cfg, _dataset_path(out), hard=args.hard)
    log.info("dataset written to %s (%d items, hard=%s)", ds.root, len(ds.items), args.hard)
    return 0


def cmd_pretrain(cfg: RunConfig, out: Path, args) -> int:
    ds = _require_dataset(out)
    _check_hash(ds.meta.get("config_hash", ""), cfg, "dataset", args.allow_hash_mismatch)
    train = ds.train_images()
    ckpt = pretrain(
        dataset=train,
        aug_cfg=cfg.aug,
        switches=cfg.loss.switches(),
        schedule=cfg.loss.schedule(),
        encoder_cfg=cfg.encoder.encoder_cfg(),
        train_cfg=cfg.encoder.train_cfg(cfg.loss),
        rng=RngStream(cfg.seed, "pretrain"),
        config_hash=config_hash(cfg),
    )
    path = out / "encoder.pmck"
    save_checkpoint(path, ckpt)
    final = {k: v[-1] for k, v in ckpt.trailer["loss_curves"].items() if v}
    log.info("checkpoint written to %s (final losses: %s)", path, final)
    return 0


def _load_encoder_checkpoint(cfg: RunConfig, out: Path, allow: bool):
    path = out / "encoder.pmck"
    if not path.exists():
        raise MissingArtifactError(f"no encoder checkpoint at {path}; run `pmsacl pretrain` first")
    ckpt = load_checkpoint(path)
    _check_hash(ckpt.config_hash, cfg, "encoder checkpoint", allow)
    return ckpt


def cmd_fit_padim(cfg: RunConfig, out: Path, args) -> int:
    ds = _require_dataset(out)
    ckpt = _load_encoder_checkpoint(cfg, out, args.allow_hash_mismatch)
    encoder = encoder_from_checkpoint(ckpt)
    train_images = np.stack([img for _, img in ds.train_images()]).astype(np.float32)
    grids = detect_mod.extract_patch_features(encoder, train_images)
    model = detect_mod.padim_fit(
        grids,
        eps=cfg.detect.padim_eps,
        subset_size=cfg.detect.padim_subset,
        rng=RngStream(cfg.seed, "padim"),
        config_hash=config_hash(cfg),
    )
    path = out / "padim.pmdm"
    detect_mod.save_patch_model(path, model)
    log.info("patch model written to %s (grid %s, dim %d)", path, model.grid_hw, model.mean.shape[1])
    return 0


def cmd_fit_igd(cfg: RunConfig, out: Path, args) -> int:
    ds = _require_dataset(out)
    ckpt = _load_encoder_checkpoint(cfg, out, args.allow_hash_mismatch)
    model = detect_mod.igd_fit(
        ckpt,
        ds.train_images(),
        cfg.detect.igd_cfg(),
        RngStream(cfg.seed, "igd"),
        config_hash=config_hash(cfg),
    )
    path = out / "igd.pmck"
    detect_mod.save_igd(path, model)
    log.info("detector written to %s (rec curve tail: %.4f)", path, model.curves["rec"][-1])
    return 0


def cmd_score(cfg: RunConfig, out: Path, args) -> int:
    ds = _require_dataset(out)
    detector = args.detector
    items = [it for it in ds.items if it.split in ("val", "test")]
    maps_dir = out / f"maps_{detector}"
    maps_dir.mkdir(parents=True, exist_ok=True)

    if detector == "padim":
        model = detect_mod.load_patch_model(out / "padim.pmdm") if (out / "padim.pmdm").exists() else None
        if model is None:
            raise MissingArtifactError(f"no patch model at {out / 'padim.pmdm'}; run `pmsacl fit-padim`")
        _check_hash(model.config_hash, cfg, "patch model", args.allow_hash_mismatch)
        ckpt = _load_encoder_checkpoint(cfg, out, args.allow_hash_mismatch)
        encoder = encoder_from_checkpoint(ckpt)
        images = np.stack([it.load_image() for it in items]).astype(np.float32)
        grids = detect_mod.extract_patch_features(encoder, images)
        score_maps = detect_mod.padim_score_batch(model, grids)
        scored = [(it, sm.image_score, sm.pixel_scores) for it, sm in zip(items, score_maps)]
    else:
        path = out / "igd.pmck"
        if not path.exists():
            raise MissingArtifactError(f"no detector checkpoint at {path}; run `pmsacl fit-igd`")
        model = detect_mod.load_igd(path)
        _check_hash(model.config_hash, cfg, "detector checkpoint", args.allow_hash_mismatch)
        scored = []
        for it in items:
            score, sm = detect_mod.igd_score(model, it.load_image().astype(np.float32))
            scored.append((it, score, sm.pixel_scores))

    records = []
    for it, score, pixel_map in scored:
        rec = {"id": it.item_id, "split": it.split, "label": it.label, "score": float(score)}
        if it.label == "abnormal":
            map_rel = f"maps_{detector}/{it.item_id}.pmt"
            write_tensor(out / map_rel, pixel_map.astype(np.float32))
            rec["map_path"] = map_rel
        records.append(rec)
    payload = {
        "config_hash": config_hash(cfg).hex(),
        "detector": detector,
        "seed": cfg.seed,
        "items": records,
    }
    path = out / f"scores_{detector}.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    log.info("scores for %d items written to %s", len(records), path)
    return 0


def _load_scores(cfg: RunConfig, out: Path, detector: str, allow: bool) -> dict:
    path = out / f"scores_{detector}.json"
    if not path.exists():
        raise MissingArtifactError(f"no scores at {path}; run `pmsacl score --detector {detector}`")
    payload = json.loads(path.read_text())
    _check_hash(payload.get("config_hash", ""), cfg, "scores artifact", allow)
    return payload


def _scored_items(payload: dict, split: str) -> list[evalkit.ScoredItem]:
    return [
        evalkit.ScoredItem(r["id"], float(r["score"]), r["label"])
        for r in payload["items"]
        if r["split"] == split
    ]


def _segmentation_inputs(ds: DatasetOnDisk, payload: dict, out: Path, split: str):
    by_id = {it.item_id: it for it in ds.items}
    masks, maps, ids = [], [], []
    for rec in payload["items"]:
        if rec["split"] != split or rec["label"] != "abnormal" or "map_path" not in rec:
            continue
        item = by_id[rec["id"]]
        mask = item.load_mask()
        if mask is None:
            continue
        masks.append(mask)
        maps.append(read_tensor(out / rec["map_path"]).astype(np.float64))
        ids.append(rec["id"])
    return ids, maps, masks


def _dice_threshold(maps: list[np.ndarray], masks: list[np.ndarray], candidates: int) -> float:
    pool = np.concatenate([m.reshape(-1) for m in maps])
    qs = np.quantile(pool, np.linspace(0.05, 0.995, candidates))
    best_thr, best_dice = float(qs[0]), -1.0
    for thr in np.unique(qs):
        dices = [evalkit.iou_dice(m >= thr, g)[1] for m, g in zip(maps, masks)]
        mean_dice = float(np.mean(dices))
        if mean_dice >= best_dice:
            best_dice, best_thr = mean_dice, float(thr)
    return best_thr


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    ds = _require_dataset(out)
    payload = _load_scores(cfg, out, args.detector, args.allow_hash_mismatch)
    _check_hash(ds.meta.get("config_hash", ""), cfg, "dataset", args.allow_hash_mismatch)
    val_items = _scored_items(payload, "val")
    test_items = _scored_items(payload, "test")
    threshold = evalkit.select_threshold(val_items)
    auc = evalkit.auroc(test_items)
    specificity, sensitivity, accuracy = evalkit.confusion_metrics(test_items, threshold)
    report = evalkit.EvalReport(
        detector=args.detector, seed=cfg.seed, auroc=auc,
        specificity=specificity, sensitivity=sensitivity, accuracy=accuracy,
        threshold=threshold, config_hash=payload["config_hash"],
    )

    val_ids, val_maps, val_masks = _segmentation_inputs(ds, payload, out, "val")
    test_ids, test_maps, test_masks = _segmentation_inputs(ds, payload, out, "test")
    if val_maps and test_maps:
        seg_thr = _dice_threshold(val_maps, val_masks, cfg.eval.seg_threshold_candidates)
        per_item = [evalkit.iou_dice(m >= seg_thr, g) for m, g in zip(test_maps, test_masks)]
        report.iou = float(np.mean([p[0] for p in per_item]))
        report.dice = float(np.mean([p[1] for p in per_item]))
        report.pro = evalkit.pro_score(test_maps, test_masks, cfg.eval.fpr_limit)
        report.seg_threshold = seg_thr
        groups = evalkit.segmentation_groups(
            len(test_maps), RngStream(cfg.seed, "evalgroups"),
            cfg.eval.group_count, cfg.eval.group_size,
        )
        group_rows = []
        for g_idx, picks in enumerate(groups):
            g_maps = [test_maps[i] for i in picks]
            g_masks = [test_masks[i] for i in picks]
            pairs = [evalkit.iou_dice(m >= seg_thr, g) for m, g in zip(g_maps, g_masks)]
            group_rows.append({
                "group": g_idx,
                "iou": float(np.mean([p[0] for p in pairs])),
                "dice": float(np.mean([p[1] for p in pairs])),
                "pro": evalkit.pro_score(g_maps, g_masks, cfg.eval.fpr_limit),
            })
        report.groups = group_rows
        report.spreads = {
            key: float(np.std([row[key] for row in group_rows]))
            for key in ("iou", "dice", "pro")
        }
    metrics_path = evalkit.emit_report(report, out)
    log.info("metrics written to %s (auroc %.4f)", metrics_path, auc)
    return 0


def cmd_report(cfg: RunConfig, out: Path, args) -> int:
    ds = _require_dataset(out)
    payload = _load_scores(cfg, out, args.detector, args.allow_hash_mismatch)
    metrics_path = out / "metrics.json"
    if not metrics_path.exists():
        raise MissingArtifactError(f"no metrics at {metrics_path}; run `pmsacl eval` first")
    metrics = json.loads(metrics_path.read_text())
    report = evalkit.EvalReport(
        detector=metrics["detector"], seed=metrics["seed"], auroc=metrics["auroc"],
        specificity=metrics["specificity"], sensitivity=metrics["sensitivity"],
        accuracy=metrics["accuracy"], threshold=metrics["threshold"],
        iou=metrics.get("iou"), dice=metrics.get("dice"), pro=metrics.get("pro"),
        seg_threshold=metrics.get("seg_threshold"), groups=metrics.get("groups", []),
        spreads=metrics.get("spreads", {}), config_hash=metrics.get("config_hash", ""),
    )
    scored = _scored_items(payload, "test")
    overlays = []
    if report.seg_threshold is not None:
        ids, maps, masks = _segmentation_inputs(ds, payload, out, "test")
        by_id = {it.item_id: it for it in ds.items}
        for item_id, score_map, mask in list(zip(ids, maps, masks))[:8]:
            overlays.append((item_id, by_id[item_id].load_image(),
                             mask, score_map >= report.seg_threshold))
    path = evalkit.emit_report(report, out / "report", scored=scored, overlays=overlays)
    log.info("report emitted under %s", path.parent)
    return 0


def cmd_gradcheck(cfg: RunConfig, out: Path, args) -> int:
    results = gradcheck.run_suite(seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "gradcheck.json"
    path.write_text(json.dumps(results, sort_keys=True, indent=2) + "\n")
    log.info("gradient checks written to %s (passed=%s)", path, results["passed"])
    if not results["passed"]:
        raise NumericError(f"gradient checks exceeded tolerance; see {path}")
    return 0


def _chain(cfg: RunConfig, out: Path, hard: bool, detector: str = "padim") -> dict:
    """synth -> pretrain -> fit -> score -> eval in one output directory."""
    ns = argparse.Namespace(hard=hard, allow_hash_mismatch=False, detector=detector)
    out.mkdir(parents=True, exist_ok=True)
    cmd_synth(cfg, out, ns)
    cmd_pretrain(cfg, out, ns)
    if detector == "padim":
        cmd_fit_padim(cfg, out, ns)
    else:
        cmd_fit_igd(cfg, out, ns)
    cmd_score(cfg, out, ns)
    cmd_eval(cfg, out, ns)
    return json.loads((out / "metrics.json").read_text())


TERM_CELLS = {
    # CCD-style baseline: no centring pull, no same-class temperature scaling
    "ccd": {"use_centring": False, "temperature_scale": 1.0},
    # centring on, scaling still off
    "ctr": {"use_centring": True, "temperature_scale": 1.0},
    # the full objective
    "full": {},
}


def cmd_ablate(cfg: RunConfig, out: Path, args) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    class_counts = [int(s) for s in args.class_counts.split(",") if s.strip()]
    results = {}
    for seed in seeds:
        for cell, overrides in TERM_CELLS.items():
            cell_cfg = _cell_config(cfg, seed, loss_overrides=overrides)
            cell_dir = out / "ablate" / f"terms_{cell}_seed{seed}"
            metrics = _chain(cell_cfg, cell_dir, hard=args.hard)
            results[f"terms/{cell}/seed{seed}"] = metrics["auroc"]
        for n in class_counts:
            cell_cfg = _cell_config(cfg, seed, n_classes=n)
            cell_dir = out / "ablate" / f"classes_{n}_seed{seed}"
            metrics = _chain(cell_cfg, cell_dir, hard=args.hard)
            results[f"classes/{n}/seed{seed}"] = metrics["auroc"]
    summary_path = out / "ablate" / "summary.json"
    summary_path.parent.mkdir(parents=True, exist_ok=True)
    summary_path.write_text(json.dumps(results, sort_keys=True, indent=2) + "\n")
    log.info("ablation summary written to %s", summary_path)
    return 0


def _cell_config(cfg: RunConfig, seed: int, loss_overrides: dict | None = None, n_classes: int | None = None) -> RunConfig:
    cell = replace(cfg, seed=seed,
                   loss=replace(cfg.loss, **(loss_overrides or {})),
                   aug=replace(cfg.aug, **({"n_classes": n_classes} if n_classes else {})))
    return cell.validate()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pmsacl",
        description="Pseudo multi-class contrastive pre-training with patch-Gaussian "
                    "and reconstruction anomaly detectors, desk scale.",
        epilog="Detector hyper-parameters under [detect] are inherited defaults from "
               "the underlying detection methods; see README for the config key list.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", type=Path, required=True, help="artifact directory")
        p.add_argument("--allow-hash-mismatch", action="store_true")
        p.add_argument("--hard", action="store_true", help="shrink the synthetic lesion margin")
        if name in ("score", "eval", "report"):
            p.add_argument("--detector", choices=DETECTORS, default="padim")
        if name == "ablate":
            p.add_argument("--seeds", default="1", help="comma-separated seeds")
            p.add_argument("--class-counts", default="2,3,4,5,6",
                           help="augmentation-class sweep values")
        p.set_defaults(handler=handler)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "fit-padim": cmd_fit_padim,
    "fit-igd": cmd_fit_igd,
    "score": cmd_score,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        return args.handler(cfg, args.out, args)
    except PmsaclError as exc:
        log.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
