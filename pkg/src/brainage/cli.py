"""Pipeline orchestration: synth -> split -> train x2 -> predict -> ensemble
-> report -> gradcam, plus `all` for the whole chain.

Configuration is one JSON document; flags override their JSON keys. A
single root seed derives every stage seed, so a full run is reproducible
from one integer. Each stage writes a stamp keyed by the hash of the
config sections it depends on; downstream stages refuse to run on
missing or stale inputs.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__, dataset, imaging, saliency, splitter, stats, vgg8
from .rng import derive_seed


class CliError(Exception):
    """Base for orchestration failures; `kind` names the error in JSON output."""

    kind = "CliError"

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class ConfigInvalidError(CliError):
    kind = "ConfigInvalid"


class MissingStageInputError(CliError):
    kind = "MissingStageInput"


class StaleStageInputError(CliError):
    kind = "StaleStageInput"


DEFAULT_CONFIG = {
    "seed": 1,
    "phantom": {
        "count": 60,
        "grid": 32,
        "sigma_modality": 5.0,
        "sex_offset": 2.0,
        "noise_sigma": 0.05,
    },
    "split": {},
    "train_t1w": {"lr": 1e-4, "batch_size": 3, "max_epochs": 100, "patience": 10, "input_edge": 32},
    "train_aicbv": {"lr": 1e-4, "batch_size": 3, "max_epochs": 100, "patience": 10, "input_edge": 32},
    "ensemble": {},
    "saliency": {"fraction": 0.2, "mode": "magnitude"},
    "paths": {"out": "out"},
}

# sections whose content each stage's output depends on
STAGE_SECTIONS = {
    "synth": ("seed", "phantom"),
    "split": ("seed", "phantom", "split"),
    "train_t1w": ("seed", "phantom", "split", "train_t1w"),
    "train_aicbv": ("seed", "phantom", "split", "train_aicbv"),
    "predict": ("seed", "phantom", "split", "train_t1w", "train_aicbv"),
    "ensemble": ("seed", "phantom", "split", "train_t1w", "train_aicbv", "ensemble"),
    "report": ("seed", "phantom", "split", "train_t1w", "train_aicbv", "ensemble"),
    "gradcam": ("seed", "phantom", "split", "train_t1w", "train_aicbv", "saliency"),
}

MODALITIES = {"t1w": imaging.Modality.T1W, "aicbv": imaging.Modality.AICBV}


def load_config(path=None, seed=None, out=None) -> dict:
    """Defaults, overlaid by the JSON file, overlaid by explicit flags."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                user = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigInvalidError(f"cannot read config {path}: {e}") from e
        if not isinstance(user, dict):
            raise ConfigInvalidError(f"{path}: config must be a JSON object")
        for key, value in user.items():
            if key not in cfg:
                raise ConfigInvalidError(f"{path}: unknown config section {key!r}")
            if isinstance(cfg[key], dict):
                if not isinstance(value, dict):
                    raise ConfigInvalidError(f"{path}: section {key!r} must be an object")
                unknown = set(value) - set(cfg[key])
                if unknown:
                    raise ConfigInvalidError(f"{path}: unknown keys in {key!r}: {sorted(unknown)}")
                cfg[key].update(value)
            else:
                cfg[key] = value
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["paths"]["out"] = out
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigInvalidError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    return cfg


@dataclass(frozen=True)
class Paths:
    out: str

    @property
    def volumes(self):
        return os.path.join(self.out, "volumes")

    @property
    def splits(self):
        return os.path.join(self.out, "splits")

    @property
    def checkpoints(self):
        return os.path.join(self.out, "checkpoints")

    @property
    def predictions(self):
        return os.path.join(self.out, "predictions")

    @property
    def reports(self):
        return os.path.join(self.out, "reports")

    @property
    def saliency(self):
        return os.path.join(self.out, "saliency")

    @property
    def stamps(self):
        return os.path.join(self.out, "stamps")

    def manifest(self):
        return os.path.join(self.volumes, "manifest.json")

    def assignment(self):
        return os.path.join(self.splits, "assignment.json")

    def checkpoint(self, modality):
        return os.path.join(self.checkpoints, f"{modality}.ckpt")

    def history(self, modality):
        return os.path.join(self.checkpoints, f"{modality}_history.csv")

    def prediction_table(self):
        return os.path.join(self.predictions, "table.csv")

    def metrics_json(self):
        return os.path.join(self.reports, "metrics.json")

    def table_text(self):
        return os.path.join(self.reports, "model_comparison.txt")


def _paths(cfg) -> Paths:
    return Paths(out=cfg["paths"]["out"])


def stage_hash(stage: str, cfg: dict) -> str:
    doc = {name: cfg[name] for name in STAGE_SECTIONS[stage]}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def write_stamp(paths: Paths, stage: str, cfg: dict) -> None:
    os.makedirs(paths.stamps, exist_ok=True)
    doc = {"stage": stage, "config_hash": stage_hash(stage, cfg)}
    with open(os.path.join(paths.stamps, f"{stage}.json"), "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def require_stage(paths: Paths, stage: str, cfg: dict) -> None:
    stamp_path = os.path.join(paths.stamps, f"{stage}.json")
    if not os.path.exists(stamp_path):
        raise MissingStageInputError(f"stage {stage!r} has not been run", stage=stage)
    with open(stamp_path, "r", encoding="utf-8") as f:
        stamp = json.load(f)
    if stamp.get("config_hash") != stage_hash(stage, cfg):
        raise StaleStageInputError(
            f"outputs of stage {stage!r} were built from a different config; rerun it",
            stage=stage,
        )


def _phantom_spec(cfg) -> dataset.PhantomSpec:
    section = cfg["phantom"]
    try:
        return dataset.PhantomSpec(
            count=int(section["count"]),
            grid=int(section["grid"]),
            seed=derive_seed(cfg["seed"], "phantom"),
            sigma_modality=float(section["sigma_modality"]),
            sex_offset=float(section["sex_offset"]),
            noise_sigma=float(section["noise_sigma"]),
        )
    except (KeyError, TypeError, ValueError, dataset.DatasetError) as e:
        raise ConfigInvalidError(f"phantom section invalid: {e}") from e


def cmd_synth(cfg) -> None:
    paths = _paths(cfg)
    spec = _phantom_spec(cfg)
    manifest = dataset.synth_phantoms(spec, paths.volumes)
    dataset.save_manifest(manifest, paths.manifest())
    write_stamp(paths, "synth", cfg)
    print(f"synth: wrote {2 * len(manifest)} volumes under {paths.volumes}")


def cmd_split(cfg) -> None:
    paths = _paths(cfg)
    require_stage(paths, "synth", cfg)
    manifest = dataset.load_manifest(paths.manifest())
    bins = splitter.compute_age_bins(manifest.ages())
    partitions = splitter.assign_partitions(manifest, bins, derive_seed(cfg["seed"], "split"))
    assignment = splitter.select_holdouts(partitions, bins)
    os.makedirs(paths.splits, exist_ok=True)
    splitter.save_assignment(assignment, paths.assignment())
    write_stamp(paths, "split", cfg)
    n_train = len(assignment.ids_with_role("train"))
    n_val = len(assignment.ids_with_role("validation"))
    n_test = len(assignment.ids_with_role("test"))
    print(f"split: train/validation/test = {n_train}/{n_val}/{n_test}")


def load_modality_arrays(manifest, vol_dir, modality: str, edge: int):
    """Normalized, shape-harmonized voxel arrays for one modality.

    Returns (x, ages, ids) with x of shape (N, 1, edge, edge, edge),
    in manifest order.
    """
    target = (edge, edge, edge)
    vols, ages, ids = [], [], []
    for rec in manifest:
        rel = rec.t1w_path if modality == "t1w" else rec.aicbv_path
        vol = imaging.read_nifti_file(os.path.join(vol_dir, rel), MODALITIES[modality])
        vol = dataset.normalize_top_percent(vol)
        vol = imaging.crop_or_pad(vol, target)
        vols.append(vol.voxels)
        ages.append(rec.age)
        ids.append(rec.id)
    x = np.stack(vols)[:, None, :, :, :].astype(np.float32)
    return x, np.array(ages, dtype=np.float32), ids


def _train_section(cfg, modality: str) -> dict:
    return cfg[f"train_{modality}"]


def cmd_train(cfg, modality: str) -> None:
    if modality not in MODALITIES:
        raise ConfigInvalidError(f"modality must be 't1w' or 'aicbv', got {modality!r}")
    paths = _paths(cfg)
    require_stage(paths, "synth", cfg)
    require_stage(paths, "split", cfg)
    manifest = dataset.load_manifest(paths.manifest())
    assignment = splitter.load_assignment(paths.assignment())
    section = _train_section(cfg, modality)
    edge = int(section["input_edge"])
    x, ages, ids = load_modality_arrays(manifest, paths.volumes, modality, edge)
    role = {rid: assignment.role(rid) for rid in ids}
    train_idx = [i for i, rid in enumerate(ids) if role[rid] == "train"]
    val_idx = [i for i, rid in enumerate(ids) if role[rid] == "validation"]
    try:
        tc = vgg8.TrainConfig(
            lr=float(section["lr"]),
            batch_size=int(section["batch_size"]),
            max_epochs=int(section["max_epochs"]),
            patience=int(section["patience"]),
            seed=derive_seed(cfg["seed"], "train", modality),
        )
        model = vgg8.build_vgg8(
            vgg8.Vgg8Config(input_edge=edge, init_seed=derive_seed(cfg["seed"], "init", modality))
        )
    except vgg8.Vgg8Error as e:
        raise ConfigInvalidError(f"train_{modality} section invalid: {e}") from e
    ckpt, history = vgg8.train(
        model,
        x[train_idx],
        ages[train_idx],
        x[val_idx],
        ages[val_idx],
        tc,
        log=lambda h: print(
            f"train[{modality}] epoch {h.epoch}: train_mae={h.train_mae:.3f} val_mae={h.val_mae:.3f}"
        ),
    )
    os.makedirs(paths.checkpoints, exist_ok=True)
    vgg8.save_checkpoint(ckpt, paths.checkpoint(modality))
    vgg8.save_history_csv(history, paths.history(modality))
    write_stamp(paths, f"train_{modality}", cfg)
    print(f"train[{modality}]: best epoch {ckpt.epoch}, val MAE {ckpt.val_mae:.3f}")


def cmd_predict(cfg) -> None:
    paths = _paths(cfg)
    for stage in ("synth", "split", "train_t1w", "train_aicbv"):
        require_stage(paths, stage, cfg)
    manifest = dataset.load_manifest(paths.manifest())
    assignment = splitter.load_assignment(paths.assignment())
    preds = {}
    for modality in ("t1w", "aicbv"):
        ckpt = vgg8.load_checkpoint(paths.checkpoint(modality))
        x, _, ids = load_modality_arrays(manifest, paths.volumes, modality, ckpt.input_edge)
        preds[modality] = dict(zip(ids, vgg8.predict(ckpt, x)))
    rows = tuple(
        stats.PredictionRow(
            record_id=rec.id,
            actual_age=rec.age,
            t1w_pred=float(preds["t1w"][rec.id]),
            aicbv_pred=float(preds["aicbv"][rec.id]),
            sex=int(rec.sex),
            project=rec.project,
            role=assignment.role(rec.id),
        )
        for rec in manifest
    )
    os.makedirs(paths.predictions, exist_ok=True)
    stats.save_prediction_table(stats.PredictionTable(rows), paths.prediction_table())
    write_stamp(paths, "predict", cfg)
    print(f"predict: wrote {len(rows)} rows to {paths.prediction_table()}")


def _metrics_doc(report: stats.EnsembleReport) -> dict:
    doc = {
        "collinear": report.collinear,
        "n_fit": report.n_fit,
        "n_test": report.n_test,
        "models": {
            key: {"mae": m.mae, "mse": m.mse, "r2": m.r2}
            for key, m in report.test_metrics.items()
        },
        "anova": {
            key: {"f": a.f, "df_num": a.df_num, "df_den": a.df_den, "p_value": a.p_value}
            for key, a in report.anovas.items()
        },
    }
    if report.sex_inference is not None:
        row = report.sex_inference.by_name("sex")
        doc["sex_coefficient"] = {
            "estimate": row.estimate,
            "std_error": row.std_error,
            "t": row.t,
            "p_value": row.p_value,
            "degenerate": report.sex_inference.degenerate,
        }
    else:
        doc["sex_coefficient"] = None
    return doc


def _comparison_text(report: stats.EnsembleReport) -> str:
    lines = [
        f"{'Model':<28}{'MAE':>8}{'MSE':>9}{'R2':>8}  ANOVA p-value",
        "-" * 68,
    ]
    labels = {
        "T": "T1w only (T-model)",
        "A": "AICBV only (A-model)",
        "TA": "T1w + AICBV (TA-model)",
        "TAS": "T1w + AICBV + sex (TAS-model)",
    }
    anova_notes = {
        "TA": ["T_vs_TA", "A_vs_TA"],
        "TAS": ["TA_vs_TAS"],
    }
    for key in ("T", "A", "TA", "TAS"):
        if key not in report.test_metrics:
            continue
        m = report.test_metrics[key]
        notes = "; ".join(
            f"{name.replace('_', ' ')}: {report.anovas[name].p_value:.3g}"
            for name in anova_notes.get(key, [])
            if name in report.anovas
        )
        lines.append(f"{labels[key]:<28}{m.mae:>8.2f}{m.mse:>9.2f}{m.r2:>8.3f}  {notes or '-'}")
    return "\n".join(lines) + "\n"


def cmd_ensemble(cfg) -> None:
    paths = _paths(cfg)
    require_stage(paths, "predict", cfg)
    table = stats.load_prediction_table(paths.prediction_table())
    report = stats.build_ensembles(table)
    os.makedirs(paths.reports, exist_ok=True)
    with open(paths.metrics_json(), "w", encoding="utf-8") as f:
        json.dump(_metrics_doc(report), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(paths.table_text(), "w", encoding="utf-8") as f:
        f.write(_comparison_text(report))
    write_stamp(paths, "ensemble", cfg)
    for key, m in sorted(report.test_metrics.items()):
        print(f"ensemble[{key}]: test MAE {m.mae:.3f}, MSE {m.mse:.3f}, R2 {m.r2:.3f}")


def cmd_report(cfg) -> None:
    paths = _paths(cfg)
    require_stage(paths, "predict", cfg)
    require_stage(paths, "ensemble", cfg)
    table = stats.load_prediction_table(paths.prediction_table())
    report = stats.build_ensembles(table)
    test_rows = table.with_role("test")
    actual = [r.actual_age for r in test_rows]
    projects = [r.project for r in test_rows]
    os.makedirs(paths.reports, exist_ok=True)
    for key, preds in report.test_predictions.items():
        by_age = stats.report_by_age_group(actual, preds)
        with open(os.path.join(paths.reports, f"by_age_group_{key}.csv"), "w", encoding="utf-8") as f:
            f.write("age_lo,age_hi,mae,count\n")
            for g in by_age:
                f.write(f"{g.lo!r},{g.hi!r},{g.mae!r},{g.count}\n")
        by_project = stats.report_by_project(actual, preds, projects)
        with open(os.path.join(paths.reports, f"by_project_{key}.csv"), "w", encoding="utf-8") as f:
            f.write("project,mae,count\n")
            for g in by_project:
                f.write(f"{g.project},{g.mae!r},{g.count}\n")
    write_stamp(paths, "report", cfg)
    print(f"report: wrote per-age and per-project CSVs for {sorted(report.test_predictions)}")


def cmd_gradcam(cfg) -> None:
    paths = _paths(cfg)
    for stage in ("synth", "split", "train_t1w", "train_aicbv"):
        require_stage(paths, stage, cfg)
    section = cfg["saliency"]
    fraction = float(section["fraction"])
    mode = str(section["mode"])
    manifest = dataset.load_manifest(paths.manifest())
    assignment = splitter.load_assignment(paths.assignment())
    test_ids = set(assignment.ids_with_role("test"))
    test_records = [r for r in manifest if r.id in test_ids]
    os.makedirs(paths.saliency, exist_ok=True)
    ckpts = {m: vgg8.load_checkpoint(paths.checkpoint(m)) for m in ("t1w", "aicbv")}
    edge = ckpts["t1w"].input_edge
    # structural backgrounds are shared by both modalities
    bg_x, bg_ages, _ = load_modality_arrays(
        dataset.Manifest(tuple(test_records)), paths.volumes, "t1w", edge
    )
    decades = sorted({int(r.age // 10) for r in test_records})
    written = 0
    for modality in ("t1w", "aicbv"):
        x, ages, _ = load_modality_arrays(
            dataset.Manifest(tuple(test_records)), paths.volumes, modality, edge
        )
        for decade in decades:
            idx = [i for i, a in enumerate(ages) if 10 * decade <= a < 10 * (decade + 1)]
            if not idx:
                continue
            maps = [
                saliency.gradient_map(ckpts[modality], x[i, 0], mode=mode).values for i in idx
            ]
            mask = saliency.top_fraction_mask(np.mean(maps, axis=0), fraction)
            slices = saliency.select_slices(mask)
            background = saliency.group_average_volume(
                [bg_x[i, 0] for i in idx], [bg_ages[i] for i in idx], decade
            )
            for axis, axis_name in enumerate(("axial", "coronal", "sagittal")):
                out_path = os.path.join(
                    paths.saliency, f"{modality}_{decade * 10:03d}s_{axis_name}.ppm"
                )
                saliency.save_overlay(
                    out_path,
                    saliency.extract_slice(background, axis, slices[axis]),
                    saliency.extract_slice(mask.mask, axis, slices[axis]),
                    sidecar={
                        "modality": modality,
                        "decade": decade,
                        "axis": axis_name,
                        "slice_indices": list(slices),
                        "kept_count": mask.kept_count,
                        "records": len(idx),
                    },
                )
                written += 1
    write_stamp(paths, "gradcam", cfg)
    print(f"gradcam: wrote {written} overlays under {paths.saliency}")


def cmd_all(cfg) -> None:
    cmd_synth(cfg)
    cmd_split(cfg)
    cmd_train(cfg, "t1w")
    cmd_train(cfg, "aicbv")
    cmd_predict(cfg)
    cmd_ensemble(cfg)
    cmd_report(cfg)
    cmd_gradcam(cfg)
    print("all: pipeline complete")


_PACKAGE_ERRORS = (
    CliError,
    imaging.NiftiError,
    dataset.DatasetError,
    splitter.SplitterError,
    vgg8.Vgg8Error,
    stats.StatsError,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brainage",
        description="Dual-modality brain-age pipeline on synthetic phantoms.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_modality in [
        ("synth", False), ("split", False), ("train", True), ("predict", False),
        ("ensemble", False), ("report", False), ("gradcam", False), ("all", False),
    ]:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the root seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if needs_modality:
            p.add_argument("--modality", choices=["t1w", "aicbv"], required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "split":
            cmd_split(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.modality)
        elif args.command == "predict":
            cmd_predict(cfg)
        elif args.command == "ensemble":
            cmd_ensemble(cfg)
        elif args.command == "report":
            cmd_report(cfg)
        elif args.command == "gradcam":
            cmd_gradcam(cfg)
        elif args.command == "all":
            cmd_all(cfg)
    except _PACKAGE_ERRORS as e:
        kind = getattr(e, "kind", type(e).__name__.removesuffix("Error"))
        doc = {"error": kind, "message": str(e)}
        stage = getattr(e, "stage", None)
        if stage:
            doc["stage"] = stage
        print(json.dumps(doc, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
