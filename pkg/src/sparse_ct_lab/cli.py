"""Command-line pipeline: phantoms, simulation, training, inference,
metric reports, and study administration.

    sparse-ct-lab <subcommand> --config <path> [--set key=value ...]

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import fcntl
import json
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import imageio
from .config import ConfigError, load_config, workdir
from .grids import (GridError, ImageGrid, LUNG_WINDOW, UNIT_NORMALIZED,
                    apply_window, quantize_unit)
from .metrics import mean_ci, mse, ssim, write_metric_report
from .nn import (NonFiniteGradients, ResidualPair, ShapeError, TrainConfig,
                 TrainingDiverged, UNetConfig, init_unet, load_checkpoint,
                 postprocess, save_checkpoint, save_history, train)
from .phantom import (PhantomSpec, PlacementError, build_dataset,
                      build_study_cohort)
from .study import (STUDY_VIEW_LEVELS, StudyError, StudyStore, StudySubject,
                    analyze, build_presentation_set, reorder_items)
from .tomo import (TomoError, default_geometry, fbp_reconstruct,
                   forward_project, subsample_sinogram)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class WorkdirLocked(RuntimeError):
    pass


@contextmanager
def _exclusive_workdir(cfg):
    """Exclusive advisory lock so concurrent runs cannot interleave writes."""
    wd = workdir(cfg)
    wd.mkdir(parents=True, exist_ok=True)
    lock_path = wd / ".lock"
    with open(lock_path, "w") as handle:
        try:
            fcntl.flock(handle, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise WorkdirLocked(
                f"another run holds {lock_path}; wait for it to finish") from None
        try:
            yield
        finally:
            fcntl.flock(handle, fcntl.LOCK_UN)


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(cfg):
    wd = workdir(cfg)
    base = PhantomSpec(size=cfg["phantom"]["size"],
                       pixel_size=cfg["phantom"]["pixel_size_mm"],
                       n_vessels=cfg["phantom"]["n_vessels"],
                       edge_px=cfg["phantom"]["edge_px"])
    ds = cfg["dataset"]
    entries = build_dataset(wd / "phantoms", ds["n_train"], ds["n_val"],
                            ds["n_test"], base,
                            slices_per_subject=ds["slices_per_subject"],
                            seed=cfg["seeds"]["phantom"])
    cohort = build_study_cohort(wd / "study_phantoms", ds["study_diseased"],
                                ds["study_healthy"], base,
                                seed=cfg["seeds"]["phantom"] + 1)
    print(f"phantom: {len(entries)} model-assessment slices, "
          f"{len(cohort)} study slices under {wd}")


def _simulate_slice(entry, cfg, simdir):
    from .phantom import load_raw_slice

    sl = load_raw_slice(entry["slice_path"], mask_path=entry.get("mask_path"))
    size = sl.image.width
    px = sl.image.pixel_size
    full_views = cfg["views"]["full"]
    geom = default_geometry(size, px, full_views)
    sino = forward_project(sl.image, geom)
    stem = Path(entry["slice_path"]).stem
    # the sim manifest references only files simulate itself wrote
    mask_path = simdir / f"{stem}.mask.json"
    imageio.save_mask(mask_path, sl.nodule_mask)

    def windowed(recon):
        img = apply_window(recon, LUNG_WINDOW)
        return ImageGrid(quantize_unit(img.values).astype(np.float32), px,
                         UNIT_NORMALIZED)

    full = windowed(fbp_reconstruct(sino, size))
    full_path = simdir / f"{stem}_full.raw"
    imageio.save_raw_image(full_path, full)

    levels = {}
    for v in cfg["views"]["levels"]:
        sparse = windowed(fbp_reconstruct(subsample_sinogram(sino, v), size))
        residual = sparse.values - full.values  # exact on the quantized grid
        sparse_path = simdir / f"{stem}_sparse{v:04d}.raw"
        resid_path = simdir / f"{stem}_resid{v:04d}.raw"
        imageio.save_raw_image(sparse_path, sparse)
        imageio.save_raw_array(resid_path, residual, px, "residual")
        levels[str(v)] = {"sparse": str(sparse_path), "residual": str(resid_path)}

    return {"subject_id": entry["subject_id"], "split": entry["split"],
            "diseased": entry["diseased"], "stem": stem, "size": size,
            "pixel_size_mm": px, "mask_path": str(mask_path),
            "full": str(full_path), "levels": levels}


def cmd_simulate(cfg):
    wd = workdir(cfg)
    full_views = cfg["views"]["full"]
    bad = [v for v in cfg["views"]["levels"] if full_views % v != 0]
    if bad:
        raise TomoError(f"view levels {bad} do not divide {full_views}")
    simdir = wd / "sim"
    simdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for manifest in (wd / "phantoms" / "manifest.json",
                     wd / "study_phantoms" / "manifest.json"):
        if manifest.exists():
            entries.extend(imageio.load_manifest(manifest))
    if not entries:
        raise imageio.DataFormatError(
            f"no phantom manifests under {wd}; run `phantom` first")
    sim_entries = []
    for entry in entries:
        sim_entries.append(_simulate_slice(entry, cfg, simdir))
        print(f"simulate: {sim_entries[-1]['stem']} "
              f"({sim_entries[-1]['split']})")
    imageio.save_manifest(simdir / "manifest.json", sim_entries)
    print(f"simulate: {len(sim_entries)} slices x "
          f"{len(cfg['views']['levels'])} levels")


def _residual_pairs(sim_entries, split, level):
    pairs = []
    for entry in sim_entries:
        if entry["split"] != split:
            continue
        paths = entry["levels"][str(level)]
        sparse = imageio.load_raw_image(paths["sparse"])
        residual, _ = imageio.load_raw_array(paths["residual"])
        pairs.append(ResidualPair(sparse.values, residual, level))
    return pairs


def _unet_config(cfg, size):
    u = cfg["unet"]
    return UNetConfig(depth=u["depth"], base_channels=u["base_channels"],
                      variant=u["variant"], bridge_combine=u["bridge_combine"],
                      input_size=size)


def cmd_train(cfg):
    wd = workdir(cfg)
    sim_entries = imageio.load_manifest(wd / "sim" / "manifest.json")
    size = sim_entries[0]["size"]
    models = wd / "models"
    models.mkdir(parents=True, exist_ok=True)
    t = cfg["train"]
    for level in cfg["views"]["levels"]:
        train_pairs = _residual_pairs(sim_entries, "train", level)
        val_pairs = _residual_pairs(sim_entries, "val", level)
        if not train_pairs or not val_pairs:
            print(f"train: skipping {level} views (no train/val pairs)")
            continue
        net_cfg = _unet_config(cfg, size)
        params = init_unet(net_cfg, seed=cfg["seeds"]["init"] + level)
        tcfg = TrainConfig(max_epochs=t["max_epochs"], batch_size=t["batch_size"],
                           lr0=t["lr0"], patience=t["patience"],
                           seed=cfg["seeds"]["shuffle"] + level,
                           steps_per_epoch=t.get("steps_per_epoch"))
        best, history = train(
            train_pairs, val_pairs, tcfg, net_cfg, params,
            log=lambda row: print(
                f"train[{level:4d}] epoch {row['epoch']:3d} "
                f"train {row['train_loss']:.3e} val {row['val_loss']:.3e} "
                f"lr {row['lr']:.2e}"))
        best_epoch = min(history, key=lambda r: r["val_loss"])
        save_checkpoint(models / f"unet_v{level:04d}.ckpt", best, net_cfg,
                        epoch=best_epoch["epoch"],
                        val_loss=best_epoch["val_loss"])
        save_history(models / f"history_v{level:04d}.csv", history)
        print(f"train[{level:4d}]: best val {best_epoch['val_loss']:.3e} "
              f"at epoch {best_epoch['epoch']}")


def cmd_infer(cfg):
    wd = workdir(cfg)
    sim_entries = imageio.load_manifest(wd / "sim" / "manifest.json")
    outdir = wd / "out" / "post"
    outdir.mkdir(parents=True, exist_ok=True)
    count = 0
    for level in cfg["views"]["levels"]:
        ckpt = wd / "models" / f"unet_v{level:04d}.ckpt"
        if not ckpt.exists():
            print(f"infer: no checkpoint for {level} views, skipping")
            continue
        params, net_cfg, _ = load_checkpoint(ckpt)
        for entry in sim_entries:
            if entry["split"] not in ("test", "study"):
                continue
            sparse = imageio.load_raw_image(entry["levels"][str(level)]["sparse"])
            post = postprocess(sparse, params, net_cfg)
            out = outdir / f"{entry['stem']}_post{level:04d}.raw"
            imageio.save_raw_image(out, post)
            entry["levels"][str(level)]["processed"] = str(out)
            count += 1
    imageio.save_manifest(wd / "sim" / "manifest.json", sim_entries)
    print(f"infer: wrote {count} postprocessed images")


def cmd_evaluate(cfg):
    wd = workdir(cfg)
    sim_entries = imageio.load_manifest(wd / "sim" / "manifest.json")
    rows = []
    for level in cfg["views"]["levels"]:
        collected = {("sparse", "mse"): [], ("sparse", "ssim"): [],
                     ("processed", "mse"): [], ("processed", "ssim"): []}
        for entry in sim_entries:
            if entry["split"] != "test":
                continue
            paths = entry["levels"][str(level)]
            full = imageio.load_raw_image(entry["full"])
            sparse = imageio.load_raw_image(paths["sparse"])
            collected[("sparse", "mse")].append(mse(sparse, full))
            collected[("sparse", "ssim")].append(ssim(sparse, full))
            if "processed" in paths:
                post = imageio.load_raw_image(paths["processed"])
                collected[("processed", "mse")].append(mse(post, full))
                collected[("processed", "ssim")].append(ssim(post, full))
        for (variant, metric), values in collected.items():
            if not values:
                continue
            m, lo, hi = mean_ci(values)
            rows.append({"views": level, "variant": variant, "metric": metric,
                         "mean": m, "ci_low": lo, "ci_high": hi})
    if not rows:
        raise imageio.DataFormatError("evaluate: no test-split slices found")
    out = wd / "out" / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metric_report(out, rows)
    print(f"evaluate: wrote {out} ({len(rows)} rows)")


def _study_levels(cfg) -> tuple[int, ...]:
    """Configured view levels that belong to the study (512 stays out)."""
    return tuple(v for v in cfg["views"]["levels"] if v in STUDY_VIEW_LEVELS)


def _study_subjects(cfg, sim_entries):
    subjects = []
    for entry in sim_entries:
        if entry["split"] != "study":
            continue
        renditions = {}
        for v in _study_levels(cfg):
            paths = entry["levels"].get(str(v), {})
            if "sparse" in paths and Path(paths["sparse"]).exists():
                renditions[(v, "sparse")] = paths["sparse"]
            if "processed" in paths and Path(paths["processed"]).exists():
                renditions[(v, "processed")] = paths["processed"]
        mask = imageio.load_mask(entry["mask_path"]) if entry["diseased"] else None
        subjects.append(StudySubject(
            subject_id=entry["subject_id"], renditions=renditions,
            size=entry["size"], diseased=entry["diseased"], truth_mask=mask))
    return subjects


def _store_path(cfg):
    configured = cfg["service"]["store"]
    return Path(configured) if configured else workdir(cfg) / "study" / "store.jsonl"


def cmd_study_init(cfg):
    wd = workdir(cfg)
    sim_entries = imageio.load_manifest(wd / "sim" / "manifest.json")
    subjects = _study_subjects(cfg, sim_entries)
    if not subjects:
        raise StudyError("no study-split slices; run phantom/simulate/infer first")
    rng = np.random.default_rng(cfg["seeds"]["study"])
    items = build_presentation_set(subjects, seed=cfg["seeds"]["study"],
                                   levels=_study_levels(cfg))
    store = StudyStore.create(_store_path(cfg))
    store.add_items(items)
    for s in subjects:
        store.add_truth(s.subject_id, s.diseased, s.truth_mask)
    tokens = {}
    for k in range(cfg["study"]["readers"]):
        reader_id = f"reader{k + 1}"
        token = rng.bytes(16).hex()
        store.add_reader(reader_id, token,
                         reorder_items(items, seed=cfg["seeds"]["study"] + k + 1))
        tokens[reader_id] = token
    store.close()
    tokens_path = wd / "study" / "tokens.json"
    tokens_path.write_text(json.dumps(tokens, indent=1))
    print(f"study-init: {len(items)} items for {len(subjects)} subjects, "
          f"{len(tokens)} reader tokens in {tokens_path}")


def cmd_study_serve(cfg):
    import uvicorn

    from .service import create_app

    app = create_app(_store_path(cfg), ui_dir=cfg["service"]["ui_dir"])
    uvicorn.run(app, host=cfg["service"]["host"], port=cfg["service"]["port"],
                log_level="info")


def cmd_study_analyze(cfg):
    wd = workdir(cfg)
    store = StudyStore.open(_store_path(cfg))
    try:
        report = analyze(store, partial=bool(cfg["study"].get("partial")),
                         cluster_by=cfg["study"].get("cluster_by", "subject"))
    finally:
        store.close()
    outdir = wd / "study"
    outdir.mkdir(parents=True, exist_ok=True)
    report.save_json(outdir / "report.json")
    report.save_diagnostics_csv(outdir / "diagnostics.csv")
    report.save_means_csv(outdir / "means.csv")
    print(f"study-analyze: report under {outdir}")


def cmd_report(cfg):
    wd = workdir(cfg)
    outdir = wd / "report"
    outdir.mkdir(parents=True, exist_ok=True)
    metrics_csv = wd / "out" / "metrics.csv"
    wrote = []
    if metrics_csv.exists():
        quality = _render_quality_table(metrics_csv.read_text(), cfg["views"]["levels"])
        (outdir / "image_quality.csv").write_text(quality)
        wrote.append("image_quality.csv")
    study_table = wd / "study" / "diagnostics.csv"
    if study_table.exists():
        (outdir / "diagnostics.csv").write_text(study_table.read_text())
        wrote.append("diagnostics.csv")
    if not wrote:
        raise imageio.DataFormatError(
            "report: nothing to render; run evaluate and/or study-analyze")
    print(f"report: wrote {', '.join(wrote)} under {outdir}")


def _render_quality_table(metrics_csv: str, levels) -> str:
    """Wide mean [CI] layout: one row per (metric, variant), views as columns."""
    cells = {}
    for line in metrics_csv.strip().splitlines()[1:]:
        views, variant, metric, m, lo, hi = line.split(",")
        cells[(metric, variant, int(views))] = (float(m), float(lo), float(hi))
    lines = ["metric,variant," + ",".join(str(v) for v in levels)]
    for metric in ("mse", "ssim"):
        for variant in ("processed", "sparse"):
            row = [metric, variant]
            for v in levels:
                if (metric, variant, v) in cells:
                    m, lo, hi = cells[(metric, variant, v)]
                    row.append(f"{m:.4g} [{lo:.4g}; {hi:.4g}]")
                else:
                    row.append("")
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# entry point


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "study-init": cmd_study_init,
    "study-serve": cmd_study_serve,
    "study-analyze": cmd_study_analyze,
    "report": cmd_report,
}

SERVE_COMMANDS = {"study-serve"}  # long-running; no output-directory lock

DATA_ERRORS = (imageio.DataFormatError, GridError, TomoError, StudyError,
               ShapeError, PlacementError, FileNotFoundError, WorkdirLocked)
NUMERIC_ERRORS = (TrainingDiverged, NonFiniteGradients, FloatingPointError)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparse-ct-lab",
                     description="Sparse-view CT workbench pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="JSON config file (defaults apply without one)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (dotted path, JSON value)")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, sets=args.set)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command in SERVE_COMMANDS:
            COMMANDS[args.command](cfg)
        else:
            with _exclusive_workdir(cfg):
                COMMANDS[args.command](cfg)
        return EXIT_OK
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
