"""Blinded multireader study: presentation sets, annotation store, analysis.

The store is an append-only JSON-lines log. Every record carries a type
tag and schema version; replaying the log rebuilds the in-memory index
exactly, and a partial trailing line (crash mid-append) is dropped. Item
identifiers are opaque random tokens: nothing a reader receives reveals
the view count or processing variant.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import imageio
from .metrics import (ConfusionCounts, classify_annotation, diagnostic_stats,
                      dice, mean_ci)
from .stats import AllZeroDifferences, PairedSample, clustered_wilcoxon

STUDY_VIEW_LEVELS = (16, 32, 64, 128, 256)  # 512 is excluded from the study
VARIANTS = ("sparse", "processed")
SCORE_RANGES = {"quality": (1, 6), "confidence": (1, 6), "artifacts": (1, 4)}
SCHEMA_VERSION = 1

MEASURES = ("quality", "confidence", "artifacts", "dsc")


class StudyError(ValueError):
    """Invalid study state or input."""


class DuplicateAnnotation(StudyError):
    """This (reader, item) pair was already annotated."""


class ValidationError(StudyError):
    """Annotation payload violates the score ranges or mask contract."""


@dataclass(frozen=True)
class PresentationItem:
    item_id: str
    subject_id: str
    views: int
    variant: str
    image_path: str
    size: int  # image width == height, for mask validation

    def __post_init__(self):
        if self.views not in STUDY_VIEW_LEVELS:
            raise StudyError(f"views {self.views} not a study level")
        if self.variant not in VARIANTS:
            raise StudyError(f"unknown variant {self.variant!r}")


@dataclass(frozen=True)
class Annotation:
    reader_id: str
    item_id: str
    quality: int
    confidence: int
    artifacts: int
    mask: np.ndarray
    timestamp: str = ""

    def __post_init__(self):
        for name in ("quality", "confidence", "artifacts"):
            lo, hi = SCORE_RANGES[name]
            value = getattr(self, name)
            if not (isinstance(value, (int, np.integer)) and lo <= value <= hi):
                raise ValidationError(f"{name}={value!r} outside [{lo}, {hi}]")
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        if not self.timestamp:
            object.__setattr__(
                self, "timestamp",
                datetime.now(timezone.utc).isoformat(timespec="seconds"))


@dataclass(frozen=True)
class StudySubject:
    """One study subject with its rendition images per (views, variant)."""

    subject_id: str
    renditions: dict  # (views, variant) -> image path
    size: int
    diseased: bool = True
    truth_mask: np.ndarray | None = None


def build_presentation_set(subjects: list[StudySubject], seed: int,
                           levels: tuple[int, ...] = STUDY_VIEW_LEVELS,
                           ) -> list[PresentationItem]:
    """Complete subjects x levels x variants cross product, shuffled.

    Item ids are random tokens from the seeded RNG; calling with another
    seed yields the same (subject, views, variant) set under fresh ids and
    a fresh order. `levels` defaults to the full five-level study and may
    only be narrowed (512 stays excluded either way).
    """
    if not subjects:
        raise StudyError("need at least one subject")
    if not levels or any(v not in STUDY_VIEW_LEVELS for v in levels):
        raise StudyError(f"levels must be a non-empty subset of {STUDY_VIEW_LEVELS}")
    rng = np.random.default_rng(seed)
    items = []
    for subject in subjects:
        for views in levels:
            for variant in VARIANTS:
                key = (views, variant)
                if key not in subject.renditions:
                    raise StudyError(
                        f"{subject.subject_id} is missing the {views}-view "
                        f"{variant} rendition")
                items.append(PresentationItem(
                    item_id=rng.bytes(16).hex(),
                    subject_id=subject.subject_id,
                    views=views,
                    variant=variant,
                    image_path=str(subject.renditions[key]),
                    size=subject.size,
                ))
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def reorder_items(items: list[PresentationItem], seed: int) -> list[str]:
    """A reader-specific presentation order over an existing item set."""
    rng = np.random.default_rng(seed)
    return [items[i].item_id for i in rng.permutation(len(items))]


class StudyStore:
    """Append-only JSON-lines log plus the replayed in-memory index."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.items: dict[str, PresentationItem] = {}
        self.truths: dict[str, dict] = {}
        self.readers: dict[str, dict] = {}
        self.annotations: dict[tuple[str, str], Annotation] = {}
        self._fh = None

    # -- construction ------------------------------------------------------

    @classmethod
    def create(cls, path: str | Path) -> "StudyStore":
        path = Path(path)
        if path.exists():
            raise StudyError(f"store {path} already exists")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.touch()
        return cls.open(path)

    @classmethod
    def open(cls, path: str | Path) -> "StudyStore":
        store = cls(path)
        store._replay()
        store._fh = open(store.path, "a", encoding="utf-8")
        return store

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def _replay(self):
        if not self.path.exists():
            raise StudyError(f"no store at {self.path}")
        raw = self.path.read_bytes()
        for line in raw.split(b"\n"):
            if not line:
                continue
            try:
                record = json.loads(line.decode("utf-8"))
            except (json.JSONDecodeError, UnicodeDecodeError):
                break  # partial trailing record from an interrupted append
            self._apply(record)

    def _apply(self, record: dict):
        kind = record["type"]
        if kind == "item":
            item = PresentationItem(
                item_id=record["item_id"], subject_id=record["subject_id"],
                views=record["views"], variant=record["variant"],
                image_path=record["image_path"], size=record["size"])
            self.items[item.item_id] = item
        elif kind == "truth":
            mask = imageio.rle_to_mask(record["mask"]) if record["mask"] else None
            self.truths[record["subject_id"]] = {
                "diseased": record["diseased"], "mask": mask}
        elif kind == "reader":
            self.readers[record["reader_id"]] = {
                "token": record["token"], "order": list(record["order"])}
        elif kind == "annotation":
            ann = Annotation(
                reader_id=record["reader_id"], item_id=record["item_id"],
                quality=record["quality"], confidence=record["confidence"],
                artifacts=record["artifacts"],
                mask=imageio.rle_to_mask(record["mask"]),
                timestamp=record["timestamp"])
            self.annotations[(ann.reader_id, ann.item_id)] = ann
        else:
            raise StudyError(f"unknown record type {kind!r}")

    def _append(self, record: dict):
        record = {"v": SCHEMA_VERSION, **record}
        self._fh.write(json.dumps(record, separators=(",", ":")) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    # -- writes ------------------------------------------------------------

    def add_items(self, items: list[PresentationItem]):
        for item in items:
            if item.item_id in self.items:
                raise StudyError(f"duplicate item id {item.item_id}")
            self._append({"type": "item", "item_id": item.item_id,
                          "subject_id": item.subject_id, "views": item.views,
                          "variant": item.variant, "image_path": item.image_path,
                          "size": item.size})
            self.items[item.item_id] = item

    def add_truth(self, subject_id: str, diseased: bool,
                  mask: np.ndarray | None):
        rle = imageio.mask_to_rle(mask) if mask is not None else None
        self._append({"type": "truth", "subject_id": subject_id,
                      "diseased": diseased, "mask": rle})
        self.truths[subject_id] = {"diseased": diseased,
                                   "mask": None if mask is None
                                   else np.asarray(mask, dtype=bool)}

    def add_reader(self, reader_id: str, token: str, order: list[str]):
        if reader_id in self.readers:
            raise StudyError(f"reader {reader_id} already registered")
        missing = [i for i in order if i not in self.items]
        if missing:
            raise StudyError(f"order references unknown items: {missing[:3]}")
        self._append({"type": "reader", "reader_id": reader_id,
                      "token": token, "order": order})
        self.readers[reader_id] = {"token": token, "order": list(order)}

    def record_annotation(self, ann: Annotation):
        """Validate and durably append one annotation (fsync before ack)."""
        if ann.item_id not in self.items:
            raise ValidationError(f"unknown item {ann.item_id}")
        key = (ann.reader_id, ann.item_id)
        if key in self.annotations:
            raise DuplicateAnnotation(
                f"reader {ann.reader_id} already annotated {ann.item_id}")
        expected = self.items[ann.item_id].size
        if ann.mask.shape != (expected, expected):
            raise ValidationError(
                f"mask shape {ann.mask.shape} != image {expected}x{expected}")
        self._append({"type": "annotation", "reader_id": ann.reader_id,
                      "item_id": ann.item_id, "quality": int(ann.quality),
                      "confidence": int(ann.confidence),
                      "artifacts": int(ann.artifacts),
                      "mask": imageio.mask_to_rle(ann.mask),
                      "timestamp": ann.timestamp})
        self.annotations[key] = ann

    # -- reads ---------------------------------------------------------------

    def reader_progress(self, reader_id: str) -> tuple[int, int]:
        order = self.readers[reader_id]["order"]
        done = sum(1 for item_id in order if (reader_id, item_id) in self.annotations)
        return done, len(order)

    def next_item(self, reader_id: str) -> PresentationItem | None:
        """First unannotated item in this reader's order (idempotent)."""
        if reader_id not in self.readers:
            raise StudyError(f"unknown reader {reader_id}")
        for item_id in self.readers[reader_id]["order"]:
            if (reader_id, item_id) not in self.annotations:
                return self.items[item_id]
        return None


# ---------------------------------------------------------------------------
# analysis


class _TruthView:
    """Minimal LabeledSlice stand-in for classify_annotation."""

    def __init__(self, mask, size):
        self.nodule_mask = mask if mask is not None else np.zeros((size, size), bool)


@dataclass
class StudyReport:
    levels: list[int]
    n_readers: int
    n_subjects: int
    cells: dict = field(default_factory=dict)      # "views/variant" -> stats
    pvalues: dict = field(default_factory=dict)    # "views/measure" -> p|None

    def to_json_dict(self) -> dict:
        return {"levels": self.levels, "n_readers": self.n_readers,
                "n_subjects": self.n_subjects, "cells": self.cells,
                "pvalues": self.pvalues}

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    def save_diagnostics_csv(self, path):
        """Sensitivity/specificity/F1/NPV by variant and view level."""
        lines = ["variant,metric," + ",".join(str(v) for v in self.levels)]
        for variant in ("processed", "sparse"):
            for metric in ("sensitivity", "specificity", "f1", "npv"):
                row = [variant, metric]
                for views in self.levels:
                    value = self.cells[f"{views}/{variant}"]["stats"][metric]
                    row.append("" if value is None else f"{value:.2f}")
                lines.append(",".join(row))
        Path(path).write_text("\n".join(lines) + "\n")

    def save_means_csv(self, path):
        """Per-cell measure means with 95% CI, one row per measure."""
        lines = ["views,variant,measure,mean,ci_low,ci_high,n"]
        for views in self.levels:
            for variant in VARIANTS:
                cell = self.cells[f"{views}/{variant}"]
                for measure in MEASURES:
                    m = cell["means"][measure]
                    lines.append(f"{views},{variant},{measure},{m['mean']:.6g},"
                                 f"{m['ci_low']:.6g},{m['ci_high']:.6g},{m['n']}")
        Path(path).write_text("\n".join(lines) + "\n")


def analyze(store: StudyStore, partial: bool = False,
            cluster_by: str = "subject") -> StudyReport:
    """Aggregate the full study: per-cell means/CIs, confusion matrices,
    diagnostic statistics, and processed-vs-sparse p-values per measure.

    A pure function of the store contents. Requires complete annotation
    unless `partial`; DSC means pool diseased subjects only (zero-DSC
    false negatives included).
    """
    if cluster_by not in ("subject", "reader"):
        raise StudyError("cluster_by must be 'subject' or 'reader'")
    if not store.items or not store.readers:
        raise StudyError("store holds no presentation items or readers")
    missing = [
        (reader_id, item_id)
        for reader_id, meta in sorted(store.readers.items())
        for item_id in meta["order"]
        if (reader_id, item_id) not in store.annotations
    ]
    if missing and not partial:
        raise StudyError(
            f"{len(missing)} (reader, item) pairs lack annotations; "
            "pass partial=True for an incomplete report")

    levels = sorted({item.views for item in store.items.values()})
    subjects = sorted({item.subject_id for item in store.items.values()})
    readers = sorted(store.readers)

    # per (views, variant): list of per-annotation records
    per_cell: dict[tuple[int, str], list[dict]] = {
        (v, var): [] for v in levels for var in VARIANTS}
    for (reader_id, item_id), ann in store.annotations.items():
        item = store.items[item_id]
        truth = store.truths[item.subject_id]
        view = _TruthView(truth["mask"], item.size)
        outcome = classify_annotation(ann.mask, view)
        record = {
            "reader": reader_id, "subject": item.subject_id,
            "quality": ann.quality, "confidence": ann.confidence,
            "artifacts": ann.artifacts, "outcome": outcome,
            "dsc": dice(ann.mask, view.nodule_mask) if truth["diseased"] else None,
        }
        per_cell[(item.views, item.variant)].append(record)

    report = StudyReport(levels=levels, n_readers=len(readers),
                         n_subjects=len(subjects))

    for (views, variant), records in per_cell.items():
        confusion = ConfusionCounts()
        for r in records:
            confusion = confusion.add(r["outcome"])
        means = {}
        for measure in MEASURES:
            values = [r[measure] for r in records if r[measure] is not None]
            if values:
                m, lo, hi = mean_ci(values)
                means[measure] = {"mean": m, "ci_low": lo, "ci_high": hi,
                                  "n": len(values)}
            else:
                means[measure] = {"mean": float("nan"), "ci_low": float("nan"),
                                  "ci_high": float("nan"), "n": 0}
        report.cells[f"{views}/{variant}"] = {
            "n": len(records),
            "means": means,
            "confusion": {"tp": confusion.tp, "fp": confusion.fp,
                          "tn": confusion.tn, "fn": confusion.fn},
            "stats": diagnostic_stats(confusion),
        }

    # paired processed-vs-sparse tests per level and measure
    by_key: dict[tuple, dict] = {}
    for (views, variant), records in per_cell.items():
        for r in records:
            by_key.setdefault((views, r["reader"], r["subject"]), {})[variant] = r
    for views in levels:
        pairs_at_level = {k: v for k, v in by_key.items() if k[0] == views}
        for measure in MEASURES:
            samples = []
            for (_, reader, subject), sides in sorted(pairs_at_level.items()):
                if "processed" not in sides or "sparse" not in sides:
                    continue
                vp = sides["processed"][measure]
                vs = sides["sparse"][measure]
                if vp is None or vs is None:
                    continue
                cluster = subject if cluster_by == "subject" else reader
                samples.append(PairedSample(cluster, float(vp), float(vs)))
            key = f"{views}/{measure}"
            if len({s.cluster_id for s in samples}) < 2:
                report.pvalues[key] = None
                continue
            try:
                report.pvalues[key] = clustered_wilcoxon(samples)
            except AllZeroDifferences:
                report.pvalues[key] = None
    return report
