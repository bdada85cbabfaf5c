"""Synthetic thorax slices with a single lung nodule and its ground truth.

The phantom is an ellipse composite: soft-tissue body, two air-filled
lung fields, a handful of bright vessel cross-sections, and (optionally)
one nodule. All structure edges are smoothed over about one pixel so the
slices behave well under projection/reconstruction. Values are HU:
air -1000, soft tissue +40, lung -800, vessels +50, nodule +20.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grids import ImageGrid, UNIT_HU
from . import imageio


class PlacementError(RuntimeError):
    """No valid nodule position found inside a lung field."""


HU_AIR = -1000.0
HU_BODY = 40.0
HU_LUNG = -800.0
HU_VESSEL = 50.0
HU_NODULE = 20.0


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one slice; identical specs generate identical slices."""

    size: int = 128
    pixel_size: float = 2.0
    nodule_diameter: float = 15.0
    nodule_center: tuple[float, float] | str = "random"
    n_vessels: int = 6
    seed: int = 0
    edge_px: float = 1.0  # body/lung/vessel edge width; the nodule edge stays 1 px

    def __post_init__(self):
        if self.size < 16 or self.size % 2 != 0:
            raise ValueError(f"size must be even and >= 16, got {self.size}")
        if self.pixel_size <= 0:
            raise ValueError("pixel_size must be positive")
        if self.nodule_diameter < 0:
            raise ValueError("nodule_diameter must be >= 0")
        if self.edge_px <= 0:
            raise ValueError("edge_px must be positive")


@dataclass
class LabeledSlice:
    """HU image plus the binary nodule ground truth (empty if healthy)."""

    image: ImageGrid
    nodule_mask: np.ndarray
    meta: PhantomSpec | str | None = None

    def __post_init__(self):
        self.nodule_mask = np.asarray(self.nodule_mask, dtype=bool)
        if self.nodule_mask.shape != self.image.values.shape:
            raise ValueError("mask shape does not match image")

    @property
    def diseased(self) -> bool:
        return bool(self.nodule_mask.any())


def _ellipse_rho(x, y, cx, cy, a, b, angle):
    """Normalized elliptical radius: 1.0 on the boundary."""
    ca, sa = np.cos(angle), np.sin(angle)
    u = (x - cx) * ca + (y - cy) * sa
    v = -(x - cx) * sa + (y - cy) * ca
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def _soft_ellipse(x, y, cx, cy, a, b, angle, edge):
    """Indicator in [0,1] with a smoothstep edge of width `edge` (mm)."""
    rho = _ellipse_rho(x, y, cx, cy, a, b, angle)
    # approximate signed distance to the boundary, in mm
    d = (1.0 - rho) * min(a, b)
    t = np.clip(d / edge + 0.5, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _inside_ellipse(px_x, px_y, cx, cy, a, b, angle, margin):
    """Whether a disk of radius `margin` around the point stays inside."""
    if a <= margin or b <= margin:
        return False
    return _ellipse_rho(px_x, px_y, cx, cy, a - margin, b - margin, angle) <= 1.0


def generate_phantom(spec: PhantomSpec) -> LabeledSlice:
    """Render a thorax slice from a spec; deterministic for a fixed seed.

    The nodule mask is the set of pixels whose nodule blend weight exceeds
    one half. nodule_diameter == 0 produces a healthy slice with an empty
    mask.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    half = n * spec.pixel_size / 2.0
    edge = spec.edge_px * spec.pixel_size
    nodule_edge = 1.0 * spec.pixel_size

    c = np.arange(n) - n // 2
    r = n // 2 - np.arange(n)
    x = (c * spec.pixel_size)[None, :]
    y = (r * spec.pixel_size)[:, None]

    jitter = lambda lo, hi: rng.uniform(lo, hi)

    body_a = half * jitter(0.80, 0.88)
    body_b = half * jitter(0.58, 0.66)
    body_cy = half * jitter(-0.04, 0.02)
    img = np.full((n, n), HU_AIR)
    w_body = _soft_ellipse(x, y, 0.0, body_cy, body_a, body_b, 0.0, edge)
    img = img + w_body * (HU_BODY - img)

    lungs = []
    for side in (-1.0, +1.0):
        la = body_a * jitter(0.30, 0.36)
        lb = body_b * jitter(0.66, 0.76)
        lcx = side * body_a * jitter(0.42, 0.50)
        lcy = body_cy + body_b * jitter(0.00, 0.08)
        tilt = side * np.deg2rad(jitter(2.0, 10.0))
        lungs.append((lcx, lcy, la, lb, tilt))
        w_lung = _soft_ellipse(x, y, lcx, lcy, la, lb, tilt, edge)
        img = img + w_lung * (HU_LUNG - img)

    lung_weight = np.zeros((n, n))
    for lcx, lcy, la, lb, tilt in lungs:
        lung_weight = np.maximum(lung_weight,
                                 _soft_ellipse(x, y, lcx, lcy, la, lb, tilt, edge))

    for _ in range(spec.n_vessels):
        lcx, lcy, la, lb, tilt = lungs[rng.integers(len(lungs))]
        rho = np.sqrt(rng.uniform(0.0, 0.7))
        phi = rng.uniform(0.0, 2.0 * np.pi)
        ca, sa = np.cos(tilt), np.sin(tilt)
        u, v = rho * la * np.cos(phi), rho * lb * np.sin(phi)
        vcx, vcy = lcx + u * ca - v * sa, lcy + u * sa + v * ca
        va = rng.uniform(2.0, 5.0) * spec.pixel_size
        vb = rng.uniform(0.5, 1.2) * spec.pixel_size
        w_vessel = _soft_ellipse(x, y, vcx, vcy, va, vb,
                                 rng.uniform(0.0, np.pi), edge) * lung_weight
        img = img + w_vessel * (HU_VESSEL - img)

    mask = np.zeros((n, n), dtype=bool)
    if spec.nodule_diameter > 0:
        radius = spec.nodule_diameter / 2.0
        margin = radius + nodule_edge
        if spec.nodule_center == "random":
            center = None
            for _ in range(200):
                lcx, lcy, la, lb, tilt = lungs[rng.integers(len(lungs))]
                rho = np.sqrt(rng.uniform(0.0, 1.0))
                phi = rng.uniform(0.0, 2.0 * np.pi)
                ca, sa = np.cos(tilt), np.sin(tilt)
                u, v = rho * la * np.cos(phi), rho * lb * np.sin(phi)
                cand = (lcx + u * ca - v * sa, lcy + u * sa + v * ca)
                if _inside_ellipse(cand[0], cand[1], lcx, lcy, la, lb, tilt, margin):
                    center = cand
                    break
            if center is None:
                raise PlacementError(
                    f"could not place a {spec.nodule_diameter} mm nodule inside a lung")
        else:
            col, row = spec.nodule_center
            center = ((col - n // 2) * spec.pixel_size, (n // 2 - row) * spec.pixel_size)
            if not any(_inside_ellipse(center[0], center[1], *lung, margin)
                       for lung in lungs):
                raise PlacementError(f"nodule at {spec.nodule_center} leaves the lung field")
        sigma = _soft_ellipse(x, y, center[0], center[1], radius, radius, 0.0, nodule_edge)
        img = img + sigma * (HU_NODULE - img)
        mask = sigma > 0.5

    return LabeledSlice(ImageGrid(img, spec.pixel_size, UNIT_HU), mask, spec)


def load_raw_slice(path: str | Path, header: dict | None = None,
                   mask_path: str | Path | None = None) -> LabeledSlice:
    """Load an externally supplied HU slice (plus companion mask if present).

    `header` overrides the JSON sidecar for headerless blobs. The default
    mask location is ``<stem>.mask.json`` next to the image.
    """
    path = Path(path)
    if header is not None:
        data = np.fromfile(path, dtype="<f4")
        w, h = int(header["width"]), int(header["height"])
        if w != h:
            raise imageio.DataFormatError(f"{path}: header width {w} != height {h}")
        if data.size != w * h:
            raise imageio.DataFormatError(f"{path}: payload/header size mismatch")
        if not np.all(np.isfinite(data)):
            raise imageio.DataFormatError(f"{path}: non-finite values")
        image = ImageGrid(data.reshape(h, w), float(header["pixel_size_mm"]),
                          header.get("unit_tag", UNIT_HU))
    else:
        image = imageio.load_raw_image(path)

    if mask_path is None:
        candidate = path.with_suffix(".mask.json")
        mask_path = candidate if candidate.exists() else None
    if mask_path is not None:
        mask = imageio.load_mask(mask_path)
        if mask.shape != image.values.shape:
            raise imageio.DataFormatError(
                f"mask {mask_path} shape {mask.shape} != image {image.values.shape}")
    else:
        mask = np.zeros_like(image.values, dtype=bool)
    return LabeledSlice(image, mask, str(path))


# 12/2/8 subjects in the source cohort
DEFAULT_SPLIT_RATIOS = (12 / 22, 2 / 22, 8 / 22)


def split_subjects(subject_ids: list[str],
                   ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS,
                   ) -> dict[str, str]:
    """Assign whole subjects to train/validation/test in the given ratios.

    Deterministic: the list order decides membership. Every split gets at
    least one subject when there are at least three.
    """
    n = len(subject_ids)
    if n < 3:
        raise ValueError(f"need at least 3 subjects to split, got {n}")
    n_val = max(1, round(ratios[1] * n))
    n_test = max(1, round(ratios[2] * n))
    n_train = max(1, n - n_val - n_test)
    n_val = min(n_val, n - n_train - 1)
    assignment = {}
    for i, sid in enumerate(subject_ids):
        if i < n_train:
            assignment[sid] = "train"
        elif i < n_train + n_val:
            assignment[sid] = "val"
        else:
            assignment[sid] = "test"
    return assignment


def build_dataset(outdir: str | Path, n_train: int, n_val: int, n_test: int,
                  base: PhantomSpec, slices_per_subject: int = 1,
                  seed: int = 0) -> list[dict]:
    """Generate a diseased model-assessment cohort and write its manifest.

    Subjects are split disjointly; every slice of a subject lands in that
    subject's split. Returns the manifest entries.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    counts = [("train", n_train), ("val", n_val), ("test", n_test)]
    subject_no = 0
    for split, count in counts:
        for _ in range(count):
            sid = f"s{subject_no:03d}"
            subject_no += 1
            for k in range(slices_per_subject):
                spec = PhantomSpec(
                    size=base.size, pixel_size=base.pixel_size,
                    nodule_diameter=float(rng.uniform(10.0, 20.0)),
                    nodule_center="random", n_vessels=base.n_vessels,
                    seed=int(rng.integers(0, 2**31 - 1)))
                sl = generate_phantom(spec)
                stem = outdir / f"{sid}_slice{k}"
                imageio.save_raw_image(stem.with_suffix(".raw"), sl.image)
                imageio.save_mask(stem.with_suffix(".mask.json"), sl.nodule_mask)
                entries.append({
                    "subject_id": sid,
                    "slice_path": str(stem.with_suffix(".raw")),
                    "mask_path": str(stem.with_suffix(".mask.json")),
                    "split": split,
                    "diseased": sl.diseased,
                })
    imageio.save_manifest(outdir / "manifest.json", entries)
    return entries


def build_study_cohort(outdir: str | Path, n_diseased: int, n_healthy: int,
                       base: PhantomSpec, seed: int = 0) -> list[dict]:
    """Generate the reader-study cohort: one slice per subject."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_diseased + n_healthy):
        diseased = i < n_diseased
        sid = f"r{i:03d}"
        spec = PhantomSpec(
            size=base.size, pixel_size=base.pixel_size,
            nodule_diameter=float(rng.uniform(10.0, 20.0)) if diseased else 0.0,
            nodule_center="random", n_vessels=base.n_vessels,
            seed=int(rng.integers(0, 2**31 - 1)))
        sl = generate_phantom(spec)
        stem = outdir / f"{sid}_slice0"
        imageio.save_raw_image(stem.with_suffix(".raw"), sl.image)
        imageio.save_mask(stem.with_suffix(".mask.json"), sl.nodule_mask)
        entries.append({
            "subject_id": sid,
            "slice_path": str(stem.with_suffix(".raw")),
            "mask_path": str(stem.with_suffix(".mask.json")),
            "split": "study",
            "diseased": sl.diseased,
        })
    imageio.save_manifest(outdir / "manifest.json", entries)
    return entries
