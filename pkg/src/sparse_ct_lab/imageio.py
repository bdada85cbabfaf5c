"""File formats for images, sinograms, and segmentation masks.

Raw format: little-endian float32, row-major, with a JSON header sitting
next to the payload (``foo.raw`` + ``foo.json``). Sinograms use the same
container with the acquisition geometry in the header. Display images can
also round-trip through 16-bit grayscale PNG with a JSON sidecar carrying
the HU calibration.

Masks are JSON run-length encodings (row-major, runs alternating
zeros/ones, starting with zeros), shared verbatim with the annotation
wire format.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .grids import ImageGrid, UNIT_HU, UNIT_NORMALIZED
from .tomo import ProjectionGeometry, Sinogram


class DataFormatError(ValueError):
    """Unreadable, inconsistent, or out-of-bounds file content."""


def _header_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_raw_image(path: str | Path, image: ImageGrid) -> None:
    path = Path(path)
    header = {
        "width": image.width,
        "height": image.height,
        "pixel_size_mm": image.pixel_size,
        "unit_tag": image.unit_tag,
    }
    _header_path(path).write_text(json.dumps(header, indent=1))
    image.values.astype("<f4").tofile(path)


def load_raw_image(path: str | Path) -> ImageGrid:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"missing raw file {path}")
    try:
        header = json.loads(_header_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"unreadable header for {path}: {exc}") from exc
    try:
        w, h = int(header["width"]), int(header["height"])
        pixel_size = float(header["pixel_size_mm"])
        unit_tag = header["unit_tag"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed header for {path}: {exc}") from exc
    if w != h:
        raise DataFormatError(f"{path}: header width {w} != height {h}")
    data = np.fromfile(path, dtype="<f4")
    if data.size != w * h:
        raise DataFormatError(f"{path}: payload has {data.size} values, header says {w * h}")
    values = data.reshape(h, w)
    if not np.all(np.isfinite(values)):
        raise DataFormatError(f"{path}: non-finite values")
    return ImageGrid(values, pixel_size, unit_tag)


def save_raw_array(path: str | Path, values: np.ndarray, pixel_size: float,
                   unit_tag: str) -> None:
    """Raw container for square fields outside the HU/normalized pair
    (residual labels live in [-1, 1])."""
    path = Path(path)
    values = np.asarray(values)
    h, w = values.shape
    header = {"width": w, "height": h, "pixel_size_mm": pixel_size,
              "unit_tag": unit_tag}
    _header_path(path).write_text(json.dumps(header, indent=1))
    values.astype("<f4").tofile(path)


def load_raw_array(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    try:
        header = json.loads(_header_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"unreadable header for {path}: {exc}") from exc
    w, h = int(header["width"]), int(header["height"])
    data = np.fromfile(path, dtype="<f4")
    if data.size != w * h:
        raise DataFormatError(f"{path}: payload has {data.size} values, "
                              f"header says {w * h}")
    return data.reshape(h, w), header


def save_sinogram(path: str | Path, sino: Sinogram) -> None:
    path = Path(path)
    geom = sino.geometry
    header = {
        "kind": "sinogram",
        "n_views": geom.n_views,
        "detector_bins": geom.detector_bins,
        "detector_spacing_mm": geom.detector_spacing,
        "angle_start": float(geom.angles[0]),
        "angle_step": float(geom.angles[1] - geom.angles[0]) if geom.n_views > 1 else 0.0,
    }
    _header_path(path).write_text(json.dumps(header, indent=1))
    sino.values.astype("<f4").tofile(path)


def load_sinogram(path: str | Path) -> Sinogram:
    path = Path(path)
    try:
        header = json.loads(_header_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"unreadable sinogram header for {path}: {exc}") from exc
    if header.get("kind") != "sinogram":
        raise DataFormatError(f"{path}: not a sinogram header")
    n_views = int(header["n_views"])
    bins = int(header["detector_bins"])
    angles = header["angle_start"] + np.arange(n_views) * header["angle_step"]
    geom = ProjectionGeometry(n_views, bins, float(header["detector_spacing_mm"]), angles)
    data = np.fromfile(path, dtype="<f4")
    if data.size != n_views * bins:
        raise DataFormatError(f"{path}: payload size mismatch")
    return Sinogram(geom, data.reshape(n_views, bins).astype(np.float64))


def save_png16(path: str | Path, image: ImageGrid,
               hu_range: tuple[float, float] = (-2048.0, 2048.0)) -> None:
    """16-bit grayscale PNG plus JSON sidecar with the value calibration.

    HU images are mapped through hu_range; normalized images through
    [0, 1]. hu_slope/hu_intercept in the sidecar invert the mapping.
    """
    path = Path(path)
    if image.unit_tag == UNIT_HU:
        lo, hi = hu_range
    else:
        lo, hi = 0.0, 1.0
    scale = (hi - lo) / 65535.0
    codes = np.clip(np.round((image.values - lo) / scale), 0, 65535).astype(np.uint16)
    Image.fromarray(codes).save(path)
    sidecar = {
        "pixel_size_mm": image.pixel_size,
        "hu_slope": scale,
        "hu_intercept": lo,
        "unit_tag": image.unit_tag,
    }
    _header_path(path).write_text(json.dumps(sidecar, indent=1))


def load_png16(path: str | Path) -> ImageGrid:
    path = Path(path)
    try:
        sidecar = json.loads(_header_path(path).read_text())
        codes = np.asarray(Image.open(path), dtype=np.float64)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"unreadable PNG pair at {path}: {exc}") from exc
    values = codes * sidecar["hu_slope"] + sidecar["hu_intercept"]
    if sidecar["unit_tag"] == UNIT_NORMALIZED:
        values = np.clip(values, 0.0, 1.0)
    return ImageGrid(values, sidecar["pixel_size_mm"], sidecar["unit_tag"])


def render_png8(image: ImageGrid) -> bytes:
    """8-bit grayscale PNG bytes of a normalized image (display/wire use)."""
    if image.unit_tag != UNIT_NORMALIZED:
        raise DataFormatError("render_png8 expects a normalized image")
    import io

    codes = np.clip(np.round(image.values * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(codes, mode="L").save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Run-length encoded binary masks


def mask_to_rle(mask: np.ndarray) -> dict:
    """Row-major RLE: runs alternate 0s/1s and always start with a 0-run."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    flat = mask.ravel()
    if flat.size == 0:
        return {"width": w, "height": h, "counts": []}
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    runs = np.diff(np.concatenate(([0], boundaries, [flat.size]))).tolist()
    if flat[0]:
        runs = [0] + runs
    return {"width": w, "height": h, "counts": runs}


def rle_to_mask(rle: dict) -> np.ndarray:
    try:
        w, h = int(rle["width"]), int(rle["height"])
        counts = [int(c) for c in rle["counts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed RLE mask: {exc}") from exc
    if w <= 0 or h <= 0:
        raise DataFormatError(f"bad RLE dimensions {w}x{h}")
    if any(c < 0 for c in counts):
        raise DataFormatError("negative run length in RLE mask")
    total = sum(counts)
    if total != w * h:
        raise DataFormatError(
            f"RLE runs cover {total} pixels, outside the {w}x{h} grid ({w * h})")
    flat = np.zeros(w * h, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape(h, w)


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    Path(path).write_text(json.dumps(mask_to_rle(mask)))


def load_mask(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        rle = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"unreadable mask file {path}: {exc}") from exc
    return rle_to_mask(rle)


# ---------------------------------------------------------------------------
# Dataset manifests


def save_manifest(path: str | Path, entries: list[dict]) -> None:
    Path(path).write_text(json.dumps(entries, indent=1))


def load_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"unreadable manifest {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise DataFormatError(f"manifest {path} is not a list")
    return entries
