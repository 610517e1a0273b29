"""Reading and writing run artifacts: PNG images, CSV tables, JSON documents.

Image conventions:
    RGB images       8-bit PNG
    masks            8-bit grayscale PNG, values {0, 255}
    difference maps  16-bit grayscale PNG, DIFF_PNG_SCALE counts per unit, clamped
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

from .colorlab import DiffMap, RgbImage
from .errors import ImageReadError
from .figures import figure_to_png, histogram_figure
from .histstats import histograms_frame
from .maskdiff import BinaryMask, CalibrationResult, overlay_composite

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DIFF_PNG_SCALE = 256
_UINT16_MAX = 65535

CASE_FILES = (
    "deid.png",
    "twin_path.png",
    "twin_healthy.png",
    "diff.png",
    "mask.png",
    "overlay.png",
    "calibration.csv",
    "histograms.csv",
    "histograms.png",
    "manifest.json",
)


def _require(path: PathLike) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    return path


def _open_image(path: PathLike) -> Image.Image:
    path = _require(path)
    try:
        im = Image.open(path)
    except UnidentifiedImageError as exc:
        raise ImageReadError(f"not a readable image: {path}") from exc
    try:
        im.load()
    except (OSError, SyntaxError) as exc:
        im.close()
        raise ImageReadError(f"cannot decode image {path}: {exc}") from exc
    return im


def _prepare(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# =============================================================================
# IMAGES
# =============================================================================


def save_png(img: RgbImage, path: PathLike) -> Path:
    path = _prepare(path)
    Image.fromarray(img.data).save(path, format="PNG")
    return path


def load_png(path: PathLike) -> RgbImage:
    """Load any Pillow-readable image as 8-bit RGB."""
    with _open_image(path) as im:
        return RgbImage(np.array(im.convert("RGB"), dtype=np.uint8))


def save_mask_png(mask: BinaryMask, path: PathLike) -> Path:
    path = _prepare(path)
    Image.fromarray(np.where(mask.bits, 255, 0).astype(np.uint8)).save(path, format="PNG")
    return path


def load_mask_png(path: PathLike) -> BinaryMask:
    """Grayscale mask; pixels above 127 are set."""
    with _open_image(path) as im:
        return BinaryMask(np.array(im.convert("L")) > 127)


def save_diff_png(diff: DiffMap, path: PathLike) -> Path:
    path = _prepare(path)
    counts = np.clip(np.rint(diff.values * DIFF_PNG_SCALE), 0, _UINT16_MAX).astype(np.uint16)
    Image.fromarray(counts).save(path, format="PNG")
    return path


def load_diff_png(path: PathLike) -> DiffMap:
    with _open_image(path) as im:
        counts = np.array(im, dtype=np.float64)
    return DiffMap(counts / DIFF_PNG_SCALE)


# =============================================================================
# TABLES AND DOCUMENTS
# =============================================================================


def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    path = _prepare(path)
    frame.to_csv(path, index=False)
    return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def to_json(document: Any) -> str:
    return json.dumps(document, sort_keys=True, indent=2, default=_jsonable)


def write_json(document: Any, path: PathLike) -> Path:
    path = _prepare(path)
    path.write_text(to_json(document) + "\n", encoding="utf-8")
    return path


def read_json(path: PathLike) -> Any:
    return json.loads(_require(path).read_text(encoding="utf-8"))


def write_jsonl(records: Iterable[Dict], path: PathLike) -> Path:
    path = _prepare(path)
    lines = [json.dumps(r, sort_keys=True, default=_jsonable) for r in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def calibration_frame(result: CalibrationResult) -> pd.DataFrame:
    return pd.DataFrame(result.curve, columns=["theta", "iou"])


# =============================================================================
# CASE DIRECTORIES
# =============================================================================


def write_case(result, directory: PathLike, overlay: Optional[RgbImage] = None) -> Dict[str, Path]:
    """Write every artifact of one PipelineResult into `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if overlay is None:
        overlay = overlay_composite(result.reference, result.mask, result.de_identified)

    paths = {
        "deid.png": save_png(result.de_identified, directory / "deid.png"),
        "twin_path.png": save_png(result.twins.path_image, directory / "twin_path.png"),
        "twin_healthy.png": save_png(result.twins.healthy_image, directory / "twin_healthy.png"),
        "diff.png": save_diff_png(result.diff, directory / "diff.png"),
        "mask.png": save_mask_png(result.mask, directory / "mask.png"),
        "overlay.png": save_png(overlay, directory / "overlay.png"),
        "calibration.csv": write_csv(calibration_frame(result.calibration), directory / "calibration.csv"),
        "histograms.csv": write_csv(histograms_frame(result.histograms), directory / "histograms.csv"),
        "manifest.json": write_json(result.manifest, directory / "manifest.json"),
    }
    figure = directory / "histograms.png"
    figure.write_bytes(figure_to_png(histogram_figure(result.histograms)))
    paths["histograms.png"] = figure
    logger.debug("wrote case artifacts to %s", directory)
    return paths
