"""
8-bit binary PPM (P6) / PGM (P5) raster I/O through Pillow
"""
import logging
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from src.errors import RasterError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _open(path: PathLike, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.format != "PPM":
                raise RasterError(f"{path}: expected a binary PPM/PGM raster, got {img.format}")
            if img.mode != mode:
                raise RasterError(f"{path}: expected mode {mode}, got {img.mode}")
            return np.array(img, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise RasterError(f"{path}: not a readable raster") from exc


def read_ppm(path: PathLike) -> np.ndarray:
    """RGB raster as uint8 [H, W, 3]"""
    return _open(path, "RGB")


def read_pgm(path: PathLike) -> np.ndarray:
    """grey / label raster as uint8 [H, W]"""
    return _open(path, "L")


def _save(array: np.ndarray, path: PathLike):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path, format="PPM")


def write_ppm(path: PathLike, rgb: np.ndarray):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise RasterError(f"PPM needs [H, W, 3] data, got {rgb.shape}")
    _save(rgb, path)


def write_pgm(path: PathLike, grey: np.ndarray):
    grey = np.asarray(grey)
    if grey.ndim != 2:
        raise RasterError(f"PGM needs [H, W] data, got {grey.shape}")
    _save(grey, path)


def to_unit(rgb: np.ndarray) -> np.ndarray:
    """uint8 [H, W, 3] -> float32 [3, H, W] in [0, 1]"""
    return np.ascontiguousarray(np.transpose(rgb, (2, 0, 1)), dtype=np.float32) / np.float32(255.0)


def to_bytes(image: np.ndarray) -> np.ndarray:
    """float [C, H, W] in [0, 1] -> uint8 [H, W, C]"""
    scaled = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    return np.ascontiguousarray(np.transpose(scaled.astype(np.uint8), (1, 2, 0)))
