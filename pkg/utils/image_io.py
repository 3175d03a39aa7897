"""
PNG input/output for pipeline images
Images live in memory as float arrays in [0, 1], either HxW or HxWx3
"""
import os
import logging
from typing import Union

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


def read_png(path: PathLike) -> np.ndarray:
    """Read an image file as float32 in [0, 1]; grayscale stays 2-D"""
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(img, dtype=np.float64)
            return (arr / 65535.0).astype(np.float32)
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 3 and np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 0], arr[..., 2]):
        return np.ascontiguousarray(arr[..., 0])
    return arr


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path: PathLike, image: np.ndarray) -> str:
    """Write a [0, 1] float image; replicated-gray 3-channel images are stored as single-channel"""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[-1] not in (1, 3):
        arr = np.moveaxis(arr, 0, -1)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim == 3 and np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 0], arr[..., 2]):
        arr = arr[..., 0]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(to_uint8(arr)).save(path, format="PNG")
    return str(path)


def as_gray(image: np.ndarray) -> np.ndarray:
    """Intensity plane of an HxW or HxWx3 image"""
    arr = np.asarray(image)
    return arr.mean(axis=-1) if arr.ndim == 3 else arr


def as_three_channel(image: np.ndarray) -> np.ndarray:
    """Duplicate a grayscale plane into HxWx3"""
    arr = np.asarray(image)
    if arr.ndim == 2:
        return np.repeat(arr[..., None], 3, axis=-1)
    return arr
