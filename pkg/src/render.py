#!/usr/bin/env python3
# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

"""Grayscale slice renders."""

import logging
from typing import Optional

import numpy as np
from PIL import Image

from fields import FieldError, LabelVolume, ScalarVolume, check_same_grid

logger = logging.getLogger(__name__)

UNIFORM_GRAY = 128
OUTLINE_VALUE = 255


def _slice(values: np.ndarray, axis: int, index: Optional[int]) -> np.ndarray:
    if axis not in (0, 1, 2):
        raise FieldError(f"Slice axis must be 0, 1 or 2, got {axis}")
    size = values.shape[axis]
    index = size // 2 if index is None else index
    if not 0 <= index < size:
        raise FieldError(f"Slice index {index} is outside [0, {size - 1}] along axis {axis}")
    # image rows run along the second remaining axis
    return np.take(values, index, axis=axis).T


def to_gray(plane: np.ndarray) -> np.ndarray:
    """Min-max scale a 2D array to 8-bit; constant input becomes uniform gray."""
    low = float(plane.min())
    high = float(plane.max())
    if high <= low:
        return np.full(plane.shape, UNIFORM_GRAY, dtype=np.uint8)
    return np.rint((plane - low) / (high - low) * 255.0).astype(np.uint8)


def label_outline(plane: np.ndarray) -> np.ndarray:
    """Pixels whose label differs from a 4-neighbour."""
    edge = np.zeros(plane.shape, dtype=bool)
    edge[1:, :] |= plane[1:, :] != plane[:-1, :]
    edge[:-1, :] |= plane[:-1, :] != plane[1:, :]
    edge[:, 1:] |= plane[:, 1:] != plane[:, :-1]
    edge[:, :-1] |= plane[:, :-1] != plane[:, 1:]
    return edge


def render_slices(
    volume: ScalarVolume,
    axis: int,
    index: Optional[int],
    path: str,
    labels: Optional[LabelVolume] = None,
) -> str:
    """Write one slice as binary PGM; with ``labels``, label boundaries are drawn white."""
    pixels = to_gray(_slice(volume.values, axis, index))
    if labels is not None:
        check_same_grid(volume, labels)
        pixels[label_outline(_slice(labels.labels, axis, index))] = OUTLINE_VALUE
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PPM")
    logger.debug("Rendered axis %d slice to %s", axis, path)
    return path
