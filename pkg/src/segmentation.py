#!/usr/bin/env python3
# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

"""One-shot segmentation by label propagation, and overlap scores."""

import dataclasses
import logging
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from fields import FieldError, LabelVolume, VectorField, check_same_grid, stack_values
from transform import DEFAULT_EXP_STEPS, exp_velocity, warp_labels_nn

logger = logging.getLogger(__name__)


def propagate_labels(
    atlas_labels: LabelVolume, velocity: VectorField, steps: int = DEFAULT_EXP_STEPS
) -> LabelVolume:
    """Carry the atlas annotation into subject space through ``Exp(-v)``."""
    check_same_grid(atlas_labels, velocity)
    return warp_labels_nn(atlas_labels, exp_velocity(-velocity, steps))


@dataclasses.dataclass(frozen=True)
class DiceReport:
    """Per-label Dice scores and their mean.

    A label absent from both volumes maps to ``None`` and is left out of the mean.
    """

    per_label: Dict[int, Optional[float]]
    mean: float


def dice(a: LabelVolume, b: LabelVolume, label_set: Iterable[int]) -> DiceReport:
    """Return ``2|a=l and b=l| / (|a=l| + |b=l|)`` for every label ``l``."""
    check_same_grid(a, b)
    labels = sorted({int(label) for label in label_set})
    if not labels:
        raise FieldError("Dice needs a non-empty label set")
    per_label: Dict[int, Optional[float]] = {}
    for label in labels:
        in_a = a.labels == label
        in_b = b.labels == label
        size = int(np.count_nonzero(in_a)) + int(np.count_nonzero(in_b))
        if size == 0:
            per_label[label] = None
            continue
        per_label[label] = 2.0 * np.count_nonzero(in_a & in_b) / size
    scored = [score for score in per_label.values() if score is not None]
    return DiceReport(per_label=per_label, mean=float(np.mean(scored)) if scored else float("nan"))


def vote_labels(volumes: Sequence[LabelVolume]) -> LabelVolume:
    """Voxelwise majority vote; ties go to the smallest label id."""
    if not volumes:
        raise FieldError("Cannot vote on an empty list of label volumes")
    grid = check_same_grid(*volumes)
    stack = stack_values(volumes)
    labels = np.unique(stack)
    counts = np.stack([np.count_nonzero(stack == label, axis=0) for label in labels])
    # argmax returns the first maximum, and labels are sorted ascending
    winner = labels[np.argmax(counts, axis=0)]
    return LabelVolume(grid=grid, labels=winner)
