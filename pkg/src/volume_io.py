#!/usr/bin/env python3
# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

"""Reading and writing volumes, meshes, shape models and CSV tables.

The canonical volume format is a YAML header rendered from ``templates/`` next to a raw
little-endian payload (``.raw``). NIfTI-1 files (``.nii``, ``.nii.gz``) are accepted for
scalar and label volumes.
"""

import csv
import logging
import os
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np
import trimesh
import yaml
from jinja2 import Environment, FileSystemLoader
from nibabel.filebasedimages import ImageFileError
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from fields import FieldError, Grid, LabelVolume, ScalarVolume, VectorField
from shapegen import PcaModel
from transform import TriMesh

logger = logging.getLogger(__name__)

HEADER_TEMPLATE = "volume_header.yaml.j2"
TEMPLATES_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "templates")
HEADER_SUFFIX = ".yaml"
PAYLOAD_SUFFIX = ".raw"
NIFTI_SUFFIXES = (".nii", ".nii.gz")
FORMAT_VERSION = 1
MAX_LABEL = np.iinfo(np.uint16).max


class VolumeFormatError(ValueError):
    """Exception raised when a file cannot be read or written in the expected format."""

    def __init__(self, msg: str):
        """Initialize a new instance of the VolumeFormatError exception.

        Args:
            msg (str): Explanation of the error.
        """
        super().__init__(msg)
        self.msg = msg


class VolumeKind(str, Enum):
    """Payload layouts of a volume file."""

    SCALAR = "scalar"
    VECTOR3 = "vector3"
    LABELS = "labels-u16"


DTYPES = {VolumeKind.SCALAR: "f32", VolumeKind.VECTOR3: "f32", VolumeKind.LABELS: "u16"}
NUMPY_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}
CHANNELS = {VolumeKind.SCALAR: 1, VolumeKind.VECTOR3: 3, VolumeKind.LABELS: 1}


class VolumeHeader(BaseModel):
    """Parsed sidecar header."""

    model_config = ConfigDict(use_enum_values=False, extra="ignore")

    format: str
    version: int
    kind: VolumeKind
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    dtype: str
    order: str
    endian: str
    payload: str

    @field_validator("format")
    @classmethod
    def _known_format(cls, value: str) -> str:
        if value != "darc-volume":
            raise ValueError(f"unknown format {value!r}")
        return value

    @field_validator("order")
    @classmethod
    def _x_fastest(cls, value: str) -> str:
        if value != "x-fastest":
            raise ValueError(f"unsupported order {value!r}")
        return value

    @field_validator("endian")
    @classmethod
    def _little_endian(cls, value: str) -> str:
        if value != "little":
            raise ValueError(f"unsupported endianness {value!r}")
        return value

    @property
    def byte_count(self) -> int:
        """Expected payload size in bytes."""
        voxels = self.dims[0] * self.dims[1] * self.dims[2]
        return voxels * CHANNELS[self.kind] * NUMPY_DTYPES[self.dtype].itemsize


def render_volume_header(
    kind: VolumeKind, grid: Grid, payload: str, version: int = FORMAT_VERSION
) -> str:
    """Render the sidecar header of a volume file.

    Args:
        kind: Payload layout.
        grid: Voxel grid of the volume.
        payload: File name of the raw payload, relative to the header.
        version: Format version.
    """
    jinja2_environment = Environment(loader=FileSystemLoader(TEMPLATES_PATH))
    template = jinja2_environment.get_template(HEADER_TEMPLATE)
    content = template.render(
        version=version,
        kind=kind.value,
        dims=list(grid.dims),
        spacing=[repr(float(s)) for s in grid.spacing],
        dtype=DTYPES[kind],
        payload=payload,
    )
    return content + "\n"


def is_nifti(path: str) -> bool:
    """Whether ``path`` names a NIfTI-1 file."""
    return path.endswith(NIFTI_SUFFIXES)


def _stem(path: str) -> str:
    for suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def header_path(path: str) -> str:
    """Header path of a raw volume given its header, payload or stem."""
    return _stem(path) + HEADER_SUFFIX


def _kind_of(field: Union[ScalarVolume, VectorField, LabelVolume]) -> VolumeKind:
    if isinstance(field, ScalarVolume):
        return VolumeKind.SCALAR
    if isinstance(field, VectorField):
        return VolumeKind.VECTOR3
    return VolumeKind.LABELS


def _payload(field: Union[ScalarVolume, VectorField, LabelVolume], kind: VolumeKind) -> bytes:
    if kind == VolumeKind.LABELS:
        labels = field.labels  # type: ignore[union-attr]
        if labels.size and labels.max() > MAX_LABEL:
            raise VolumeFormatError(f"Label ids above {MAX_LABEL} do not fit in u16")
        return labels.ravel(order="F").astype(NUMPY_DTYPES["u16"]).tobytes()
    return field.flat().astype(NUMPY_DTYPES["f32"]).tobytes()  # type: ignore[union-attr]


def write_volume(path: str, field: Union[ScalarVolume, VectorField, LabelVolume]) -> str:
    """Write a field as header plus raw payload, or NIfTI-1 by suffix; returns the header path."""
    if is_nifti(path):
        return write_nifti(path, field)
    kind = _kind_of(field)
    stem = _stem(path)
    payload_path = stem + PAYLOAD_SUFFIX
    with open(payload_path, "wb") as f:
        f.write(_payload(field, kind))
    with open(stem + HEADER_SUFFIX, "w") as f:
        f.write(render_volume_header(kind, field.grid, os.path.basename(payload_path)))
    logger.debug("Wrote %s volume %s", kind.value, stem + HEADER_SUFFIX)
    return stem + HEADER_SUFFIX


def read_header(path: str) -> VolumeHeader:
    """Parse and validate the sidecar header of a raw volume."""
    try:
        with open(header_path(path), "r") as f:
            values = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise VolumeFormatError(f"Cannot read volume header {header_path(path)}: {e}") from e
    if not isinstance(values, dict):
        raise VolumeFormatError(f"Volume header {header_path(path)} is not a mapping")
    try:
        header = VolumeHeader(**values)
    except ValidationError as e:
        fields = sorted(".".join(str(p) for p in error["loc"]) for error in e.errors())
        raise VolumeFormatError(
            f"Volume header {header_path(path)} has invalid fields: {fields}"
        ) from e
    if NUMPY_DTYPES.get(header.dtype) is None or header.dtype != DTYPES[header.kind]:
        raise VolumeFormatError(f"dtype {header.dtype!r} does not match kind {header.kind.value}")
    return header


def read_volume(path: str) -> Union[ScalarVolume, VectorField, LabelVolume]:
    """Read any volume written by :func:`write_volume`."""
    if is_nifti(path):
        return read_nifti(path)
    header = read_header(path)
    payload_path = os.path.join(os.path.dirname(header_path(path)), header.payload)
    try:
        with open(payload_path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise VolumeFormatError(f"Cannot read volume payload {payload_path}: {e}") from e
    if len(raw) != header.byte_count:
        raise VolumeFormatError(
            f"Payload {payload_path} has {len(raw)} bytes, header expects {header.byte_count}"
        )
    flat = np.frombuffer(raw, dtype=NUMPY_DTYPES[header.dtype])
    try:
        grid = Grid(dims=header.dims, spacing=header.spacing)
        if header.kind == VolumeKind.SCALAR:
            return ScalarVolume.from_flat(grid, flat)
        if header.kind == VolumeKind.VECTOR3:
            return VectorField.from_flat(grid, flat)
        return LabelVolume(grid=grid, labels=flat.reshape(grid.dims, order="F"))
    except FieldError as e:
        raise VolumeFormatError(f"Volume {path}: {e.msg}") from e


def read_scalar(path: str) -> ScalarVolume:
    """Read a scalar image."""
    volume = read_volume(path)
    if not isinstance(volume, ScalarVolume):
        raise VolumeFormatError(f"{path} is not a scalar volume")
    return volume


def read_vector(path: str) -> VectorField:
    """Read a displacement or velocity field."""
    volume = read_volume(path)
    if not isinstance(volume, VectorField):
        raise VolumeFormatError(f"{path} is not a vector field")
    return volume


def read_labels(path: str) -> LabelVolume:
    """Read a label map; NIfTI scalar files holding integers are accepted."""
    volume = read_volume(path)
    if isinstance(volume, ScalarVolume):
        try:
            return LabelVolume(grid=volume.grid, labels=volume.values)
        except FieldError as e:
            raise VolumeFormatError(f"{path} does not hold integer labels: {e.msg}") from e
    if not isinstance(volume, LabelVolume):
        raise VolumeFormatError(f"{path} is not a label volume")
    return volume


def write_nifti(path: str, field: Union[ScalarVolume, VectorField, LabelVolume]) -> str:
    """Write a scalar (float32) or label (uint16) volume as NIfTI-1."""
    affine = np.diag([*field.grid.spacing, 1.0])
    if isinstance(field, ScalarVolume):
        data = field.values.astype(np.float32)
    elif isinstance(field, LabelVolume):
        if field.labels.size and field.labels.max() > MAX_LABEL:
            raise VolumeFormatError(f"Label ids above {MAX_LABEL} do not fit in u16")
        data = field.labels.astype(np.uint16)
    else:
        raise VolumeFormatError("NIfTI output supports scalar and label volumes only")
    image = nib.Nifti1Image(data, affine)
    image.header.set_zooms(field.grid.spacing)
    nib.save(image, path)
    return path


def read_nifti(path: str) -> Union[ScalarVolume, LabelVolume]:
    """Read a 3D NIfTI-1 volume; integer data types become label volumes."""
    try:
        image = nib.load(path)
    except (OSError, ImageFileError) as e:
        raise VolumeFormatError(f"Cannot read NIfTI file {path}: {e}") from e
    if image.ndim != 3:
        raise VolumeFormatError(f"{path} is {image.ndim}D, only 3D volumes are supported")
    spacing = tuple(float(z) for z in image.header.get_zooms()[:3])
    try:
        grid = Grid(dims=image.shape, spacing=spacing)
        if np.issubdtype(image.get_data_dtype(), np.integer):
            return LabelVolume(grid=grid, labels=np.asanyarray(image.dataobj))
        return ScalarVolume(grid=grid, values=image.get_fdata(dtype=np.float64))
    except FieldError as e:
        raise VolumeFormatError(f"NIfTI file {path}: {e.msg}") from e


def normalize_intensity(volume: ScalarVolume) -> Tuple[ScalarVolume, Tuple[float, float]]:
    """Min-max rescale to ``[0, 1]``; returns the volume and the original range."""
    low = float(volume.values.min())
    high = float(volume.values.max())
    if high <= low:
        logger.warning("Constant volume (value %g) normalized to zeros", low)
        return ScalarVolume(grid=volume.grid, values=np.zeros(volume.grid.dims)), (low, high)
    return ScalarVolume(grid=volume.grid, values=(volume.values - low) / (high - low)), (low, high)


def write_mesh(path: str, mesh: TriMesh) -> str:
    """Write a triangle mesh as binary PLY."""
    if not len(mesh.faces):
        raise VolumeFormatError(f"Refusing to write empty mesh to {path}")
    trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.faces, process=False).export(
        path, file_type="ply"
    )
    return path


def read_mesh(path: str) -> TriMesh:
    """Read a PLY triangle mesh without merging or reordering vertices."""
    try:
        loaded = trimesh.load(path, process=False, force="mesh")
    except (OSError, ValueError) as e:
        raise VolumeFormatError(f"Cannot read mesh {path}: {e}") from e
    return TriMesh(vertices=np.asarray(loaded.vertices), faces=np.asarray(loaded.faces))


def write_pca_model(path: str, model: PcaModel) -> str:
    """Store a fitted velocity shape model as an ``npz`` archive at exactly ``path``."""
    with open(path, "wb") as f:
        np.savez(
            f,
            dims=np.asarray(model.grid.dims),
            spacing=np.asarray(model.grid.spacing),
            mean_velocity=model.mean_velocity,
            components=model.components,
            eigenvalues=model.eigenvalues,
        )
    return path


def read_pca_model(path: str) -> PcaModel:
    """Load a model written by :func:`write_pca_model`."""
    try:
        with np.load(path) as archive:
            grid = Grid(
                dims=tuple(int(d) for d in archive["dims"]),  # type: ignore[arg-type]
                spacing=tuple(float(s) for s in archive["spacing"]),  # type: ignore[arg-type]
            )
            return PcaModel(
                grid=grid,
                mean_velocity=np.array(archive["mean_velocity"]),
                components=np.array(archive["components"]),
                eigenvalues=np.array(archive["eigenvalues"]),
            )
    except (OSError, KeyError, ValueError) as e:
        raise VolumeFormatError(f"Cannot read shape model {path}: {e}") from e


def format_cell(value: Any) -> str:
    """CSV text of one value; floats keep every significant digit."""
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def write_csv(path: str, rows: Iterable[Dict[str, Any]], columns: Optional[Sequence[str]] = None):
    """Write rows of a table with a header line."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(row.get(c)) for c in columns])
    logger.debug("Wrote %d rows to %s", len(rows), path)


def read_csv(path: str) -> List[Dict[str, str]]:
    """Read a table written by :func:`write_csv`."""
    with open(path, "r", newline="") as f:
        return list(csv.DictReader(f))
