#!/usr/bin/env python3
# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

"""Command line for atlas building, label propagation and shape synthesis."""

import contextlib
import glob
import logging
import os
from typing import Any, Dict, Iterator, List, Optional, Sequence

import numpy as np
import typer

from atlas import AtlasResult, AtlasStageError, build_atlas
from darc_config import (
    DarcConfigInvalidError,
    Metric,
    RegularizeOn,
    RunConfig,
    RunManifest,
)
from fields import FieldError, LabelVolume, ScalarVolume
from loss import NonFiniteLossError
from render import render_slices
from segmentation import dice, propagate_labels, vote_labels
from shapegen import (
    fit_pca,
    marching_cubes,
    mode_shape,
    sample_pca,
    synthesis_metrics,
    warp_meshes,
)
from synthetic import gen_synthetic_population
from transform import DEFAULT_EXP_STEPS, TriMesh, exp_velocity, folding_fraction, warp_labels_nn
from volume_io import (
    VolumeFormatError,
    normalize_intensity,
    read_labels,
    read_mesh,
    read_pca_model,
    read_scalar,
    read_vector,
    read_volume,
    write_csv,
    write_mesh,
    write_pca_model,
    write_volume,
)

logger = logging.getLogger(__name__)

EXIT_BAD_INPUT = 2
EXIT_NUMERICAL = 3
MANIFEST_NAME = "manifest.yaml"
VOLUME_PATTERNS = ("*.yaml", "*.nii", "*.nii.gz")
LOG_COLUMNS = [
    "iteration",
    "loss",
    "data_before_update",
    "data_after_update",
    "regularization",
    "centrality_before",
    "centrality_after",
    "folding_pct",
]

app = typer.Typer(add_completion=False, help="Groupwise diffeomorphic atlas toolkit.")
synth_app = typer.Typer(help="Shape model over atlas velocities.")
app.add_typer(synth_app, name="synth")


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    """Turn pipeline failures into a stage-tagged message and an exit code."""
    try:
        yield
    except AtlasStageError as e:
        logger.error("Stage %s failed", name)
        typer.echo(str(e), err=True)
        raise typer.Exit(code=EXIT_NUMERICAL if e.numerical else EXIT_BAD_INPUT)
    except NonFiniteLossError as e:
        logger.error("Stage %s failed", name)
        typer.echo(f"[{name}] {e.msg}", err=True)
        raise typer.Exit(code=EXIT_NUMERICAL)
    except (FieldError, VolumeFormatError, DarcConfigInvalidError) as e:
        logger.error("Stage %s failed", name)
        typer.echo(f"[{name}] {e.msg}", err=True)
        raise typer.Exit(code=EXIT_BAD_INPUT)
    except OSError as e:
        logger.error("Stage %s failed", name)
        typer.echo(f"[{name}] {e}", err=True)
        raise typer.Exit(code=EXIT_BAD_INPUT)


def volume_files(directory: str) -> List[str]:
    """Sorted volume files of a directory."""
    files: List[str] = []
    for pattern in VOLUME_PATTERNS:
        files.extend(glob.glob(os.path.join(directory, pattern)))
    return sorted(files)


def expand_glob(pattern: str, what: str) -> List[str]:
    """Sorted matches of ``pattern``; a directory lists its volume files."""
    files = volume_files(pattern) if os.path.isdir(pattern) else sorted(glob.glob(pattern))
    if not files:
        raise FieldError(f"No {what} match {pattern!r}")
    return files


def parse_dims(text: str) -> List[int]:
    """Parse ``X,Y,Z``."""
    try:
        dims = [int(part) for part in text.split(",")]
    except ValueError as e:
        raise FieldError(f"Dims must look like X,Y,Z, got {text!r}") from e
    if len(dims) != 3:
        raise FieldError(f"Dims must have 3 entries, got {text!r}")
    return dims


def _subject_path(directory: str, prefix: str, index: int, suffix: str = ".yaml") -> str:
    return os.path.join(directory, f"{prefix}_{index:03d}{suffix}")


def _parent_dir(path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    return path


def _write_manifest(path: str, command: str, outputs: Sequence[str], **values: Any) -> None:
    RunManifest(command=command, outputs=sorted(outputs), **values).write(path)


@app.callback()
def configure(
    log_level: str = typer.Option("info", "--log-level", help="debug, info, warning or error."),
):
    """Configure logging once for every subcommand."""
    level = logging.getLevelName(log_level.upper())
    if not isinstance(level, int):
        typer.echo(f"Unknown log level {log_level!r}", err=True)
        raise typer.Exit(code=EXIT_BAD_INPUT)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _write_groups(out: str, groups: Dict[str, Sequence[Any]]) -> List[str]:
    outputs = []
    for name, fields in groups.items():
        os.makedirs(os.path.join(out, name), exist_ok=True)
        for i, field in enumerate(fields):
            path = _subject_path(os.path.join(out, name), "subject", i)
            outputs.append(write_volume(path, field))
    return outputs


@app.command()
def gen(
    seed: int = typer.Option(0, "--seed"),
    n: int = typer.Option(8, "--n"),
    dims: str = typer.Option("32,32,32", "--dims"),
    sigma: float = typer.Option(
        4.0, "--sigma", help="Smoothing of the random velocities (voxels)."
    ),
    amp: float = typer.Option(3.0, "--amp", help="Largest velocity norm (voxels)."),
    out: str = typer.Option(..., "--out"),
):
    """Generate a synthetic ellipsoid population with ground truth."""
    with stage("gen"):
        population = gen_synthetic_population(seed, n, parse_dims(dims), sigma, amp)
        os.makedirs(out, exist_ok=True)
        outputs = [
            write_volume(os.path.join(out, "template.yaml"), population.template),
            write_volume(os.path.join(out, "template_labels.yaml"), population.template_labels),
        ]
        outputs += _write_groups(
            out,
            {
                "images": population.images,
                "labels": population.labels,
                "velocities": population.velocities,
                "deformations": population.deformations,
            },
        )
        _write_manifest(
            os.path.join(out, MANIFEST_NAME),
            "gen",
            outputs,
            seed=seed,
            arguments={"n": n, "dims": dims, "sigma": sigma, "amp": amp},
        )
    logger.info("Wrote synthetic population of %d subjects to %s", n, out)


def _load_normalized(files: Sequence[str]) -> List[ScalarVolume]:
    volumes = []
    for path in files:
        volume, (low, high) = normalize_intensity(read_scalar(path))
        logger.debug("Normalized %s from [%g, %g]", path, low, high)
        volumes.append(volume)
    return volumes


def _write_build_outputs(
    out: str, result: AtlasResult, labels: Optional[List[LabelVolume]]
) -> List[str]:
    outputs = [write_volume(os.path.join(out, "atlas.yaml"), result.atlas)]
    outputs += _write_groups(
        out,
        {
            "velocities": result.velocities,
            "forward": result.forward_deformations,
            "backward": result.backward_deformations,
            "warped": result.warped_images,
        },
    )
    if labels is not None:
        warped = [warp_labels_nn(m, phi) for m, phi in zip(labels, result.forward_deformations)]
        outputs.append(write_volume(os.path.join(out, "atlas_labels.yaml"), vote_labels(warped)))

    columns = LOG_COLUMNS + (["dice"] if labels is not None else [])
    write_csv(os.path.join(out, "log.csv"), [r.as_row() for r in result.log], columns)
    write_csv(
        os.path.join(out, "timing.csv"),
        [{"iteration": r.iteration, "wall_time_s": t} for r, t in zip(result.log, result.timings)],
    )
    return outputs + [os.path.join(out, "log.csv"), os.path.join(out, "timing.csv")]


@app.command()
def build(
    inputs: str = typer.Option(..., "--inputs", help="Glob or directory of input volumes."),
    out: str = typer.Option(..., "--out"),
    config: Optional[str] = typer.Option(None, "--config", help="YAML file of settings."),
    metric: Optional[Metric] = typer.Option(None, "--metric", case_sensitive=False),
    lam: Optional[float] = typer.Option(None, "--lambda"),
    k1: Optional[int] = typer.Option(None, "--k1", help="Outer iterations."),
    k2: Optional[int] = typer.Option(None, "--k2", help="Registration steps per subject."),
    k3: Optional[int] = typer.Option(None, "--k3", help="Atlas update epochs."),
    lr: Optional[float] = typer.Option(None, "--lr"),
    batch: Optional[int] = typer.Option(None, "--batch"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    workers: Optional[int] = typer.Option(None, "--workers"),
    exp_steps: Optional[int] = typer.Option(None, "--exp-steps"),
    regularize_on: Optional[RegularizeOn] = typer.Option(None, "--regularize-on"),
    labels: Optional[str] = typer.Option(None, "--labels", help="Glob of ground-truth masks."),
    render_axis: int = typer.Option(2, "--render-axis"),
):
    """Build an unbiased atlas from a population of volumes."""
    overrides: Dict[str, Any] = {
        "metric": metric.value if metric else None,
        "lambda": lam,
        "outer-iters": k1,
        "inner-iters": k2,
        "atlas-epochs": k3,
        "learn-rate": lr,
        "batch-size": batch,
        "seed": seed,
        "workers": workers,
        "exp-steps": exp_steps,
        "regularize-on": regularize_on.value if regularize_on else None,
    }
    with stage("build"):
        if config:
            run = RunConfig.from_yaml(config, overrides)
        else:
            run = RunConfig.from_mapping({k: v for k, v in overrides.items() if v is not None})
        files = expand_glob(inputs, "input volumes")
        images = _load_normalized(files)
        masks = None
        if labels:
            masks = [read_labels(path) for path in expand_glob(labels, "label volumes")]
        renders = os.path.join(out, "renders")
        os.makedirs(renders, exist_ok=True)

        def render_iteration(iteration: int, atlas: ScalarVolume) -> None:
            render_slices(
                atlas, render_axis, None, os.path.join(renders, f"atlas_iter_{iteration:03d}.pgm")
            )

        result = build_atlas(images, run.loss, run.optim, masks, render_iteration)
        outputs = _write_build_outputs(out, result, masks)
        outputs.extend(sorted(glob.glob(os.path.join(renders, "*.pgm"))))
        _write_manifest(
            os.path.join(out, MANIFEST_NAME),
            "build",
            outputs,
            seed=run.optim.seed,
            config=run.as_mapping(),
            arguments={"inputs": inputs, "labels": labels, "render-axis": render_axis},
            inputs=files,
            normalization="min-max to [0, 1] per volume at load",
        )
    logger.info("Atlas written to %s", out)


def _atlas_annotation(
    atlas_labels: Optional[str], vote_from: Optional[str], forward: Optional[str]
) -> LabelVolume:
    if atlas_labels:
        return read_labels(atlas_labels)
    if not vote_from or not forward:
        raise FieldError("Give --atlas-labels, or --vote-from together with --forward")
    masks = [read_labels(path) for path in expand_glob(vote_from, "label volumes")]
    fields = [read_vector(path) for path in volume_files(forward)]
    if len(masks) != len(fields):
        raise FieldError(f"Got {len(masks)} masks for {len(fields)} forward deformations")
    return vote_labels([warp_labels_nn(m, phi) for m, phi in zip(masks, fields)])


@app.command()
def segment(
    velocities: str = typer.Option(..., "--velocities", help="Directory of subject velocities."),
    out: str = typer.Option(..., "--out"),
    atlas_labels: Optional[str] = typer.Option(None, "--atlas-labels"),
    vote_from: Optional[str] = typer.Option(
        None, "--vote-from", help="Glob of subject masks voted into an atlas annotation."
    ),
    forward: Optional[str] = typer.Option(None, "--forward", help="Directory of forward fields."),
    ground_truth: Optional[str] = typer.Option(None, "--ground-truth"),
    exp_steps: int = typer.Option(DEFAULT_EXP_STEPS, "--exp-steps"),
):
    """Propagate the atlas annotation to every subject."""
    with stage("segment"):
        annotation = _atlas_annotation(atlas_labels, vote_from, forward)
        velocity_files = expand_glob(velocities, "velocity fields")
        truth_files = expand_glob(ground_truth, "ground-truth masks") if ground_truth else []
        if truth_files and len(truth_files) != len(velocity_files):
            raise FieldError(
                f"Got {len(truth_files)} ground-truth masks for {len(velocity_files)} velocities"
            )
        os.makedirs(os.path.join(out, "labels"), exist_ok=True)
        foreground = [label for label in annotation.label_set() if label != 0]
        outputs, rows = [], []
        for i, path in enumerate(velocity_files):
            propagated = propagate_labels(annotation, read_vector(path), exp_steps)
            path = _subject_path(os.path.join(out, "labels"), "subject", i)
            outputs.append(write_volume(path, propagated))
            if truth_files and foreground:
                report = dice(propagated, read_labels(truth_files[i]), foreground)
                for label, score in report.per_label.items():
                    rows.append({"subject": i, "label": label, "dice": score})
                rows.append({"subject": i, "label": "mean", "dice": report.mean})
                logger.info("Subject %d: mean Dice %.4f", i, report.mean)
        if rows:
            write_csv(os.path.join(out, "dice.csv"), rows, ["subject", "label", "dice"])
            outputs.append(os.path.join(out, "dice.csv"))
        _write_manifest(
            os.path.join(out, MANIFEST_NAME),
            "segment",
            outputs,
            arguments={
                "atlas-labels": atlas_labels,
                "vote-from": vote_from,
                "forward": forward,
                "exp-steps": exp_steps,
            },
            inputs=velocity_files + truth_files,
        )


@synth_app.command("fit")
def synth_fit(
    velocities: str = typer.Option(..., "--velocities"),
    p: int = typer.Option(..., "--p", help="Number of principal modes."),
    out: str = typer.Option(..., "--out"),
):
    """Fit a PCA model to atlas velocities."""
    with stage("synth/fit"):
        files = expand_glob(velocities, "velocity fields")
        model = fit_pca([read_vector(path) for path in files], p)
        write_pca_model(_parent_dir(out), model)
        _write_manifest(
            out + "." + MANIFEST_NAME, "synth fit", [out], arguments={"p": p}, inputs=files
        )
    logger.info("Eigenvalues: %s", np.array2string(model.eigenvalues, precision=6))


def _maybe_mesh(path: Optional[str]) -> Optional[TriMesh]:
    return read_mesh(path) if path else None


@synth_app.command("sample")
def synth_sample(
    model_path: str = typer.Option(..., "--model"),
    count: int = typer.Option(..., "--count"),
    seed: int = typer.Option(0, "--seed"),
    out: str = typer.Option(..., "--out"),
    atlas_mesh: Optional[str] = typer.Option(None, "--atlas-mesh"),
    exp_steps: int = typer.Option(DEFAULT_EXP_STEPS, "--exp-steps"),
):
    """Draw new deformations (and meshes) from a fitted model."""
    with stage("synth/sample"):
        model = read_pca_model(model_path)
        mesh = _maybe_mesh(atlas_mesh)
        rng = np.random.default_rng(seed)
        os.makedirs(out, exist_ok=True)
        outputs, rows = [], []
        for k in range(count):
            velocity, deformation = sample_pca(model, rng, exp_steps)
            outputs.append(write_volume(_subject_path(out, "velocity", k), velocity))
            outputs.append(write_volume(_subject_path(out, "deformation", k), deformation))
            if mesh is not None:
                warped = warp_meshes(mesh, [deformation])[0]
                outputs.append(write_mesh(_subject_path(out, "mesh", k, ".ply"), warped))
            rows.append({"sample": k, "folding_pct": folding_fraction(deformation)})
        write_csv(os.path.join(out, "samples.csv"), rows, ["sample", "folding_pct"])
        _write_manifest(
            os.path.join(out, MANIFEST_NAME),
            "synth sample",
            outputs + [os.path.join(out, "samples.csv")],
            seed=seed,
            arguments={"count": count, "exp-steps": exp_steps},
            inputs=[model_path] + ([atlas_mesh] if atlas_mesh else []),
        )


@synth_app.command("mode")
def synth_mode(
    model_path: str = typer.Option(..., "--model"),
    j: int = typer.Option(1, "--j", help="Mode index, starting at 1."),
    t: List[float] = typer.Option([-2.0, -1.0, 0.0, 1.0, 2.0], "--t", help="Standard deviations."),
    out: str = typer.Option(..., "--out"),
    atlas_mesh: Optional[str] = typer.Option(None, "--atlas-mesh"),
    exp_steps: int = typer.Option(DEFAULT_EXP_STEPS, "--exp-steps"),
):
    """Sweep one principal mode."""
    with stage("synth/mode"):
        model = read_pca_model(model_path)
        mesh = _maybe_mesh(atlas_mesh)
        os.makedirs(out, exist_ok=True)
        outputs = []
        for value in t:
            tag = f"mode{j}_t{value:+g}"
            velocity = mode_shape(model, j, value)
            deformation = exp_velocity(velocity, exp_steps)
            outputs.append(write_volume(os.path.join(out, f"velocity_{tag}.yaml"), velocity))
            outputs.append(write_volume(os.path.join(out, f"deformation_{tag}.yaml"), deformation))
            if mesh is not None:
                warped = warp_meshes(mesh, [deformation])[0]
                outputs.append(write_mesh(os.path.join(out, f"mesh_{tag}.ply"), warped))
        _write_manifest(
            os.path.join(out, MANIFEST_NAME),
            "synth mode",
            outputs,
            arguments={"j": j, "t": list(t), "exp-steps": exp_steps},
            inputs=[model_path] + ([atlas_mesh] if atlas_mesh else []),
        )


def _meshes(directory: str) -> List[TriMesh]:
    files = sorted(glob.glob(os.path.join(directory, "*.ply")))
    if not files:
        raise FieldError(f"No PLY meshes in {directory}")
    return [read_mesh(path) for path in files]


@app.command("eval")
def evaluate(
    generated: str = typer.Option(..., "--generated"),
    real: str = typer.Option(..., "--real"),
    out: str = typer.Option(..., "--out"),
    correspondence: bool = typer.Option(
        True, "--correspondence/--no-correspondence", help="Use same-index vertex distances."
    ),
):
    """Compare generated meshes with real ones."""
    with stage("eval"):
        report = synthesis_metrics(_meshes(generated), _meshes(real), correspondence)
        write_csv(_parent_dir(out), [report.as_row()])
        _write_manifest(
            out + "." + MANIFEST_NAME,
            "eval",
            [out],
            arguments={"generated": generated, "real": real, "correspondence": correspondence},
        )


@app.command()
def mesh(
    out: str = typer.Option(..., "--out"),
    labels: Optional[str] = typer.Option(None, "--labels", help="Label volume to mesh."),
    label: Optional[int] = typer.Option(None, "--label", help="Label id; default any foreground."),
    volume: Optional[str] = typer.Option(None, "--volume", help="Scalar volume to mesh."),
    iso: float = typer.Option(0.5, "--iso"),
    warp_by: Optional[str] = typer.Option(
        None, "--warp-by", help="Directory of deformations; writes one warped mesh per field."
    ),
):
    """Extract an iso-surface mesh, optionally carried through deformations."""
    with stage("mesh"):
        if bool(labels) == bool(volume):
            raise FieldError("Give exactly one of --labels and --volume")
        source = read_labels(labels) if labels else read_volume(volume)  # type: ignore[arg-type]
        if not isinstance(source, (ScalarVolume, LabelVolume)):
            raise FieldError("Meshes are extracted from scalar or label volumes")
        surface = marching_cubes(source, iso, label=label)
        if not len(surface.faces):
            raise FieldError(f"No surface crosses iso value {iso}")
        outputs = [write_mesh(_parent_dir(out), surface)]
        logger.info(
            "Mesh has %d vertices, %d faces, Euler characteristic %d",
            len(surface.vertices),
            len(surface.faces),
            surface.euler_characteristic(),
        )
        if warp_by:
            target = os.path.splitext(out)[0] + "_warped"
            os.makedirs(target, exist_ok=True)
            fields = [read_vector(path) for path in expand_glob(warp_by, "deformations")]
            for i, warped in enumerate(warp_meshes(surface, fields)):
                outputs.append(write_mesh(_subject_path(target, "mesh", i, ".ply"), warped))
        _write_manifest(
            out + "." + MANIFEST_NAME,
            "mesh",
            outputs,
            arguments={"label": label, "iso": iso, "warp-by": warp_by},
            inputs=[p for p in (labels, volume) if p],
        )


def main() -> None:
    """Entry point of the ``darc`` script."""
    app()


if __name__ == "__main__":  # pragma: nocover
    main()
