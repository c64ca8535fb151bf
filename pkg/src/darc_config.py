# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

"""Config of the atlas builder."""

import dataclasses
import logging
import os
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.3.0"


class DarcConfigInvalidError(Exception):
    """Exception raised when a run configuration is found to be invalid."""

    def __init__(self, msg: str):
        """Initialize a new instance of the DarcConfigInvalidError exception.

        Args:
            msg (str): Explanation of the error.
        """
        super().__init__(msg)
        self.msg = msg


def to_kebab(name: str) -> str:
    """Convert a snake_case string to kebab-case."""
    return name.replace("_", "-")


class Metric(str, Enum):
    """Dissimilarity data terms."""

    MSE = "mse"
    L1 = "l1"
    NCC = "ncc"
    SSIM = "ssim"


class RegularizeOn(str, Enum):
    """Field the diffusion regularizer is applied to."""

    DEFORMATION = "deformation"
    VELOCITY = "velocity"


CLOSED_FORM_METRICS = (Metric.MSE.value, Metric.L1.value)
DEFAULT_LAMBDA = {"mse": 0.5, "l1": 0.5, "ncc": 8.0, "ssim": 8.0}


class LossConfig(BaseModel):
    """Data term and regularization settings of the per-subject objective."""

    model_config = ConfigDict(
        alias_generator=to_kebab,
        populate_by_name=True,
        use_enum_values=True,
        frozen=True,
        extra="forbid",
    )

    metric: Metric = Metric.MSE
    lam: float = Field(default=0.5, alias="lambda", ge=0.0)
    ncc_window: int = 9
    ncc_eps: float = Field(default=1e-5, gt=0.0)
    ssim_window: int = 7
    ssim_c1: float = 1e-4
    ssim_c2: float = 9e-4
    regularize_on: RegularizeOn = RegularizeOn.DEFORMATION
    normalized_units: bool = True

    @model_validator(mode="before")
    @classmethod
    def _metric_default_lambda(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        if isinstance(data.get("metric"), str):
            data["metric"] = data["metric"].lower()
        if data.get("lambda", data.get("lam")) is None:
            data.pop("lam", None)
            metric = getattr(data.get("metric", "mse"), "value", data.get("metric", "mse"))
            data["lambda"] = DEFAULT_LAMBDA.get(str(metric), 0.5)
        return data

    @field_validator("ncc_window", "ssim_window")
    @classmethod
    def _odd_window(cls, value: int) -> int:
        if value < 3 or value % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {value}")
        return value

    @property
    def closed_form(self) -> bool:
        """Whether the atlas update has a closed form for this metric."""
        return self.metric in CLOSED_FORM_METRICS


class OptimConfig(BaseModel):
    """Coordinate-descent and Adam settings."""

    model_config = ConfigDict(
        alias_generator=to_kebab, populate_by_name=True, frozen=True, extra="forbid"
    )

    outer_iters: int = Field(default=10, ge=1)
    inner_iters: int = Field(default=300, ge=1)
    atlas_epochs: int = Field(default=20, ge=1)
    learn_rate: float = Field(default=1e-2, gt=0.0)
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    batch_size: int = Field(default=4, ge=1)
    exp_steps: int = Field(default=7, ge=0)
    seed: int = 0
    warm_start: bool = False
    normalized_step: bool = True
    workers: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)


@dataclasses.dataclass
class RunConfig:
    """Represent the configuration of one atlas run."""

    loss: LossConfig
    optim: OptimConfig

    def __init__(self, *, loss: LossConfig, optim: OptimConfig):
        """Initialize a new instance of the RunConfig class.

        Args:
            loss: Objective configuration.
            optim: Optimizer configuration.
        """
        self.loss = loss
        self.optim = optim

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "RunConfig":
        """Build a run configuration from a flat kebab-case mapping (CLI flags or YAML)."""
        loss_keys = {"lambda"} | set(LossConfig.model_fields)
        loss_keys |= {to_kebab(name) for name in LossConfig.model_fields}
        loss_values = {k: v for k, v in values.items() if k in loss_keys}
        optim_values = {k: v for k, v in values.items() if k not in loss_keys}
        try:
            return cls(loss=LossConfig(**loss_values), optim=OptimConfig(**optim_values))
        except ValidationError as exc:
            error_fields: list = []
            for error in exc.errors():
                if param := error["loc"]:
                    error_fields.extend(str(p) for p in param)
                else:
                    value_error_msg: ValueError = error["ctx"]["error"]  # type: ignore
                    error_fields.extend(str(value_error_msg).split())
            error_fields.sort()
            error_field_str = ", ".join(f"'{f}'" for f in error_fields)
            raise DarcConfigInvalidError(
                f"The following configurations are not valid: [{error_field_str}]"
            ) from exc

    @classmethod
    def from_yaml(cls, path: str, overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        """Load a YAML mapping, apply non-None overrides, and validate."""
        try:
            with open(path, "r") as f:
                values = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise DarcConfigInvalidError(f"Could not read configuration {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise DarcConfigInvalidError(f"Configuration {path} is not a mapping")
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(values)

    def as_mapping(self) -> Dict[str, Any]:
        """Flat kebab-case echo of every setting, suitable for a manifest."""
        values = self.loss.model_dump(by_alias=True, mode="json")
        values.update(self.optim.model_dump(by_alias=True, mode="json"))
        return values


class RunManifest(BaseModel):
    """Everything needed to replay one CLI invocation."""

    model_config = ConfigDict(alias_generator=to_kebab, populate_by_name=True)

    command: str
    tool_version: str = TOOL_VERSION
    seed: Optional[int] = None
    config: Dict[str, Any] = Field(default_factory=dict)
    arguments: Dict[str, Any] = Field(default_factory=dict)
    inputs: List[str] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)
    normalization: Optional[str] = None

    def write(self, path: str) -> None:
        """Write the manifest as YAML."""
        with open(path, "w") as f:
            yaml.safe_dump(self.model_dump(by_alias=True, mode="json"), f, sort_keys=True)
        logger.info("Wrote run manifest %s", path)

    @classmethod
    def read(cls, path: str) -> "RunManifest":
        """Read a manifest written by :meth:`write`."""
        with open(path, "r") as f:
            return cls(**yaml.safe_load(f))
