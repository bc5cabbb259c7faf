"""Experiment configuration schema and builders for the command line runner."""
import hashlib
import json
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .delay_ops import DelayMeasure, control_kernel, kernel_from_config
from .errors import ConfigInvalid

VERBS = ("simulate-forward", "solve-iabsee", "verify-duality", "check-smp", "solve-lq",
         "acceptance-suite")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AtomConfig(_Strict):
    lag: float = Field(ge=0)
    weight: float


class DensityConfig(_Strict):
    breakpoints: List[float]
    values: List[float]


class MeasureConfig(_Strict):
    atoms: List[AtomConfig] = Field(default_factory=list)
    density: Optional[DensityConfig] = None

    def build(self):
        return DelayMeasure.from_config(self.model_dump())


class KernelConfig(_Strict):
    type: Literal["identity", "scaled_identity", "matrix", "tabulated"] = "identity"
    value: Optional[list] = None
    function: Optional[dict] = None
    t: Optional[List[float]] = None
    theta: Optional[List[float]] = None
    values: Optional[list] = None


class LagTermConfig(_Strict):
    kernel: KernelConfig = Field(default_factory=KernelConfig)
    measure: MeasureConfig = Field(default_factory=lambda: MeasureConfig(atoms=[AtomConfig(lag=0, weight=1)]))

    def build(self, d_out, d_in):
        return (kernel_from_config(self.kernel.model_dump(exclude_none=True), d_out, d_in), self.measure.build())


class ControlConfig(_Strict):
    """u(t) = value + amplitude * sin(frequency * t) per coordinate."""

    value: List[float] = Field(default_factory=lambda: [0.0])
    amplitude: List[float] = Field(default_factory=lambda: [0.0])
    frequency: float = 0.0

    def build(self, du):
        v = np.broadcast_to(np.asarray(self.value, dtype=float), (du,))
        a = np.broadcast_to(np.asarray(self.amplitude, dtype=float), (du,))
        w = self.frequency

        def fn(ts):
            ts = np.asarray(ts, dtype=float)
            return v[None, :] + a[None, :] * np.sin(w * ts)[:, None]

        return fn


class ControlDelayConfig(_Strict):
    phi: str = "one"
    rate: float = 1.0
    measure: MeasureConfig = Field(default_factory=lambda: MeasureConfig(atoms=[AtomConfig(lag=0, weight=1)]))

    def build(self):
        from .forward_see import ControlDelay
        params = {"rate": self.rate} if self.phi == "exp_gap" else {}
        return ControlDelay(control_kernel(self.phi, **params), self.measure.build())


class GeneratorConfig(_Strict):
    y_terms: List[LagTermConfig] = Field(default_factory=list)
    z_terms: List[LagTermConfig] = Field(default_factory=list)
    forcing: Optional[List[float]] = None


class TerminalConfig(_Strict):
    """xi = scale * fn(X(T)) + shift with fn in {identity, cos, square, zero}."""

    function: Literal["identity", "cos", "square", "zero"] = "identity"
    scale: float = 1.0
    shift: float = 0.0


class ProblemConfig(_Strict):
    d: int = Field(1, ge=1)
    m: int = Field(1, ge=1)
    du: int = Field(1, ge=1)
    A: Optional[LagTermConfig] = None
    C: Optional[LagTermConfig] = None
    B: Optional[list] = None
    D: Optional[list] = None
    s0: Optional[list] = None
    b0: Optional[List[float]] = None
    gamma: List[float] = Field(default_factory=lambda: [1.0])
    varphi: Optional[List[float]] = None
    control: ControlConfig = Field(default_factory=ControlConfig)
    direction: ControlConfig = Field(default_factory=lambda: ControlConfig(value=[1.0]))
    control_delay: ControlDelayConfig = Field(default_factory=ControlDelayConfig)
    L: Optional[list] = None
    Ltilde: Optional[list] = None
    G: Optional[list] = None
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    terminal: TerminalConfig = Field(default_factory=TerminalConfig)
    kernel: KernelConfig = Field(default_factory=KernelConfig)
    measure: MeasureConfig = Field(default_factory=lambda: MeasureConfig(atoms=[AtomConfig(lag=0, weight=1)]))

    @model_validator(mode="after")
    def _dims(self):
        if len(self.gamma) not in (1, self.d):
            raise ValueError(f"gamma must have 1 or d={self.d} entries")
        return self


class RegressionConfig(_Strict):
    degree: int = Field(2, ge=0, le=4)
    ridge: Optional[float] = Field(None, ge=0)


class NumericsConfig(_Strict):
    T: float = Field(1.0, gt=0)
    dt: float = Field(1 / 256, gt=0)
    lam: float = Field(1.0, gt=0)
    theta_max: float = Field(0.0, ge=0)
    paths: int = Field(10_000, ge=1)
    beta: float = Field(0.0, ge=0)
    picard_max: int = Field(50, ge=1)
    picard_tol: float = Field(1e-20, ge=0)
    regression: RegressionConfig = Field(default_factory=RegressionConfig)
    rho: float = Field(0.5, gt=0, le=1)
    tol: float = Field(1e-4, gt=0)
    max_iter: int = Field(20, ge=1)
    probes: int = Field(5, ge=1)
    criteria: Optional[List[int]] = None


class OutputConfig(_Strict):
    dir: str = "out"
    formats: List[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])


class ExperimentConfig(_Strict):
    verb: Optional[Literal["simulate-forward", "solve-iabsee", "verify-duality", "check-smp", "solve-lq",
                           "acceptance-suite"]] = None
    seed: int = Field(0, ge=0)
    problem: ProblemConfig = Field(default_factory=ProblemConfig)
    numerics: NumericsConfig = Field(default_factory=NumericsConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)


def _field_path(err):
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def load_config(data):
    """Validate a dict; raises ConfigInvalid naming the offending field."""
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        msgs = [f"{_field_path(e)}: {e['msg']}" for e in exc.errors()]
        raise ConfigInvalid("; ".join(msgs)) from None


def read_config(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    return load_config(data)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def config_hash(cfg):
    return hashlib.sha256(canonical_json(cfg.model_dump(mode="json")).encode()).hexdigest()


def matrix(value, shape, default=None):
    if value is None:
        return default
    return np.asarray(value, dtype=float).reshape(shape)


__all__ = ["ExperimentConfig", "ProblemConfig", "NumericsConfig", "OutputConfig", "load_config",
           "read_config", "canonical_json", "config_hash", "matrix", "VERBS"]
