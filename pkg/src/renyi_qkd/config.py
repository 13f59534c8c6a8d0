"""Strictly validated run configuration."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .finitesize import FiniteSizeParams, SecurityParams, default_alpha_grid
from .pipeline import SolverSettings
from .protocol import EC_ENTROPY_MODES, bb84_pm_instance

DEFAULT_GRID = "log:1.0005:2:25"


def parse_alpha_grid(spec: str | list[float]) -> list[float]:
    """Accept an explicit list or ``"log:low:high:n"`` (log-spaced in alpha - 1)."""
    if isinstance(spec, str):
        parts = spec.split(":")
        if len(parts) != 4 or parts[0] != "log":
            raise ValueError(f"alpha grid spec must look like 'log:low:high:n', got {spec!r}")
        low, high, n = float(parts[1]), float(parts[2]), int(parts[3])
        if n < 1:
            raise ValueError("alpha grid needs at least one point")
        grid = [float(a) for a in default_alpha_grid(n, low, high)]
    else:
        grid = [float(a) for a in spec]
    if not grid:
        raise ValueError("empty alpha grid")
    bad = [a for a in grid if not 1.0 < a <= 2.0]
    if bad:
        raise ValueError(f"alpha grid points outside (1, 2]: {bad}")
    return grid


class RunConfig(BaseModel):
    """One run of the key-rate pipeline.

    Unknown keys are rejected. ``alpha`` is either a fixed order in (1, 2]
    or ``"scan"``, in which case ``alpha_grid`` is searched for the best
    rate.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    protocol: Literal["bb84-pm"] = "bb84-pm"
    depol_p: float = 0.01
    loss: float = 0.0
    N: int = 100_000
    p_gen: float = 0.9
    eps_PA: float = 1e-10
    eps_EV: float = 1e-10
    eps_PE: float = 1e-10
    f_EC: float = 1.16
    alpha: Union[float, Literal["scan"]] = "scan"
    alpha_grid: Union[str, list[float]] = DEFAULT_GRID
    eps_perturb: float = 1e-8
    gap_tol: float = 1e-6
    max_iters: int = 300
    t_ball: float = 0.0
    warm_start: bool = True
    p_alice_z: float = 0.5
    p_bob_z: float = 0.5
    ec_entropy: Literal[EC_ENTROPY_MODES] = "per_round"
    output_path: str | None = None

    @field_validator("N", mode="before")
    @classmethod
    def _integral_n(cls, v):
        if isinstance(v, str):
            v = float(v)
        if isinstance(v, float):
            if not math.isfinite(v) or v != int(v):
                raise ValueError(f"N must be an integer, got {v}")
            v = int(v)
        return v

    @field_validator("alpha", mode="before")
    @classmethod
    def _alpha(cls, v):
        if isinstance(v, str) and v != "scan":
            v = float(v)
        if not isinstance(v, str) and not 1.0 < float(v) <= 2.0:
            raise ValueError(f"alpha must lie in (1, 2] or be 'scan', got {v}")
        return v

    @field_validator("alpha_grid")
    @classmethod
    def _grid(cls, v):
        parse_alpha_grid(v)
        return v

    @field_validator("depol_p")
    @classmethod
    def _depol(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"depol_p must lie in [0, 1], got {v}")
        return v

    @field_validator("loss")
    @classmethod
    def _loss(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError(f"loss must lie in [0, 1), got {v}")
        return v

    @field_validator("eps_perturb")
    @classmethod
    def _eps(cls, v):
        if not 0.0 < v <= 1.0:
            raise ValueError(f"eps_perturb must lie in (0, 1], got {v}")
        return v

    @field_validator("p_alice_z", "p_bob_z")
    @classmethod
    def _basis(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError(f"basis probabilities must lie in (0, 1), got {v}")
        return v

    @model_validator(mode="after")
    def _ranges(self):
        # delegate to the owning modules' checks
        self.finite_size()
        self.security()
        self.solver()
        return self

    def finite_size(self) -> FiniteSizeParams:
        return FiniteSizeParams(self.N, self.p_gen, self.f_EC)

    def security(self) -> SecurityParams:
        return SecurityParams(self.eps_PA, self.eps_EV, self.eps_PE)

    def solver(self) -> SolverSettings:
        s = SolverSettings(self.eps_perturb, self.gap_tol, self.max_iters, self.t_ball, self.warm_start)
        _ = s.fw  # validates gap_tol and max_iters
        if self.t_ball < 0:
            raise ValueError("t_ball must be nonnegative")
        return s

    def grid(self) -> list[float]:
        return parse_alpha_grid(self.alpha_grid)

    def instance(self):
        return bb84_pm_instance(
            self.depol_p, self.loss,
            p_alice_z=self.p_alice_z, p_bob_z=self.p_bob_z, ec_entropy=self.ec_entropy,
        )

    def replace(self, **kw) -> "RunConfig":
        return RunConfig(**{**self.model_dump(), **kw})


def load_config(path: str | Path) -> dict:
    """Read a flat YAML or JSON mapping (JSON is valid YAML)."""
    text = Path(path).read_text()
    data = yaml.safe_load(text) if text.strip() else {}
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a flat key-value mapping")
    return data


def config_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(), sort_keys=True, default=lambda o: np.asarray(o).tolist())
