"""Request and response models of the HTTP service.

Payloads are deterministic: tabular results carry explicit column lists and
row arrays, report-style results are plain JSON objects; the envelope
checksum covers the canonical payload serialization only (never the
timestamp).
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

from pydantic import BaseModel, Field

from .. import __version__

Triple = List[float]


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"),
                      allow_nan=True)


def payload_checksum(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


def payload_to_csv(payload: Dict[str, Any]) -> str:
    cols = payload["columns"]
    lines = [",".join(cols)]
    for row in payload["rows"]:
        lines.append(",".join(_csv_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class TensorSpec(BaseModel):
    """Elastic tensor: isotropic constants or a full Voigt matrix."""

    mu: Optional[float] = None
    lam: Optional[float] = Field(default=None, alias="lambda")
    nu: Optional[float] = None
    voigt: Optional[List[List[float]]] = None
    convention: str = "strain-engineering-off"

    model_config = {"populate_by_name": True}

    def to_json_dict(self) -> dict:
        if self.voigt is not None:
            return {"voigt": self.voigt, "convention": self.convention}
        out: Dict[str, Any] = {"mu": self.mu}
        if self.nu is not None:
            out["nu"] = self.nu
        elif self.lam is not None:
            out["lambda"] = self.lam
        return out


class MeasureSpec(BaseModel):
    lattice: List[Triple] = Field(default_factory=lambda: [[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    unit: str = "normalized"
    segments: List[Dict[str, Any]] = Field(default_factory=list)


class RotationSpec(BaseModel):
    axis: Triple = Field(default_factory=lambda: [0.0, 0.0, 1.0])
    angle: float = 0.0


class ScheduleSpec(BaseModel):
    H: float = 1.0
    A: float = 1.0
    a: float = 0.05
    c: float = 0.05


class BoxSpec(BaseModel):
    lo: Triple = Field(default_factory=lambda: [-1.5, -1.5, -1.5])
    hi: Triple = Field(default_factory=lambda: [1.5, 1.5, 1.5])


class RunOptions(BaseModel):
    seed: int = 0
    threads: int = 1


class SelfEnergyRequest(BaseModel):
    tensor: TensorSpec
    burgers: Optional[List[Triple]] = None
    burgers_ball: Optional[float] = None
    directions: Optional[List[Triple]] = None
    icosphere_level: Optional[int] = None
    lattice: Optional[List[Triple]] = None
    n_theta: int = 256
    equilibrium: Optional[bool] = None
    options: RunOptions = Field(default_factory=RunOptions)


class EnvelopeRequest(BaseModel):
    psi0: Optional[Dict[str, Any]] = None  # {"columns": [...], "rows": [...]}
    tensor: Optional[TensorSpec] = None
    b_max: float = 3.0
    level: int = 3
    n_theta: int = 64
    max_iter: int = 64
    lattice: Optional[List[Triple]] = None
    options: RunOptions = Field(default_factory=RunOptions)


class CellRequest(BaseModel):
    tensor: TensorSpec
    burgers: Triple
    direction: Triple
    h: float = 8.0
    r: List[float] = Field(default_factory=lambda: [0.01])
    R: float = 1.0
    mesh: List[int] = Field(default_factory=lambda: [64, 128])
    lam: List[float] = Field(default=None, alias="lambda")
    rotation: RotationSpec = Field(default_factory=RotationSpec)
    model: Literal["prototype", "saint-venant"] = "prototype"
    n_theta_profile: int = 256
    options: RunOptions = Field(default_factory=RunOptions)

    model_config = {"populate_by_name": True}


class GammaScanRequest(BaseModel):
    measure: MeasureSpec
    beta: Optional[Dict[str, Any]] = None
    rotation: RotationSpec = Field(default_factory=RotationSpec)
    eps: List[float] = Field(default_factory=lambda: [1e-2, 3e-3, 1e-3])
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    domain: BoxSpec = Field(default_factory=BoxSpec)
    model: Literal["prototype", "saint-venant"] = "prototype"
    envelope_level: int = 2
    envelope_b_max: float = 2.0
    base_cells: int = 12
    options: RunOptions = Field(default_factory=RunOptions)


class CheckMeasureRequest(BaseModel):
    measure: MeasureSpec
    h: Optional[float] = None
    alpha: Optional[float] = None
    domain: Optional[Dict[str, Any]] = None
    options: RunOptions = Field(default_factory=RunOptions)


class AcceptRequest(BaseModel):
    suite: str = "all"
    overrides: Dict[str, Any] = Field(default_factory=dict)
    options: RunOptions = Field(default_factory=RunOptions)


class ResultEnvelope(BaseModel):
    version: str
    command: str
    config: Dict[str, Any]
    timestamp: str
    payload: Dict[str, Any]
    checksum: str

    @classmethod
    def wrap(cls, command: str, config: BaseModel, payload: Dict[str, Any]):
        return cls(
            version=__version__,
            command=command,
            config=json.loads(config.model_dump_json(by_alias=True)),
            timestamp=datetime.now(timezone.utc).isoformat(),
            payload=payload,
            checksum=payload_checksum(payload),
        )
