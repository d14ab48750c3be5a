from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field


class ProbeResult(BaseModel):
    point: Tuple[float, float, float]
    re: float
    im: float
    exact_re: Optional[float] = None
    exact_im: Optional[float] = None
    relative_error: Optional[float] = Field(None, description="|u - u_exact| / |u_exact| when an exact value is known")


class SolveReportModel(BaseModel):
    """Summary of one mixed solve"""

    success: bool = True
    wavenumber: str = Field(..., description="λ as re+im i")
    side: str
    num_triangles: int
    num_vertices: int
    gamma1_dofs: int = Field(..., description="P0 unknowns g2 on Γ₁ panels")
    interior_gamma2_dofs: int = Field(..., description="P1 unknowns g1 on interior Γ₂ vertices")
    method: str = Field(..., description="'schur', or 'monolithic' when the Schur path was near-singular")
    schur_residual: float
    path_discrepancy: Optional[float] = None
    condition_estimate: float
    stability_ratio: float
    probes: List[ProbeResult] = Field(default_factory=list)
    max_probe_error: Optional[float] = None
    timings: Dict[str, float] = Field(default_factory=dict)


class ResidualRowModel(BaseModel):
    check: str
    level: str
    wavenumber: str
    value: float
    threshold: float
    passed: bool


class RadiationRowModel(BaseModel):
    radius: float
    amplitude: float
    compensated_amplitude: float
    residual: float


class VerifySummary(BaseModel):
    success: bool
    checks: int
    failed: List[str] = Field(default_factory=list)
    rows: List[ResidualRowModel] = Field(default_factory=list)
    radiation: List[RadiationRowModel] = Field(default_factory=list)


class MeasureRowModel(BaseModel):
    eps: str
    observable: str
    value: float


class MeasureStudySummary(BaseModel):
    success: bool
    converges_monotonically: bool
    final_gap: Optional[float] = None
    w1q_variation: Optional[float] = None
    rows: List[MeasureRowModel] = Field(default_factory=list)


class RunManifest(BaseModel):
    command: str
    config: Dict[str, Any]
    versions: Dict[str, str]
    timings: Dict[str, float] = Field(default_factory=dict)
    threads: int
    exit_code: int
    outputs: List[str] = Field(default_factory=list)
    created_at: datetime = Field(default_factory=datetime.now)


class ErrorResponse(BaseModel):
    """Error response model"""

    success: bool = False
    error: str = Field(..., description="Error type")
    message: str = Field(..., description="Error message")
    details: Optional[dict] = Field(None, description="Additional error details")
