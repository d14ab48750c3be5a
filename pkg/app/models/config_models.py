from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, field_validator, model_validator
from typing_extensions import Annotated

from app.services.geometry import HalfSpaceRule
from app.services.kernels import WaveNumber
from app.services.measure import MeasureData
from app.services.quadrature import QuadratureSettings

Point = Tuple[float, float, float]


class MeshSource(BaseModel):
    """Where the boundary mesh comes from: a built-in icosphere or a file"""

    builtin_sphere_level: Optional[int] = Field(
        default=None, ge=0, le=5, description="Refinement level of the unit icosphere (0-5)"
    )
    path: Optional[str] = Field(default=None, description="Path to an OFF or Gmsh 2.2 ASCII mesh")
    format: Optional[Literal["off", "gmsh"]] = Field(
        default=None, description="Mesh file format; inferred from the extension when omitted"
    )

    @model_validator(mode="after")
    def exactly_one_source(self):
        if (self.builtin_sphere_level is None) == (self.path is None):
            raise ValueError("set exactly one of builtin_sphere_level or path")
        return self


class PartitionRule(BaseModel):
    """Γ₁ (Dirichlet) / Γ₂ (Neumann) labelling"""

    labels_file: Optional[str] = Field(
        default=None, description="File with one label (1 or 2) per triangle; overrides the half-space rule"
    )
    point: Point = Field(default=(0.0, 0.0, 0.0), description="A point on the splitting plane")
    normal: Point = Field(default=(0.0, 0.0, 1.0), description="Triangles with (c - point)·n > offset are Γ₁")
    offset: float = Field(default=0.0, description="Signed offset along the normal")

    def to_rule(self) -> Union[str, HalfSpaceRule]:
        if self.labels_file is not None:
            return self.labels_file
        return HalfSpaceRule(point=self.point, normal=self.normal, offset=self.offset)


class WaveNumberConfig(BaseModel):
    re: float = Field(default=0.0, description="Real part of λ")
    im: float = Field(default=0.0, description="Imaginary part of λ (must be >= 0)")

    @field_validator("im")
    @classmethod
    def non_negative_imaginary_part(cls, v: float) -> float:
        if v < 0:
            raise ValueError("Im(λ) must be >= 0")
        return v

    def to_wavenumber(self) -> WaveNumber:
        return WaveNumber.from_parts(self.re, self.im)


class ZeroData(BaseModel):
    kind: Literal["zero"] = "zero"


class ManufacturedData(BaseModel):
    kind: Literal["manufactured"] = "manufactured"
    source: Point = Field(..., description="Point source y*; outside Ω for interior runs, inside for exterior")


class FileData(BaseModel):
    kind: Literal["files"] = "files"
    f1_path: str = Field(..., description="Dirichlet coefficients (re [im] per line) on Γ₁ vertices or all vertices")
    f2_path: str = Field(..., description="Neumann coefficients (re [im] per line) on Γ₂ panels or all panels")


DataSpec = Annotated[Union[ZeroData, ManufacturedData, FileData], Field(discriminator="kind")]


class AtomConfig(BaseModel):
    x: float
    y: float
    z: float
    weight: float = Field(default=1.0, description="Real part of the weight")
    weight_im: float = Field(default=0.0, description="Imaginary part (volume sources only)")

    @property
    def point(self) -> Point:
        return (self.x, self.y, self.z)


class VolumeSpec(BaseModel):
    atoms: List[AtomConfig] = Field(default_factory=list, description="Point sources of the volume term h")


class DensitySample(BaseModel):
    """One sample of the absolutely continuous part of μ"""

    x: float
    y: float
    z: float
    volume: float = Field(..., gt=0, description="Quadrature volume carried by the sample")
    value: float = Field(..., description="Density value at the sample")

    @property
    def point(self) -> Point:
        return (self.x, self.y, self.z)


class MeasureSpec(BaseModel):
    atoms: List[AtomConfig] = Field(default_factory=list, description="Atoms of the measure μ (real weights)")
    density: List[DensitySample] = Field(
        default_factory=list, description="Density samples of μ; the mass of a sample is volume × value"
    )
    eps_list: List[float] = Field(default=[0.4, 0.2, 0.1], description="Mollification radii, largest first")
    q: float = Field(default=1.2, gt=0, description="Exponent of the W^(1,q) diagnostic (must be < 3/2)")
    grid_spacing: float = Field(default=0.1, gt=0, description="Spacing of the interior diagnostic grid")
    marcinkiewicz_r: float = Field(default=1.5, gt=0, description="Exponent of the Marcinkiewicz quasinorm")
    truncation: float = Field(default=1.0, gt=0, description="Level a of the truncated-gradient energy")
    boundary_data: Literal["atom_field", "zero"] = Field(
        default="atom_field",
        description="Boundary data from the free-space field of μ (atoms and density samples), or zero",
    )
    observation_points: List[Point] = Field(
        default=[(0.15, 0.0, 0.0), (0.0, -0.15, 0.0), (0.0, 0.0, 0.3)],
        description="Interior points where u_ε is compared with the atomic reference",
    )

    @field_validator("eps_list")
    @classmethod
    def positive_radii(cls, v: List[float]) -> List[float]:
        if not v or any(e <= 0 for e in v):
            raise ValueError("eps_list must hold positive radii")
        return v

    def to_measure(self) -> MeasureData:
        return MeasureData(
            atom_points=[a.point for a in self.atoms],
            atom_weights=[a.weight for a in self.atoms],
            density_points=[s.point for s in self.density],
            density_weights=[s.volume for s in self.density],
            density_values=[s.value for s in self.density],
        )


class ProbeSpec(BaseModel):
    points: List[Point] = Field(default_factory=list, description="Evaluation points (default: a small set)")
    radii: List[float] = Field(default=[3.0, 6.0, 12.0], description="Radiation-check sphere radii")


class QuadratureConfig(BaseModel):
    far_order: int = Field(default=3, ge=1, le=10, description="Triangle rule order for well-separated pairs")
    near_order: int = Field(default=6, ge=1, le=10, description="Triangle rule order for near pairs")
    singular_q: int = Field(default=4, ge=2, le=8, description="Gauss points per direction for touching pairs")
    near_factor: float = Field(default=2.0, ge=0, description="Near if centroid distance < factor × diameter")

    def to_settings(self) -> QuadratureSettings:
        return QuadratureSettings(
            far_order=self.far_order,
            near_order=self.near_order,
            singular_q=self.singular_q,
            near_factor=self.near_factor,
        )


class VerifyThresholds(BaseModel):
    jump: Dict[str, float] = Field(default_factory=dict, description="Overrides for jump-suite thresholds")
    probe_error: float = Field(default=1e-2, gt=0, description="Max relative probe error on the finest mesh")
    schur_residual: float = Field(default=1e-8, gt=0)
    path_discrepancy: float = Field(default=1e-10, gt=0)
    radiation_spread: float = Field(default=0.2, gt=0)
    refinements: int = Field(default=1, ge=0, le=3, description="Extra uniform refinements of the base mesh")


class RunConfig(BaseModel):
    """Complete description of one run"""

    mesh: MeshSource
    partition: PartitionRule = Field(default_factory=PartitionRule)
    wavenumber: WaveNumberConfig = Field(default_factory=WaveNumberConfig)
    side: Literal["interior", "exterior"] = "interior"
    data: DataSpec = Field(default_factory=ZeroData)
    volume: VolumeSpec = Field(default_factory=VolumeSpec)
    measure: Optional[MeasureSpec] = None
    probes: ProbeSpec = Field(default_factory=ProbeSpec)
    quadrature: QuadratureConfig = Field(default_factory=QuadratureConfig)
    thresholds: VerifyThresholds = Field(default_factory=VerifyThresholds)
    output_dir: str = Field(default="output", description="Directory for reports, tables and dumps")
    dof_cap: Optional[int] = Field(default=None, gt=0, description="Dense dof cap (default: BEM_DOF_CAP or 20000)")

    @model_validator(mode="after")
    def exterior_has_no_volume(self):
        if self.side == "exterior" and self.volume.atoms:
            raise ValueError("exterior problems take no volume source")
        return self

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.model_validate_json(Path(path).read_text())
