import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from app.models.config_models import FileData, ManufacturedData, RunConfig, ZeroData
from app.services.geometry import HalfSpaceRule
from app.services.measure import total_variation

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def test_minimal_config_defaults():
    config = RunConfig.model_validate({"mesh": {"builtin_sphere_level": 2}})
    assert config.side == "interior"
    assert isinstance(config.data, ZeroData)
    assert config.wavenumber.to_wavenumber().is_laplace
    assert isinstance(config.partition.to_rule(), HalfSpaceRule)
    assert config.measure is None


def test_mesh_needs_exactly_one_source():
    with pytest.raises(ValidationError, match="exactly one"):
        RunConfig.model_validate({"mesh": {}})
    with pytest.raises(ValidationError, match="exactly one"):
        RunConfig.model_validate({"mesh": {"builtin_sphere_level": 1, "path": "sphere.off"}})
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"mesh": {"builtin_sphere_level": 9}})


def test_negative_imaginary_wavenumber_rejected():
    with pytest.raises(ValidationError, match="Im"):
        RunConfig.model_validate({"mesh": {"builtin_sphere_level": 1}, "wavenumber": {"re": 1.0, "im": -0.1}})


def test_data_union_is_discriminated_by_kind():
    config = RunConfig.model_validate(
        {"mesh": {"builtin_sphere_level": 1}, "data": {"kind": "manufactured", "source": [0, 0, 3]}}
    )
    assert isinstance(config.data, ManufacturedData)
    assert config.data.source == (0.0, 0.0, 3.0)

    config = RunConfig.model_validate(
        {"mesh": {"builtin_sphere_level": 1}, "data": {"kind": "files", "f1_path": "a.txt", "f2_path": "b.txt"}}
    )
    assert isinstance(config.data, FileData)

    with pytest.raises(ValidationError):
        RunConfig.model_validate({"mesh": {"builtin_sphere_level": 1}, "data": {"kind": "manufactured"}})
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"mesh": {"builtin_sphere_level": 1}, "data": {"kind": "random"}})


def test_exterior_problem_rejects_volume_source():
    with pytest.raises(ValidationError, match="no volume source"):
        RunConfig.model_validate(
            {
                "mesh": {"builtin_sphere_level": 1},
                "side": "exterior",
                "volume": {"atoms": [{"x": 0, "y": 0, "z": 0}]},
            }
        )


def test_labels_file_overrides_half_space():
    config = RunConfig.model_validate({"mesh": {"builtin_sphere_level": 1}, "partition": {"labels_file": "l.txt"}})
    assert config.partition.to_rule() == "l.txt"


def test_measure_radii_must_be_positive():
    with pytest.raises(ValidationError, match="positive radii"):
        RunConfig.model_validate({"mesh": {"builtin_sphere_level": 1}, "measure": {"eps_list": [0.2, 0.0]}})
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"mesh": {"builtin_sphere_level": 1}, "measure": {"eps_list": []}})


def test_measure_density_samples():
    config = RunConfig.model_validate(
        {
            "mesh": {"builtin_sphere_level": 1},
            "measure": {
                "atoms": [{"x": 0.1, "y": 0, "z": 0, "weight": -2.0}],
                "density": [
                    {"x": 0.0, "y": 0.2, "z": 0.0, "volume": 0.01, "value": 3.0},
                    {"x": 0.0, "y": -0.2, "z": 0.1, "volume": 0.02, "value": -1.0},
                ],
            },
        }
    )
    mu = config.measure.to_measure()
    assert mu.atom_points.shape == (1, 3)
    assert mu.density_points.shape == (2, 3)
    assert np.allclose(mu.density_weights, [0.01, 0.02])
    assert total_variation(mu) == pytest.approx(2.0 + 0.03 + 0.02)
    assert mu.integrate(lambda x: np.ones(len(x))) == pytest.approx(-2.0 + 0.03 - 0.02)

    assert config.measure.density[0].point == (0.0, 0.2, 0.0)
    atoms_only = RunConfig.model_validate({"mesh": {"builtin_sphere_level": 1}, "measure": {}})
    assert atoms_only.measure.to_measure().is_empty


def test_measure_density_needs_positive_volume():
    with pytest.raises(ValidationError):
        RunConfig.model_validate(
            {
                "mesh": {"builtin_sphere_level": 1},
                "measure": {"density": [{"x": 0, "y": 0, "z": 0, "volume": 0.0, "value": 1.0}]},
            }
        )
    with pytest.raises(ValidationError):
        RunConfig.model_validate(
            {"mesh": {"builtin_sphere_level": 1}, "measure": {"density": [{"x": 0, "y": 0, "z": 0, "volume": 0.1}]}}
        )


def test_quadrature_settings_round_trip():
    config = RunConfig.model_validate({"mesh": {"builtin_sphere_level": 1}, "quadrature": {"far_order": 4}})
    settings = config.quadrature.to_settings()
    assert settings.far_order == 4
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"mesh": {"builtin_sphere_level": 1}, "quadrature": {"near_order": 11}})


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_are_valid(path):
    config = RunConfig.from_file(path)
    assert config.output_dir


def test_schema_lists_sections():
    schema = RunConfig.model_json_schema()
    assert {"mesh", "partition", "wavenumber", "data", "measure"} <= set(schema["properties"])
    assert schema["required"] == ["mesh"]
    json.dumps(schema)
