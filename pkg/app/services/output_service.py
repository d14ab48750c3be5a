import csv
import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Union

import numpy as np
from pydantic import BaseModel

from app.services.operators import OperatorMatrix

logger = logging.getLogger(__name__)


class OutputService:
    """Writes reports, CSV tables and matrix dumps into one output directory"""

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)
        self.written: List[str] = []

    def ensure_dir(self) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        return self.output_dir

    def _path(self, name: str) -> Path:
        path = self.ensure_dir() / name
        if name not in self.written:
            self.written.append(name)
        return path

    def write_model(self, name: str, model: BaseModel) -> Path:
        path = self._path(name)
        path.write_text(model.model_dump_json(indent=2))
        logger.info(f"Wrote {path}")
        return path

    def write_table(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        path = self._path(name)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
        logger.info(f"Wrote {path}")
        return path

    def write_solution(self, points: np.ndarray, values: np.ndarray) -> Path:
        """``solution.csv`` with columns x,y,z,re,im."""
        rows = (
            (p[0], p[1], p[2], v.real, v.imag)
            for p, v in zip(np.atleast_2d(points), np.asarray(values, dtype=complex))
        )
        return self.write_table("solution.csv", ("x", "y", "z", "re", "im"), rows)

    def dump_operator(self, name: str, matrix: OperatorMatrix) -> Path:
        """Row-major complex128 ``<name>.bin`` plus a ``<name>.txt`` descriptor."""
        entries = np.ascontiguousarray(matrix.entries, dtype="<c16")
        binary = self._path(f"{name}.bin")
        binary.write_bytes(entries.tobytes(order="C"))
        lam = matrix.wavenumber.value
        descriptor = self._path(f"{name}.txt")
        descriptor.write_text(
            f"rows={entries.shape[0]}\n"
            f"cols={entries.shape[1]}\n"
            f"kind={matrix.kind.value}\n"
            f"lambda_re={lam.real!r}\n"
            f"lambda_im={lam.imag!r}\n"
        )
        logger.info(f"Dumped {name} {entries.shape} to {binary}")
        return binary


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    return value


def read_operator(path: Union[str, Path]) -> np.ndarray:
    """Load a dumped matrix using its descriptor file."""
    binary = Path(path)
    fields = {}
    for line in binary.with_suffix(".txt").read_text().splitlines():
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    data = np.frombuffer(binary.read_bytes(), dtype="<c16")
    return data.reshape(int(fields["rows"]), int(fields["cols"]))
