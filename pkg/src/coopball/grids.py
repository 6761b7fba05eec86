"""Grid discretization of the board surface and the field snapshot format.

All field-valued quantities (goal posterior, guidance features, reward)
live on one shared `GoalGrid`. Cells are ordered row-major: index =
iy * nx + ix, with ix running along +x and iy along +y.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np

DEFAULT_RESOLUTION = 41


@dataclass(frozen=True)
class GoalGrid:
    """A rectangular grid of cells tiling the board exactly."""

    nx: int
    ny: int
    half_width: float
    half_height: float

    def __post_init__(self) -> None:
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid resolution must be at least 2 per axis")
        if self.half_width <= 0 or self.half_height <= 0:
            raise ValueError("board half-extents must be positive")

    @classmethod
    def square(cls, half_width: float,
               resolution: int = DEFAULT_RESOLUTION) -> "GoalGrid":
        return cls(nx=resolution, ny=resolution, half_width=half_width,
                   half_height=half_width)

    @classmethod
    def for_board(cls, cfg, resolution: int = DEFAULT_RESOLUTION
                  ) -> "GoalGrid":
        return cls(nx=resolution, ny=resolution, half_width=cfg.half_width,
                   half_height=cfg.half_height)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_width(self) -> float:
        return 2.0 * self.half_width / self.nx

    @property
    def cell_height(self) -> float:
        return 2.0 * self.half_height / self.ny

    @cached_property
    def centers_x(self) -> np.ndarray:
        w = self.cell_width
        return -self.half_width + w * (np.arange(self.nx) + 0.5)

    @cached_property
    def centers_y(self) -> np.ndarray:
        h = self.cell_height
        return -self.half_height + h * (np.arange(self.ny) + 0.5)

    @cached_property
    def cell_centers(self) -> np.ndarray:
        """(n_cells, 2) array of cell-center coordinates, row-major."""
        gx, gy = np.meshgrid(self.centers_x, self.centers_y)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def axis_bin(self, value: float, axis: int) -> tuple[int, bool]:
        """Bin index along one axis (0 = x, 1 = y); True if clamped."""
        if axis == 0:
            n, half, width = self.nx, self.half_width, self.cell_width
        else:
            n, half, width = self.ny, self.half_height, self.cell_height
        raw = int((value + half) / width)
        clamped = value < -half or value > half
        return min(max(raw, 0), n - 1), clamped

    def cell_index(self, x: float, y: float) -> tuple[int, bool]:
        """Row-major cell index of a board position; True if clamped."""
        ix, cx = self.axis_bin(x, 0)
        iy, cy = self.axis_bin(y, 1)
        return iy * self.nx + ix, cx or cy

    def bounds(self) -> tuple[float, float, float, float]:
        return (-self.half_width, self.half_width,
                -self.half_height, self.half_height)


def field_dump(kind: str, grid: GoalGrid, values: np.ndarray,
               iteration: int) -> str:
    """Canonical text snapshot of one grid field.

    Header lines carry kind, resolution, bounds and iteration; the body is
    ny rows of nx comma-separated values, row-major from -y to +y. The
    same function backs file snapshots, regression fixtures and the wire
    checksum, so every producer yields byte-identical text for identical
    floats.
    """
    flat = np.asarray(values, dtype=float).ravel()
    if flat.size != grid.n_cells:
        raise ValueError(f"expected {grid.n_cells} values, got {flat.size}")
    xmin, xmax, ymin, ymax = grid.bounds()
    lines = [
        f"# kind,{kind}",
        f"# resolution,{grid.nx},{grid.ny}",
        f"# bounds,{xmin!r},{xmax!r},{ymin!r},{ymax!r}",
        f"# iteration,{iteration}",
    ]
    for iy in range(grid.ny):
        row = flat[iy * grid.nx:(iy + 1) * grid.nx]
        lines.append(",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def parse_field_dump(text: str) -> tuple[str, GoalGrid, np.ndarray, int]:
    """Inverse of `field_dump`."""
    lines = text.strip().split("\n")
    header = {}
    body = []
    for line in lines:
        if line.startswith("# "):
            key, _, rest = line[2:].partition(",")
            header[key] = rest
        else:
            body.append([float(v) for v in line.split(",")])
    nx, ny = (int(v) for v in header["resolution"].split(","))
    xmin, xmax, ymin, ymax = (float(v) for v in header["bounds"].split(","))
    grid = GoalGrid(nx=nx, ny=ny, half_width=xmax, half_height=ymax)
    values = np.asarray(body, dtype=float).ravel()
    return header["kind"], grid, values, int(header["iteration"])


def field_checksum(kind: str, grid: GoalGrid, values: np.ndarray,
                   iteration: int = 0) -> str:
    return hashlib.sha256(
        field_dump(kind, grid, values, iteration).encode()).hexdigest()
