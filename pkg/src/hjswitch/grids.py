"""Uniform boxes and multilinear interpolation shared by every grid solver.

A Box is [-X_1, X_1] x ... x [-X_N, X_N] with one spacing for all axes,
N in {1, 2}.  Values live on the node lattice; queries outside the box are
extended constantly (clamped), which is exact for problems whose data are
constant near the boundary and otherwise covered by the finite speed of
propagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    half_widths: np.ndarray
    spacing: float

    def __post_init__(self):
        hw = np.atleast_1d(np.asarray(self.half_widths, dtype=float))
        if hw.ndim != 1 or hw.size not in (1, 2):
            raise ValueError("box dimension must be 1 or 2")
        if self.spacing <= 0.0:
            raise ValueError("spacing must be positive")
        snapped = self.spacing * np.round(hw / self.spacing)
        if np.any(np.abs(snapped - hw) > 1e-9) or np.any(snapped <= 0.0):
            raise ValueError("half widths must be positive multiples of the spacing")
        hw = snapped
        hw.setflags(write=False)
        object.__setattr__(self, "half_widths", hw)

    @property
    def dim(self) -> int:
        return self.half_widths.size

    @property
    def shape(self) -> tuple:
        return tuple(int(round(2.0 * x / self.spacing)) + 1 for x in self.half_widths)

    def axis(self, d: int) -> np.ndarray:
        n = self.shape[d]
        return -self.half_widths[d] + self.spacing * np.arange(n)

    def node_mesh(self) -> np.ndarray:
        """All nodes as an array of shape (*shape, dim)."""
        axes = [self.axis(d) for d in range(self.dim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def contains(self, point, slack: float = 1e-9) -> bool:
        p = np.atleast_1d(np.asarray(point, dtype=float))
        return bool(np.all(np.abs(p) <= self.half_widths + slack))

    def _axis_locate(self, d: int, coords: np.ndarray):
        n = self.shape[d]
        rel = (coords + self.half_widths[d]) / self.spacing
        idx = np.clip(np.floor(rel).astype(int), 0, n - 2)
        frac = np.clip(rel - idx, 0.0, 1.0)
        return idx, frac

    def interpolate(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of node values at arbitrary points.

        ``values`` has shape (..., *self.shape); ``points`` has shape (M, dim)
        or (dim,).  Returns shape (..., M) or (...,) for a single point.
        """
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        if self.dim == 1:
            i0, f = self._axis_locate(0, pts[:, 0])
            out = values[..., i0] * (1.0 - f) + values[..., i0 + 1] * f
        else:
            i0, fx = self._axis_locate(0, pts[:, 0])
            j0, fy = self._axis_locate(1, pts[:, 1])
            out = (
                values[..., i0, j0] * (1 - fx) * (1 - fy)
                + values[..., i0 + 1, j0] * fx * (1 - fy)
                + values[..., i0, j0 + 1] * (1 - fx) * fy
                + values[..., i0 + 1, j0 + 1] * fx * fy
            )
        return out[..., 0] if single else out

    def shift_linear(self, values: np.ndarray, offset) -> np.ndarray:
        """Interpolate node values at every node displaced by a constant offset.

        Equivalent to interpolate(values, nodes + offset) but runs axis by
        axis with no gather of point coordinates; this is the hot path of the
        semi-Lagrangian update where offset = -dt * velocity.
        """
        offset = np.atleast_1d(np.asarray(offset, dtype=float))
        out = values
        for d in range(self.dim):
            ax = out.ndim - self.dim + d
            n = self.shape[d]
            rel = offset[d] / self.spacing
            k = int(np.floor(rel))
            f = rel - k
            idx0 = np.clip(np.arange(n) + k, 0, n - 1)
            low = np.take(out, idx0, axis=ax)
            if f == 0.0:
                out = low
            else:
                idx1 = np.clip(np.arange(n) + k + 1, 0, n - 1)
                out = (1.0 - f) * low + f * np.take(out, idx1, axis=ax)
        return out


def velocity_lattice(q_max: float, dv: float, dim: int) -> np.ndarray:
    """Symmetric uniform lattice of speeds per axis, always containing 0.

    Returns an array of shape (n_lattice, dim) covering [-q_max, q_max]^dim.
    """
    if dv <= 0.0 or q_max <= 0.0:
        raise ValueError("lattice needs positive q_max and dv")
    # stay inside the declared truncation: Lagrangians are only trusted there
    k = max(1, int(np.floor(q_max / dv + 1e-12)))
    one_axis = dv * np.arange(-k, k + 1)
    if dim == 1:
        return one_axis[:, None]
    vx, vy = np.meshgrid(one_axis, one_axis, indexing="ij")
    return np.stack([vx.ravel(), vy.ravel()], axis=1)


def lattice_boundary_mask(lattice: np.ndarray) -> np.ndarray:
    """True for lattice rows lying on the outer shell (max |component|)."""
    top = np.max(np.abs(lattice))
    return np.any(np.abs(lattice) >= top - 1e-12, axis=1)
