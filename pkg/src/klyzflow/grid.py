"""Uniform periodic lattices on flat complex tori and Fourier-spectral derivatives.

Real axes are ordered ``(x_1, y_1, x_2, y_2)`` and the complex coordinate is
``z_k = x_k + i y_k``.  With ``d/dz = (d/dx - i d/dy) / 2`` the complex
Laplacian ``d^2/dz dzbar`` is one quarter of the flat real Laplacian.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    n_complex: int
    points_per_axis: tuple[int, ...]
    periods: tuple[float, ...]

    def __post_init__(self):
        if self.n_complex not in (1, 2):
            raise GridError(f"n_complex must be 1 or 2, got {self.n_complex}")
        pts = tuple(int(p) for p in self.points_per_axis)
        per = tuple(float(p) for p in self.periods)
        if len(pts) != 2 * self.n_complex or len(per) != 2 * self.n_complex:
            raise GridError("need one resolution and one period per real axis")
        if min(pts) < 8:
            raise GridError("points_per_axis must be >= 8 on every axis")
        if min(per) <= 0.0:
            raise GridError("periods must be positive")
        object.__setattr__(self, "points_per_axis", pts)
        object.__setattr__(self, "periods", per)

    @classmethod
    def uniform(cls, n_complex: int, points: int, period: float = 1.0) -> "Grid":
        return cls(n_complex, (points,) * (2 * n_complex), (period,) * (2 * n_complex))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points_per_axis

    @property
    def real_dim(self) -> int:
        return 2 * self.n_complex

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(p / n for p, n in zip(self.periods, self.points_per_axis))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def total_volume(self) -> float:
        return float(np.prod(self.periods))

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        """Broadcastable coordinate arrays, one per real axis."""
        out = []
        for ax, (n, p) in enumerate(zip(self.points_per_axis, self.periods)):
            shape = [1] * self.real_dim
            shape[ax] = n
            out.append((np.arange(n) * (p / n)).reshape(shape))
        return tuple(out)

    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.broadcast_to(c, self.shape) for c in self.coords)

    @cached_property
    def _wavenumbers(self) -> tuple[np.ndarray, ...]:
        out = []
        for ax, (n, p) in enumerate(zip(self.points_per_axis, self.periods)):
            k = 2.0 * np.pi * np.fft.fftfreq(n, d=p / n)
            shape = [1] * self.real_dim
            shape[ax] = n
            out.append(k.reshape(shape))
        return tuple(out)

    @cached_property
    def _odd_wavenumbers(self) -> tuple[np.ndarray, ...]:
        # Nyquist mode has no well-defined odd derivative on an even grid.
        out = []
        for ax, k in enumerate(self._wavenumbers):
            n = self.points_per_axis[ax]
            k = k.copy()
            if n % 2 == 0:
                idx = [0] * self.real_dim
                idx[ax] = n // 2
                k[tuple(idx)] = 0.0
            out.append(k)
        return tuple(out)

    @cached_property
    def holo_symbols(self) -> tuple[np.ndarray, ...]:
        """Fourier multipliers of d/dz_k."""
        k = self._odd_wavenumbers
        return tuple(0.5 * (1j * k[2 * j] + k[2 * j + 1]) for j in range(self.n_complex))

    @cached_property
    def antiholo_symbols(self) -> tuple[np.ndarray, ...]:
        """Fourier multipliers of d/dzbar_k."""
        k = self._odd_wavenumbers
        return tuple(0.5 * (1j * k[2 * j] - k[2 * j + 1]) for j in range(self.n_complex))

    @cached_property
    def ddbar_symbols(self) -> np.ndarray:
        """Multipliers of d^2/dz_i dzbar_j, shape (*shape, n, n)."""
        n = self.n_complex
        k = self._wavenumbers
        out = np.empty(self.shape + (n, n), dtype=complex)
        for i in range(n):
            for j in range(n):
                if i == j:
                    out[..., i, j] = -0.25 * (k[2 * i] ** 2 + k[2 * i + 1] ** 2)
                else:
                    out[..., i, j] = self.holo_symbols[i] * self.antiholo_symbols[j]
        return out

    @cached_property
    def real_laplacian_symbol(self) -> np.ndarray:
        return -sum(k**2 for k in self._wavenumbers)

    @cached_property
    def gradient_symbols(self) -> tuple[np.ndarray, ...]:
        return tuple(1j * k for k in self._odd_wavenumbers)

    # spectral helpers ------------------------------------------------------

    # Fields carry the grid axes first; tensor indices (if any) trail.

    def _spread(self, sym: np.ndarray, u: np.ndarray) -> np.ndarray:
        extra = u.ndim - self.real_dim
        return sym.reshape(sym.shape + (1,) * extra) if extra else sym

    def fft(self, u: np.ndarray) -> np.ndarray:
        return np.fft.fftn(u, axes=tuple(range(self.real_dim)))

    def ifft(self, u_hat: np.ndarray) -> np.ndarray:
        return np.fft.ifftn(u_hat, axes=tuple(range(self.real_dim)))

    def d_holo(self, u: np.ndarray, i: int) -> np.ndarray:
        sym = self.holo_symbols[i]
        return self.ifft(self.fft(u) * self._spread(sym, u))

    def d_antiholo(self, u: np.ndarray, i: int) -> np.ndarray:
        sym = self.antiholo_symbols[i]
        return self.ifft(self.fft(u) * self._spread(sym, u))

    def holo_gradient(self, u: np.ndarray) -> np.ndarray:
        """Stack of d/dz_k u on a new trailing axis."""
        u_hat = self.fft(u)
        return np.stack(
            [self.ifft(u_hat * self._spread(s, u)) for s in self.holo_symbols], axis=-1
        )

    def ddbar(self, u: np.ndarray) -> np.ndarray:
        """Complex Hessian H[..., i, j] = d_i dbar_j u of a scalar field."""
        if u.shape != self.shape:
            raise GridError("ddbar expects a scalar field")
        return self.ifft(self.fft(u)[..., None, None] * self.ddbar_symbols)

    def gradient(self, u: np.ndarray) -> np.ndarray:
        """Real-coordinate gradient of a real field, stacked on a trailing axis."""
        u_hat = self.fft(u)
        return np.stack(
            [self.ifft(u_hat * self._spread(s, u)).real for s in self.gradient_symbols],
            axis=-1,
        )

    def real_laplacian(self, u: np.ndarray) -> np.ndarray:
        sym = self._spread(self.real_laplacian_symbol, u)
        return self.ifft(self.fft(u) * sym).real

    def integrate(self, u: np.ndarray) -> float:
        """Grid-cell (midpoint) quadrature of a density over the torus."""
        return float(np.sum(u) * self.cell_volume)

    def mean(self, u: np.ndarray):
        return np.mean(u, axis=tuple(range(self.real_dim)))

    def to_dict(self) -> dict:
        return {
            "n_complex": self.n_complex,
            "points_per_axis": list(self.points_per_axis),
            "periods": list(self.periods),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(int(d["n_complex"]), tuple(d["points_per_axis"]), tuple(d["periods"]))
