"""Kähler geometry on periodic grids.

Fields carry grid axes first. A metric or (1,1)-form is a complex array of
shape ``(*grid.shape, n, n)`` whose entry ``[..., i, j]`` is the coefficient
``g_{i jbar}``. The Riemann tensor has shape ``(*grid.shape, n, n, n, n)``
with entry ``[..., i, j, k, l] = R_{i jbar k lbar}``.

Norm convention: ``|T|^2`` is the full contraction of ``T`` against its
conjugate using ``g`` on every index. Computed in a unitary frame
``G = L L^H``: holomorphic indices transform with ``L^{-1}``, antiholomorphic
ones with its conjugate, and the norm is the plain sum of squares.  For
``n = 1`` this gives ``|Rm| = |Ric| = |R|`` (``c(1) = c'(1) = 1``).

Norms of covariant derivatives count both derivative types,
``|nabla T|^2 = |nabla' T|^2 + |nabla'' T|^2 = 2 |nabla' T|^2`` for the
Hermitian-symmetric tensors used here, so that for a real function ``u`` it is
the Riemannian ``|du|^2`` of the associated real metric ``h = 2 Re g``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid

POSITIVITY_RTOL = 1e-8

# |T|_real = factor * |T|_complex for the Riemannian metric h = 2 Re(g).
REAL_NORM_FACTOR = {"rm": 2.0, "ric": np.sqrt(2.0), "alpha": np.sqrt(2.0), "scalar": 1.0}


class PositivityLost(ArithmeticError):
    """The metric left the Kähler cone (an eigenvalue fell below tolerance)."""


def hermitize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def constant_field(grid: Grid, matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=complex).reshape(grid.n_complex, grid.n_complex)
    return np.broadcast_to(m, grid.shape + m.shape).copy()


def scalar_metric(grid: Grid, coeff: np.ndarray) -> np.ndarray:
    """Wrap an n=1 coefficient field as an (*shape, 1, 1) Hermitian field."""
    return np.asarray(coeff, dtype=complex)[..., None, None]


def check_positive(g: np.ndarray, rtol: float = POSITIVITY_RTOL) -> np.ndarray:
    if not np.all(np.isfinite(g)):
        raise PositivityLost("non-finite metric entries")
    eig = np.linalg.eigvalsh(g)
    floor = rtol * abs(float(np.mean(eig)))
    lo = float(eig.min())
    if lo <= floor:
        raise PositivityLost(f"minimum metric eigenvalue {lo:.3e} <= {floor:.3e}")
    return eig


def det(g: np.ndarray) -> np.ndarray:
    if g.shape[-1] == 1:
        return g[..., 0, 0].real
    if g.shape[-1] == 2:
        return (g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]).real
    return np.linalg.det(g).real


def inverse(g: np.ndarray) -> np.ndarray:
    if g.shape[-1] == 1:
        return 1.0 / g
    return np.linalg.inv(g)


def frame(g: np.ndarray) -> np.ndarray:
    """L^{-1} for the Cholesky factor g = L L^H."""
    return np.linalg.inv(np.linalg.cholesky(g))


def metric_from_potential(grid: Grid, background: np.ndarray, phi: np.ndarray) -> np.ndarray:
    g = hermitize(background + grid.ddbar(np.asarray(phi, dtype=float)))
    check_positive(g)
    return g


def log_det(g: np.ndarray) -> np.ndarray:
    d = det(g)
    if np.any(d <= 0.0) or not np.all(np.isfinite(d)):
        raise PositivityLost("det(g) <= 0")
    return np.log(d)


def ricci_form(grid: Grid, g: np.ndarray) -> np.ndarray:
    """R_{i jbar} = -d_i dbar_j log det g."""
    return hermitize(-grid.ddbar(log_det(g)))


def trace_form(g: np.ndarray, form: np.ndarray) -> np.ndarray:
    """g^{i jbar} a_{i jbar} = tr(G^{-1} A)."""
    return np.trace(inverse(g) @ form, axis1=-2, axis2=-1).real


def laplacian(grid: Grid, g: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Complex Laplacian g^{i jbar} d_i dbar_j u."""
    return trace_form(g, grid.ddbar(np.asarray(u, dtype=float)))


def _ddbar_components(grid: Grid, t: np.ndarray) -> np.ndarray:
    """d_i dbar_j of every component of a tensor field; new axes (i, j) trail."""
    t_hat = grid.fft(t)
    sym = grid.ddbar_symbols
    extra = t.ndim - grid.real_dim
    sym = sym.reshape(grid.shape + (1,) * extra + sym.shape[-2:])
    return grid.ifft(t_hat[..., None, None] * sym)


def metric_derivative(grid: Grid, g: np.ndarray) -> np.ndarray:
    """dg[..., i, j, k] = d_k g_{i jbar}."""
    return grid.holo_gradient(g)


def christoffel(g_inv: np.ndarray, dg: np.ndarray) -> np.ndarray:
    """Gamma[..., p, m, i] = g^{p qbar} d_m g_{i qbar}."""
    # g^{p qbar} is entry [q, p] of the matrix inverse.
    return np.einsum("...qp,...iqm->...pmi", g_inv, dg)


def riemann_tensor(grid: Grid, g: np.ndarray) -> np.ndarray:
    """R_{i jbar k lbar} = -d_i dbar_j g_{k lbar} + g^{p qbar} d_i g_{k qbar} dbar_j g_{p lbar}."""
    check_positive(g)
    g_inv = inverse(g)
    dg = metric_derivative(grid, g)
    # dbar_j g_{p lbar} = conj(d_j g_{l pbar})
    dgbar = np.conj(np.swapaxes(dg, -3, -2))
    second = _ddbar_components(grid, g)  # [..., k, l, i, j]
    rm = -np.moveaxis(second, (-4, -3), (-2, -1))
    rm = rm + np.einsum("...qp,...kqi,...plj->...ijkl", g_inv, dg, dgbar)
    return rm


def contract_riemann(g: np.ndarray, rm: np.ndarray) -> np.ndarray:
    """g^{k lbar} R_{i jbar k lbar}."""
    return np.einsum("...lk,...ijkl->...ij", inverse(g), rm)


def _to_frame(t: np.ndarray, linv: np.ndarray, kinds: str) -> np.ndarray:
    """Transform trailing indices to the unitary frame; kinds is a string of 'h'/'a'."""
    r = len(kinds)
    out = t
    for pos, kind in enumerate(kinds):
        axis = t.ndim - r + pos
        mat = linv if kind == "h" else np.conj(linv)
        mat = mat.reshape(mat.shape[:-2] + (1,) * (r - 1) + mat.shape[-2:])
        moved = np.moveaxis(out, axis, -1)
        moved = np.einsum("...ab,...b->...a", mat, moved)
        out = np.moveaxis(moved, -1, axis)
    return out


def tensor_norm2(t: np.ndarray, linv: np.ndarray, kinds: str) -> np.ndarray:
    tt = _to_frame(t, linv, kinds)
    axes = tuple(range(t.ndim - len(kinds), t.ndim))
    return np.sum(np.abs(tt) ** 2, axis=axes)


@dataclass(frozen=True)
class CurvatureBundle:
    grid: Grid
    metric: np.ndarray
    inverse_metric: np.ndarray
    ricci: np.ndarray
    riemann: np.ndarray
    scalar: np.ndarray
    norm_rm: np.ndarray
    norm_ric: np.ndarray
    norm_alpha: np.ndarray
    volume_density: np.ndarray
    alpha: np.ndarray

    @property
    def frame(self) -> np.ndarray:
        return frame(self.metric)


def curvature_bundle(grid: Grid, g: np.ndarray, alpha: np.ndarray | None = None) -> CurvatureBundle:
    g = hermitize(g)
    check_positive(g)
    g_inv = inverse(g)
    ric = ricci_form(grid, g)
    rm = riemann_tensor(grid, g)
    if alpha is None:
        alpha = np.zeros_like(g)
    linv = frame(g)
    return CurvatureBundle(
        grid=grid,
        metric=g,
        inverse_metric=g_inv,
        ricci=ric,
        riemann=rm,
        scalar=trace_form(g, ric),
        norm_rm=np.sqrt(tensor_norm2(rm, linv, "haha")),
        norm_ric=np.sqrt(tensor_norm2(ric, linv, "ha")),
        norm_alpha=np.sqrt(tensor_norm2(alpha, linv, "ha")),
        volume_density=det(g),
        alpha=alpha,
    )


def pointwise_norms(bundle: CurvatureBundle) -> dict:
    return {
        "rm": bundle.norm_rm,
        "ric": bundle.norm_ric,
        "alpha": bundle.norm_alpha,
        "sup_rm": float(bundle.norm_rm.max()),
        "sup_ric": float(bundle.norm_ric.max()),
        "sup_alpha": float(bundle.norm_alpha.max()),
    }


def _nabla_holo(grid: Grid, t: np.ndarray, gamma: np.ndarray, kinds: str) -> np.ndarray:
    """nabla_m T for a tensor with trailing indices of the given kinds; m trails.

    Only holomorphic slots pick up Christoffel terms under an unbarred
    derivative on a Kähler manifold.
    """
    out = grid.holo_gradient(t)
    r = len(kinds)
    for pos, kind in enumerate(kinds):
        if kind != "h":
            continue
        axis = t.ndim - r + pos
        # sum_p Gamma[p, m, i] T[..., p, ...]
        moved = np.moveaxis(t, axis, -1)  # [..., rest, p]
        gam = gamma.reshape(gamma.shape[: grid.real_dim] + (1,) * (r - 1) + gamma.shape[-3:])
        corr = np.einsum("...pmi,...p->...im", gam, moved)
        corr = np.moveaxis(corr, -2, axis)
        out = out - corr
    return out


def covariant_derivative_norms(bundle: CurvatureBundle, alpha: np.ndarray | None = None) -> dict:
    """|nabla Ric|^2, |nabla Rm|^2, |nabla alpha|^2, |nabla tr alpha|^2 (both derivative types)."""
    grid = bundle.grid
    g = bundle.metric
    alpha = bundle.alpha if alpha is None else alpha
    linv = frame(g)
    gamma = christoffel(bundle.inverse_metric, metric_derivative(grid, g))
    d_ric = _nabla_holo(grid, bundle.ricci, gamma, "ha")
    d_rm = _nabla_holo(grid, bundle.riemann, gamma, "haha")
    d_alpha = _nabla_holo(grid, alpha, gamma, "ha")
    tr_alpha = trace_form(g, alpha)
    d_tr = grid.holo_gradient(tr_alpha.astype(complex))
    return {
        "ric": 2.0 * tensor_norm2(d_ric, linv, "hah"),
        "rm": 2.0 * tensor_norm2(d_rm, linv, "hahah"),
        "alpha": 2.0 * tensor_norm2(d_alpha, linv, "hah"),
        "tr_alpha": 2.0 * tensor_norm2(d_tr, linv, "h"),
    }
