"""Five-point relative pose solver.

The essential matrix is written as ``E = x X + y Y + z Z + W`` over the
null space of the 5x9 epipolar constraint matrix.  The rank constraint and
the trace constraint ``2 E E^T E - tr(E E^T) E = 0`` give ten cubics in
``(x, y, z)``.  Gauss-Jordan elimination on those, followed by the hidden
variable trick, yields a degree-10 polynomial in ``z`` whose real roots are
found as eigenvalues of its companion matrix.

Everything works on stacks of minimal samples so RANSAC can solve hundreds
of them in a single pass.
"""

from __future__ import annotations

from itertools import product

import numpy as np

from .errors import DegenerateConfiguration, NoRealSolution
from .geometry import homogeneous, project_essential_batch

# Cubic monomials.  The first ten are eliminated; their order follows
# Nister so that rows 4..9 pair up as (x^2 z, x^2), (y^2 z, y^2), (xyz, xy).
_CUBIC = [
    (3, 0, 0), (0, 3, 0), (2, 1, 0), (1, 2, 0), (2, 0, 1), (2, 0, 0),
    (0, 2, 1), (0, 2, 0), (1, 1, 1), (1, 1, 0),
    (1, 0, 2), (1, 0, 1), (1, 0, 0), (0, 1, 2), (0, 1, 1), (0, 1, 0),
    (0, 0, 3), (0, 0, 2), (0, 0, 1), (0, 0, 0),
]
_LINEAR = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_QUAD = sorted({tuple(a + b for a, b in zip(p, q)) for p in _LINEAR for q in _LINEAR}, reverse=True)

REAL_ROOT_TOL = 1e-8


def _mul_table(left, right, out):
    index = {m: k for k, m in enumerate(out)}
    T = np.zeros((len(left), len(right), len(out)))
    for (i, a), (j, b) in product(enumerate(left), enumerate(right)):
        T[i, j, index[tuple(u + v for u, v in zip(a, b))]] = 1.0
    return T


_LL = _mul_table(_LINEAR, _LINEAR, _QUAD)
_QL = _mul_table(_QUAD, _LINEAR, _CUBIC)


def constraint_rows(x1, x2) -> np.ndarray:
    """Rows of the linear epipolar system ``A vec(E) = 0`` (row-major vec)."""
    q1 = homogeneous(x1)
    q2 = homogeneous(x2)
    return np.einsum("...i,...j->...ij", q2, q1).reshape(q1.shape[:-1] + (9,))


def _polymul(a, b):
    out = np.zeros(a.shape[:-1] + (a.shape[-1] + b.shape[-1] - 1,))
    for i in range(a.shape[-1]):
        out[..., i : i + b.shape[-1]] += a[..., i : i + 1] * b
    return out


def _polysub(a, b):
    n = max(a.shape[-1], b.shape[-1])
    out = np.zeros(a.shape[:-1] + (n,))
    out[..., : a.shape[-1]] += a
    out[..., : b.shape[-1]] -= b
    return out


def _shift(a):
    """Multiply by z (coefficients low to high)."""
    return np.concatenate([np.zeros(a.shape[:-1] + (1,)), a], axis=-1)


def _cubic_system(basis):
    """10x20 coefficient matrices for a stack of null-space bases (n,4,3,3)."""
    n = len(basis)
    E = np.moveaxis(basis, 1, -1)  # (n,3,3,4): entry polynomials over _LINEAR
    LL = _LL.reshape(16, 10)
    QL = _QL.reshape(40, 20)
    # E E^T: outer products of entry coefficients summed over k, then mapped to monomials
    EEt = np.einsum("nika,njkb->nijab", E, E).reshape(n, 3, 3, 16) @ LL
    trace = EEt[:, 0, 0] + EEt[:, 1, 1] + EEt[:, 2, 2]
    EEtE = np.einsum("nikq,nkja->nijqa", EEt, E).reshape(n, 3, 3, 40) @ QL
    trE = (trace[:, None, None, :, None] * E[:, :, :, None, :]).reshape(n, 3, 3, 40) @ QL
    M = 2.0 * EEtE - trE

    def quad(i, j, k, l):
        return (E[:, i, j, :, None] * E[:, k, l, None, :]).reshape(n, 16) @ LL

    cof = np.stack(
        [
            quad(1, 1, 2, 2) - quad(1, 2, 2, 1),
            quad(1, 2, 2, 0) - quad(1, 0, 2, 2),
            quad(1, 0, 2, 1) - quad(1, 1, 2, 0),
        ],
        axis=1,
    )
    det = np.einsum("njq,nja->nqa", cof, E[:, 0]).reshape(n, 40) @ QL
    return np.concatenate([det[:, None, :], M.reshape(n, 9, 20)], axis=1)


def _hidden_variable_matrix(R):
    """Build B(z) with B(z) [x, y, 1]^T = 0 from the reduced system rows."""
    def parts(r):
        row = R[:, r]
        px = row[:, [12, 11, 10]]
        py = row[:, [15, 14, 13]]
        p1 = row[:, [19, 18, 17, 16]]
        return px, py, p1

    rows = []
    for e, f in ((4, 5), (6, 7), (8, 9)):
        ex, ey, e1 = parts(e)
        fx, fy, f1 = parts(f)
        rows.append((_polysub(ex, _shift(fx)), _polysub(ey, _shift(fy)), _polysub(e1, _shift(f1))))
    return rows


def _det3(B):
    (a, b, c), (d, e, f), (g, h, i) = B
    return (
        _polymul(a, _polysub(_polymul(e, i), _polymul(f, h)))
        - _polymul(b, _polysub(_polymul(d, i), _polymul(f, g)))
        + _polymul(c, _polysub(_polymul(d, h), _polymul(e, g)))
    )


def _evalpoly(p, z):
    """Horner evaluation; ``p`` (..., k) low-to-high, ``z`` broadcastable."""
    out = np.zeros(np.broadcast_shapes(p.shape[:-1], np.shape(z)))
    for k in range(p.shape[-1] - 1, -1, -1):
        out = out * z + p[..., k]
    return out


def companion_matrix(coeffs) -> np.ndarray:
    """Companion matrix of a monic-normalised polynomial (low-to-high coefficients)."""
    c = np.asarray(coeffs, dtype=np.float64)
    n = c.shape[-1] - 1
    C = np.zeros(c.shape[:-1] + (n, n))
    C[..., 1:, :-1] = np.eye(n - 1)
    C[..., :, -1] = -c[..., :-1] / c[..., -1:]
    return C


def real_roots(coeffs, tol: float = REAL_ROOT_TOL) -> np.ndarray:
    """Real roots of one polynomial via its companion matrix, Newton-polished."""
    c = np.trim_zeros(np.asarray(coeffs, dtype=np.float64), "b")
    scale = np.abs(c).max() if c.size else 0.0
    while c.size > 1 and abs(c[-1]) <= 1e-300 * scale:
        c = c[:-1]
    if c.size < 2:
        return np.zeros(0)
    lam = np.linalg.eigvals(companion_matrix(c))
    keep = np.abs(lam.imag) < tol * (1.0 + np.abs(lam.real))
    z = lam.real[keep]
    d = c[1:] * np.arange(1, c.size)
    for _ in range(2):
        fz = _evalpoly(c, z)
        dz = _evalpoly(d, z)
        safe = dz != 0
        z_new = np.where(safe, z - fz / np.where(safe, dz, 1.0), z)
        z = np.where(np.abs(_evalpoly(c, z_new)) <= np.abs(fz), z_new, z)
    return z


def _null_vectors(Bz):
    """Null vector of each 3x3 matrix in a stack, via row cross products."""
    cands = np.stack(
        [np.cross(Bz[:, 0], Bz[:, 1]), np.cross(Bz[:, 0], Bz[:, 2]), np.cross(Bz[:, 1], Bz[:, 2])], axis=1
    )
    pick = np.argmax(np.linalg.norm(cands, axis=2), axis=1)
    return cands[np.arange(len(Bz)), pick]


def _constraint_residuals(E):
    """The ten cubic constraints and their Jacobian factors for a stack of E."""
    EEt = E @ np.swapaxes(E, 1, 2)
    tr = np.trace(EEt, axis1=1, axis2=2)
    M = 2.0 * EEt @ E - tr[:, None, None] * E
    return np.concatenate([np.linalg.det(E)[:, None], M.reshape(len(E), 9)], axis=1), EEt, tr


def refine(coeffs, basis, iters: int = 2):
    """Gauss-Newton on the unit 4-vector of null-space coefficients.

    ``coeffs`` (m, 4) and ``basis`` (m, 4, 3, 3).  The update is kept
    orthogonal to the current vector, which fixes the projective scale.
    """
    v = coeffs / np.linalg.norm(coeffs, axis=1, keepdims=True)
    for _ in range(iters):
        E = np.einsum("mk,mkij->mij", v, basis)
        f, EEt, tr = _constraint_residuals(E)
        Et = np.swapaxes(E, 1, 2)
        # adjugate transpose for d det = <cof(E), dE>
        cof = np.stack(
            [np.cross(E[:, 1], E[:, 2]), np.cross(E[:, 2], E[:, 0]), np.cross(E[:, 0], E[:, 1])], axis=1
        )
        J = np.empty((len(v), 10, 4))
        for k in range(4):
            dE = basis[:, k]
            dEt = np.swapaxes(dE, 1, 2)
            J[:, 0, k] = np.einsum("mij,mij->m", cof, dE)
            dtr = 2.0 * np.einsum("mij,mij->m", dE, E)
            dM = 2.0 * (dE @ Et @ E + E @ dEt @ E + EEt @ dE) - dtr[:, None, None] * E - tr[:, None, None] * dE
            J[:, 1:, k] = dM.reshape(len(v), 9)
        A = np.einsum("mri,mrj->mij", J, J) + np.einsum("mi,mj->mij", v, v)
        # tiny damping keeps degenerate samples solvable; it is far below
        # the scale of any well-posed normal matrix
        A += (1e-13 * np.trace(A, axis1=1, axis2=2))[:, None, None] * np.eye(4)
        rhs = -np.einsum("mri,mr->mi", J, f)
        with np.errstate(all="ignore"):
            step = np.linalg.solve(A, rhs[..., None])[..., 0]
        v_new = v + step
        v_new /= np.linalg.norm(v_new, axis=1, keepdims=True)
        f_new = _constraint_residuals(np.einsum("mk,mkij->mij", v_new, basis))[0]
        better = np.isfinite(v_new).all(axis=1) & (np.linalg.norm(f_new, axis=1) <= np.linalg.norm(f, axis=1))
        v = np.where(better[:, None], v_new, v)
    return v


def _batched_real_roots(poly, tol):
    """Real roots of many degree-10 polynomials; returns (roots, owner)."""
    scale = np.abs(poly).max(axis=1)
    full = np.abs(poly[:, -1]) > 1e-300 * scale
    roots, owner = [], []
    idx = np.flatnonzero(full)
    if idx.size:
        lam = np.linalg.eigvals(companion_matrix(poly[idx]))
        keep = np.abs(lam.imag) < tol * (1.0 + np.abs(lam.real))
        rows, cols = np.nonzero(keep)
        roots.append(lam.real[rows, cols])
        owner.append(idx[rows])
    for k in np.flatnonzero(~full & (scale > 0)):
        z = real_roots(poly[k], tol)
        roots.append(z)
        owner.append(np.full(z.size, k))
    if not roots:
        return np.zeros(0), np.zeros(0, dtype=int)
    roots = np.concatenate(roots)
    owner = np.concatenate(owner)
    order = np.lexsort((roots, owner))
    roots, owner = roots[order], owner[order]
    # Newton polish on the owning polynomial
    c = poly[owner]
    d = c[:, 1:] * np.arange(1, c.shape[1])
    for _ in range(2):
        fz = _evalpoly(c, roots)
        dz = _evalpoly(d, roots)
        safe = dz != 0
        z_new = np.where(safe, roots - fz / np.where(safe, dz, 1.0), roots)
        better = np.abs(_evalpoly(c, z_new)) <= np.abs(fz)
        roots = np.where(better, z_new, roots)
    return roots, owner


def solve_batch(x1, x2, rank_tol: float = 1e-10, tol: float = REAL_ROOT_TOL):
    """Solve a stack of minimal problems.

    ``x1``, ``x2`` are (n, 5, 2) calibrated points.  Returns
    ``(Es, owner, degenerate)``: projected essential matrices (m, 3, 3), the
    index of the sample each came from, and a per-sample degeneracy mask.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n = len(x1)
    A = constraint_rows(x1, x2)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    degenerate = ~(s[:, 4] > rank_tol * s[:, 0])
    basis = Vt[:, 5:].reshape(n, 4, 3, 3)

    C = _cubic_system(basis)
    lead = C[:, :, :10]
    ok = ~degenerate
    Rr = np.zeros((n, 10, 20))
    Rr[:, :, :10] = np.eye(10)
    if ok.any():
        try:
            Rr[ok, :, 10:] = np.linalg.solve(lead[ok], C[ok, :, 10:])
        except np.linalg.LinAlgError:
            for k in np.flatnonzero(ok):
                try:
                    Rr[k, :, 10:] = np.linalg.solve(lead[k], C[k, :, 10:])
                except np.linalg.LinAlgError:
                    ok[k] = False
        ok &= np.isfinite(Rr).all(axis=(1, 2))
    B = _hidden_variable_matrix(Rr)
    poly = _det3(B)
    poly[~ok] = 0.0

    zs, owner = _batched_real_roots(poly, tol)
    if zs.size == 0:
        return np.zeros((0, 3, 3)), np.zeros(0, dtype=int), ~ok
    Bz = np.stack([np.stack([_evalpoly(p[owner], zs) for p in row], axis=-1) for row in B], axis=-2)
    v = _null_vectors(Bz)
    good = np.abs(v[:, 2]) > 0
    zs, owner, v = zs[good], owner[good], v[good]
    coeff = np.stack([v[:, 0] / v[:, 2], v[:, 1] / v[:, 2], zs, np.ones(len(zs))], axis=1)
    coeff = refine(coeff, basis[owner])
    Es = project_essential_batch(np.einsum("mk,mkij->mij", coeff, basis[owner]))
    return Es, owner, ~ok


def five_point_solve(x1, x2) -> list[np.ndarray]:
    """All essential matrices consistent with five calibrated correspondences."""
    x1 = np.asarray(x1, dtype=np.float64).reshape(5, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(5, 2)
    Es, _, degenerate = solve_batch(x1[None], x2[None])
    if degenerate[0]:
        raise DegenerateConfiguration("5x9 constraint matrix has rank < 5")
    if len(Es) == 0:
        raise NoRealSolution("degree-10 polynomial has no real roots")
    return list(Es)
