import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import least_squares

from reinforced_features.errors import DegenerateConfiguration
from reinforced_features.fivepoint import companion_matrix, constraint_rows, five_point_solve, real_roots
from reinforced_features.geometry import Pose, essential_from_pose, homogeneous
from scenes import correspondences, random_pose

seeds = st.integers(0, 2**32 - 1)


def _closest(Es, E):
    return min(min(np.linalg.norm(F - E), np.linalg.norm(F + E)) for F in Es)


def test_repeated_pair_is_degenerate():
    x = np.tile([[0.1, 0.2]], (5, 1))
    with pytest.raises(DegenerateConfiguration):
        five_point_solve(x, x + 0.05)


def test_pure_sideways_translation():
    rng = np.random.default_rng(0)
    pose = Pose(np.eye(3), [1.0, 0.0, 0.0])
    x1, x2 = correspondences(rng, pose, 5)
    ref = np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]]) / np.sqrt(2)
    assert _closest(five_point_solve(x1, x2), ref) < 1e-6


@given(seeds)
@settings(max_examples=60, deadline=None)
def test_solutions_contain_truth_and_satisfy_constraints(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    x1, x2 = correspondences(rng, pose, 5)
    Es = five_point_solve(x1, x2)
    assert 1 <= len(Es) <= 10
    assert _closest(Es, essential_from_pose(pose)) < 1e-6
    for E in Es:
        s = np.linalg.svd(E, compute_uv=False)
        assert s[2] / s[0] < 1e-7 and abs(s[0] - s[1]) / s[0] < 1e-6
        res = np.einsum("ni,ij,nj->n", homogeneous(x2), E, homogeneous(x1))
        assert np.abs(res).max() < 1e-6


def _residuals(v, basis):
    E = np.tensordot(np.append(v, 1.0), basis, axes=1)
    M = 2.0 * E @ E.T @ E - np.trace(E @ E.T) * E
    return np.concatenate([[np.linalg.det(E)], M.ravel()])


def _multistart_solutions(x1, x2, rng, starts=300):
    """Real roots of the cubic constraints found by Newton from many starts."""
    A = constraint_rows(x1, x2)
    basis = np.linalg.svd(A)[2][5:].reshape(4, 3, 3)
    found = []
    for _ in range(starts):
        sol = least_squares(_residuals, rng.normal(scale=3.0, size=3), args=(basis,), xtol=1e-15, ftol=1e-15, gtol=1e-15)
        if np.abs(sol.fun).max() > 1e-10:
            continue
        E = np.tensordot(np.append(sol.x, 1.0), basis, axes=1)
        E /= np.linalg.norm(E)
        if all(min(np.linalg.norm(E - F), np.linalg.norm(E + F)) > 1e-6 for F in found):
            found.append(E)
    return found


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_no_real_solution_is_missed(seed):
    rng = np.random.default_rng(seed)
    x1, x2 = correspondences(rng, random_pose(rng), 5)
    ours = five_point_solve(x1, x2)
    for E in _multistart_solutions(x1, x2, rng):
        assert _closest(ours, E) < 1e-6


def test_companion_matrix_eigenvalues():
    # (z - 1)(z - 2)(z + 3) = z^3 - 7z + 6
    C = companion_matrix([6.0, -7.0, 0.0, 1.0])
    assert np.allclose(np.sort(np.linalg.eigvals(C).real), [-3.0, 1.0, 2.0])


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=10), st.floats(0.5, 3.0))
@settings(max_examples=100, deadline=None)
def test_real_roots_of_built_polynomial(roots, lead):
    roots = np.unique(np.round(roots, 3))
    if len(roots) > 1 and np.diff(roots).min() < 1e-2:
        return
    coeffs = lead * np.polynomial.polynomial.polyfromroots(roots)
    found = np.sort(real_roots(coeffs))
    assert len(found) == len(roots)
    assert np.allclose(found, roots, atol=1e-6)


def test_real_roots_skip_complex_pair():
    # (z^2 + 1)(z - 0.5)
    found = real_roots(np.polynomial.polynomial.polyfromroots([1j, -1j, 0.5]).real)
    assert np.allclose(found, [0.5])
