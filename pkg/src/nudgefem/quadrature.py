"""Quadrature rules on the reference triangle.

The reference triangle has vertices (0,0), (1,0), (0,1) and area 1/2.
Points are stored in barycentric coordinates (lam0, lam1, lam2) with
lam0 = 1 - x - y, lam1 = x, lam2 = y; weights include the reference
area, i.e. they sum to 1/2 and ``sum(w * f(points))`` approximates the
integral of ``f`` over the reference triangle.
"""

from dataclasses import dataclass
from math import sqrt

import numpy as np
from scipy.special import roots_jacobi


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    points: np.ndarray  # (nq, 3) barycentric coordinates
    weights: np.ndarray  # (nq,) reference-area weights, sum = 1/2
    exactness_degree: int

    @property
    def xy(self) -> np.ndarray:
        """Reference-coordinate view of the points, shape (nq, 2)."""
        return self.points[:, 1:]

    def __len__(self) -> int:
        return len(self.weights)


def _symmetric_orbit3(a: float) -> np.ndarray:
    # permutations of (1-2a, a, a)
    b = 1.0 - 2.0 * a
    return np.array([[b, a, a], [a, b, a], [a, a, b]])


def _symmetric_orbit6(a: float, b: float) -> np.ndarray:
    c = 1.0 - a - b
    return np.array(
        [[c, a, b], [c, b, a], [a, c, b], [b, c, a], [a, b, c], [b, a, c]]
    )


def _rule_degree4() -> QuadratureRule:
    # Classic 6-point symmetric rule; orbit parameters and weights have a
    # closed form, so they are computed here instead of typed in.
    s10 = sqrt(10.0)
    r = sqrt(38.0 - 44.0 * sqrt(0.4))
    a1 = (8.0 - s10 + r) / 18.0
    a2 = (8.0 - s10 - r) / 18.0
    t = sqrt(213125.0 - 53320.0 * s10)
    w1 = (620.0 + t) / 3720.0
    w2 = (620.0 - t) / 3720.0
    points = np.vstack([_symmetric_orbit3(a1), _symmetric_orbit3(a2)])
    weights = 0.5 * np.concatenate([np.full(3, w1), np.full(3, w2)])
    return QuadratureRule(points, weights, 4)


def _rule_degree6() -> QuadratureRule:
    # 12-point symmetric rule, exact for total degree 6.
    points = np.vstack(
        [
            _symmetric_orbit3(0.063089014491502),
            _symmetric_orbit3(0.249286745170910),
            _symmetric_orbit6(0.053145049844816, 0.310352451033785),
        ]
    )
    weights = 0.5 * np.concatenate(
        [
            np.full(3, 0.050844906370207),
            np.full(3, 0.116786275726379),
            np.full(6, 0.082851075618374),
        ]
    )
    return QuadratureRule(points, weights, 6)


def _conical_rule(k: int) -> QuadratureRule:
    """Conical-product rule with k*k points, exact for degree 2k-1.

    Tensorizes Gauss-Legendre with Gauss-Jacobi (weight 1-x) through the
    Duffy map (x, y) = (xi, eta*(1-xi)); exactness is inherited from the
    1D rules, so no hand-typed tables are involved.
    """
    t, wt = np.polynomial.legendre.leggauss(k)
    eta = 0.5 * (t + 1.0)
    weta = 0.5 * wt
    s, ws = roots_jacobi(k, 1.0, 0.0)
    xi = 0.5 * (s + 1.0)
    wxi = 0.25 * ws

    XI, ETA = np.meshgrid(xi, eta, indexing="ij")
    x = XI.ravel()
    y = (ETA * (1.0 - XI)).ravel()
    weights = np.outer(wxi, weta).ravel()
    points = np.column_stack([1.0 - x - y, x, y])
    return QuadratureRule(points, weights, 2 * k - 1)


_RULES = {
    4: _rule_degree4(),
    6: _rule_degree6(),
    8: _conical_rule(5),
}


def triangle_rule(degree: int) -> QuadratureRule:
    """Return a rule exact for polynomials of total degree ``degree``.

    Degrees 4, 6 and 8 are precomputed (the workhorses for P2 mass-type
    products, frozen-convection terms and trigonometric error densities);
    other degrees fall back to a conical-product rule.
    """
    if degree <= 0:
        raise ValueError(f"quadrature degree must be positive, got {degree}")
    if degree in _RULES:
        return _RULES[degree]
    k = degree // 2 + 1
    return _conical_rule(k)
