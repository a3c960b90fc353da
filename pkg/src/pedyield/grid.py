"""Piecewise-linear functions on regular grids.

Both functions are linear in their weights, which is what lets the
training subproblems reduce to box-constrained least squares and logistic
regression. ``basis*`` returns the interpolation coefficients, ``design*``
the dense rows used by the solvers.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def _bracket(x, lo, hi, n):
    """Clip ``x`` to ``[lo, hi]`` and return (left node index, fraction)."""
    step = (hi - lo) / (n - 1)
    s = (np.clip(x, lo, hi) - lo) / step
    idx = np.minimum(np.floor(s).astype(int), n - 2)
    return idx, s - idx


class GridFunction1D:
    """Even function of lateral distance, piecewise linear on ``[0, u_max]``.

    Queries beyond ``u_max`` are clamped to the last node.
    """

    def __init__(self, weights, u_max: float = 6.0):
        self.weights = np.array(weights, dtype=float).reshape(-1)
        self.u_max = float(u_max)
        if self.weights.size < 2:
            raise ContractError("GridFunction1D needs at least 2 grid points")
        if not self.u_max > 0:
            raise ContractError("u_max must be positive")
        if np.any(np.abs(self.weights) > 1.0):
            raise ContractError("influence weights must lie in [-1, 1]")
        self._nodes = np.linspace(0.0, self.u_max, self.weights.size)

    @classmethod
    def zeros(cls, n: int = 7, u_max: float = 6.0):
        return cls(np.zeros(n), u_max)

    @property
    def n(self) -> int:
        return self.weights.size

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.u_max, self.n)

    def basis(self, lat):
        """Return ``(indices, coefficients)``, each with a trailing axis of 2."""
        idx, frac = _bracket(np.abs(np.asarray(lat, dtype=float)), 0.0, self.u_max, self.n)
        return np.stack([idx, idx + 1], axis=-1), np.stack([1.0 - frac, frac], axis=-1)

    def design(self, lat) -> np.ndarray:
        lat = np.atleast_1d(np.asarray(lat, dtype=float))
        idx, coef = self.basis(lat)
        rows = np.zeros((lat.size, self.n))
        r = np.arange(lat.size)
        np.add.at(rows, (r, idx[:, 0]), coef[:, 0])
        np.add.at(rows, (r, idx[:, 1]), coef[:, 1])
        return rows

    def __call__(self, lat):
        # np.interp clamps at both ends, matching the basis definition
        out = np.interp(np.abs(lat), self._nodes, self.weights)
        return float(out) if np.ndim(out) == 0 else out

    def with_weights(self, weights):
        return GridFunction1D(weights, self.u_max)

    def __eq__(self, other):
        return (isinstance(other, GridFunction1D) and self.u_max == other.u_max
                and np.array_equal(self.weights, other.weights))

    def __repr__(self):
        return f"GridFunction1D(weights={self.weights.tolist()}, u_max={self.u_max})"


class GridFunction2D:
    """Bilinear surface on ``[lo, hi]^2`` plus a scalar bias.

    ``weights`` is indexed ``[i, j]`` with ``i`` along the first argument;
    the flat parameter order is row-major followed by the bias.
    Inputs outside the square are clipped to its boundary.
    """

    def __init__(self, weights, bias: float = 0.0, lo: float = 0.0, hi: float = 1.6,
                 n_b: int | None = None):
        w = np.array(weights, dtype=float)
        if n_b is None:
            n_b = w.shape[0] if w.ndim == 2 else int(round(np.sqrt(w.size)))
        self.n_b = int(n_b)
        if self.n_b < 2:
            raise ContractError("GridFunction2D needs at least 2 points per axis")
        if w.size != self.n_b ** 2:
            raise ContractError(f"expected {self.n_b ** 2} grid weights, got {w.size}")
        if not lo < hi:
            raise ContractError("grid requires lo < hi")
        self.weights = w.reshape(self.n_b, self.n_b)
        self.bias = float(bias)
        self.lo = float(lo)
        self.hi = float(hi)

    @classmethod
    def zeros(cls, n_b: int = 5, lo: float = 0.0, hi: float = 1.6):
        return cls(np.zeros((n_b, n_b)), 0.0, lo, hi, n_b)

    @property
    def n_params(self) -> int:
        return self.n_b ** 2 + 1

    @property
    def params(self) -> np.ndarray:
        """Flat parameter vector: grid weights then bias."""
        return np.append(self.weights.reshape(-1), self.bias)

    def with_params(self, params):
        params = np.asarray(params, dtype=float)
        return GridFunction2D(params[:-1], params[-1], self.lo, self.hi, self.n_b)

    def basis(self, a, b):
        """Return ``(flat indices, coefficients)`` with a trailing axis of 4.

        The bias coefficient is always 1 and is not included.
        """
        ia, fa = _bracket(np.asarray(a, dtype=float), self.lo, self.hi, self.n_b)
        ib, fb = _bracket(np.asarray(b, dtype=float), self.lo, self.hi, self.n_b)
        n = self.n_b
        idx = np.stack([ia * n + ib, ia * n + ib + 1, (ia + 1) * n + ib, (ia + 1) * n + ib + 1],
                       axis=-1)
        coef = np.stack([(1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb], axis=-1)
        return idx, coef

    def design(self, a, b) -> np.ndarray:
        """Dense feature rows ``(N, n_b**2 + 1)``; last column is the bias."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        idx, coef = self.basis(a, b)
        rows = np.zeros((a.size, self.n_params))
        r = np.arange(a.size)
        for k in range(4):
            np.add.at(rows, (r, idx[:, k]), coef[:, k])
        rows[:, -1] = 1.0
        return rows

    def __call__(self, a, b):
        ia, fa = _bracket(np.asarray(a, dtype=float), self.lo, self.hi, self.n_b)
        ib, fb = _bracket(np.asarray(b, dtype=float), self.lo, self.hi, self.n_b)
        w = self.weights
        lo_a = w[ia, ib] + fb * (w[ia, ib + 1] - w[ia, ib])
        hi_a = w[ia + 1, ib] + fb * (w[ia + 1, ib + 1] - w[ia + 1, ib])
        out = lo_a + fa * (hi_a - lo_a) + self.bias
        return float(out) if np.ndim(out) == 0 else out

    def __eq__(self, other):
        return (isinstance(other, GridFunction2D) and self.n_b == other.n_b
                and self.lo == other.lo and self.hi == other.hi and self.bias == other.bias
                and np.array_equal(self.weights, other.weights))

    def __repr__(self):
        return (f"GridFunction2D(n_b={self.n_b}, lo={self.lo}, hi={self.hi}, "
                f"bias={self.bias})")
