"""
SPDE Volatility Lab - Hilbert Core
Discretized Hilbert spaces, grid functions, Hilbert-Schmidt operators and the
tensor quadratic forms every estimator is built on.

Representation:
  L2(a,b)   J uniform cells, values at cell midpoints, weight (b-a)/J
  H1(0,1)   coefficients on the kernel frame k(x_j, .), x_j = j/J, k(x,y) = 1 + min(x,y)
  Spectral  coefficients on e_j(x) = sqrt(2) sin(pi j x), j = 1..J

An operator A is stored as the kernel matrix Q of A = sum_ij Q_ij phi_i <phi_j, .>
in the frame {phi_j} of its space, so that <A h, g> = (G g)^T Q (G h).
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import linalg

from services.errors import ArgumentError, DimensionError, DomainError, OutOfRangeError

logger = logging.getLogger("Hilbert")

L2 = "L2"
H1 = "H1"
SPECTRAL = "Spectral"
VARIANTS = (L2, H1, SPECTRAL)

KEEP_LOW = "keep-low"
KEEP_HIGH = "keep-high"


@dataclass(frozen=True)
class SpaceSpec:
    """A discretized separable Hilbert space."""

    variant: str
    J: int
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ArgumentError(f"unknown space variant {self.variant!r}")
        if int(self.J) != self.J or self.J < 1:
            raise ArgumentError(f"J must be a positive integer, got {self.J}")
        if not self.b > self.a:
            raise DomainError(f"empty interval ({self.a}, {self.b})")
        if self.variant != L2 and (self.a, self.b) != (0.0, 1.0):
            raise DomainError(f"{self.variant} lives on (0, 1)")

    @classmethod
    def l2(cls, J: int, a: float = 0.0, b: float = 1.0) -> "SpaceSpec":
        return cls(L2, int(J), float(a), float(b))

    @classmethod
    def h1(cls, J: int) -> "SpaceSpec":
        return cls(H1, int(J))

    @classmethod
    def spectral(cls, J: int) -> "SpaceSpec":
        return cls(SPECTRAL, int(J))

    @property
    def step(self) -> float:
        """Grid step (cell width for L2, node spacing for H1)."""
        return (self.b - self.a) / self.J

    @cached_property
    def points(self) -> np.ndarray:
        """Cell midpoints (L2), nodes (H1) or mode numbers (Spectral)."""
        idx = np.arange(self.J, dtype=float)
        if self.variant == L2:
            pts = self.a + (idx + 0.5) * self.step
        elif self.variant == H1:
            pts = (idx + 1.0) / self.J
        else:
            pts = idx + 1.0
        pts.setflags(write=False)
        return pts

    @cached_property
    def gram(self) -> np.ndarray:
        if self.variant == L2:
            G = self.step * np.eye(self.J)
        elif self.variant == H1:
            G = 1.0 + np.minimum.outer(self.points, self.points)
        else:
            G = np.eye(self.J)
        G.setflags(write=False)
        return G

    @cached_property
    def gram_factor(self) -> np.ndarray:
        """Lower Cholesky factor L with G = L L^T."""
        if self.variant == L2:
            L = np.sqrt(self.step) * np.eye(self.J)
        elif self.variant == H1:
            L = linalg.cholesky(self.gram, lower=True)
        else:
            L = np.eye(self.J)
        L.setflags(write=False)
        return L

    @cached_property
    def gram_cho(self):
        return linalg.cho_factor(self.gram, lower=True)

    @cached_property
    def noise_frame(self) -> np.ndarray:
        """Columns are coefficient vectors of an orthonormal frame (K^{-1/2} for H1)."""
        if self.variant == L2:
            F = np.eye(self.J) / np.sqrt(self.step)
        elif self.variant == H1:
            lam, V = linalg.eigh(self.gram)
            F = (V / np.sqrt(lam)) @ V.T
        else:
            F = np.eye(self.J)
        F.setflags(write=False)
        return F

    def dual(self, coeffs: np.ndarray) -> np.ndarray:
        """G applied along the last axis (coefficients -> inner products with the frame)."""
        if self.variant == L2:
            return self.step * coeffs
        if self.variant == H1:
            return coeffs @ self.gram
        return np.asarray(coeffs, dtype=float)

    def solve_gram(self, values: np.ndarray) -> np.ndarray:
        """G^{-1} applied along the last axis."""
        if self.variant == L2:
            return values / self.step
        if self.variant == H1:
            return linalg.cho_solve(self.gram_cho, np.asarray(values, dtype=float).T).T
        return np.asarray(values, dtype=float)

    def node_index(self, x: float, tol: float = 1e-9) -> int | None:
        """0-based index of the H1 node at x, or None if x is off-grid."""
        k = x * self.J
        if abs(k - round(k)) <= tol * max(1.0, self.J) and 1 <= round(k) <= self.J:
            return int(round(k)) - 1
        return None

    def describe(self) -> dict:
        out = {"variant": self.variant, "J": self.J}
        if self.variant == L2:
            out.update({"a": self.a, "b": self.b})
        return out


@dataclass(frozen=True, eq=False)
class GridFunction:
    """A curve on a discretized space; coefficients are read-only."""

    space: SpaceSpec
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float)
        if coeffs.shape != (self.space.J,):
            raise DimensionError(f"expected {self.space.J} coefficients, got shape {coeffs.shape}")
        if not np.all(np.isfinite(coeffs)):
            raise DomainError("grid function has non-finite entries")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)

    def _check(self, other: "GridFunction") -> None:
        if other.space != self.space:
            raise DimensionError(f"spaces differ: {self.space} vs {other.space}")

    def __add__(self, other: "GridFunction") -> "GridFunction":
        self._check(other)
        return GridFunction(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        self._check(other)
        return GridFunction(self.space, self.coeffs - other.coeffs)

    def __mul__(self, c: float) -> "GridFunction":
        return GridFunction(self.space, float(c) * self.coeffs)

    __rmul__ = __mul__

    def __neg__(self) -> "GridFunction":
        return GridFunction(self.space, -self.coeffs)


@dataclass(frozen=True, eq=False)
class HSOperator:
    """A discretized Hilbert-Schmidt operator stored as its frame kernel."""

    space: SpaceSpec
    kernel: np.ndarray
    symmetric: bool = False

    def __post_init__(self):
        Q = np.array(self.kernel, dtype=float)
        J = self.space.J
        if Q.shape != (J, J):
            raise DimensionError(f"expected a {J}x{J} kernel, got shape {Q.shape}")
        if not np.all(np.isfinite(Q)):
            raise DomainError("operator kernel has non-finite entries")
        if self.symmetric:
            Q = 0.5 * (Q + Q.T)
        Q.setflags(write=False)
        object.__setattr__(self, "kernel", Q)

    def _check(self, other: "HSOperator") -> None:
        if other.space != self.space:
            raise DimensionError(f"spaces differ: {self.space} vs {other.space}")

    def __add__(self, other: "HSOperator") -> "HSOperator":
        self._check(other)
        return HSOperator(self.space, self.kernel + other.kernel, self.symmetric and other.symmetric)

    def __sub__(self, other: "HSOperator") -> "HSOperator":
        self._check(other)
        return HSOperator(self.space, self.kernel - other.kernel, self.symmetric and other.symmetric)

    def __mul__(self, c: float) -> "HSOperator":
        return HSOperator(self.space, float(c) * self.kernel, self.symmetric)

    __rmul__ = __mul__

    def __neg__(self) -> "HSOperator":
        return HSOperator(self.space, -self.kernel, self.symmetric)


@dataclass(frozen=True, eq=False)
class RankOneTestTensor:
    """Test tensor h_1 x ... x h_m, or a weighted sum sum_l mu_l h_l x g_l of 2-tensors.

    With weights (mu_1..mu_L) the factors are read in pairs (h_1, g_1, ..., h_L, g_L).
    """

    factors: tuple
    weights: tuple | None = None

    def __post_init__(self):
        factors = tuple(self.factors)
        if not factors:
            raise ArgumentError("a test tensor needs at least one factor")
        space = factors[0].space
        for f in factors[1:]:
            if f.space != space:
                raise DimensionError("test tensor factors must share one space")
        object.__setattr__(self, "factors", factors)
        if self.weights is not None:
            weights = tuple(float(w) for w in self.weights)
            if len(factors) != 2 * len(weights):
                raise ArgumentError(
                    f"{len(weights)} weights need {2 * len(weights)} factors, got {len(factors)}"
                )
            object.__setattr__(self, "weights", weights)

    @classmethod
    def of(cls, *factors: GridFunction) -> "RankOneTestTensor":
        return cls(tuple(factors))

    @classmethod
    def square(cls, h: GridFunction) -> "RankOneTestTensor":
        return cls((h, h))

    @classmethod
    def weighted(cls, terms: Iterable[tuple[float, GridFunction, GridFunction]]) -> "RankOneTestTensor":
        terms = list(terms)
        factors = tuple(f for _, h, g in terms for f in (h, g))
        return cls(factors, tuple(mu for mu, _, _ in terms))

    @property
    def space(self) -> SpaceSpec:
        return self.factors[0].space

    @property
    def order(self) -> int:
        return len(self.factors)

    def terms(self) -> list[tuple[float, GridFunction, GridFunction]]:
        """The (mu, h, g) triples of the 2-tensor sum."""
        if self.weights is None:
            if self.order != 2:
                raise ArgumentError(f"expected a 2-tensor, got order {self.order}")
            return [(1.0, self.factors[0], self.factors[1])]
        return [
            (mu, self.factors[2 * i], self.factors[2 * i + 1])
            for i, mu in enumerate(self.weights)
        ]

    def scaled(self, c: float) -> "RankOneTestTensor":
        return RankOneTestTensor.weighted((c * mu, h, g) for mu, h, g in self.terms())


class HilbertCore:
    """Inner products, operator algebra and tensor forms on discretized spaces."""

    # ── Inner products ─────────────────────────────────────────

    def inner(self, f: GridFunction, g: GridFunction) -> float:
        if f.space != g.space:
            raise DimensionError(f"spaces differ: {f.space} vs {g.space}")
        return float(f.space.dual(f.coeffs) @ g.coeffs)

    def norm(self, f: GridFunction) -> float:
        return float(np.sqrt(max(self.inner(f, f), 0.0)))

    def inner_many(self, coeffs: np.ndarray, h: GridFunction) -> np.ndarray:
        """<row_i, h> for every row of a coefficient array."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[-1] != h.space.J:
            raise DimensionError("row length does not match the space")
        return coeffs @ h.space.dual(h.coeffs)

    # ── Operators ──────────────────────────────────────────────

    def orthonormal_matrix(self, A: HSOperator) -> np.ndarray:
        """Matrix of A in the orthonormal coordinates L^T (with G = L L^T)."""
        space = A.space
        if space.variant == L2:
            return space.step * A.kernel
        if space.variant == SPECTRAL:
            return A.kernel
        L = space.gram_factor
        return L.T @ A.kernel @ L

    def hs_norm(self, A: HSOperator) -> float:
        return float(np.linalg.norm(self.orthonormal_matrix(A), "fro"))

    def hs_inner(self, A: HSOperator, B: HSOperator) -> float:
        A._check(B)
        return float(np.sum(self.orthonormal_matrix(A) * self.orthonormal_matrix(B)))

    def min_eigenvalue(self, A: HSOperator) -> float:
        M = self.orthonormal_matrix(A)
        return float(linalg.eigvalsh(0.5 * (M + M.T))[0])

    def orthonormal_frame(self, space: SpaceSpec) -> list[GridFunction]:
        return [GridFunction(space, col) for col in space.noise_frame.T]

    def tensor(self, f: GridFunction, g: GridFunction) -> HSOperator:
        """f (x) g = <f, .> g."""
        f._check(g)
        return HSOperator(f.space, np.outer(g.coeffs, f.coeffs))

    def tensor_square(self, f: GridFunction) -> HSOperator:
        return HSOperator(f.space, np.outer(f.coeffs, f.coeffs), symmetric=True)

    def quad_form(self, A: HSOperator, h: GridFunction, g: GridFunction) -> float:
        """<A h, g>."""
        if h.space != A.space or g.space != A.space:
            raise DimensionError("operator and test functions live on different spaces")
        space = A.space
        return float(space.dual(g.coeffs) @ A.kernel @ space.dual(h.coeffs))

    def apply_operator(self, A: HSOperator, h: GridFunction) -> GridFunction:
        if h.space != A.space:
            raise DimensionError("operator and function live on different spaces")
        return GridFunction(A.space, A.kernel @ A.space.dual(h.coeffs))

    def adjoint(self, A: HSOperator) -> HSOperator:
        return HSOperator(A.space, A.kernel.T, A.symmetric)

    def compose(self, A: HSOperator, B: HSOperator) -> HSOperator:
        """A after B."""
        A._check(B)
        return HSOperator(A.space, A.kernel @ A.space.dual(B.kernel.T).T)

    def zero_operator(self, space: SpaceSpec) -> HSOperator:
        return HSOperator(space, np.zeros((space.J, space.J)), symmetric=True)

    def identity_operator(self, space: SpaceSpec) -> HSOperator:
        return HSOperator(space, space.solve_gram(np.eye(space.J)), symmetric=True)

    def kernel_operator(self, space: SpaceSpec, q: Callable) -> HSOperator:
        """Discretized integral operator (A h)(x) = int q(x, y) h(y) dy.

        q must broadcast over numpy arrays.
        """
        if space.variant == L2:
            x = space.points
            Q = np.asarray(q(x[:, None], x[None, :]), dtype=float) * np.ones((space.J, space.J))
        elif space.variant == H1:
            x = space.points
            q_nodes = np.asarray(q(x[:, None], x[None, :]), dtype=float) * np.ones((space.J, space.J))
            Q = space.solve_gram(q_nodes.T).T / space.J
        else:
            n_quad = max(8 * space.J, 256)
            y = (np.arange(n_quad) + 0.5) / n_quad
            E = np.sqrt(2.0) * np.sin(np.pi * np.outer(y, space.points))
            q_grid = np.asarray(q(y[:, None], y[None, :]), dtype=float) * np.ones((n_quad, n_quad))
            Q = E.T @ q_grid @ E / n_quad**2
        return HSOperator(space, Q)

    # ── Test tensors ───────────────────────────────────────────

    def pair(self, A: HSOperator, B: RankOneTestTensor) -> float:
        """<A, B>_HS for a 2-tensor (or weighted sum of 2-tensors) B."""
        return float(sum(mu * self.quad_form(A, h, g) for mu, h, g in B.terms()))

    def as_operator(self, B: RankOneTestTensor) -> HSOperator:
        out = self.zero_operator(B.space)
        for mu, h, g in B.terms():
            out = out + mu * self.tensor(h, g)
        return out

    # ── Construction helpers ───────────────────────────────────

    def constant(self, space: SpaceSpec, c: float = 1.0) -> GridFunction:
        return self.project_function(space, lambda x: c * np.ones_like(x))

    def project_function(self, space: SpaceSpec, fn: Callable) -> GridFunction:
        """Represent a callable: midpoint values (L2), node interpolant (H1), mode projection (Spectral)."""
        if space.variant == L2:
            return GridFunction(space, fn(space.points))
        if space.variant == H1:
            return GridFunction(space, space.solve_gram(np.asarray(fn(space.points), dtype=float)))
        n_quad = max(8 * space.J, 512)
        y = (np.arange(n_quad) + 0.5) / n_quad
        E = np.sqrt(2.0) * np.sin(np.pi * np.outer(y, space.points))
        return GridFunction(space, E.T @ np.asarray(fn(y), dtype=float) / n_quad)

    def basis_vector(self, space: SpaceSpec, j: int) -> GridFunction:
        """j-th frame element (1-based): e_j for Spectral, k(x_j, .) for H1, cell j for L2."""
        if not 1 <= j <= space.J:
            raise OutOfRangeError(f"basis index {j} outside 1..{space.J}")
        coeffs = np.zeros(space.J)
        coeffs[j - 1] = 1.0
        return GridFunction(space, coeffs)

    def indicator(self, space: SpaceSpec, lo: float, hi: float) -> GridFunction:
        """1_[lo, hi]; L2 cells cut by an endpoint get the overlap fraction."""
        if not hi > lo:
            raise DomainError(f"empty interval [{lo}, {hi}]")
        if space.variant == L2:
            left = space.a + np.arange(space.J) * space.step
            overlap = np.clip(np.minimum(left + space.step, hi) - np.maximum(left, lo), 0.0, None)
            return GridFunction(space, overlap / space.step)
        if space.variant == SPECTRAL:
            k = space.points
            coeffs = np.sqrt(2.0) * (np.cos(np.pi * k * lo) - np.cos(np.pi * k * hi)) / (np.pi * k)
            return GridFunction(space, coeffs)
        raise ArgumentError("indicators are not elements of H1")

    def evaluation_functional(self, space: SpaceSpec, x: float) -> GridFunction:
        """Riesz representer of h -> h(x) on H1; exact at nodes, kernel projection elsewhere.

        x = 0 is never a node: k(0, .) = 1 lies outside the kernel frame, so the
        projection is returned. It still reproduces f(0) for every f on the grid.
        """
        if space.variant != H1:
            raise ArgumentError("point evaluation is only continuous on H1")
        if not 0.0 <= x <= 1.0:
            raise DomainError(f"evaluation point {x} outside [0, 1]")
        idx = space.node_index(x)
        if idx is not None:
            return self.basis_vector(space, idx + 1)
        logger.debug(f"x={x} is not a node of H1(J={space.J}), projecting k(x, .) onto the kernel frame")
        k_x = 1.0 + np.minimum(space.points, x)
        return GridFunction(space, space.solve_gram(k_x))

    def evaluate(self, f: GridFunction, x) -> np.ndarray:
        """Point values of the represented curve."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        space = f.space
        if space.variant == L2:
            idx = np.clip(((x - space.a) / space.step).astype(int), 0, space.J - 1)
            return f.coeffs[idx]
        if space.variant == H1:
            return (1.0 + np.minimum.outer(x, space.points)) @ f.coeffs
        return np.sqrt(2.0) * np.sin(np.pi * np.outer(x, space.points)) @ f.coeffs

    def truncate_basis(self, f: GridFunction, N: int, mode: str = KEEP_LOW) -> GridFunction:
        """Keep modes j <= N (keep-low) or j >= N (keep-high)."""
        space = f.space
        if space.variant != SPECTRAL:
            raise ArgumentError("basis truncation needs a Spectral space")
        if not 1 <= N <= space.J:
            raise OutOfRangeError(f"N={N} outside 1..{space.J}")
        modes = space.points
        if mode == KEEP_LOW:
            mask = modes <= N
        elif mode == KEEP_HIGH:
            mask = modes >= N
        else:
            raise ArgumentError(f"unknown truncation mode {mode!r}")
        return GridFunction(space, np.where(mask, f.coeffs, 0.0))

    def stack(self, functions: Sequence[GridFunction]) -> np.ndarray:
        """Coefficient rows of functions sharing one space."""
        if not functions:
            raise ArgumentError("nothing to stack")
        space = functions[0].space
        for f in functions:
            if f.space != space:
                raise DimensionError("functions live on different spaces")
        return np.vstack([f.coeffs for f in functions])


hilbert_core = HilbertCore()
