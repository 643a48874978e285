"""Polynomial term library: monomial basis enumeration and evaluation.

A library over ``n`` state variables and ``m`` input variables holds every
monomial of total degree <= ``order``, in graded-lexicographic order with the
constant term first.  For m = 0 the library size is C(order + n, n).  Feature
vectors and their analytic Jacobians are the building blocks of the sparse
right-hand side ``theta @ features(y, u)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import CapacityError, ContractError

# Exponent-vector enumerations beyond this size are refused outright; they
# would be useless for recovery and can exhaust memory.
MAX_LIBRARY_SIZE = 2_000_000

# Entries this small are treated as structural zeros when a support is
# extracted from a dense coefficient matrix.
STRUCTURAL_ZERO_TOL = 1e-12

# Identifier for the enumeration scheme, stored in checkpoints so an index <->
# monomial mapping can be checked across versions.
INDEX_MAP_VERSION = "grlex-1"


@dataclass(frozen=True)
class Monomial:
    """One basis term: a tuple of nonnegative exponents over (y, u) variables."""

    exponents: tuple[int, ...]

    @property
    def degree(self) -> int:
        return sum(self.exponents)

    def as_string(self, n: int) -> str:
        """Human-readable form, e.g. ``x1^2*u1`` (``1`` for the constant)."""
        parts = []
        for i, e in enumerate(self.exponents):
            if e == 0:
                continue
            name = f"x{i + 1}" if i < n else f"u{i - n + 1}"
            parts.append(name if e == 1 else f"{name}^{e}")
        return "*".join(parts) if parts else "1"


@dataclass(frozen=True)
class TermLibrary:
    """Ordered monomial basis over n state and m input variables."""

    n: int
    m: int
    order: int
    terms: tuple[Monomial, ...]
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(
            self, "_index", {t.exponents: j for j, t in enumerate(self.terms)}
        )

    @property
    def size(self) -> int:
        return len(self.terms)

    @property
    def exponent_matrix(self) -> np.ndarray:
        """(size, n+m) integer matrix of exponents, one row per term."""
        return np.array([t.exponents for t in self.terms], dtype=np.int64)

    def index_of(self, exponents) -> int | None:
        """Library index of an exponent vector, or None if absent."""
        return self._index.get(tuple(int(e) for e in exponents))

    def index_map_text(self) -> str:
        """Export ``index  exponent_vector  monomial`` lines for reports."""
        lines = [f"# index map version {INDEX_MAP_VERSION}  n={self.n} m={self.m} order={self.order}"]
        for j, t in enumerate(self.terms):
            exps = " ".join(str(e) for e in t.exponents)
            lines.append(f"{j}\t{exps}\t{t.as_string(self.n)}")
        return "\n".join(lines) + "\n"


def library_size(n: int, m: int, order: int) -> int:
    """Number of monomials of total degree <= order in n+m variables."""
    v = n + m
    return math.comb(order + v, v)


def build_library(n: int, m: int, order: int) -> TermLibrary:
    """Enumerate all monomials of total degree <= order over n+m variables.

    Ordering is graded lexicographic: ascending total degree, and within a
    degree the earlier variables carry the higher exponents first (so for
    n=2: 1, x1, x2, x1^2, x1*x2, x2^2).  The enumeration is deterministic
    across runs and platforms.
    """
    if n < 1:
        raise ContractError(f"state dimension must be >= 1, got {n}")
    if m < 0:
        raise ContractError(f"input dimension must be >= 0, got {m}")
    if order < 0:
        raise ContractError(f"library order must be >= 0, got {order}")
    size = library_size(n, m, order)
    if size > MAX_LIBRARY_SIZE:
        raise CapacityError(
            f"library of {size} terms (n={n}, m={m}, order={order}) exceeds "
            f"the supported maximum of {MAX_LIBRARY_SIZE}"
        )
    v = n + m
    exps = [e for e in product(range(order + 1), repeat=v) if sum(e) <= order]
    # ascending degree, then lexicographically by negated exponents so that
    # higher powers of earlier variables come first within a degree block
    exps.sort(key=lambda e: (sum(e), tuple(-x for x in e)))
    terms = tuple(Monomial(tuple(e)) for e in exps)
    assert len(terms) == size
    return TermLibrary(n=n, m=m, order=order, terms=terms)


class SparseModel:
    """A coefficient matrix over a term library with an explicit support.

    ``theta`` is (n, library size); entries outside ``support`` are exactly
    zero.  ``degenerate`` marks a support that had to include exact zeros
    (can happen when a top-k selection runs out of nonzero candidates).
    """

    def __init__(self, library: TermLibrary, theta, support=None, degenerate=False):
        theta = np.array(theta, dtype=float)
        if theta.shape != (library.n, library.size):
            raise ContractError(
                f"theta shape {theta.shape} does not match "
                f"(n={library.n}, library size={library.size})"
            )
        if support is None:
            rows, cols = np.nonzero(np.abs(theta) > STRUCTURAL_ZERO_TOL)
            support = frozenset(zip(rows.tolist(), cols.tolist()))
        else:
            support = frozenset((int(r), int(c)) for r, c in support)
            keep = np.zeros_like(theta, dtype=bool)
            for r, c in support:
                if not (0 <= r < theta.shape[0] and 0 <= c < theta.shape[1]):
                    raise ContractError(f"support entry {(r, c)} out of range")
                keep[r, c] = True
            theta[~keep] = 0.0
        theta.setflags(write=False)
        self.library = library
        self.theta = theta
        self.support = support
        self.degenerate = bool(degenerate)

    def __repr__(self):
        return (
            f"SparseModel(n={self.library.n}, size={self.library.size}, "
            f"p={self.p}, degenerate={self.degenerate})"
        )

    @property
    def p(self) -> int:
        return len(self.support)

    def support_exponents(self) -> frozenset:
        """Support keyed by (row, exponent tuple) rather than library index.

        This makes supports comparable across libraries of different order.
        """
        return frozenset(
            (r, self.library.terms[c].exponents) for r, c in self.support
        )


def evaluate(lib: TermLibrary, y, u=None) -> np.ndarray:
    """Feature vector: feature[j] = prod(variables ** exponents[j]).

    0**0 is taken as 1, so the constant term is always 1.
    """
    z = _stack_vars(lib, y, u)
    return evaluate_batch(lib, z[None, :])[0]


def evaluate_batch(lib: TermLibrary, z: np.ndarray) -> np.ndarray:
    """Features for a (B, n+m) batch of variable vectors -> (B, size)."""
    E = lib.exponent_matrix  # (L, v)
    # power table pows[b, v, e] = z[b, v]**e, built by cumulative products so
    # 0**0 == 1 exactly and integer powers stay cheap
    B, v = z.shape
    pows = np.ones((B, v, lib.order + 1))
    for e in range(1, lib.order + 1):
        pows[:, :, e] = pows[:, :, e - 1] * z
    # gather and reduce over variables
    feats = np.ones((B, lib.size))
    for i in range(v):
        feats *= pows[:, i, E[:, i]]
    return feats


def evaluate_jacobian(lib: TermLibrary, y, u=None) -> np.ndarray:
    """(size, n) matrix of d feature_j / d y_i, analytic from exponents.

    The derivative of x**0 is 0 everywhere, including x = 0.
    """
    z = _stack_vars(lib, y, u)
    return _jacobian_batch(lib, z[None, :], range(lib.n))[0]


def evaluate_input_jacobian(lib: TermLibrary, y, u=None) -> np.ndarray:
    """(size, m) matrix of d feature_j / d u_l."""
    z = _stack_vars(lib, y, u)
    return _jacobian_batch(lib, z[None, :], range(lib.n, lib.n + lib.m))[0]


def _jacobian_batch(lib: TermLibrary, z: np.ndarray, variables) -> np.ndarray:
    """d features / d z_i for i in ``variables`` -> (B, size, len(variables))."""
    variables = list(variables)
    E = lib.exponent_matrix
    B, v = z.shape
    pows = np.ones((B, v, lib.order + 1))
    for e in range(1, lib.order + 1):
        pows[:, :, e] = pows[:, :, e - 1] * z
    out = np.zeros((B, lib.size, len(variables)))
    for k, i in enumerate(variables):
        ei = E[:, i]
        active = ei > 0
        if not np.any(active):
            continue
        # e * z_i**(e-1) * prod_{j != i} z_j**e_j
        col = np.ones((B, lib.size))
        for j in range(v):
            if j == i:
                continue
            col *= pows[:, j, E[:, j]]
        down = np.where(active, ei - 1, 0)
        col *= ei[None, :] * pows[:, i, down]
        col[:, ~active] = 0.0
        out[:, :, k] = col
    return out


def rhs(model: SparseModel, y, u=None) -> np.ndarray:
    """Model right-hand side: theta @ features(y, u) -> n-vector."""
    return model.theta @ evaluate(model.library, y, u)


def rhs_batch(thetas: np.ndarray, lib: TermLibrary, z: np.ndarray) -> np.ndarray:
    """Batched right-hand side with a per-item theta.

    thetas: (B, n, size); z: (B, n+m) -> (B, n).
    """
    feats = evaluate_batch(lib, z)
    return np.einsum("bnl,bl->bn", thetas, feats)


def _stack_vars(lib: TermLibrary, y, u) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != lib.n:
        raise ContractError(f"state has {y.shape[0]} entries, library expects {lib.n}")
    if lib.m == 0:
        return y
    if u is None:
        raise ContractError(f"library expects {lib.m} input variables, got none")
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != lib.m:
        raise ContractError(f"input has {u.shape[0]} entries, library expects {lib.m}")
    return np.concatenate([y, u])
