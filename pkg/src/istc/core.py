"""Dense primitives: dictionaries, coherences, spectral norm and the l1 objective.

Dictionaries, auxiliary matrices and signals are plain float64 ``ndarray``s.
A dictionary has shape ``(P, M)``: ``P`` is the signal dimension and each of
the ``M`` columns is one unit-norm atom.  The auxiliary matrix ``W`` used by
the generalized homotopy solver has the same shape and is normalized so that
``W[:, m] @ D[:, m] == 1`` for every atom.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence, ShapeMismatch, SingleAtom, ZeroColumn, ZeroReference

__all__ = [
    "SparseCode",
    "as_matrix",
    "as_vector",
    "normalize_columns",
    "normalize_auxiliary",
    "mutual_coherence",
    "cross_coherence",
    "spectral_norm_sq",
    "lagrangian",
    "relative_mse",
]

_ZERO_NORM = 1e-300


@dataclass(frozen=True, eq=False)
class SparseCode:
    """Nonnegative code vector with its support ``{m : values[m] > 0}``."""

    values: np.ndarray
    support: np.ndarray = field(init=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeMismatch(f"code must be a vector, got shape {v.shape}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("code entries must be finite and nonnegative")
        v.setflags(write=False)
        supp = np.flatnonzero(v > 0)
        supp.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "support", supp)

    @classmethod
    def zeros(cls, m):
        return cls(np.zeros(m))

    @property
    def size(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"SparseCode(M={self.values.size}, support={self.support.tolist()})"


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeMismatch(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def as_vector(v, size=None, name="vector"):
    if isinstance(v, SparseCode):
        v = v.values
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatch(f"{name} must be 1-D, got shape {v.shape}")
    if size is not None and v.size != size:
        raise ShapeMismatch(f"{name} has length {v.size}, expected {size}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


def normalize_columns(raw):
    """Divide each column by its Euclidean norm.

    Raises
    ------
    ZeroColumn
        If some column has norm below ``1e-300``.
    """
    raw = as_matrix(raw, "dictionary")
    norms = np.linalg.norm(raw, axis=0)
    bad = np.flatnonzero(norms < _ZERO_NORM)
    if bad.size:
        raise ZeroColumn(int(bad[0]))
    return raw / norms


def normalize_auxiliary(W, D):
    """Rescale each ``W[:, m]`` so that ``W[:, m] @ D[:, m] == 1``.

    The sign is fixed to +1 rather than only the modulus: the homotopy
    convergence argument needs ``W_m^t D_m = 1`` exactly.
    """
    W = as_matrix(W, "auxiliary")
    D = as_matrix(D, "dictionary")
    if W.shape != D.shape:
        raise ShapeMismatch(f"auxiliary shape {W.shape} != dictionary shape {D.shape}")
    diag = np.einsum("pm,pm->m", W, D)
    bad = np.flatnonzero(np.abs(diag) < _ZERO_NORM)
    if bad.size:
        raise ZeroColumn(int(bad[0]))
    return W / diag


def _offdiag_absmax(G):
    G = np.abs(G)
    np.fill_diagonal(G, 0.0)
    return float(G.max())


def mutual_coherence(D):
    """Largest ``|D_m^t D_m'|`` over distinct atoms."""
    D = as_matrix(D, "dictionary")
    if D.shape[1] < 2:
        raise SingleAtom("coherence needs at least two atoms")
    return _offdiag_absmax(D.T @ D)


def cross_coherence(W, D):
    """Largest ``|W_m'^t D_m|`` over ``m != m'``."""
    W = as_matrix(W, "auxiliary")
    D = as_matrix(D, "dictionary")
    if W.shape != D.shape:
        raise ShapeMismatch(f"auxiliary shape {W.shape} != dictionary shape {D.shape}")
    if D.shape[1] < 2:
        raise SingleAtom("coherence needs at least two atoms")
    return _offdiag_absmax(W.T @ D)


def spectral_norm_sq(D, tol=1e-10, max_iter=10000):
    """``||D^t D||_2`` by power iteration on the Gram matrix.

    Starts from the all-ones vector.  If an iterate collapses (the start
    vector is orthogonal to every dominant direction) the iteration restarts
    once from a fixed pseudo-random vector.
    """
    D = as_matrix(D, "dictionary")
    G = D.T @ D
    m = G.shape[0]
    v = np.ones(m) / np.sqrt(m)
    restarted = False
    est = 0.0
    for _ in range(max_iter):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw < 1e-14 * max(1.0, est):
            if restarted:
                return 0.0
            restarted = True
            v = np.random.default_rng(0x5EED).standard_normal(m)
            v /= np.linalg.norm(v)
            continue
        new = float(v @ w)
        v = w / nw
        if abs(new - est) <= tol * abs(new):
            # Rayleigh quotient at the normalized iterate is the sharper estimate.
            return float(v @ (G @ v))
        est = new
    raise NoConvergence(f"power iteration did not reach rtol={tol} in {max_iter} steps")


def lagrangian(D, beta, alpha, lam):
    """``0.5 * ||D alpha - beta||^2 + lam * sum(alpha)`` (alpha is nonnegative)."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    D = np.asarray(D, dtype=np.float64)
    a = as_vector(alpha, D.shape[1], "alpha")
    r = D @ a - np.asarray(beta, dtype=np.float64)
    return 0.5 * float(r @ r) + lam * float(a.sum())


def relative_mse(x, y):
    """``||x - y||^2 / ||x||^2``; ``x`` is the reference."""
    x = as_vector(x, name="x")
    y = as_vector(y, x.size, "y")
    ref = float(x @ x)
    if ref == 0.0:
        raise ZeroReference("reference vector is zero")
    d = x - y
    return float(d @ d) / ref
