"""Exact ground truth for small problems.

``exact_positive_lasso`` enumerates candidate supports, solves the
stationarity equations on each and returns the first point that satisfies the
full KKT conditions.  The positive lasso is convex, so any KKT point is a
global minimizer.
"""

from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
import scipy.linalg

from .core import SparseCode, as_matrix, as_vector, mutual_coherence, normalize_columns
from .errors import CertificationUnreachable, NoKKTPoint, TooManyAtoms
from .io import read_keyvalue, read_matrix, read_vector, write_keyvalue, write_matrix

__all__ = [
    "ProblemSpec",
    "PlantedInstance",
    "generate_planted",
    "exact_positive_lasso",
    "kkt_check",
    "kkt_residual",
    "recovery_window",
    "adversarial_auxiliary",
    "save_instance",
    "load_instance",
]

MAX_ATOMS = 20
RIDGE = 1e-12
_KKT_TOL = 1e-10


@dataclass(frozen=True)
class ProblemSpec:
    signal_dim: int
    atom_count: int
    support_size: int
    noise_level: float = 0.0
    coef_range: tuple = (1.0, 2.0)
    seed: int = 0
    certified: bool = False
    max_retries: int = 10000
    coherence_target: float = 0.5

    def __post_init__(self):
        if not 1 <= self.support_size <= min(self.signal_dim, self.atom_count):
            raise ValueError("need 1 <= support_size <= min(signal_dim, atom_count)")
        if self.noise_level < 0:
            raise ValueError("noise_level must be nonnegative")
        lo, hi = self.coef_range
        if not 0 < lo <= hi:
            raise ValueError("coef_range must satisfy 0 < low <= high")
        if not 0 < self.coherence_target <= 0.5:
            raise ValueError("coherence_target must lie in (0, 1/2]")


@dataclass(frozen=True, eq=False)
class PlantedInstance:
    """A signal ``beta = D alpha0 + w`` with ``||w|| <= residual_bound``."""

    dictionary: np.ndarray
    auxiliary: np.ndarray
    planted_code: SparseCode
    signal: np.ndarray
    residual_bound: float
    spec: ProblemSpec | None = None

    def __post_init__(self):
        r = np.linalg.norm(self.residual)
        if r > self.residual_bound + 1e-12:
            raise ValueError(f"residual {r} exceeds bound {self.residual_bound}")
        if self.planted_code.support.size < 1:
            raise ValueError("planted code must have a nonempty support")

    @property
    def residual(self):
        return self.signal - self.dictionary @ self.planted_code.values

    @property
    def s(self):
        return int(self.planted_code.support.size)

    def with_auxiliary(self, W):
        return PlantedInstance(
            self.dictionary, np.asarray(W, dtype=np.float64), self.planted_code,
            self.signal, self.residual_bound, self.spec,
        )


def generate_planted(spec):
    """Draw a random planted instance from ``spec``.

    The dictionary is a column-normalized Gaussian matrix, redrawn while
    ``s * mu(D) >= spec.coherence_target`` (default 1/2) when
    ``spec.certified`` is set.  The noise has
    norm exactly ``noise_level``.  The auxiliary matrix defaults to ``D``.
    """
    rng = np.random.default_rng(spec.seed)
    P, M, s = spec.signal_dim, spec.atom_count, spec.support_size
    for _ in range(max(1, spec.max_retries)):
        D = normalize_columns(rng.standard_normal((P, M)))
        if not spec.certified or M < 2 or s * mutual_coherence(D) < spec.coherence_target:
            break
    else:
        raise CertificationUnreachable(
            f"no dictionary with s*mu < {spec.coherence_target} after {spec.max_retries} draws (P={P}, M={M}, s={s})"
        )
    support = np.sort(rng.choice(M, size=s, replace=False))
    alpha0 = np.zeros(M)
    alpha0[support] = rng.uniform(*spec.coef_range, size=s)
    beta = D @ alpha0
    if spec.noise_level > 0:
        noise = rng.standard_normal(P)
        beta = beta + spec.noise_level * noise / np.linalg.norm(noise)
        # the norm of the realized residual can round a hair above sigma
        bound = max(spec.noise_level, float(np.linalg.norm(beta - D @ alpha0)))
    else:
        bound = 0.0
    return PlantedInstance(D, D.copy(), SparseCode(alpha0), beta, bound, spec)


def adversarial_auxiliary(D, s, target, rng):
    """Auxiliary matrix with ``W^t D = I + E`` for a random off-diagonal ``E``.

    ``E`` is scaled so that ``s * max|E| = target``; the diagonal
    normalization ``W_m^t D_m = 1`` holds by construction.  Needs ``P >= M``.
    """
    D = as_matrix(D, "dictionary")
    P, M = D.shape
    if P < M:
        raise ValueError("adversarial construction needs P >= M")
    E = rng.uniform(-1.0, 1.0, size=(M, M))
    np.fill_diagonal(E, 0.0)
    # a hair above the target so rounding cannot land below it
    E *= target * (1 + 1e-9) / (s * np.abs(E).max())
    return D @ np.linalg.solve(D.T @ D, (np.eye(M) + E).T)


def kkt_residual(D, beta, alpha, lambda_star):
    """Signed KKT slack ``g = D^t(D a - beta) + lambda``; optimal iff g=0 on S, g>=0 off S."""
    D = as_matrix(D, "dictionary")
    a = as_vector(alpha, D.shape[1], "alpha")
    return D.T @ (D @ a - as_vector(beta, D.shape[0], "beta")) + lambda_star


def kkt_check(D, beta, alpha, lambda_star, tol=1e-9):
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = as_vector(alpha, name="alpha")
    g = kkt_residual(D, beta, a, lambda_star)
    active = a > 0
    return bool(np.all(np.abs(g[active]) <= tol) and np.all(g[~active] >= -tol))


def _solve_on_support(G_S, c_S):
    try:
        lu = scipy.linalg.cho_factor(G_S, check_finite=False)
        x = scipy.linalg.cho_solve(lu, c_S, check_finite=False)
        if np.all(np.isfinite(x)) and np.linalg.cond(G_S) < 1e12:
            return x
    except np.linalg.LinAlgError:
        pass
    ridged = G_S + RIDGE * np.eye(G_S.shape[0])
    return scipy.linalg.solve(ridged, c_S, assume_a="sym", check_finite=False)


def exact_positive_lasso(D, beta, lambda_star, max_support=None):
    """Global minimizer of ``0.5*||D a - beta||^2 + lambda*sum(a)`` over ``a >= 0``.

    Supports are visited by increasing size, then lexicographically; the
    first KKT point found is returned, which also fixes the tie-break.

    Raises
    ------
    TooManyAtoms
        If ``M > 20``.
    NoKKTPoint
        If no support of size ``<= max_support`` yields a KKT point.
    """
    D = as_matrix(D, "dictionary")
    beta = as_vector(beta, D.shape[0], "beta")
    M = D.shape[1]
    if M > MAX_ATOMS:
        raise TooManyAtoms(f"enumeration is limited to {MAX_ATOMS} atoms, got {M}")
    if lambda_star < 0:
        raise ValueError("lambda_star must be nonnegative")
    max_support = M if max_support is None else int(max_support)
    if not 0 <= max_support <= M:
        raise ValueError("max_support must lie in [0, M]")

    G = D.T @ D
    c = D.T @ beta
    for k in range(max_support + 1):
        for S in combinations(range(M), k):
            S = list(S)
            a = np.zeros(M)
            if k:
                a_S = _solve_on_support(G[np.ix_(S, S)], c[S] - lambda_star)
                if np.any(a_S <= 0):
                    continue
                a[S] = a_S
            g = G @ a - c + lambda_star
            off = np.ones(M, dtype=bool)
            off[S] = False
            if np.all(np.abs(g[S]) <= _KKT_TOL) and np.all(g[off] >= -_KKT_TOL):
                return SparseCode(a)
    raise NoKKTPoint(f"no KKT point with support size <= {max_support}")


def recovery_window(D, beta, planted_support, lambdas=None, max_support=None, n_bisect=40):
    """Interval of thresholds whose lasso solution has exactly ``planted_support``.

    A coarse log-spaced scan locates one recovering threshold; both edges of
    the window around it are then refined by bisection.  Returns
    ``(low, high)`` or ``None`` when the scan finds no recovering value.
    """
    D = as_matrix(D, "dictionary")
    target = tuple(sorted(int(m) for m in planted_support))
    top = float(np.max(np.abs(D.T @ beta)))
    if top <= 0:
        return None
    if lambdas is None:
        lambdas = top * np.logspace(-6, 0, 61)
    if max_support is None:
        max_support = min(D.shape[1], len(target) + 3)

    def recovers(lam):
        try:
            code = exact_positive_lasso(D, beta, lam, max_support)
        except NoKKTPoint:
            return False
        return tuple(code.support.tolist()) == target

    good = [lam for lam in lambdas if recovers(lam)]
    if not good:
        return None
    seed = good[len(good) // 2]

    lo_bad, lo_good = 0.0, seed
    for _ in range(n_bisect):
        mid = 0.5 * (lo_bad + lo_good)
        if recovers(mid):
            lo_good = mid
        else:
            lo_bad = mid
    hi_good, hi_bad = seed, top
    for _ in range(n_bisect):
        mid = 0.5 * (hi_good + hi_bad)
        if recovers(mid):
            hi_good = mid
        else:
            hi_bad = mid
    return lo_good, hi_good


def save_instance(directory, instance, lambda_star=None):
    """Write ``D.bin``, ``W.bin``, ``alpha0.bin``, ``beta.bin`` and ``instance.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(d / "D.bin", instance.dictionary)
    write_matrix(d / "W.bin", instance.auxiliary)
    write_matrix(d / "alpha0.bin", instance.planted_code.values)
    write_matrix(d / "beta.bin", instance.signal)
    sp = instance.spec
    items = []
    if sp is not None:
        items += [
            ("signal_dim", sp.signal_dim),
            ("atom_count", sp.atom_count),
            ("support_size", sp.support_size),
            ("noise_level", float(sp.noise_level)),
            ("coef_low", float(sp.coef_range[0])),
            ("coef_high", float(sp.coef_range[1])),
            ("seed", sp.seed),
            ("certified", int(sp.certified)),
            ("coherence_target", float(sp.coherence_target)),
            ("max_retries", sp.max_retries),
        ]
    items.append(("residual_bound", float(instance.residual_bound)))
    if lambda_star is not None:
        items.append(("lambda_star", float(lambda_star)))
    write_keyvalue(d / "instance.txt", items)


def load_instance(directory):
    d = Path(directory)
    meta = read_keyvalue(d / "instance.txt")
    spec = None
    if "seed" in meta:
        spec = ProblemSpec(
            int(meta["signal_dim"]), int(meta["atom_count"]), int(meta["support_size"]),
            float(meta["noise_level"]), (float(meta["coef_low"]), float(meta["coef_high"])),
            int(meta["seed"]), bool(int(meta["certified"])),
            int(meta.get("max_retries", 10000)), float(meta.get("coherence_target", 0.5)),
        )
    inst = PlantedInstance(
        read_matrix(d / "D.bin"), read_matrix(d / "W.bin"), SparseCode(read_vector(d / "alpha0.bin")),
        read_vector(d / "beta.bin"), float(meta["residual_bound"]), spec,
    )
    lam = float(meta["lambda_star"]) if "lambda_star" in meta else None
    return inst, lam
