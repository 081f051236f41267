"""Positive proximal operator and the iterative thresholding solvers.

All solvers minimize (or, for the homotopy solvers, approximate the minimizer
of) the positive l1 Lagrangian ``0.5*||D a - beta||^2 + lambda_star*sum(a)``
over ``a >= 0``, starting from ``a_0 = 0``.

* ``solve_ista``  -- proximal gradient with step ``eps < 1/||D^t D||``.
* ``solve_fista`` -- the same step with Nesterov/Beck-Teboulle momentum.
* ``solve_istc``  -- unit-step iterations, one per threshold of a geometric
  schedule decreasing from ``lambda_max`` to ``lambda_star``.
* ``solve_generalized_istc`` -- as ``solve_istc`` with ``W^t`` in place of
  ``D^t`` in the update.

Every solver returns ``(SparseCode, ConvergenceTrace)``.  A trace has one
record per iterate including the initial ``a_0 = 0`` (record 0), so a run of
``n`` iterations yields ``n + 1`` records.  Lagrangian values in a trace are
always evaluated at ``lambda_star``.
"""

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import SparseCode, as_matrix, as_vector, lagrangian, spectral_norm_sq
from .errors import BadRange, BatchError, ShapeMismatch, StepTooLarge
from .io import fmt

__all__ = [
    "ThresholdSchedule",
    "SolverConfig",
    "TraceRecord",
    "ConvergenceTrace",
    "Problem",
    "positive_prox",
    "make_schedule",
    "default_lambda_max",
    "solve_ista",
    "solve_fista",
    "solve_istc",
    "solve_generalized_istc",
    "batch_solve",
    "SOLVERS",
]


def positive_prox(v, lam):
    """``max(v - lam, 0)`` elementwise: the prox of ``lam*sum(a)`` on ``a >= 0``."""
    if lam < 0:
        raise ValueError("threshold must be nonnegative")
    return np.maximum(np.asarray(v, dtype=np.float64) - lam, 0.0)


def geometric_thresholds(lambda_max, lambda_star, n_layers):
    """``lambda_max * (lambda_max/lambda_star)**(-n/N)`` for ``n = 1..N``.

    No validation; :func:`make_schedule` is the checked entry point.
    """
    ratio = lambda_max / lambda_star
    n = np.arange(1, n_layers + 1, dtype=np.float64)
    return lambda_max * ratio ** (-n / n_layers)


@dataclass(frozen=True)
class ThresholdSchedule:
    lambda_max: float
    lambda_star: float
    n_layers: int

    def __post_init__(self):
        if not (self.lambda_star > 0 and self.lambda_max >= self.lambda_star):
            raise BadRange(
                f"need lambda_max >= lambda_star > 0, got {self.lambda_max}, {self.lambda_star}"
            )
        if int(self.n_layers) != self.n_layers or self.n_layers < 1:
            raise BadRange(f"n_layers must be a positive integer, got {self.n_layers}")
        if not self.gamma > 1.0:
            raise BadRange("degenerate schedule: decay ratio gamma must exceed 1")

    @property
    def gamma(self):
        return (self.lambda_max / self.lambda_star) ** (1.0 / self.n_layers)

    @property
    def thresholds(self):
        """Thresholds ``lambda_1 .. lambda_N`` applied by the N layers."""
        return geometric_thresholds(self.lambda_max, self.lambda_star, self.n_layers)


def make_schedule(lambda_max, lambda_star, n_layers):
    return ThresholdSchedule(float(lambda_max), float(lambda_star), int(n_layers))


@dataclass(frozen=True)
class SolverConfig:
    """Settings for ISTA/FISTA.  ``step_size=None`` means ``0.99/||D^t D||``."""

    step_size: float | None = None
    n_iterations: int = 12
    record_trace: bool = True

    def __post_init__(self):
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be nonnegative")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    threshold: float
    lagrangian: float
    support_size: int
    support: tuple
    linf_to_ref: float | None


@dataclass
class ConvergenceTrace:
    records: list = field(default_factory=list)
    codes: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def lagrangians(self):
        return np.array([r.lagrangian for r in self.records])

    @property
    def thresholds(self):
        return np.array([r.threshold for r in self.records])

    def code(self, n):
        return self.codes[n]

    def csv_text(self):
        buf = io.StringIO()
        buf.write("iter,lambda_n,lagrangian,support_size,linf_to_ref\n")
        for r in self.records:
            ref = "" if r.linf_to_ref is None else fmt(r.linf_to_ref)
            buf.write(f"{r.iteration},{fmt(r.threshold)},{fmt(r.lagrangian)},{r.support_size},{ref}\n")
        return buf.getvalue()

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write(self.csv_text())


class _Recorder:
    def __init__(self, D, beta, lambda_star, reference, enabled):
        self.D, self.beta, self.lambda_star = D, beta, lambda_star
        self.reference = None if reference is None else as_vector(reference, D.shape[1], "reference")
        self.enabled = enabled
        self.trace = ConvergenceTrace()

    def __call__(self, n, threshold, a):
        if not self.enabled:
            return
        code = SparseCode(a)
        linf = None
        if self.reference is not None:
            linf = float(np.max(np.abs(code.values - self.reference), initial=0.0))
        self.trace.records.append(
            TraceRecord(
                iteration=n,
                threshold=float(threshold),
                lagrangian=lagrangian(self.D, self.beta, code.values, self.lambda_star),
                support_size=int(code.support.size),
                support=tuple(int(m) for m in code.support),
                linf_to_ref=linf,
            )
        )
        self.trace.codes.append(code)


def _check_problem(D, beta):
    D = as_matrix(D, "dictionary")
    beta = as_vector(beta, D.shape[0], "beta")
    return D, beta


def _step(D, cfg):
    norm = spectral_norm_sq(D)
    eps = 0.99 / norm if cfg.step_size is None else float(cfg.step_size)
    if not eps * norm < 1.0:
        raise StepTooLarge(f"step {eps} must be < 1/||D^t D|| = {1.0 / norm}")
    return eps


def solve_ista(D, beta, lambda_star, cfg=SolverConfig(), reference=None):
    """Positive ISTA: ``a <- max(a + eps*D^t(beta - D a) - eps*lambda_star, 0)``."""
    D, beta = _check_problem(D, beta)
    if lambda_star < 0:
        raise ValueError("lambda_star must be nonnegative")
    eps = _step(D, cfg)
    rec = _Recorder(D, beta, lambda_star, reference, cfg.record_trace)
    a = np.zeros(D.shape[1])
    rec(0, lambda_star, a)
    for n in range(1, cfg.n_iterations + 1):
        a = positive_prox(a + eps * (D.T @ (beta - D @ a)), eps * lambda_star)
        rec(n, lambda_star, a)
    return SparseCode(a), rec.trace


def solve_fista(D, beta, lambda_star, cfg=SolverConfig(), reference=None):
    """Positive FISTA with the Beck-Teboulle momentum sequence."""
    D, beta = _check_problem(D, beta)
    if lambda_star < 0:
        raise ValueError("lambda_star must be nonnegative")
    eps = _step(D, cfg)
    rec = _Recorder(D, beta, lambda_star, reference, cfg.record_trace)
    a = np.zeros(D.shape[1])
    y = a
    t = 1.0
    rec(0, lambda_star, a)
    for n in range(1, cfg.n_iterations + 1):
        a_next = positive_prox(y + eps * (D.T @ (beta - D @ y)), eps * lambda_star)
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        y = a_next + ((t - 1.0) / t_next) * (a_next - a)
        a, t = a_next, t_next
        rec(n, lambda_star, a)
    return SparseCode(a), rec.trace


def homotopy_layer(D, W, beta, a, lam):
    """One thresholding layer ``max(a + W^t(beta - D a) - lam, 0)``."""
    return positive_prox(a + W.T @ (beta - D @ a), lam)


def _run_homotopy(D, W, beta, schedule, reference, record):
    rec = _Recorder(D, beta, schedule.lambda_star, reference, record)
    a = np.zeros(D.shape[1])
    # record 0 carries the virtual pre-iteration threshold lambda_0 = lambda_max
    rec(0, schedule.lambda_max, a)
    for n, lam in enumerate(schedule.thresholds, 1):
        a = homotopy_layer(D, W, beta, a, lam)
        rec(n, lam, a)
    return SparseCode(a), rec.trace


def solve_istc(D, beta, schedule, reference=None, record_trace=True):
    D, beta = _check_problem(D, beta)
    return _run_homotopy(D, D, beta, schedule, reference, record_trace)


def solve_generalized_istc(D, W, beta, schedule, reference=None, record_trace=True):
    D, beta = _check_problem(D, beta)
    W = as_matrix(W, "auxiliary")
    if W.shape != D.shape:
        raise ShapeMismatch(f"auxiliary shape {W.shape} != dictionary shape {D.shape}")
    return _run_homotopy(D, W, beta, schedule, reference, record_trace)


def default_lambda_max(D, beta, W=None):
    """``||W^t beta||_inf`` with ``W = D`` when unset."""
    W = D if W is None else W
    return float(np.max(np.abs(np.asarray(W).T @ np.asarray(beta)), initial=0.0))


@dataclass
class Problem:
    """One sparse coding problem for :func:`batch_solve`.

    ``W`` and ``lambda_max`` are only used by the homotopy solvers; the
    schedule length is ``cfg.n_iterations``.
    """

    D: np.ndarray
    beta: np.ndarray
    lambda_star: float
    W: np.ndarray | None = None
    lambda_max: float | None = None
    reference: np.ndarray | None = None

    def schedule(self, n_layers):
        lmax = self.lambda_max
        if lmax is None:
            lmax = default_lambda_max(self.D, self.beta, self.W)
        return make_schedule(lmax, self.lambda_star, n_layers)


def _solve_one(p, solver, cfg):
    if solver == "ista":
        return solve_ista(p.D, p.beta, p.lambda_star, cfg, p.reference)
    if solver == "fista":
        return solve_fista(p.D, p.beta, p.lambda_star, cfg, p.reference)
    sched = p.schedule(cfg.n_iterations)
    if solver == "istc":
        return solve_istc(p.D, p.beta, sched, p.reference, cfg.record_trace)
    W = p.D if p.W is None else p.W
    return solve_generalized_istc(p.D, W, p.beta, sched, p.reference, cfg.record_trace)


SOLVERS = ("ista", "fista", "istc", "gistc")


def batch_solve(problems, solver, cfg=SolverConfig(), workers=1):
    """Solve a list of :class:`Problem` with one solver; results keep input order.

    Raises
    ------
    BatchError
        Wrapping the first failing problem's exception, with its index.
    """
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}; choose from {SOLVERS}")
    problems = list(problems)
    if problems:
        shape = np.shape(problems[0].D)
        for i, p in enumerate(problems):
            if np.shape(p.D) != shape:
                raise BatchError(i, ShapeMismatch(f"dictionary shape {np.shape(p.D)} != {shape}"))

    def run(item):
        i, p = item
        try:
            return _solve_one(p, solver, cfg)
        except Exception as e:
            raise BatchError(i, e) from e

    if workers <= 1:
        return [run(item) for item in enumerate(problems)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, enumerate(problems)))
