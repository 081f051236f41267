"""Certificates for exponential convergence of generalized homotopy thresholding.

For a planted instance ``beta = D alpha0 + w`` with ``s = |supp(alpha0)|``
and cross-coherence ``mu = max_{m != m'} |W_m'^t D_m|``, the iterates

    a_n = max(a_{n-1} + W^t(beta - D a_{n-1}) - lambda_n, 0),  a_0 = 0,

with ``lambda_n = lambda_max * gamma**-n`` stay supported inside
``supp(alpha0)`` and satisfy ``||a_n - alpha0||_inf <= 2*lambda_n`` as long
as

* ``s * mu < 1/2`` and ``1 < gamma < 1/(2*mu*s)``,
* ``lambda_max >= ||W^t beta||_inf``,
* ``lambda_n >= ||W^t w||_inf / (1 - 2*gamma*mu*s)`` (the threshold floor).

Indexing: record ``n`` of a trace holds ``a_n`` after the layer using
``lambda_n``; record 0 is ``a_0 = 0`` paired with ``lambda_0 = lambda_max``.
With this indexing the bound ``2*lambda_n`` and the curve
``2*lambda_max*gamma**-n`` coincide; :func:`verify_trace` checks both.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .core import cross_coherence
from .errors import GammaOutOfRange, ScheduleMismatch
from .io import fmt
from .prox import make_schedule

__all__ = [
    "Certificate",
    "TraceReport",
    "certify",
    "error_bound",
    "pick_gamma",
    "certified_schedule",
    "verify_trace",
    "soft_threshold_inequality_probe",
    "EXIT_VERIFIED",
    "EXIT_UNCERTIFIED",
    "EXIT_VIOLATED",
]

EXIT_VERIFIED = 0
EXIT_UNCERTIFIED = 1
EXIT_VIOLATED = 2

UNATTAINABLE = math.inf
_REL_SLACK = 1e-9


@dataclass(frozen=True)
class Certificate:
    s: int
    mu_tilde: float
    condition_holds: bool
    gamma: float
    gamma_range: tuple | None
    lambda_floor: float
    lambda_max: float
    lambda_max_ok: bool
    residual_correlation: float
    bound_curve: tuple
    conditional_on_reference: bool = True

    @property
    def gamma_ok(self):
        return self.gamma_range is not None and self.gamma_range[0] < self.gamma < self.gamma_range[1]

    @property
    def floor_attainable(self):
        return math.isfinite(self.lambda_floor)

    @property
    def certified(self):
        """All hypotheses hold for the schedule's first threshold."""
        return (
            self.condition_holds
            and self.gamma_ok
            and self.lambda_max_ok
            and self.floor_attainable
            and self.lambda_max >= self.lambda_floor
        )

    def report_items(self):
        rng = "empty" if self.gamma_range is None else f"({fmt(self.gamma_range[0])}, {fmt(self.gamma_range[1])})"
        floor = "unattainable" if not self.floor_attainable else fmt(self.lambda_floor)
        return [
            ("s", self.s),
            ("mu_tilde", fmt(self.mu_tilde)),
            ("s_mu_tilde", fmt(self.s * self.mu_tilde)),
            ("condition_holds", str(self.condition_holds).lower()),
            ("gamma", fmt(self.gamma)),
            ("gamma_range", rng),
            ("gamma_ok", str(self.gamma_ok).lower()),
            ("lambda_max", fmt(self.lambda_max)),
            ("lambda_max_ok", str(self.lambda_max_ok).lower()),
            ("residual_correlation", fmt(self.residual_correlation)),
            ("lambda_floor", floor),
            ("certified", str(self.certified).lower()),
            ("conditional_on_reference", str(self.conditional_on_reference).lower()),
            ("bound_curve", " ".join(fmt(b) for b in self.bound_curve)),
        ]

    def report(self):
        return "".join(f"{k} = {v}\n" for k, v in self.report_items())


def error_bound(lambda_max, gamma, n):
    """``2 * lambda_max * gamma**-n``."""
    if not gamma > 1:
        raise GammaOutOfRange(f"gamma must exceed 1, got {gamma}")
    if n < 0:
        raise ValueError("n must be nonnegative")
    return 2.0 * lambda_max * gamma ** (-n)


def certify(instance, gamma, lambda_max, n_layers=12):
    """Evaluate the convergence hypotheses on a planted instance.

    ``n_layers`` only sets the length of ``bound_curve`` (``n = 0..n_layers``).
    """
    if not gamma > 1:
        raise GammaOutOfRange(f"gamma must exceed 1, got {gamma}")
    D, W = instance.dictionary, instance.auxiliary
    s = int(instance.planted_code.support.size)
    mu = cross_coherence(W, D) if D.shape[1] > 1 else 0.0
    holds = s * mu < 0.5
    if holds:
        upper = math.inf if mu == 0 else 1.0 / (2.0 * mu * s)
        gamma_range = (1.0, upper)
    else:
        gamma_range = None
    corr = float(np.max(np.abs(W.T @ instance.residual)))
    denom = 1.0 - 2.0 * gamma * mu * s
    floor = corr / denom if denom > 0 else UNATTAINABLE
    wtb = float(np.max(np.abs(W.T @ instance.signal)))
    curve = tuple(error_bound(lambda_max, gamma, n) for n in range(n_layers + 1))
    return Certificate(
        s=s,
        mu_tilde=mu,
        condition_holds=holds,
        gamma=float(gamma),
        gamma_range=gamma_range,
        lambda_floor=floor,
        lambda_max=float(lambda_max),
        lambda_max_ok=bool(lambda_max >= wtb),
        residual_correlation=corr,
        bound_curve=curve,
    )


def pick_gamma(mu_tilde, s, fraction=0.5, default=2.0):
    """A decay ratio inside ``(1, 1/(2*mu*s))``; ``default`` when the range is unbounded.

    Returns ``None`` when the coherence condition fails.
    """
    if s * mu_tilde >= 0.5:
        return None
    if mu_tilde == 0:
        return default
    return 1.0 + fraction * (1.0 / (2.0 * mu_tilde * s) - 1.0)


def certified_schedule(certificate, max_layers=12):
    """Longest schedule (at most ``max_layers``) whose thresholds stay above the floor.

    Uses ``lambda_star = lambda_max * gamma**-N`` so the schedule's decay
    ratio equals the certificate's ``gamma``.  Returns ``None`` when not even
    one layer fits.
    """
    c = certificate
    if not c.certified:
        return None
    n = max_layers
    while n >= 1 and c.lambda_max * c.gamma ** (-n) < c.lambda_floor:
        n -= 1
    if n < 1:
        return None
    return make_schedule(c.lambda_max, c.lambda_max * c.gamma ** (-n), n)


@dataclass
class TraceReport:
    guaranteed: bool
    passed: bool
    first_violation: int | None
    containment_violations: list = field(default_factory=list)
    bound_violations: list = field(default_factory=list)
    n_checked: int = 0
    max_ratio: float = 0.0

    def report_items(self):
        fv = "none" if self.first_violation is None else self.first_violation
        return [
            ("guaranteed", str(self.guaranteed).lower()),
            ("passed", str(self.passed).lower()),
            ("first_violation", fv),
            ("containment_violations", len(self.containment_violations)),
            ("bound_violations", len(self.bound_violations)),
            ("iterations_checked", self.n_checked),
            ("max_error_to_bound_ratio", fmt(self.max_ratio)),
        ]

    def report(self):
        return "".join(f"{k} = {v}\n" for k, v in self.report_items())


def verify_trace(instance, trace, certificate):
    """Check support containment and the error bound at every recorded iterate.

    Both ``2*lambda_n`` (thresholds read from the trace) and
    ``2*lambda_max*gamma**-n`` are checked, with relative slack 1e-9.  When
    the hypotheses do not hold (or some threshold falls below the floor) the
    report is marked ``guaranteed=False`` but still evaluated.

    Raises
    ------
    ScheduleMismatch
        If the trace thresholds are not ``lambda_max * gamma**-n``.
    """
    c = certificate
    alpha0 = instance.planted_code.values
    planted = set(instance.planted_code.support.tolist())
    thresholds = trace.thresholds
    n_idx = np.array([r.iteration for r in trace.records], dtype=np.float64)
    expected = c.lambda_max * c.gamma ** (-n_idx)
    if thresholds.size and not np.allclose(thresholds, expected, rtol=1e-9, atol=0.0):
        raise ScheduleMismatch("trace thresholds do not follow lambda_max * gamma**-n")

    guaranteed = c.certified and bool(np.all(thresholds >= c.lambda_floor * (1 - _REL_SLACK)))
    report = TraceReport(guaranteed=guaranteed, passed=True, first_violation=None)
    for rec, code in zip(trace.records, trace.codes):
        n = rec.iteration
        err = float(np.max(np.abs(code.values - alpha0)))
        bound = min(2.0 * rec.threshold, error_bound(c.lambda_max, c.gamma, n))
        report.max_ratio = max(report.max_ratio, err / bound if bound > 0 else math.inf)
        bad = False
        if not set(rec.support) <= planted:
            report.containment_violations.append(n)
            bad = True
        if err > bound * (1 + _REL_SLACK):
            report.bound_violations.append(n)
            bad = True
        if bad and report.first_violation is None:
            report.first_violation = n
        report.n_checked += 1
    report.passed = report.first_violation is None
    return report


def exit_code(certified, passed):
    if not certified:
        return EXIT_UNCERTIFIED
    return EXIT_VERIFIED if passed else EXIT_VIOLATED


def soft_threshold_inequality_probe(alpha1, alpha2, lam):
    """Evaluate ``|max(alpha1 + alpha2 - lam, 0) - alpha1| <= lam + |alpha2|``.

    The inequality is used with ``alpha1`` a planted (nonnegative)
    coefficient; for ``alpha1 < 0`` it can fail and the probe reports so.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    lhs = abs(max(alpha1 + alpha2 - lam, 0.0) - alpha1)
    rhs = lam + abs(alpha2)
    # one rounding of the sum on the left, a few ulps of slack
    return lhs <= rhs + 4 * np.finfo(float).eps * (abs(alpha1) + abs(alpha2) + lam)
