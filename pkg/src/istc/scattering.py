"""Small-scale 2-D scattering transform with Morlet wavelets.

Channels per color, in emission order:

* lowpass: ``x * phi_J``
* order 1: ``relu(x * psi_{j,theta,a}) * phi_J`` for every scale ``j``,
  angle ``theta`` and phase ``a``
* order 2: ``||x * psi_{j,theta}| * psi_{j',theta'}| * phi_J`` for ``j' > j``

All outputs are subsampled with stride ``2**J``.  Convolutions are circular
and carried out in the Fourier domain.  Scales run over ``j = 1..J``.
"""

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import InsufficientSamples, ShapeMismatch

__all__ = [
    "ScatteringConfig",
    "WaveletBank",
    "ScatteringOutput",
    "ReductionOperator",
    "morlet_filter",
    "mother_morlet",
    "gaussian_filter",
    "build_morlet_bank",
    "channel_count",
    "channel_descriptors",
    "scatter",
    "fit_reduction",
    "apply_reduction",
    "standardize",
    "XI",
    "SIGMA0",
]

XI = 3 * math.pi / 4
SIGMA0 = 0.8
_PERIODS = 2


@dataclass(frozen=True)
class ScatteringConfig:
    J: int = 3
    n_angles: int = 4
    n_phases: int = 4
    n_colors: int = 1
    image_size: tuple = (32, 32)

    def __post_init__(self):
        if self.J < 1 or self.n_angles < 1 or self.n_phases < 1 or self.n_colors < 1:
            raise ValueError("J, n_angles, n_phases and n_colors must be >= 1")
        h, w = self.image_size
        step = 2**self.J
        if h % step or w % step:
            raise ValueError(f"image size {self.image_size} not divisible by 2**J = {step}")

    @property
    def scales(self):
        return range(1, self.J + 1)

    @property
    def angles(self):
        return [l * math.pi / self.n_angles for l in range(self.n_angles)]

    @property
    def phases(self):
        return [2 * math.pi * k / self.n_phases for k in range(self.n_phases)]

    @property
    def output_size(self):
        step = 2**self.J
        return self.image_size[0] // step, self.image_size[1] // step


def _grid(shape):
    # centered integer coordinates, origin at index 0
    h, w = shape
    u1 = np.fft.fftfreq(h, 1.0 / h)
    u2 = np.fft.fftfreq(w, 1.0 / w)
    return np.meshgrid(u1, u2, indexing="ij")


def mother_morlet(v1, v2, xi=XI, sigma=SIGMA0, kappa=None):
    """Morlet ``C (exp(i xi v1) - kappa) exp(-|v|^2/(2 sigma^2))`` at continuous points.

    ``kappa=None`` uses the continuous zero-mean value ``exp(-sigma^2 xi^2/2)``.
    """
    if kappa is None:
        kappa = math.exp(-0.5 * (sigma * xi) ** 2)
    env = np.exp(-(v1**2 + v2**2) / (2 * sigma**2)) / (2 * math.pi * sigma**2)
    return (np.exp(1j * xi * v1) - kappa) * env


def morlet_filter(shape, j, theta, xi=XI, sigma0=SIGMA0):
    """Periodized ``2**-2j psi(2**-j r_{-theta} u)`` sampled on the image grid.

    ``kappa`` is chosen from the periodized samples so that the discrete sum
    of the filter vanishes.
    """
    h, w = shape
    g1, g2 = _grid(shape)
    c, s = math.cos(theta), math.sin(theta)
    scale = 2.0**-j
    wave = np.zeros(shape, dtype=np.complex128)
    env = np.zeros(shape)
    for k1 in range(-_PERIODS, _PERIODS + 1):
        for k2 in range(-_PERIODS, _PERIODS + 1):
            u1 = g1 + k1 * h
            u2 = g2 + k2 * w
            v1 = scale * (c * u1 + s * u2)
            v2 = scale * (-s * u1 + c * u2)
            e = np.exp(-(v1**2 + v2**2) / (2 * sigma0**2)) / (2 * math.pi * sigma0**2)
            wave += np.exp(1j * xi * v1) * e
            env += e
    kappa = wave.sum() / env.sum()
    return scale**2 * (wave - kappa * env)


def gaussian_filter(shape, J, sigma0=SIGMA0):
    """Periodized Gaussian of width ``sigma0 * 2**J`` with unit sum."""
    h, w = shape
    g1, g2 = _grid(shape)
    sig = sigma0 * 2.0**J
    out = np.zeros(shape)
    for k1 in range(-_PERIODS, _PERIODS + 1):
        for k2 in range(-_PERIODS, _PERIODS + 1):
            out += np.exp(-((g1 + k1 * h) ** 2 + (g2 + k2 * w) ** 2) / (2 * sig**2))
    return out / out.sum()


@dataclass(frozen=True, eq=False)
class WaveletBank:
    config: ScatteringConfig
    psi: np.ndarray  # (J, n_angles, H, W) complex spatial kernels
    phi: np.ndarray  # (H, W) real spatial kernel
    psi_hat: np.ndarray
    phi_hat: np.ndarray

    def filter(self, j, angle):
        return self.psi[j - 1, angle]

    def phase_filter(self, j, angle, phase):
        """``Real(exp(-i a) psi_{j,theta})``."""
        a = self.config.phases[phase]
        return np.real(np.exp(-1j * a) * self.psi[j - 1, angle])


def build_morlet_bank(config):
    shape = config.image_size
    psi = np.empty((config.J, config.n_angles) + tuple(shape), dtype=np.complex128)
    for j in config.scales:
        for l, theta in enumerate(config.angles):
            psi[j - 1, l] = morlet_filter(shape, j, theta)
    phi = gaussian_filter(shape, config.J)
    return WaveletBank(config, psi, phi, np.fft.fft2(psi), np.fft.fft2(phi))


def channel_count(config):
    J, T, A = config.J, config.n_angles, config.n_phases
    return config.n_colors * (1 + J * T * A + math.comb(J, 2) * T * T)


def channel_descriptors(config):
    """One tuple per output channel, in emission order."""
    out = []
    for c in range(config.n_colors):
        out.append(("lowpass", c))
        for j in config.scales:
            for l in range(config.n_angles):
                for a in range(config.n_phases):
                    out.append(("order1", j, l, a, c))
        for j, j2 in combinations(config.scales, 2):
            for l in range(config.n_angles):
                for l2 in range(config.n_angles):
                    out.append(("order2", j, l, j2, l2, c))
    return out


def format_descriptor(d):
    kind, *rest = d
    if kind == "lowpass":
        return f"lowpass color={rest[0]}"
    if kind == "order1":
        j, l, a, c = rest
        return f"order1 j={j} theta={l} phase={a} color={c}"
    j, l, j2, l2, c = rest
    return f"order2 j={j} theta={l} j2={j2} theta2={l2} color={c}"


@dataclass(frozen=True, eq=False)
class ScatteringOutput:
    tensor: np.ndarray  # (H / 2**J, W / 2**J, C_total)
    descriptors: list

    @property
    def n_channels(self):
        return self.tensor.shape[-1]

    def vectors(self):
        """Per-position channel vectors, shape ``(positions, C_total)``."""
        return self.tensor.reshape(-1, self.tensor.shape[-1])


def _conv(x_hat, k_hat):
    return np.fft.ifft2(x_hat * k_hat)


def scatter(x, bank, config=None):
    """Scattering coefficients of a grayscale ``(H, W)`` or color ``(C, H, W)`` image."""
    config = bank.config if config is None else config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape != (config.n_colors,) + tuple(config.image_size):
        raise ShapeMismatch(
            f"image shape {x.shape} does not match {(config.n_colors,) + tuple(config.image_size)}"
        )
    step = 2**config.J
    phases = np.exp(-1j * np.array(config.phases))

    def average(field):
        # real part of a circular convolution with phi_J, then subsample
        return np.real(_conv(np.fft.fft2(field), bank.phi_hat))[::step, ::step]

    channels = []
    for c in range(config.n_colors):
        x_hat = np.fft.fft2(x[c])
        channels.append(np.real(_conv(x_hat, bank.phi_hat))[::step, ::step])
        modulus = {}
        for j in config.scales:
            for l in range(config.n_angles):
                u = _conv(x_hat, bank.psi_hat[j - 1, l])
                for a in range(config.n_phases):
                    channels.append(np.maximum(average(np.maximum(np.real(phases[a] * u), 0.0)), 0.0))
                modulus[j, l] = np.abs(u)
        for j, j2 in combinations(config.scales, 2):
            for l in range(config.n_angles):
                m_hat = np.fft.fft2(modulus[j, l])
                for l2 in range(config.n_angles):
                    v = np.abs(_conv(m_hat, bank.psi_hat[j2 - 1, l2]))
                    channels.append(np.maximum(average(v), 0.0))
    return ScatteringOutput(np.stack(channels, axis=-1), channel_descriptors(config))


@dataclass(frozen=True, eq=False)
class ReductionOperator:
    projection: np.ndarray  # (reduced, C_total), orthonormal rows
    mean: np.ndarray  # (C_total,)
    explained_variance: np.ndarray

    @property
    def target_dim(self):
        return self.projection.shape[0]


def _as_tensor(s):
    return s.tensor if isinstance(s, ScatteringOutput) else np.asarray(s, dtype=np.float64)


def fit_reduction(samples, target_dim):
    """PCA over per-position channel vectors pooled across samples and positions."""
    X = np.concatenate([_as_tensor(s).reshape(-1, _as_tensor(s).shape[-1]) for s in samples])
    n, C = X.shape
    if target_dim < 1 or target_dim > C:
        raise ValueError(f"target_dim must lie in [1, {C}]")
    if n < target_dim:
        raise InsufficientSamples(f"{n} vectors cannot determine {target_dim} directions")
    mean = X.mean(axis=0)
    _, sv, vt = np.linalg.svd(X - mean, full_matrices=False)
    k = min(target_dim, vt.shape[0])
    proj = vt[:k]
    if k < target_dim:
        # rank-deficient pool: complete the basis with orthonormal extra rows
        q, _ = np.linalg.qr(np.concatenate([proj, np.eye(C)]).T)
        proj = q[:, :target_dim].T
    var = np.zeros(target_dim)
    var[:k] = sv[:k] ** 2 / max(n - 1, 1)
    return ReductionOperator(proj, mean, var)


def apply_reduction(op, s):
    t = _as_tensor(s)
    if t.shape[-1] != op.mean.size:
        raise ShapeMismatch(f"tensor has {t.shape[-1]} channels, operator expects {op.mean.size}")
    return (t - op.mean) @ op.projection.T


def standardize(vectors, mean=None):
    """Center per-position vectors and scale each to unit norm.

    Returns ``(standardized, mean)``; pass the training mean when
    transforming held-out data.  Zero vectors stay zero.
    """
    V = np.asarray(vectors, dtype=np.float64)
    if mean is None:
        mean = V.mean(axis=0)
    Z = V - mean
    norms = np.linalg.norm(Z, axis=-1, keepdims=True)
    return np.divide(Z, norms, out=np.zeros_like(Z), where=norms > 0), mean
