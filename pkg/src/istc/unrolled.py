"""The homotopy thresholding network as a differentiable program.

Layer ``n`` (``n = 1..N``) computes

    z_n = a_{n-1} + W^t (beta - D a_{n-1}) - lambda_n,   a_n = relu(z_n)

with ``lambda_n = lambda_max * (lambda_max / lambda_star) ** (-n/N)`` and
``lambda_star = exp(log_lambda_star)``.  ``lambda_max`` is either a fixed
number or, by default, ``||W^t beta||_inf`` recomputed per input and treated
as a constant by the backward pass.  In tied mode ``W`` is ``D``.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import SparseCode, as_vector, normalize_auxiliary, normalize_columns
from .errors import CacheMismatch, DivergedLoss, ShapeMismatch
from .prox import geometric_thresholds, homotopy_layer

__all__ = [
    "UnrolledParams",
    "ForwardCache",
    "Gradients",
    "ToyClassifier",
    "ToyDataset",
    "TrainConfig",
    "EpochMetrics",
    "TrainResult",
    "unrolled_forward",
    "unrolled_backward",
    "finite_diff_gradient",
    "make_toy_dataset",
    "train_toy",
    "normalization_error",
]


@dataclass(frozen=True, eq=False)
class UnrolledParams:
    D: np.ndarray
    W: np.ndarray | None = None  # None: tied to D
    log_lambda_star: float = math.log(0.1)
    n_layers: int = 12
    lambda_max: float | None = None  # None: per-input ||W^t beta||_inf

    def __post_init__(self):
        if self.W is not None and np.shape(self.W) != np.shape(self.D):
            raise ShapeMismatch(f"W shape {np.shape(self.W)} != D shape {np.shape(self.D)}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be nonnegative")

    @property
    def tied(self):
        return self.W is None

    @property
    def aux(self):
        return self.D if self.W is None else self.W

    @property
    def lambda_star(self):
        return math.exp(self.log_lambda_star)

    def lambda_max_for(self, beta):
        if self.lambda_max is not None:
            return float(self.lambda_max)
        return float(np.max(np.abs(self.aux.T @ beta), initial=0.0))

    def thresholds(self, lambda_max):
        return geometric_thresholds(lambda_max, self.lambda_star, self.n_layers)


@dataclass(frozen=True, eq=False)
class ForwardCache:
    beta: np.ndarray
    lambda_max: float
    thresholds: np.ndarray
    pre: np.ndarray  # (N, M) pre-activations z_n
    codes: np.ndarray  # (N + 1, M) iterates a_0 .. a_N
    shape: tuple
    tied: bool

    @property
    def n_layers(self):
        return self.pre.shape[0]


@dataclass(frozen=True, eq=False)
class Gradients:
    dD: np.ndarray
    dW: np.ndarray | None
    dlog_lambda_star: float

    def flat(self):
        parts = [self.dD.ravel()]
        if self.dW is not None:
            parts.append(self.dW.ravel())
        parts.append(np.array([self.dlog_lambda_star]))
        return np.concatenate(parts)


def unrolled_forward(params, beta):
    D, W = params.D, params.aux
    beta = as_vector(beta, D.shape[0], "beta")
    lmax = params.lambda_max_for(beta)
    lams = params.thresholds(lmax) if params.n_layers else np.zeros(0)
    M = D.shape[1]
    pre = np.empty((params.n_layers, M))
    codes = np.empty((params.n_layers + 1, M))
    a = np.zeros(M)
    codes[0] = a
    for n, lam in enumerate(lams):
        pre[n] = a + W.T @ (beta - D @ a) - lam
        a = homotopy_layer(D, W, beta, a, lam)
        codes[n + 1] = a
    cache = ForwardCache(beta, lmax, lams, pre, codes, D.shape, params.tied)
    return SparseCode(a), cache


def unrolled_backward(cache, params, grad_wrt_code):
    """Reverse-mode gradients of ``<grad_wrt_code, a_N>``.

    The ReLU derivative is 1 where ``z > 0`` and 0 elsewhere.  In tied mode
    the two roles of ``D`` are summed into ``dD`` and ``dW`` is ``None``.
    """
    if (
        cache.shape != params.D.shape
        or cache.tied != params.tied
        or cache.n_layers != params.n_layers
        or not np.allclose(cache.thresholds, params.thresholds(cache.lambda_max), rtol=0, atol=0)
    ):
        raise CacheMismatch("cache was produced with different parameters")
    D, W = params.D, params.aux
    N = cache.n_layers
    g = as_vector(grad_wrt_code, D.shape[1], "grad_wrt_code").copy()
    dD = np.zeros_like(D)
    dW = np.zeros_like(D)
    dlog = 0.0
    for n in range(N, 0, -1):
        dz = np.where(cache.pre[n - 1] > 0, g, 0.0)
        a_prev = cache.codes[n - 1]
        Wdz = W @ dz
        dW += np.outer(cache.beta - D @ a_prev, dz)
        dD -= np.outer(Wdz, a_prev)
        # d lambda_n / d log lambda_star = (n/N) lambda_n
        dlog -= dz.sum() * (n / N) * cache.thresholds[n - 1]
        g = dz - D.T @ Wdz
    if params.tied:
        return Gradients(dD + dW, None, dlog)
    return Gradients(dD, dW, dlog)


def finite_diff_gradient(loss_fn, params, step=1e-6):
    """Central differences of ``loss_fn(params)`` for every scalar parameter."""
    if not step > 0:
        raise ValueError("step must be positive")

    def diff(make):
        return (loss_fn(make(step)) - loss_fn(make(-step))) / (2 * step)

    def grad_matrix(name):
        base = getattr(params, name)
        out = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            def make(h, idx=idx):
                m = base.copy()
                m[idx] += h
                return replace(params, **{name: m})
            out[idx] = diff(make)
        return out

    dD = grad_matrix("D")
    dW = None if params.tied else grad_matrix("W")
    dlog = diff(lambda h: replace(params, log_lambda_star=params.log_lambda_star + h))
    return Gradients(dD, dW, dlog)


@dataclass(eq=False)
class ToyClassifier:
    """Linear softmax head on the code: ``logits = weights @ a + bias``."""

    weights: np.ndarray  # (K, M)
    bias: np.ndarray  # (K,)

    @classmethod
    def zeros(cls, n_classes, code_dim):
        return cls(np.zeros((n_classes, code_dim)), np.zeros(n_classes))

    def logits(self, code):
        return self.weights @ code + self.bias

    def predict(self, code):
        return int(np.argmax(self.logits(code)))

    def loss_and_grads(self, code, label):
        """Cross-entropy and gradients with respect to (weights, bias, code)."""
        z = self.logits(code)
        z = z - z.max()
        p = np.exp(z)
        p /= p.sum()
        loss = -math.log(max(p[label], 1e-300))
        dz = p.copy()
        dz[label] -= 1.0
        return loss, np.outer(dz, code), dz, self.weights.T @ dz

    def copy(self):
        return ToyClassifier(self.weights.copy(), self.bias.copy())


@dataclass(frozen=True, eq=False)
class ToyDataset:
    train_x: np.ndarray  # (n, P)
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray

    @property
    def n_classes(self):
        return int(max(self.train_y.max(), self.val_y.max())) + 1

    def shuffled_labels(self, seed):
        rng = np.random.default_rng(seed)
        return ToyDataset(self.train_x, rng.permutation(self.train_y), self.val_x, rng.permutation(self.val_y))


def make_toy_dataset(signal_dim=16, atom_count=12, support_size=2, n_train=500, n_val=200,
                     noise=0.05, seed=0):
    """Two classes, each a positive combination of atoms from its own half of a random dictionary.

    Signals are scaled to unit norm.
    """
    rng = np.random.default_rng(seed)
    D = normalize_columns(rng.standard_normal((signal_dim, atom_count)))
    halves = np.array_split(np.arange(atom_count), 2)

    def draw(n):
        y = rng.integers(0, 2, size=n)
        X = np.empty((n, signal_dim))
        for i, label in enumerate(y):
            atoms = rng.choice(halves[label], size=support_size, replace=False)
            x = D[:, atoms] @ rng.uniform(1.0, 2.0, size=support_size)
            x += noise * rng.standard_normal(signal_dim)
            X[i] = x / np.linalg.norm(x)
        return X, y

    tx, ty = draw(n_train)
    vx, vy = draw(n_val)
    return ToyDataset(tx, ty, vx, vy)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 0.05
    batch_size: int = 10
    seed: int = 0
    lr_decay_epochs: tuple = ()
    lr_decay: float = 0.1
    lambda_lr_scale: float = 1.0
    start_epoch: int = 0


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    mean_sparsity: float
    norm_error: float


@dataclass(eq=False)
class TrainResult:
    params: UnrolledParams
    classifier: ToyClassifier
    metrics: list = field(default_factory=list)


def normalization_error(params):
    """Max deviation of ``||D_m||`` and ``W_m^t D_m`` from 1."""
    D = params.D
    err = float(np.max(np.abs(np.linalg.norm(D, axis=0) - 1.0)))
    if not params.tied:
        err = max(err, float(np.max(np.abs(np.einsum("pm,pm->m", params.W, D) - 1.0))))
    return err


def evaluate(params, classifier, X, y):
    """Accuracy and mean fraction of nonzero code entries."""
    correct, nnz = 0, 0.0
    for x, label in zip(X, y):
        code, _ = unrolled_forward(params, x)
        correct += classifier.predict(code.values) == label
        nnz += code.support.size / code.size
    return float(correct) / len(y), float(nnz) / len(y)


def _lr_at(cfg, epoch):
    return cfg.lr * cfg.lr_decay ** sum(epoch >= e for e in cfg.lr_decay_epochs)


def train_toy(dataset, params, classifier, cfg=TrainConfig(), on_epoch=None):
    """Projected minibatch SGD over ``D`` (and ``W``), ``log lambda_star`` and the head.

    After each step the columns of ``D`` are renormalized and ``W`` is
    rescaled so that ``W_m^t D_m = 1``.  Epochs are numbered from
    ``cfg.start_epoch + 1``; the shuffling of epoch ``e`` depends only on
    ``(cfg.seed, e)``, so a resumed run matches an uninterrupted one.

    Raises
    ------
    DivergedLoss
        If the loss becomes non-finite.
    """
    if dataset.n_classes < 2:
        raise ValueError("need at least two classes")
    clf = classifier.copy()
    result = TrainResult(params, clf)
    n = len(dataset.train_y)
    for epoch in range(cfg.start_epoch + 1, cfg.start_epoch + cfg.epochs + 1):
        lr = _lr_at(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            gD = np.zeros_like(params.D)
            gW = None if params.tied else np.zeros_like(params.D)
            glog = 0.0
            gC = np.zeros_like(clf.weights)
            gb = np.zeros_like(clf.bias)
            for i in batch:
                code, cache = unrolled_forward(params, dataset.train_x[i])
                label = int(dataset.train_y[i])
                loss, dC, db, dcode = clf.loss_and_grads(code.values, label)
                if not math.isfinite(loss):
                    raise DivergedLoss(f"non-finite loss at epoch {epoch}", epoch)
                total += loss
                correct += clf.predict(code.values) == label
                g = unrolled_backward(cache, params, dcode)
                gD += g.dD
                if gW is not None:
                    gW += g.dW
                glog += g.dlog_lambda_star
                gC += dC
                gb += db
            if lr == 0:
                continue
            scale = lr / len(batch)
            with np.errstate(over="ignore", invalid="ignore"):
                D_raw = params.D - scale * gD
                W_raw = None if params.tied else params.W - scale * gW
                log_lam = params.log_lambda_star - cfg.lambda_lr_scale * scale * glog
                weights = clf.weights - scale * gC
                bias = clf.bias - scale * gb
            steps = [D_raw, weights, bias, np.array([log_lam])] + ([] if W_raw is None else [W_raw])
            if not all(np.all(np.isfinite(x)) for x in steps):
                raise DivergedLoss(f"non-finite parameters at epoch {epoch}", epoch)
            D = normalize_columns(D_raw)
            W = None if params.tied else normalize_auxiliary(W_raw, D)
            params = replace(params, D=D, W=W, log_lambda_star=log_lam)
            clf.weights, clf.bias = weights, bias
        val_acc, sparsity = evaluate(params, clf, dataset.val_x, dataset.val_y)
        m = EpochMetrics(epoch, float(total) / n, float(correct) / n, val_acc, sparsity, normalization_error(params))
        result.metrics.append(m)
        result.params = params
        if on_epoch is not None:
            on_epoch(m, params, clf)
    result.params = params
    return result
