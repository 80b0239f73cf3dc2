"""Training losses: reconstruction, KL, homothety, origin cross-entropy, Wasserstein critic."""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .errors import CollapseError

MAX_PAIR_BATCH = 256


@dataclass(frozen=True)
class LossWeights:
    beta: float = 1.0
    alpha: float = 1.0
    delta_w: float = 1.0
    gp_weight: float = 10.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.delta_w < 1:
            raise ValueError(f"delta_w must be >= 1, got {self.delta_w}")
        if self.gp_weight < 0:
            raise ValueError(f"gp_weight must be >= 0, got {self.gp_weight}")


def reconstruction_loss(x, x_hat) -> Tensor:
    x, x_hat = ad._wrap(x), ad._wrap(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction: {x.shape} vs {x_hat.shape}")
    return ad.mean(ad.square(x_hat - x))


def kl_loss(mu, logvar) -> Tensor:
    """Batch mean of KL(N(mu, exp(logvar)) || N(0, I)), summed over feature dimensions."""
    mu, logvar = ad._wrap(mu), ad._wrap(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"kl: {mu.shape} vs {logvar.shape}")
    per_dim = ad.exp(logvar) + ad.square(mu) - 1.0 - logvar
    if per_dim.ndim == 1:
        return ad.tsum(per_dim) * 0.5
    return ad.mean(ad.tsum(per_dim, axis=1)) * 0.5


# --------------------------------------------------------------------- homothety
@dataclass
class HomothetyBatch:
    """Pairwise distances per domain: input-space ``d_x`` (arrays) and feature-space ``d_f`` (tensors)."""

    d_x: list
    d_f: list

    def __post_init__(self):
        for dx, df in zip(self.d_x, self.d_f):
            if len(dx) != len(ad._wrap(df).data):
                raise ShapeError("d_x and d_f lengths differ")


@functools.lru_cache(maxsize=32)
def _all_pairs(n: int) -> tuple:
    i, j = np.triu_indices(n, k=1)
    i.setflags(write=False)
    j.setflags(write=False)
    return i, j


def pair_indices(n: int, rng: np.random.Generator | None = None,
                 max_batch: int = MAX_PAIR_BATCH) -> tuple:
    """All pairs i < j for small batches, else a random subsample of ``max_batch*(max_batch-1)/2`` pairs.

    Returns ``(None, None)`` when every pair is kept.
    """
    if n <= max_batch:
        return None, None
    i, j = _all_pairs(n)
    rng = rng if rng is not None else np.random.default_rng(0)
    keep = np.sort(rng.choice(len(i), size=max_batch * (max_batch - 1) // 2, replace=False))
    return i[keep], j[keep]


def pairwise_distances(x, i=None, j=None):
    """Distances ``||x_i - x_j||`` (all pairs when ``i`` is None); differentiable for Tensors."""
    if isinstance(x, Tensor):
        return ad.pair_distances(x, i, j)
    x = np.asarray(x, dtype=np.float64)
    if i is None:
        return pdist(x)
    return np.linalg.norm(x[i] - x[j], axis=1)


def homothety_batch(domains, rng: np.random.Generator | None = None) -> HomothetyBatch:
    """Build the batch from ``[(x_source, f_source), (x_target, f_target)]``."""
    d_x, d_f = [], []
    for x, f in domains:
        x = np.asarray(x, dtype=np.float64)
        f = ad._wrap(f)
        if len(x) != len(f.data):
            raise ShapeError("input and feature batches differ in length")
        i, j = pair_indices(len(x), rng)
        d_x.append(pairwise_distances(x, i, j))
        d_f.append(pairwise_distances(f, i, j))
    return HomothetyBatch(d_x, d_f)


def _values(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def optimal_eta(batch: HomothetyBatch) -> float:
    """Closed-form minimizer over ``eta`` of ``homothety_loss`` (per-domain pair means, summed)."""
    num = sum(float(np.mean(dx * _values(df))) for dx, df in zip(batch.d_x, batch.d_f))
    den = sum(float(np.mean(_values(df) ** 2)) for df in batch.d_f)
    if not den > 0:
        raise CollapseError("all feature-space distances are zero")
    return num / den


def homothety_loss(batch: HomothetyBatch, eta: float, absolute: bool = False):
    """Sum over domains of the mean over pairs of ``(d_x - eta * d_f)**2``.

    With ``absolute`` the per-pair penalty is ``|d_x - eta * d_f|``. ``eta`` is a
    constant: no gradient flows through it.
    """
    total = None
    for dx, df in zip(batch.d_x, batch.d_f):
        if len(dx) == 0:
            raise ShapeError("homothety loss needs at least one pair per domain")
        r = ad._wrap(dx) - ad._wrap(df) * eta
        if absolute:
            term = ad.mean(ad.sqrt(ad.square(r) + 1e-300)) if isinstance(df, Tensor) else \
                Tensor(np.mean(np.abs(r.data)))
        else:
            term = ad.mean(ad.square(r))
        total = term if total is None else total + term
    return total


def _absolute_objective(batch: HomothetyBatch, eta: float) -> float:
    return sum(float(np.mean(np.abs(dx - eta * _values(df)))) for dx, df in zip(batch.d_x, batch.d_f))


def optimal_eta_absolute(batch: HomothetyBatch, tol: float = 1e-10) -> float:
    """Ternary search for the absolute-value variant (convex, piecewise linear in eta)."""
    ratios = [dx[df > 0] / df[df > 0] for dx, df in
              ((dx, _values(df)) for dx, df in zip(batch.d_x, batch.d_f))]
    ratios = np.concatenate(ratios)
    if len(ratios) == 0:
        raise CollapseError("all feature-space distances are zero")
    lo, hi = 0.0, float(ratios.max())
    while hi - lo > tol * max(1.0, hi):
        m1 = lo + (hi - lo) / 3
        m2 = hi - (hi - lo) / 3
        if _absolute_objective(batch, m1) <= _absolute_objective(batch, m2):
            hi = m2
        else:
            lo = m1
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------- discriminators
def softmax_discriminator_loss(logits, labels) -> Tensor:
    """Mean cross-entropy of 2-way ``logits`` against integer origin ``labels``."""
    logits = ad._wrap(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or len(labels) != logits.shape[0]:
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    if len(np.unique(labels)) < 2:
        warnings.warn("origin batch holds a single class; adversarial signal is degenerate",
                      RuntimeWarning, stacklevel=2)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -ad.mean(ad.tsum(ad.log_softmax(logits, axis=1) * onehot, axis=1))


def wasserstein_critic_loss(disc_source, disc_target, weights: LossWeights | float = 1.0) -> Tensor:
    """``E[disc(F_source)] - delta_w * E[disc(F_target)]``, the quantity the critic maximizes."""
    delta_w = weights.delta_w if isinstance(weights, LossWeights) else float(weights)
    disc_source, disc_target = ad._wrap(disc_source), ad._wrap(disc_target)
    if disc_source.size == 0 or disc_target.size == 0:
        raise ShapeError("critic outputs must be nonempty")
    return ad.mean(disc_source) - ad.mean(disc_target) * delta_w


def interpolates(f_source: np.ndarray, f_target: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random convex combinations row by row, subsampling the larger batch to the smaller size."""
    n = min(len(f_source), len(f_target))
    if len(f_source) > n:
        f_source = f_source[np.sort(rng.choice(len(f_source), n, replace=False))]
    if len(f_target) > n:
        f_target = f_target[np.sort(rng.choice(len(f_target), n, replace=False))]
    u = rng.uniform(size=(n, 1))
    return u * f_source + (1.0 - u) * f_target


def gradient_penalty(critic, f_source, f_target, rng: np.random.Generator) -> Tensor:
    """Mean of ``(||grad_x critic(x)|| - 1)**2`` over random interpolates of the two batches.

    ``critic.input_gradient`` returns the input gradient as a graph over the
    critic's parameters, so the penalty is itself differentiable.
    """
    x = interpolates(_values(f_source), _values(f_target), rng)
    g = critic.input_gradient(x)
    return ad.mean(ad.square(ad.l2_norm(g, axis=1) - 1.0))
