"""One-class Extreme Learning Machine, its decision threshold, and the HELM baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DataError

GAMMA = 1.5
PERCENTILE = 99.5


def _activation(name: str):
    if name == "sigmoid":
        return lambda z: 0.5 * (1.0 + np.tanh(0.5 * z))
    if name == "relu":
        return lambda z: np.maximum(z, 0.0)
    if name == "linear":
        return lambda z: z
    raise ValueError(f"unknown activation {name!r}")


def ridge_solve(h: np.ndarray, target: np.ndarray, lam: float) -> np.ndarray:
    """argmin_B ||h B - target||^2 + lam ||B||^2 via a Cholesky factor of the normal equations."""
    if not lam > 0:
        raise ValueError(f"ridge parameter must be positive, got {lam}")
    gram = h.T @ h
    gram[np.diag_indices_from(gram)] += lam
    return scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram, lower=True), h.T @ target)


def _check_features(f: np.ndarray, what: str) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or len(f) == 0:
        raise DataError(f"{what}: need a nonempty 2-d feature batch, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise DataError(f"{what}: non-finite features")
    return f


@dataclass
class RandomLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "sigmoid"

    @classmethod
    def draw(cls, n_in: int, width: int, rng: np.random.Generator, activation: str = "sigmoid"):
        return cls(rng.uniform(-1.0, 1.0, (n_in, width)), rng.uniform(-1.0, 1.0, width), activation)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return _activation(self.activation)(x @ self.weight + self.bias)


def input_range(f: np.ndarray) -> tuple:
    """Per-column 1st and 99th percentiles; a constant column gets a range of width 2."""
    lo, hi = np.percentile(f, [1.0, 99.0], axis=0)
    hi = np.where(hi > lo, hi, lo + 2.0)
    return lo, hi


@dataclass
class OneClassElm:
    """``input_range``, when set, maps each input column's (p1, p99) onto (-1, 1) before the hidden layer."""

    hidden: RandomLayer
    beta_out: np.ndarray
    ridge: float
    input_range: tuple | None = None

    @property
    def n_in(self) -> int:
        return self.hidden.weight.shape[0]

    def hidden_outputs(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != self.n_in:
            raise DataError(f"one-class ELM expects (n, {self.n_in}) features, got {f.shape}")
        if self.input_range is not None:
            lo, hi = self.input_range
            f = 2.0 * (f - lo) / (hi - lo) - 1.0
        return self.hidden(f)

    def score(self, f) -> np.ndarray:
        return self.hidden_outputs(f) @ self.beta_out

    def residuals(self, f) -> np.ndarray:
        return np.abs(1.0 - self.score(f))

    def state(self) -> dict:
        return {"weight": self.hidden.weight.tolist(), "bias": self.hidden.bias.tolist(),
                "activation": self.hidden.activation, "beta_out": self.beta_out.tolist(),
                "ridge": self.ridge,
                "input_range": None if self.input_range is None else [v.tolist() for v in self.input_range]}

    @classmethod
    def from_state(cls, s: dict) -> "OneClassElm":
        layer = RandomLayer(np.asarray(s["weight"]), np.asarray(s["bias"]), s["activation"])
        rng_ = s.get("input_range")
        return cls(layer, np.asarray(s["beta_out"]), s["ridge"],
                   None if rng_ is None else tuple(np.asarray(v) for v in rng_))


def train_one_class(f_train, hidden: int = 50, ridge: float = 1e-3, seed: int = 0,
                    activation: str = "sigmoid", scale_inputs: bool = False) -> OneClassElm:
    """Random hidden layer, output weights fit by ridge regression onto the all-ones target.

    With ``scale_inputs`` the percentile range of ``f_train`` is stored and applied
    to every input, so the uniform [-1, 1] random weights see bounded inputs.
    """
    f_train = _check_features(f_train, "train_one_class")
    rng = np.random.default_rng(seed)
    layer = RandomLayer.draw(f_train.shape[1], hidden, rng, activation)
    model = OneClassElm(layer, np.zeros(hidden), ridge, input_range(f_train) if scale_inputs else None)
    h = model.hidden_outputs(f_train)
    model.beta_out = ridge_solve(h, np.ones(len(h)), ridge)
    return model


@dataclass(frozen=True)
class Threshold:
    gamma: float
    p: float
    value: float


def threshold_from_residuals(residuals, gamma: float = GAMMA, p: float = PERCENTILE) -> Threshold:
    residuals = np.asarray(residuals, dtype=np.float64)
    if residuals.size == 0:
        raise DataError("threshold needs a nonempty validation set")
    return Threshold(gamma, p, float(gamma * np.percentile(residuals, p)))


def compute_threshold(model, f_val, gamma: float = GAMMA, p: float = PERCENTILE) -> Threshold:
    """``gamma * percentile_p(|1 - Y_val|)`` with linear percentile interpolation."""
    f_val = np.asarray(f_val, dtype=np.float64)
    if len(f_val) == 0:
        raise DataError("threshold needs a nonempty validation set")
    return threshold_from_residuals(model.residuals(f_val), gamma, p)


def has_consecutive(flags) -> bool:
    """True iff at least two consecutive entries are set."""
    flags = np.asarray(flags, dtype=bool)
    return bool(len(flags) > 1 and np.any(flags[1:] & flags[:-1]))


@dataclass(frozen=True)
class Detection:
    flags: np.ndarray
    alarm: bool


def detect(model, threshold: Threshold, f_test) -> Detection:
    f_test = np.asarray(f_test, dtype=np.float64)
    if len(f_test) == 0:
        return Detection(np.zeros(0, dtype=bool), False)
    flags = model.residuals(f_test) > threshold.value
    return Detection(flags, has_consecutive(flags))


# --------------------------------------------------------------------- HELM
@dataclass
class ElmAutoencoder:
    """Random hidden layer whose ridge-solved output weights reconstruct the input.

    The transposed output weights serve as the learned projection: ``encode(x) = x @ beta.T``.
    """

    hidden: RandomLayer
    beta: np.ndarray

    @classmethod
    def fit(cls, x, width: int, ridge: float, rng: np.random.Generator, activation: str = "sigmoid"):
        x = _check_features(x, "ElmAutoencoder.fit")
        layer = RandomLayer.draw(x.shape[1], width, rng, activation)
        return cls(layer, ridge_solve(layer(x), x, ridge))

    def encode(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.beta.T

    def reconstruct(self, x) -> np.ndarray:
        return self.hidden(np.asarray(x, dtype=np.float64)) @ self.beta


@dataclass
class Helm:
    autoencoders: list = field(default_factory=list)
    classifier: OneClassElm | None = None

    def features(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        for ae in self.autoencoders:
            x = ae.encode(x)
        return x

    def score(self, x) -> np.ndarray:
        return self.classifier.score(self.features(x))

    def residuals(self, x) -> np.ndarray:
        return np.abs(1.0 - self.score(x))


def train_helm_baseline(x_train, sizes=(10,), ridges=(1e-3,), hidden: int = 50, ridge: float = 1e-3,
                        seed: int = 0, activation: str = "sigmoid", scale_inputs: bool = False) -> Helm:
    """Stacked ELM autoencoders feeding a one-class ELM; no alignment of any kind."""
    x = _check_features(x_train, "train_helm_baseline")
    if len(ridges) == 1:
        ridges = tuple(ridges) * len(sizes)
    if len(ridges) != len(sizes):
        raise ValueError("one ridge value per autoencoder layer")
    rng = np.random.default_rng(seed)
    model = Helm()
    for width, lam in zip(sizes, ridges):
        ae = ElmAutoencoder.fit(x, width, lam, rng, activation)
        model.autoencoders.append(ae)
        x = ae.encode(x)
    model.classifier = train_one_class(x, hidden, ridge, int(rng.integers(2**31)), activation, scale_inputs)
    return model
