"""Feature encoders shared by source and target, and the variational decoder."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FORMAT_VERSION = "fleetalign-weights/1"
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


class Dense:
    """Affine layer ``x @ W + b`` with weights uniform in +-1/sqrt(fan_in)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, n_out), requires_grad=True)

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias

    def parameters(self) -> list:
        return [self.weight, self.bias]


class Module:
    """Something with a flat ordered list of dense layers."""

    layers: list

    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def zero_(self) -> None:
        for p in self.parameters():
            p.data[...] = 0.0

    def state(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "kind": type(self).__name__,
            "layers": [
                {"shape": list(l.weight.shape),
                 "weight": l.weight.data.ravel().tolist(),
                 "bias": l.bias.data.tolist()}
                for l in self.layers
            ],
        }

    def load_state(self, state: dict) -> None:
        if state.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported weight format {state.get('version')!r}")
        if len(state["layers"]) != len(self.layers):
            raise ValueError("layer count mismatch")
        for layer, rec in zip(self.layers, state["layers"]):
            shape = tuple(rec["shape"])
            if shape != layer.weight.shape:
                raise ValueError(f"layer shape {shape} != {layer.weight.shape}")
            layer.weight.data[...] = np.asarray(rec["weight"]).reshape(shape)
            layer.bias.data[...] = rec["bias"]


def _check_width(x: Tensor, width: int, who: str) -> None:
    if x.ndim != 2 or x.shape[1] != width:
        raise ad.ShapeError(f"{who} expects (n, {width}) input, got {x.shape}")


class MlpEncoder(Module):
    """Two relu layers; both the hidden and the output layer are rectified."""

    def __init__(self, n_in: int, hidden: int = 10, n_features: int = 10,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng()
        self.n_in, self.n_features = n_in, n_features
        self.layers = [Dense(n_in, hidden, rng), Dense(hidden, n_features, rng)]

    def __call__(self, x) -> Tensor:
        x = ad._wrap(x)
        _check_width(x, self.n_in, "encoder")
        h = ad.relu(self.layers[0](x))
        return ad.relu(self.layers[1](h))

    def features(self, x) -> np.ndarray:
        return self(x).data


class VariationalEncoder(Module):
    """``MlpEncoder`` trunk with linear mean and log-variance heads."""

    def __init__(self, n_in: int, hidden: int = 10, n_features: int = 10,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng()
        self.n_in, self.n_features = n_in, n_features
        self.trunk = MlpEncoder(n_in, hidden, hidden, rng)
        self.mu_head = Dense(hidden, n_features, rng)
        self.logvar_head = Dense(hidden, n_features, rng)
        self.layers = [*self.trunk.layers, self.mu_head, self.logvar_head]

    def __call__(self, x, rng: np.random.Generator | None = None):
        """Return ``(mu, logvar, F)``; ``F`` is a reparameterized sample, or ``mu`` when ``rng`` is None."""
        x = ad._wrap(x)
        _check_width(x, self.n_in, "encoder")
        h = self.trunk(x)
        mu = self.mu_head(h)
        logvar = ad.clip(self.logvar_head(h), LOGVAR_MIN, LOGVAR_MAX)
        f = mu if rng is None else ad.gaussian_sample(mu, logvar, rng)
        return mu, logvar, f

    def features(self, x) -> np.ndarray:
        return self(x)[0].data


class Decoder(Module):
    """Mirror of the encoder: relu hidden layer, linear reconstruction layer."""

    def __init__(self, n_features: int, hidden: int, n_out: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng()
        self.n_features, self.n_out = n_features, n_out
        self.layers = [Dense(n_features, hidden, rng), Dense(hidden, n_out, rng)]

    def __call__(self, f) -> Tensor:
        f = ad._wrap(f)
        _check_width(f, self.n_features, "decoder")
        return self.layers[1](ad.relu(self.layers[0](f)))
