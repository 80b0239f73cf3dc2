"""Origin discriminators on the feature space and the adversarial update."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .extractors import Dense, Module, _check_width
from .losses import LossWeights, gradient_penalty, softmax_discriminator_loss, wasserstein_critic_loss

SOFTMAX = "softmax"
WASSERSTEIN = "wasserstein"


class DiscriminatorNet(Module):
    """relu layers of widths 10 and 5, then a 2-way softmax head or a linear scalar critic."""

    def __init__(self, kind: str, n_in: int = 10, hidden=(10, 5), rng: np.random.Generator | None = None):
        if kind not in (SOFTMAX, WASSERSTEIN):
            raise ValueError(f"unknown discriminator kind {kind!r}")
        rng = rng if rng is not None else np.random.default_rng()
        self.kind, self.n_in = kind, n_in
        widths = [n_in, *hidden]
        self.layers = [Dense(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.layers.append(Dense(widths[-1], 2 if kind == SOFTMAX else 1, rng))

    def __call__(self, f) -> Tensor:
        """Logits ``(n, 2)`` for softmax, critic values ``(n,)`` for Wasserstein."""
        h = ad._wrap(f)
        _check_width(h, self.n_in, "discriminator")
        for layer in self.layers[:-1]:
            h = ad.relu(layer(h))
        out = self.layers[-1](h)
        if self.kind == WASSERSTEIN:
            return ad.reshape(out, (out.shape[0],))
        return out

    def probabilities(self, f) -> np.ndarray:
        return ad.softmax(self(f), axis=1).data

    def input_gradient(self, x) -> Tensor:
        """d critic / d x for each row, as a graph over the critic weights.

        For a relu network the input gradient is a product of weight matrices
        interleaved with the (locally constant) activation masks, so it is built
        here from ordinary differentiable ops and the penalty on its norm can be
        backpropagated into the weights.
        """
        if self.kind != WASSERSTEIN:
            raise ValueError("input_gradient is defined for the scalar critic")
        x = np.asarray(x, dtype=np.float64)
        masks, h = [], x
        for layer in self.layers[:-1]:
            z = h @ layer.weight.data + layer.bias.data
            masks.append((z > 0).astype(np.float64))
            h = np.maximum(z, 0.0)
        head = self.layers[-1].weight
        g = ad.reshape(head, (1, head.shape[0])) * np.ones((len(x), 1))
        for layer, mask in zip(reversed(self.layers[:-1]), reversed(masks)):
            g = ad.matmul(g * mask, ad.transpose(layer.weight))
        return g


def origin_labels(n_source: int, n_target: int) -> np.ndarray:
    """0 for source rows, 1 for target rows."""
    return np.concatenate([np.zeros(n_source, dtype=np.intp), np.ones(n_target, dtype=np.intp)])


def discriminator_objective(disc: DiscriminatorNet, f_source: Tensor, f_target: Tensor,
                            weights: LossWeights, rng: np.random.Generator) -> tuple:
    """Loss the discriminator minimizes, plus a dict of scalar diagnostics.

    Softmax: cross-entropy on origin. Wasserstein: ``-L_D + gp_weight * penalty``.
    """
    if disc.kind == SOFTMAX:
        feats = ad.concat([f_source, f_target], axis=0)
        loss = softmax_discriminator_loss(disc(feats), origin_labels(len(f_source), len(f_target)))
        return loss, {"disc": loss.item()}
    l_d = wasserstein_critic_loss(disc(f_source), disc(f_target), weights)
    loss = -l_d
    info = {"disc": l_d.item()}
    if weights.gp_weight > 0:
        gp = gradient_penalty(disc, f_source, f_target, rng)
        loss = loss + gp * weights.gp_weight
        info["gp"] = gp.item()
    return loss, info


def adversarial_update(extractor, disc: DiscriminatorNet, x_source, x_target, weights: LossWeights,
                       opt_extractor: ad.Adam, opt_disc: ad.Adam, rng: np.random.Generator,
                       extra_loss=None) -> dict:
    """One joint min-max step through a gradient reversal layer.

    The discriminator descends its own loss; the extractor receives that loss's
    gradient negated and scaled by ``alpha``. ``extra_loss(features_source,
    features_target, x_source, x_target)`` may add non-adversarial extractor terms.
    """
    opt_extractor.zero_grad()
    opt_disc.zero_grad()
    f_s, f_t = _encode(extractor, x_source, rng), _encode(extractor, x_target, rng)
    total, info = discriminator_objective(
        disc, ad.gradient_reversal(f_s, weights.alpha), ad.gradient_reversal(f_t, weights.alpha),
        weights, rng)
    if extra_loss is not None:
        extra, extra_info = extra_loss(f_s, f_t, x_source, x_target)
        total = total + extra
        info.update(extra_info)
    total.backward()
    opt_disc.step()
    opt_extractor.step()
    return info


def _encode(extractor, x, rng):
    out = extractor(x) if not hasattr(extractor, "mu_head") else extractor(x, rng)
    return out[2] if isinstance(out, tuple) else out


def probe_accuracy(f_source: np.ndarray, f_target: np.ndarray, epochs: int = 200, batch_size: int = 256,
                   lr: float = 1e-3, seed: int = 0, test_fraction: float = 0.3) -> float:
    """Held-out origin accuracy of a freshly trained softmax discriminator on frozen features.

    Both domains are subsampled to equal size, so chance level is 0.5.
    """
    rng = np.random.default_rng(seed)
    n = min(len(f_source), len(f_target))
    fs = f_source[rng.choice(len(f_source), n, replace=False)]
    ft = f_target[rng.choice(len(f_target), n, replace=False)]
    x = np.concatenate([fs, ft])
    y = origin_labels(n, n)
    order = rng.permutation(2 * n)
    n_test = int(round(test_fraction * 2 * n))
    test, train = order[:n_test], order[n_test:]
    probe = DiscriminatorNet(SOFTMAX, n_in=x.shape[1], rng=rng)
    opt = ad.Adam(probe.parameters(), lr=lr)
    for _ in range(epochs):
        perm = rng.permutation(train)
        for k in range(0, len(perm), batch_size):
            b = perm[k:k + batch_size]
            opt.zero_grad()
            softmax_discriminator_loss(probe(x[b]), y[b]).backward()
            opt.step()
    pred = probe.probabilities(x[test]).argmax(axis=1)
    return float(np.mean(pred == y[test]))
