"""Assembly, training and evaluation of the alignment architectures and HELM baselines."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .discriminators import SOFTMAX, WASSERSTEIN, DiscriminatorNet, discriminator_objective
from .elm import (GAMMA, PERCENTILE, Helm, OneClassElm, Threshold, detect, threshold_from_residuals,
                  train_helm_baseline, train_one_class)
from .errors import ConfigError, DataError, DivergenceError
from .extractors import Decoder, MlpEncoder, VariationalEncoder
from .losses import LossWeights, homothety_batch, homothety_loss, kl_loss, optimal_eta, \
    optimal_eta_absolute, reconstruction_loss

BUNDLE_VERSION = "fleetalign-bundle/1"

# kind -> (variational autoencoder, homothety loss, discriminator kind)
KINDS = {
    "BetaVae": (True, False, None),
    "BetaVaeDs": (True, False, SOFTMAX),
    "BetaVaeDw": (True, False, WASSERSTEIN),
    "HFA": (False, True, None),
    "AFAs": (False, False, SOFTMAX),
    "AFAw": (False, False, WASSERSTEIN),
    "HAFAs": (False, True, SOFTMAX),
    "HAFAw": (False, True, WASSERSTEIN),
    "HELM": None,
    "TwoMonthHELM": None,
}
ALIGNMENT_KINDS = tuple(k for k, v in KINDS.items() if v is not None)


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: str
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 200
    batch_size: int = 1000
    lr: float = 1e-4
    seed: int = 0
    hidden: int = 10
    n_features: int = 10
    elm_hidden: int = 50
    elm_ridge: float = 1e-3
    elm_activation: str = "sigmoid"
    gamma: float = GAMMA
    percentile: float = PERCENTILE
    vae_inference: str = "mu"
    homothety_absolute: bool = False
    helm_sizes: tuple = (10,)
    helm_ridge: float = 1e-3
    elm_input_scaling: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown architecture kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        if self.disc_kind != WASSERSTEIN and self.weights.delta_w != 1.0:
            raise ConfigError(f"delta_w applies to Wasserstein kinds only, not {self.kind}")
        if self.vae_inference not in ("mu", "sample"):
            raise ConfigError("vae_inference must be 'mu' or 'sample'")
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")

    @property
    def is_helm(self) -> bool:
        return KINDS[self.kind] is None

    @property
    def uses_vae(self) -> bool:
        return not self.is_helm and KINDS[self.kind][0]

    @property
    def uses_homothety(self) -> bool:
        return not self.is_helm and KINDS[self.kind][1]

    @property
    def disc_kind(self):
        return None if self.is_helm else KINDS[self.kind][2]

    def loss_terms(self) -> set:
        terms = set()
        if self.uses_vae:
            terms |= {"rec", "kl"}
        if self.uses_homothety:
            terms.add("homothety")
        if self.disc_kind:
            terms.add("disc")
        return terms

    def to_dict(self) -> dict:
        d = asdict(self)
        d["helm_sizes"] = list(self.helm_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        if "helm_sizes" in d:
            d["helm_sizes"] = tuple(d["helm_sizes"])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Assembly:
    spec: ArchitectureSpec
    encoder: object = None
    decoder: Decoder | None = None
    discriminator: DiscriminatorNet | None = None
    opt_extractor: ad.Adam | None = None
    opt_disc: ad.Adam | None = None

    def extractor_parameters(self) -> list:
        params = [] if self.encoder is None else self.encoder.parameters()
        if self.decoder is not None:
            params += self.decoder.parameters()
        return params


def build(spec: ArchitectureSpec, n_in: int) -> Assembly:
    asm = Assembly(spec)
    if spec.is_helm:
        return asm
    rng = np.random.default_rng([spec.seed, 1])
    if spec.uses_vae:
        asm.encoder = VariationalEncoder(n_in, spec.hidden, spec.n_features, rng)
        asm.decoder = Decoder(spec.n_features, spec.hidden, n_in, rng)
    else:
        asm.encoder = MlpEncoder(n_in, spec.hidden, spec.n_features, rng)
    if spec.disc_kind:
        asm.discriminator = DiscriminatorNet(spec.disc_kind, spec.n_features, rng=rng)
        asm.opt_disc = ad.Adam(asm.discriminator.parameters(), lr=spec.lr)
    asm.opt_extractor = ad.Adam(asm.extractor_parameters(), lr=spec.lr)
    return asm


@dataclass
class TrainedModel:
    spec: ArchitectureSpec
    encoder: object
    decoder: object
    discriminator: object
    classifier: object
    threshold: Threshold
    history: dict = field(default_factory=dict)
    steps: int = 0

    def features(self, x) -> np.ndarray:
        """Extractor output (HELM: autoencoder codes)."""
        x = np.asarray(x, dtype=np.float64)
        if self.spec.is_helm:
            return self.classifier.features(x)
        if self.spec.uses_vae and self.spec.vae_inference == "sample":
            return self.encoder(x, np.random.default_rng([self.spec.seed, 3]))[2].data
        return self.encoder.features(x)

    def residuals(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.spec.is_helm:
            return self.classifier.residuals(x)
        return self.classifier.residuals(self.features(x))

    def detect(self, x):
        return detect(self, self.threshold, x)


def _as_rows(x, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise DataError(f"{what}: need a nonempty 2-d array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError(f"{what}: non-finite values")
    return x


def _alignment_terms(asm: Assembly, xs: np.ndarray, xt: np.ndarray, rng: np.random.Generator):
    """Forward pass of one balanced step: (total loss, per-term values)."""
    spec = asm.spec
    ns = len(xs)
    x = np.concatenate([xs, xt])
    terms = {}
    total = None
    if spec.uses_vae:
        mu, logvar, f = asm.encoder(x, rng)
        rec = reconstruction_loss(x, asm.decoder(f))
        kl = kl_loss(mu, logvar)
        total = rec + kl * spec.weights.beta
        terms["rec"], terms["kl"] = rec.item(), kl.item()
    else:
        f = asm.encoder(x)
    f_s = ad.slice_rows(f, 0, ns)
    f_t = ad.slice_rows(f, ns, len(x))
    if spec.uses_homothety:
        batch = homothety_batch([(xs, f_s), (xt, f_t)], rng)
        eta = optimal_eta_absolute(batch) if spec.homothety_absolute else optimal_eta(batch)
        lh = homothety_loss(batch, eta, absolute=spec.homothety_absolute)
        total = lh if total is None else total + lh
        terms["homothety"], terms["eta"] = lh.item(), eta
    if asm.discriminator is not None:
        a = spec.weights.alpha
        dl, info = discriminator_objective(asm.discriminator, ad.gradient_reversal(f_s, a),
                                           ad.gradient_reversal(f_t, a), spec.weights, rng)
        total = dl if total is None else total + dl
        terms.update(info)
    return total, terms


def train_step(asm: Assembly, xs: np.ndarray, xt: np.ndarray, rng: np.random.Generator) -> dict:
    asm.opt_extractor.zero_grad()
    if asm.opt_disc is not None:
        asm.opt_disc.zero_grad()
    total, terms = _alignment_terms(asm, xs, xt, rng)
    total.backward()
    asm.opt_extractor.step()
    if asm.opt_disc is not None:
        asm.opt_disc.step()
    return terms


def steps_per_epoch(n_source: int, n_target: int, batch_size: int) -> int:
    return math.ceil(max(n_source, n_target) / (batch_size // 2))


def _fit_extractor(asm: Assembly, xs: np.ndarray, xt: np.ndarray) -> tuple:
    spec = asm.spec
    rng = np.random.default_rng([spec.seed, 2])
    half = spec.batch_size // 2
    large_is_source = len(xs) >= len(xt)
    n_large, n_small = (len(xs), len(xt)) if large_is_source else (len(xt), len(xs))
    n_steps = steps_per_epoch(len(xs), len(xt), spec.batch_size)
    history: dict = {}
    steps = 0
    for _ in range(spec.epochs):
        perm = rng.permutation(n_large)
        sums: dict = {}
        for k in range(n_steps):
            big = perm[k * half:(k + 1) * half]
            small = rng.integers(0, n_small, size=len(big))
            bs, bt = (big, small) if large_is_source else (small, big)
            try:
                terms = train_step(asm, xs[bs], xt[bt], rng)
            except (ad.NonFiniteError, FloatingPointError) as exc:
                raise DivergenceError(f"{spec.kind}: training diverged at step {steps}: {exc}") from exc
            steps += 1
            for name, v in terms.items():
                sums[name] = sums.get(name, 0.0) + v
        for name, v in sums.items():
            history.setdefault(name, []).append(v / n_steps)
    return history, steps


def fit(asm: Assembly, source_train, target_train, source_val, target_val) -> TrainedModel:
    """Train the feature extractor (if any), then the one-class ELM and its threshold.

    The threshold comes from the validation rows of both domains, which never
    enter the extractor or ELM training.
    """
    spec = asm.spec
    xt = _as_rows(target_train, "target_train")
    vt = _as_rows(target_val, "target_val")
    elm_seed = int(np.random.default_rng([spec.seed, 4]).integers(2**31))
    if spec.kind == "TwoMonthHELM":
        helm = train_helm_baseline(xt, spec.helm_sizes, (spec.helm_ridge,), spec.elm_hidden,
                                   spec.elm_ridge, elm_seed, spec.elm_activation, spec.elm_input_scaling)
        thr = threshold_from_residuals(helm.residuals(vt), spec.gamma, spec.percentile)
        return TrainedModel(spec, None, None, None, helm, thr)
    xs = _as_rows(source_train, "source_train")
    vs = _as_rows(source_val, "source_val")
    val = np.concatenate([vs, vt])
    if spec.kind == "HELM":
        helm = train_helm_baseline(np.concatenate([xs, xt]), spec.helm_sizes, (spec.helm_ridge,),
                                   spec.elm_hidden, spec.elm_ridge, elm_seed, spec.elm_activation, spec.elm_input_scaling)
        thr = threshold_from_residuals(helm.residuals(val), spec.gamma, spec.percentile)
        return TrainedModel(spec, None, None, None, helm, thr)

    history, steps = _fit_extractor(asm, xs, xt)
    model = TrainedModel(spec, asm.encoder, asm.decoder, asm.discriminator, None, None, history, steps)
    f_train = model.features(np.concatenate([xs, xt]))
    try:
        model.classifier = train_one_class(f_train, spec.elm_hidden, spec.elm_ridge, elm_seed,
                                           spec.elm_activation, spec.elm_input_scaling)
    except DataError as exc:
        raise DivergenceError(f"{spec.kind}: {exc}") from exc
    model.threshold = threshold_from_residuals(model.residuals(val), spec.gamma, spec.percentile)
    return model


# ------------------------------------------------------------------ evaluation
@dataclass
class PairResult:
    source_id: str
    target_id: str
    kind: str
    fpr: float
    fault_detected: bool
    aligned_at_5: bool
    aligned_at_1: bool
    runtime: float = 0.0
    seed: int = 0
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: TrainedModel, target_healthy_test, target_faulty_test, source_id: str = "",
             target_id: str = "", cutoffs=(5.0, 1.0)) -> PairResult:
    """FPR (percent) on the healthy test rows, alarm on the faulty rows, aligned flags."""
    healthy = np.asarray(target_healthy_test, dtype=np.float64)
    if len(healthy) == 0:
        raise DataError("empty healthy-test segment")
    flags = model.residuals(healthy) > model.threshold.value
    fpr = 100.0 * float(np.mean(flags))
    faulty = np.asarray(target_faulty_test, dtype=np.float64)
    detected = model.detect(faulty).alarm if len(faulty) else False
    hi, lo = cutoffs
    return PairResult(source_id, target_id, model.spec.kind, fpr, bool(detected),
                      bool(detected and fpr < hi), bool(detected and fpr < lo), seed=model.spec.seed)


def train_pair(spec: ArchitectureSpec, source_train, target_train, source_val, target_val,
               healthy_test, faulty_test, source_id: str = "", target_id: str = "") -> tuple:
    """build + fit + evaluate; returns ``(model, result)`` with the runtime recorded."""
    t0 = time.perf_counter()
    asm = build(spec, np.asarray(target_train).shape[1])
    model = fit(asm, source_train, target_train, source_val, target_val)
    result = evaluate(model, healthy_test, faulty_test, source_id, target_id)
    result.runtime = time.perf_counter() - t0
    return model, result


# --------------------------------------------------------------- serialization
def save_bundle(model: TrainedModel, path) -> None:
    clf = model.classifier
    if isinstance(clf, Helm):
        clf_state = {"type": "helm",
                     "autoencoders": [{"weight": ae.hidden.weight.tolist(), "bias": ae.hidden.bias.tolist(),
                                       "activation": ae.hidden.activation, "beta": ae.beta.tolist()}
                                      for ae in clf.autoencoders],
                     "classifier": clf.classifier.state()}
    else:
        clf_state = {"type": "one_class_elm", **clf.state()}
    bundle = {
        "version": BUNDLE_VERSION,
        "spec": model.spec.to_dict(),
        "encoder": model.encoder.state() if model.encoder is not None else None,
        "decoder": model.decoder.state() if model.decoder is not None else None,
        "discriminator": model.discriminator.state() if model.discriminator is not None else None,
        "classifier": clf_state,
        "threshold": asdict(model.threshold),
        "history": model.history,
        "steps": model.steps,
    }
    with open(path, "w") as fh:
        json.dump(bundle, fh)


def load_bundle(path, n_in: int | None = None) -> TrainedModel:
    from .elm import ElmAutoencoder, RandomLayer

    with open(path) as fh:
        b = json.load(fh)
    if b.get("version") != BUNDLE_VERSION:
        raise DataError(f"{path}: unsupported bundle version {b.get('version')!r}")
    spec = ArchitectureSpec.from_dict(b["spec"])
    encoder = decoder = disc = None
    if b["encoder"] is not None:
        n_in = n_in or b["encoder"]["layers"][0]["shape"][0]
        asm = build(spec, n_in)
        encoder, decoder, disc = asm.encoder, asm.decoder, asm.discriminator
        encoder.load_state(b["encoder"])
        if decoder is not None:
            decoder.load_state(b["decoder"])
        if disc is not None:
            disc.load_state(b["discriminator"])
    c = b["classifier"]
    if c["type"] == "helm":
        aes = [ElmAutoencoder(RandomLayer(np.asarray(a["weight"]), np.asarray(a["bias"]), a["activation"]),
                              np.asarray(a["beta"])) for a in c["autoencoders"]]
        clf = Helm(aes, OneClassElm.from_state(c["classifier"]))
    else:
        clf = OneClassElm.from_state(c)
    return TrainedModel(spec, encoder, decoder, disc, clf, Threshold(**b["threshold"]), b["history"], b["steps"])
