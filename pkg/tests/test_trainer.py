from types import SimpleNamespace

import numpy as np
import pytest

from fleetalign.elm import Threshold, detect
from fleetalign.errors import ConfigError, DataError, DivergenceError
from fleetalign.losses import LossWeights
from fleetalign.trainer import (ALIGNMENT_KINDS, KINDS, ArchitectureSpec, build, evaluate, fit, load_bundle,
                                save_bundle, steps_per_epoch, train_pair)


def _domains(seed=0, n_source=300, n_target=120, width=6, shift=0.0):
    rng = np.random.default_rng(seed)
    mix = rng.normal(size=(2, width))
    xs = rng.normal(size=(n_source, 2)) @ mix + 0.1 * rng.normal(size=(n_source, width))
    xt = rng.normal(size=(n_target, 2)) @ mix + 0.1 * rng.normal(size=(n_target, width)) + shift
    return xs, xt


def _small(kind, **kw):
    base = dict(epochs=2, batch_size=64, lr=1e-3, hidden=6, n_features=4, elm_hidden=20)
    base.update(kw)
    return ArchitectureSpec(kind, **base)


@pytest.mark.parametrize("kind,terms,disc", [
    ("HFA", {"homothety"}, None),
    ("AFAs", {"disc"}, "softmax"),
    ("AFAw", {"disc"}, "wasserstein"),
    ("HAFAs", {"homothety", "disc"}, "softmax"),
    ("HAFAw", {"homothety", "disc"}, "wasserstein"),
    ("BetaVae", {"rec", "kl"}, None),
    ("BetaVaeDs", {"rec", "kl", "disc"}, "softmax"),
    ("BetaVaeDw", {"rec", "kl", "disc"}, "wasserstein"),
    ("HELM", set(), None),
    ("TwoMonthHELM", set(), None),
])
def test_kind_wiring(kind, terms, disc):
    spec = ArchitectureSpec(kind)
    assert spec.loss_terms() == terms
    assert spec.disc_kind == disc
    asm = build(spec, 24)
    assert (asm.discriminator is None) == (disc is None)
    assert (asm.decoder is not None) == spec.uses_vae
    assert (asm.encoder is None) == spec.is_helm


def test_alignment_kinds_are_the_eight_trained_architectures():
    assert len(ALIGNMENT_KINDS) == 8 and set(KINDS) - set(ALIGNMENT_KINDS) == {"HELM", "TwoMonthHELM"}


def test_unknown_kind_lists_valid_kinds():
    with pytest.raises(ConfigError, match="HAFAs"):
        ArchitectureSpec("HAFA")


@pytest.mark.parametrize("kind", ["HAFAs", "AFAs", "BetaVaeDs", "HFA", "HELM"])
def test_delta_w_rejected_for_non_wasserstein_kinds(kind):
    with pytest.raises(ConfigError):
        ArchitectureSpec(kind, LossWeights(delta_w=2.0))


def test_delta_w_accepted_for_wasserstein_kinds():
    assert ArchitectureSpec("HAFAw", LossWeights(delta_w=2.0)).weights.delta_w == 2.0


def test_spec_dict_round_trip():
    spec = ArchitectureSpec("HAFAw", LossWeights(beta=0.5, alpha=0.2, delta_w=3.0), helm_sizes=(8, 4))
    assert ArchitectureSpec.from_dict(spec.to_dict()) == spec


def test_steps_per_epoch():
    assert steps_per_epoch(1000, 100, 1000) == 2
    assert steps_per_epoch(1001, 100, 1000) == 3
    assert steps_per_epoch(10, 900, 100) == 18


@pytest.mark.parametrize("kind", ALIGNMENT_KINDS)
def test_fit_runs_loop_contract(kind):
    xs, xt = _domains()
    spec = _small(kind, epochs=3)
    model = fit(build(spec, 6), xs, xt, xs[:30], xt[:30])
    assert model.steps == 3 * steps_per_epoch(300, 120, 64)
    assert set(model.history) >= spec.loss_terms()
    assert all(len(v) == 3 for v in model.history.values())
    assert model.threshold.value > 0


def test_fit_is_deterministic_for_a_seed():
    xs, xt = _domains()
    a = fit(build(_small("HAFAs", seed=7), 6), xs, xt, xs[:30], xt[:30])
    b = fit(build(_small("HAFAs", seed=7), 6), xs, xt, xs[:30], xt[:30])
    assert a.history == b.history
    assert a.threshold == b.threshold


def test_threshold_uses_combined_validation_residuals():
    xs, xt = _domains()
    model = fit(build(_small("HFA"), 6), xs, xt, xs[:30], xt[:40])
    res = model.residuals(np.concatenate([xs[:30], xt[:40]]))
    assert model.threshold.value == pytest.approx(1.5 * np.percentile(res, 99.5), rel=1e-12)


def test_beta_trades_reconstruction_for_kl():
    xs, xt = _domains()
    rec = {}
    for beta in (0.1, 10.0):
        m = fit(build(_small("BetaVae", epochs=15, weights=LossWeights(beta=beta)), 6), xs, xt, xs[:30], xt[:30])
        rec[beta] = m.history["rec"][-1]
    assert rec[0.1] <= rec[10.0]


def test_helm_baselines_train_without_extractor():
    xs, xt = _domains()
    pooled = fit(build(ArchitectureSpec("HELM"), 6), xs, xt, xs[:30], xt[:30])
    short = fit(build(ArchitectureSpec("TwoMonthHELM"), 6), None, xt, None, xt[:30])
    assert pooled.steps == short.steps == 0
    assert pooled.features(xt).shape == (120, 10)
    assert short.residuals(xt).shape == (120,)


def test_divergence_is_reported():
    xs, xt = _domains()
    spec = _small("HFA")
    with pytest.raises(DivergenceError):
        fit(build(spec, 6), xs * 1e200, xt * 1e200, xs[:30], xt[:30])


def _stub(healthy_res, faulty_res, thr=1.0):
    """Model whose residuals are read from row 0 of the input."""
    m = SimpleNamespace(spec=ArchitectureSpec("HFA"), threshold=Threshold(1.5, 99.5, thr))
    m.residuals = lambda x: np.asarray(x)[:, 0]
    m.detect = lambda x: detect(m, m.threshold, x)
    return m, np.c_[healthy_res], np.c_[faulty_res]


def test_evaluate_ideal_separation():
    m, h, f = _stub([0.1] * 20, [2.0, 2.0, 2.0])
    r = evaluate(m, h, f)
    assert (r.fpr, r.fault_detected, r.aligned_at_5, r.aligned_at_1) == (0.0, True, True, True)


def test_evaluate_isolated_exceedances_are_not_a_detection():
    m, h, f = _stub([0.1] * 20, [2.0, 0.0, 2.0, 0.0, 2.0])
    r = evaluate(m, h, f)
    assert not r.fault_detected and not r.aligned_at_5


def test_evaluate_fpr_of_exactly_five_percent_is_not_aligned():
    m, h, f = _stub([2.0] + [0.1] * 19, [2.0, 2.0])
    r = evaluate(m, h, f)
    assert r.fpr == 5.0
    assert r.fault_detected and not r.aligned_at_5 and not r.aligned_at_1


def test_evaluate_requires_healthy_rows():
    m, _, f = _stub([], [2.0, 2.0])
    with pytest.raises(DataError, match="healthy"):
        evaluate(m, np.zeros((0, 1)), f)


@pytest.mark.parametrize("kind", ["HAFAw", "BetaVaeDs", "HELM", "TwoMonthHELM"])
def test_bundle_round_trip(tmp_path, kind):
    xs, xt = _domains()
    spec = _small(kind) if kind in ALIGNMENT_KINDS else ArchitectureSpec(kind)
    model, result = train_pair(spec, xs, xt, xs[:30], xt[:30], xt[:50], xt[50:] + 5, "s", "t")
    save_bundle(model, tmp_path / "m.json")
    back = load_bundle(tmp_path / "m.json")
    np.testing.assert_array_equal(back.residuals(xt), model.residuals(xt))
    assert back.threshold == model.threshold and back.spec == model.spec
    assert result.source_id == "s" and result.runtime > 0
