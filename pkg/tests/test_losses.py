"""Loss values against direct-summation references, gradients against
finite differences, and the documented range/validation behavior."""

import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mcrlab.autodiff as ad
from mcrlab.autodiff import Tensor
from mcrlab.losses import (
    LN2,
    LossReport,
    McrConfig,
    analytic_mipd_gradient_check,
    ceb_loss,
    cross_entropy,
    jsd,
    jsd_per_row,
    mipd_loss,
    supervised_contrastive,
)
from mcrlab.models import forward
from mcrlab.perturb import sample_permutations

import oracles
from conftest import toy_batch, toy_model
from oracles import fd_gradients, rel_err


def _rand_dist(rng, n, c):
    p = rng.gamma(1.0, size=(n, c))
    return p / p.sum(axis=1, keepdims=True)


def test_cross_entropy_matches_direct_sum():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(7, 4)) * 3
    y = rng.integers(0, 4, size=7)
    got = cross_entropy(Tensor(logits), y).item()
    assert got == pytest.approx(oracles.cross_entropy(logits, y), rel=1e-12)


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    y = rng.integers(0, 3, size=5)
    got = ad.gradients(cross_entropy(logits, y), [logits])
    want = fd_gradients(lambda: cross_entropy(logits, y).item(), [logits.data])
    assert rel_err(want, got) < 1e-8


def test_cross_entropy_rejects_bad_labels():
    logits = Tensor(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        cross_entropy(logits, np.array([0, 1, 2]))
    with pytest.raises(ValueError):
        cross_entropy(logits, np.array([0, 1]))


def test_jsd_matches_loop_reference():
    rng = np.random.default_rng(2)
    p, q = _rand_dist(rng, 6, 5), _rand_dist(rng, 6, 5)
    assert jsd(Tensor(p), Tensor(q)).item() == pytest.approx(oracles.jsd(p, q), rel=1e-12)
    assert np.allclose(jsd_per_row(p, q).mean(), jsd(Tensor(p), Tensor(q)).item())


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6), c=st.integers(2, 6))
def test_jsd_is_a_bounded_symmetric_divergence(seed, n, c):
    rng = np.random.default_rng(seed)
    p, q = _rand_dist(rng, n, c), _rand_dist(rng, n, c)
    v = jsd(Tensor(p), Tensor(q)).item()
    assert 0.0 <= v <= LN2 + 1e-12
    assert v == pytest.approx(jsd(Tensor(q), Tensor(p)).item(), abs=1e-12)
    assert jsd(Tensor(p), Tensor(p)).item() == pytest.approx(0.0, abs=1e-12)


def test_jsd_hits_ln2_on_disjoint_supports():
    p = np.array([[1.0, 0.0]])
    q = np.array([[0.0, 1.0]])
    assert jsd(Tensor(p), Tensor(q)).item() == pytest.approx(LN2, abs=1e-9)


def test_jsd_rejects_malformed_rows():
    good = np.array([[0.5, 0.5]])
    with pytest.raises(ValueError, match="negative"):
        jsd(Tensor(np.array([[1.5, -0.5]])), Tensor(good))
    with pytest.raises(ValueError, match="sums to"):
        jsd(Tensor(np.array([[0.9, 0.9]])), Tensor(good))
    with pytest.raises(ValueError, match="shape"):
        jsd(Tensor(good), Tensor(np.array([[0.2, 0.3, 0.5]])))


def test_jsd_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    logits_p = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    q = _rand_dist(rng, 4, 3)

    def loss_t():
        return jsd(ad.softmax_rows(logits_p), Tensor(q))

    got = ad.gradients(loss_t(), [logits_p])
    want = fd_gradients(lambda: loss_t().item(), [logits_p.data])
    assert rel_err(want, got) < 1e-7


def test_mipd_loss_range_and_importance_sign():
    model = toy_model(seed=4)
    rng = np.random.default_rng(4)
    xs, _ = toy_batch(rng)
    latents = [enc(Tensor(x)) for enc, x in zip(model.encoders, xs)]
    sigmas = sample_permutations(6, 3, rng)
    for i in range(2):
        v = mipd_loss(model, latents, i, sigmas).item()
        assert -LN2 - 1e-12 <= v <= 0.0


def test_mipd_loss_shared_clean_probs_is_value_neutral():
    model = toy_model(seed=5)
    rng = np.random.default_rng(5)
    xs, _ = toy_batch(rng)
    latents = [enc(Tensor(x)) for enc, x in zip(model.encoders, xs)]
    sigmas = sample_permutations(6, 2, rng)
    from mcrlab.models import fused_forward_from_latents

    clean = ad.softmax_rows(fused_forward_from_latents(model, latents))
    a = mipd_loss(model, latents, 0, sigmas).item()
    b = mipd_loss(model, latents, 0, sigmas, clean_probs=clean).item()
    assert a == pytest.approx(b, abs=1e-15)


def test_mipd_gradient_matches_finite_differences():
    model = toy_model(seed=6)
    rng = np.random.default_rng(6)
    xs, _ = toy_batch(rng)
    sigmas = sample_permutations(6, 2, rng)
    params = model.encoders[0].params() + model.fusion.params()

    def loss_t():
        latents = [enc(Tensor(x)) for enc, x in zip(model.encoders, xs)]
        return mipd_loss(model, latents, 0, sigmas)

    got = ad.gradients(loss_t(), params)
    want = fd_gradients(lambda: loss_t().item(), [p.data for p in params])
    assert rel_err(want, got) < 1e-6


def test_equilibrium_identity_on_toy_models():
    worst = 0.0
    for seed in range(5):
        model = toy_model(seed=seed)
        rng = np.random.default_rng(seed)
        xs, _ = toy_batch(rng)
        sigma1, sigma2 = sample_permutations(6, 2, rng)
        xs_t = [Tensor(x) for x in xs]
        worst = max(worst, analytic_mipd_gradient_check(model, xs_t, sigma1, sigma2))
    assert worst < 1e-6


def test_contrastive_matches_loop_reference():
    rng = np.random.default_rng(7)
    z1, z2 = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    y = rng.integers(0, 3, size=8)
    got = supervised_contrastive(Tensor(z1), Tensor(z2), y, temperature=0.2).item()
    assert got == pytest.approx(oracles.contrastive(z1, z2, y, 0.2), rel=1e-10)


def test_contrastive_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    z1 = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    z2 = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    y = rng.integers(0, 2, size=6)

    def loss_t():
        return supervised_contrastive(z1, z2, y, temperature=0.5)

    got = ad.gradients(loss_t(), [z1, z2])
    want = fd_gradients(lambda: loss_t().item(), [z1.data, z2.data])
    assert rel_err(want, got) < 1e-7


def test_contrastive_counts_self_as_counterpart(caplog):
    z1 = Tensor(np.eye(3))
    z2 = Tensor(np.eye(3))
    y = np.array([0, 0, 1])  # the y=1 anchor pairs with its own other-modality row
    with caplog.at_level(logging.WARNING):
        supervised_contrastive(z1, z2, y, temperature=1.0)
    assert not any("skipping" in r.message for r in caplog.records)


def test_contrastive_input_validation():
    z = Tensor(np.zeros((1, 2)))
    with pytest.raises(ValueError, match="at least 2"):
        supervised_contrastive(z, z, np.array([0]))
    z = Tensor(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="temperature"):
        supervised_contrastive(z, z, np.array([0, 0]), temperature=0.0)
    with pytest.raises(ValueError, match="batch size"):
        supervised_contrastive(z, Tensor(np.zeros((3, 2))), np.array([0, 0]))


def test_ceb_loss_matches_manual_mse():
    model = toy_model(seed=9)
    rng = np.random.default_rng(9)
    xs, _ = toy_batch(rng)
    res = forward(model, [Tensor(x) for x in xs])
    got = ceb_loss(res.latents, res.fused_logits, model.recon_head).item()

    cat = np.concatenate([z.data for z in res.latents], axis=1)
    probs = oracles.softmax(res.fused_logits.data)
    state = model.state_dict()
    recon = oracles.mlp_forward(
        probs, [(state[f"recon_head.{i}.W"], state[f"recon_head.{i}.b"]) for i in range(2)], "tanh"
    )
    assert got == pytest.approx(float(((cat - recon) ** 2).mean()), rel=1e-12)


def test_ceb_target_carries_no_gradient():
    """With constant logits the only path to the latents is the stopped
    target, so the latents must receive exactly zero."""
    model = toy_model(seed=10)
    z1 = Tensor(np.random.default_rng(10).normal(size=(4, 4)), requires_grad=True)
    z2 = Tensor(np.random.default_rng(11).normal(size=(4, 4)), requires_grad=True)
    logits = Tensor(np.random.default_rng(12).normal(size=(4, 3)))
    grads = ad.gradients(ceb_loss([z1, z2], logits, model.recon_head), [z1, z2])
    assert all(np.allclose(g, 0.0) for g in grads)


def test_loss_report_compose_treats_nan_terms_as_zero():
    cfg = McrConfig(lambda_uni=2.0, lambda_m=1.0, lambda_con=0.5, lambda_ceb=0.1)
    rep = LossReport.compose(
        cfg, task=1.0, uni=[0.5, float("nan")], mipd=[-0.1, -0.2], con=float("nan"), ceb=4.0
    )
    assert rep.total == pytest.approx(1.0 + 2.0 * 0.5 + 1.0 * (-0.3) + 0.1 * 4.0)
    assert np.isnan(rep.con) and rep.uni[0] == 0.5
