"""Loss functions for multimodal competition regularization.

The regularizer estimates each modality's influence on the fused prediction
by perturbing that modality and measuring the Jensen-Shannon divergence
between clean and perturbed predictive distributions:

    mipd_loss for modality i = -mean over draws and batch of
        JSD( P(y | all clean), P(y | modality i perturbed) )

so the loss lives in [-ln 2, 0] and minimizing it maximizes the modality's
influence. The supervised contrastive term aligns latents of same-label pairs
across modalities; the reconstruction term regenerates the (gradient-stopped)
concatenated latents from the fused class distribution.

``analytic_mipd_gradient_check`` validates the closed-form gradient of the
two-modality influence game: the backprop gradient of
mipd_1 - mipd_2 with respect to one encoder must match a weighted sum of
predictive score functions, with weights built from log-ratios of the clean,
perturbed and mixture distributions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import Mlp, MultimodalModel, fused_forward_from_latents

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12  # probabilities are clamped here inside KL logs
LN2 = float(np.log(2.0))


@dataclass
class McrConfig:
    """Weights and perturbation settings for the regularized objective."""

    lambda_uni: float = 1.0
    lambda_m: float = 1.0
    lambda_con: float = 0.1
    lambda_ceb: float = 0.01
    strategy: str = "greedy"
    perturbation: str = "permute-latent"
    n_samples: int = 4
    perturb_noise_std: float = 1.0
    temperature: float = 0.1
    subset_mode: str = "singletons"


@dataclass
class LossReport:
    """Scalar loss values for one batch or one epoch (means over batches).

    ``total`` is task + lambda_uni * sum(uni) + lambda_m * sum(mipd)
    + lambda_con * con + lambda_ceb * ceb, with NaN entries (terms a method
    does not compute) contributing zero.
    """

    task: float
    uni: list[float] = field(default_factory=list)
    mipd: list[float] = field(default_factory=list)
    con: float = float("nan")
    ceb: float = float("nan")
    total: float = float("nan")

    @staticmethod
    def compose(cfg: McrConfig, task, uni, mipd, con, ceb) -> "LossReport":
        def z(v):
            return 0.0 if np.isnan(v) else v

        total = (
            task
            + cfg.lambda_uni * sum(z(u) for u in uni)
            + cfg.lambda_m * sum(z(m) for m in mipd)
            + cfg.lambda_con * z(con)
            + cfg.lambda_ceb * z(ceb)
        )
        return LossReport(task=task, uni=list(uni), mipd=list(mipd), con=con, ceb=ceb, total=total)


def _validate_rows_are_distributions(arr: np.ndarray, name: str) -> None:
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-d (batch x classes)")
    neg = np.where(arr < -1e-12)
    if neg[0].size:
        raise ValueError(f"{name} row {int(neg[0][0])} has a negative entry")
    sums = arr.sum(axis=1)
    bad = np.where(np.abs(sums - 1.0) > 1e-8)[0]
    if bad.size:
        raise ValueError(f"{name} row {int(bad[0])} sums to {sums[bad[0]]:.12f}, not 1")


def _kl_rows(p: Tensor, m: Tensor) -> Tensor:
    # sum_y p * (log p - log m), rows; clamped so zero entries contribute ~0.
    lp = ad.log(ad.clip_min(p, PROB_FLOOR))
    lm = ad.log(ad.clip_min(m, PROB_FLOOR))
    return ad.tsum(ad.mul(p, ad.sub(lp, lm)), axis=1)


def jsd(p: Tensor, q: Tensor) -> Tensor:
    """Mean over the batch of JSD(p_row, q_row), in nats; bounded by ln 2.

    Rows must be probability distributions; violations raise with the row
    index rather than silently renormalizing.
    """
    p, q = ad._wrap(p), ad._wrap(q)
    if p.data.shape != q.data.shape:
        raise ValueError("jsd operands must share a shape")
    _validate_rows_are_distributions(p.data, "p")
    _validate_rows_are_distributions(q.data, "q")
    m = ad.mul(ad.add(p, q), 0.5)
    per_row = ad.mul(ad.add(_kl_rows(p, m), _kl_rows(q, m)), 0.5)
    return ad.tmean(per_row)


def jsd_per_row(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise JSD on plain arrays, for diagnostics that slice the batch."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("jsd operands must share a shape")
    _validate_rows_are_distributions(p, "p")
    _validate_rows_are_distributions(q, "q")
    m = 0.5 * (p + q)

    def kl(a):
        la = np.log(np.maximum(a, PROB_FLOOR))
        lm = np.log(np.maximum(m, PROB_FLOOR))
        return (a * (la - lm)).sum(axis=1)

    return 0.5 * (kl(p) + kl(q))


def cross_entropy(logits: Tensor, y: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    y = np.asarray(y)
    n, c = logits.data.shape
    if y.shape != (n,):
        raise ValueError("labels must be a vector matching the batch")
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    logp = ad.log_softmax_rows(logits)
    picked = ad.tsum(ad.mul(logp, Tensor(onehot)), axis=1)
    return ad.mul(ad.tmean(picked), -1.0)


def accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


def mipd_loss(
    model: MultimodalModel,
    latents: list[Tensor],
    i: int,
    sigmas: list[np.ndarray],
    clean_probs: Tensor | None = None,
    counter=None,
) -> Tensor:
    """Negative mean JSD response to permuting modality i's latent rows.

    ``clean_probs`` lets callers share the unperturbed fusion pass across
    modalities; when omitted it is computed (and counted) here.
    """
    if not sigmas:
        raise ValueError("mipd_loss needs at least one permutation")
    if clean_probs is None:
        clean_probs = ad.softmax_rows(fused_forward_from_latents(model, latents, counter))
    acc = None
    for sigma in sigmas:
        perturbed = list(latents)
        perturbed[i] = ad.permute_rows(latents[i], sigma)
        probs = ad.softmax_rows(fused_forward_from_latents(model, perturbed, counter))
        term = jsd(clean_probs, probs)
        acc = term if acc is None else ad.add(acc, term)
    return ad.mul(acc, -1.0 / len(sigmas))


def mipd_loss_from_draws(
    model: MultimodalModel,
    latents: list[Tensor],
    i: int,
    draws_i: list[Tensor],
    clean_probs: Tensor | None = None,
    counter=None,
) -> Tensor:
    """mipd_loss generalized to pre-drawn perturbed latents for modality i."""
    if not draws_i:
        raise ValueError("mipd_loss_from_draws needs at least one draw")
    if clean_probs is None:
        clean_probs = ad.softmax_rows(fused_forward_from_latents(model, latents, counter))
    acc = None
    for z in draws_i:
        perturbed = list(latents)
        perturbed[i] = z
        probs = ad.softmax_rows(fused_forward_from_latents(model, perturbed, counter))
        term = jsd(clean_probs, probs)
        acc = term if acc is None else ad.add(acc, term)
    return ad.mul(acc, -1.0 / len(draws_i))


def _normalize_rows(z: Tensor) -> Tensor:
    sq = ad.tsum(ad.mul(z, z), axis=1, keepdims=True)
    return ad.div(z, ad.sqrt(ad.clip_min(sq, 1e-30)))


def supervised_contrastive(z1: Tensor, z2: Tensor, y: np.ndarray, temperature: float = 0.1) -> Tensor:
    """Cross-modal supervised contrastive loss, symmetrized over directions.

    Per anchor i in one modality: -mean over same-label counterparts k of
    log softmax(<z1_i, z2_k> / temperature) over all candidates; latents are
    L2-normalized first. Anchors without any same-label counterpart are
    skipped with a warning; a batch where every anchor lacks positives, or a
    batch smaller than 2, is an error.
    """
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    y = np.asarray(y)
    n = z1.data.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    if z2.data.shape[0] != n or y.shape != (n,):
        raise ValueError("z1, z2 and y must agree on the batch size")

    pos = (y[:, None] == y[None, :]).astype(np.float64)
    counts = pos.sum(axis=1)
    valid = counts > 0
    if not valid.any():
        raise ValueError("no anchor has a same-label counterpart in this batch")
    if not valid.all():
        log.warning("contrastive: skipping %d anchors without positives", int((~valid).sum()))
    weights = np.zeros_like(pos)
    weights[valid] = pos[valid] / counts[valid, None]
    w = Tensor(weights / valid.sum())

    sims = ad.div(ad.matmul(_normalize_rows(z1), ad.transpose(_normalize_rows(z2))), temperature)
    fwd = ad.tsum(ad.mul(ad.log_softmax_rows(sims), w))
    bwd = ad.tsum(ad.mul(ad.log_softmax_rows(ad.transpose(sims)), ad.transpose(w)))
    return ad.mul(ad.add(fwd, bwd), -0.5)


def ceb_loss(latents: list[Tensor], fused_logits: Tensor, recon_head: Mlp) -> Tensor:
    """Mean squared error between the concatenated latents (gradient-stopped)
    and their reconstruction from the fused class distribution."""
    target = ad.concat_cols(latents).detach()
    pred = recon_head(ad.softmax_rows(fused_logits))
    diff = ad.sub(target, pred)
    return ad.tmean(ad.mul(diff, diff))


# closed-form gradient of the two-modality influence game ---------------------


def analytic_mipd_gradient_check(
    model: MultimodalModel,
    xs: list[Tensor],
    sigma1: np.ndarray,
    sigma2: np.ndarray,
) -> float:
    """Max abs discrepancy between backprop and the closed-form gradient.

    Both sides differentiate mipd_1 - mipd_2 (single shared permutation per
    modality) with respect to encoder 1's parameters. The closed-form side
    weighs per-sample, per-class score gradients by constant log-ratio
    factors: writing p for the clean prediction, p1 / p2 for the predictions
    with modality 1 / 2 perturbed, and m1 = (p + p2) / 2, m2 = (p + p1) / 2
    for the mixtures, the weights are

        clean term:      p  * log(m1 / m2)
        perturbed-1:     p1 * (log(p1 / m2) + 1)
        perturbed-2:   - p2 * (log(p2 / m1) + 1)

    summed against the corresponding log-probability gradients and scaled by
    -1 / (2 B). Probabilities are assumed to be away from the clamp floor.
    """
    if model.n_modalities != 2:
        raise ValueError("the closed-form check is defined for two modalities")
    theta1 = model.encoders[0].params()

    def forward_probs():
        latents = [enc(x) for enc, x in zip(model.encoders, xs)]
        clean = ad.softmax_rows(fused_forward_from_latents(model, latents))
        pert1 = [ad.permute_rows(latents[0], sigma1), latents[1]]
        pert2 = [latents[0], ad.permute_rows(latents[1], sigma2)]
        p1 = ad.softmax_rows(fused_forward_from_latents(model, pert1))
        p2 = ad.softmax_rows(fused_forward_from_latents(model, pert2))
        return clean, p1, p2

    # backprop side: mipd_1 - mipd_2 = jsd(clean, p2) - jsd(clean, p1)
    clean, p1, p2 = forward_probs()
    diff = ad.sub(jsd(clean, p2), jsd(clean, p1))
    g_auto = ad.gradients(diff, theta1)

    # closed-form side on a fresh graph; weights are constants built from the
    # realized distributions.
    pd, p1d, p2d = clean.data, p1.data, p2.data
    m1 = 0.5 * (pd + p2d)
    m2 = 0.5 * (pd + p1d)
    w_clean = pd * (np.log(m1) - np.log(m2))
    w_p1 = p1d * (np.log(p1d) - np.log(m2) + 1.0)
    w_p2 = p2d * (np.log(p2d) - np.log(m1) + 1.0)

    clean_f, p1_f, p2_f = forward_probs()
    weighted = ad.add(
        ad.sub(
            ad.tsum(ad.mul(ad.log(clean_f), Tensor(w_clean))),
            ad.tsum(ad.mul(ad.log(p2_f), Tensor(w_p2))),
        ),
        ad.tsum(ad.mul(ad.log(p1_f), Tensor(w_p1))),
    )
    batch = xs[0].data.shape[0]
    g_ana = ad.gradients(ad.mul(weighted, -0.5 / batch), theta1)

    return max(float(np.max(np.abs(a - b))) for a, b in zip(g_auto, g_ana))
