"""Gradient routing for the modality influence game.

Each modality i has an influence loss mipd_i; how encoder i reacts to the
other modalities' losses is a strategy choice encoded as a multiplier
k[i][j] in {-1, 0, +1} applied to grad(theta_i, mipd_j):

    collaborative   k[i][j] = +1          everyone helps every modality
    independent     k[i][j] = 1 if i == j each encoder minds its own loss
    greedy          k[i][i] = +1, else -1 maximize own influence, suppress rest

The fusion trunk always cooperates (multiplier +1 for every loss). Routing
backpropagates each loss exactly once and accumulates scaled gradients into
the parameter groups, so a greedy min-max step happens in a single update
with no alternating optimization phases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamGroup, Tensor
from .losses import mipd_loss
from .models import MultimodalModel, fused_forward_from_latents

STRATEGIES = ("collaborative", "independent", "greedy")


def subset_multiplier(strategy: str, i: int, subset: tuple[int, ...]) -> int:
    """Multiplier for encoder i's gradient from the loss of perturbed subset."""
    if strategy == "collaborative":
        return 1
    if strategy == "independent":
        return 1 if i in subset else 0
    if strategy == "greedy":
        return 1 if i in subset else -1
    raise ValueError(f"unknown strategy '{strategy}' (choose from {STRATEGIES})")


@dataclass(frozen=True)
class StrategyMatrix:
    """k[i][j]: multiplier on encoder i's gradient from modality j's loss."""

    k: np.ndarray
    fusion_k: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.k)
        fk = np.asarray(self.fusion_k)
        if k.ndim != 2 or k.shape[0] != k.shape[1]:
            raise ValueError("k must be a square matrix")
        if fk.shape != (k.shape[0],):
            raise ValueError("fusion_k must have one entry per modality")
        if not np.isin(k, (-1, 0, 1)).all() or not np.isin(fk, (-1, 0, 1)).all():
            raise ValueError("multipliers must be -1, 0 or +1")


def strategy_matrix(strategy: str, n_modalities: int, fusion_k=None) -> StrategyMatrix:
    k = np.array(
        [
            [subset_multiplier(strategy, i, (j,)) for j in range(n_modalities)]
            for i in range(n_modalities)
        ],
        dtype=np.int64,
    )
    fk = np.ones(n_modalities, dtype=np.int64) if fusion_k is None else np.asarray(fusion_k)
    return StrategyMatrix(k=k, fusion_k=fk)


def _role_targets(groups: list[ParamGroup]) -> tuple[dict[int, ParamGroup], ParamGroup | None]:
    encoders: dict[int, ParamGroup] = {}
    fusion = None
    for g in groups:
        if g.role.startswith("encoder-"):
            encoders[int(g.role.split("-")[1]) - 1] = g
        elif g.role == "fusion":
            fusion = g
    return encoders, fusion


def route_mipd_gradients(
    mipd_losses: list[Tensor],
    groups: list[ParamGroup],
    strategy: StrategyMatrix,
    scale: float = 1.0,
) -> None:
    """Accumulate strategy-scaled gradients of the per-modality losses.

    One backward sweep per loss; encoder i receives k[i][j] * scale * grad of
    loss j, the fusion group receives fusion_k[j] * scale * grad. Heads that
    the losses never touch are left alone.
    """
    encoders, fusion = _role_targets(groups)
    n = len(mipd_losses)
    if strategy.k.shape[0] != n:
        raise ValueError("strategy size does not match the number of losses")
    for j, loss_j in enumerate(mipd_losses):
        targets = [p for i in range(n) for p in encoders[i].params]
        if fusion is not None:
            targets += fusion.params
        grads = ad.gradients(loss_j, targets)
        pos = 0
        for i in range(n):
            mult = float(strategy.k[i, j]) * scale
            for p in encoders[i].params:
                g = grads[pos]
                pos += 1
                if mult == 0.0:
                    continue
                contrib = mult * g
                p.grad = contrib if p.grad is None else p.grad + contrib
        if fusion is not None:
            mult = float(strategy.fusion_k[j]) * scale
            for p in fusion.params:
                g = grads[pos]
                pos += 1
                if mult == 0.0:
                    continue
                contrib = mult * g
                p.grad = contrib if p.grad is None else p.grad + contrib


def route_subset_gradients(
    subset_losses: list[tuple[tuple[int, ...], Tensor]],
    groups: list[ParamGroup],
    strategy: str,
    scale: float = 1.0,
) -> None:
    """Subset generalization: the loss for perturbing subset S is routed with
    multiplier +1 to encoders inside S and the strategy's outside multiplier
    to the rest; fusion always gets +1."""
    encoders, fusion = _role_targets(groups)
    n = len(encoders)
    for subset, loss_s in subset_losses:
        targets = [p for i in range(n) for p in encoders[i].params]
        if fusion is not None:
            targets += fusion.params
        grads = ad.gradients(loss_s, targets)
        pos = 0
        for i in range(n):
            mult = float(subset_multiplier(strategy, i, subset)) * scale
            for p in encoders[i].params:
                g = grads[pos]
                pos += 1
                if mult == 0.0:
                    continue
                contrib = mult * g
                p.grad = contrib if p.grad is None else p.grad + contrib
        if fusion is not None:
            for p in fusion.params:
                g = grads[pos]
                pos += 1
                contrib = scale * g
                p.grad = contrib if p.grad is None else p.grad + contrib


def importance_scores(
    model: MultimodalModel,
    latents: list[Tensor],
    sigmas: list[np.ndarray],
    clean_probs: Tensor | None = None,
    counter=None,
) -> np.ndarray:
    """Per-modality influence: the negated permutation loss, in [0, ln 2].

    Values are exactly -mipd_loss(...) for each modality with the shared
    permutation draws.
    """
    if clean_probs is None:
        clean_probs = ad.softmax_rows(fused_forward_from_latents(model, latents, counter))
    out = []
    for i in range(model.n_modalities):
        loss = mipd_loss(model, latents, i, sigmas, clean_probs=clean_probs, counter=counter)
        out.append(-float(loss.data))
    return np.asarray(out)
