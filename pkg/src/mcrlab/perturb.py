"""Perturbation sampling for the mutual-information surrogate.

The default kind permutes latent rows within the batch, which reuses the
clean encoder pass and only spends extra fusion passes. Input-space kinds
(noise, zero-mask) re-encode the perturbed inputs and therefore pay encoder
passes per draw; CostCounter makes those claims checkable as exact integers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import MultimodalModel

KINDS = ("permute-latent", "noise-latent", "noise-input", "zeromask-input")
LATENT_KINDS = ("permute-latent", "noise-latent")


@dataclass
class CostCounter:
    """Per-step forward-pass tally, in units of sample passes (a batch of B
    counts B). ``encoder_passes`` has one slot per modality."""

    encoder_passes: list[int]
    fusion_passes: int = 0

    @classmethod
    def for_modalities(cls, n: int) -> "CostCounter":
        return cls(encoder_passes=[0] * n)

    def add_encoder(self, m: int, n: int) -> None:
        self.encoder_passes[m] += n

    def add_fusion(self, n: int) -> None:
        self.fusion_passes += n

    def reset(self) -> None:
        self.encoder_passes = [0] * len(self.encoder_passes)
        self.fusion_passes = 0

    def totals(self) -> dict:
        return {"encoder_passes": list(self.encoder_passes), "fusion_passes": self.fusion_passes}


def sample_permutations(batch_size: int, n_perm: int, rng: np.random.Generator) -> list[np.ndarray]:
    """n_perm independent uniform permutations of range(batch_size).

    Uniform over all batch_size! permutations, identity included; a batch of
    one has no usable permutation and is rejected.
    """
    if batch_size < 2:
        raise ValueError("permutation perturbation needs a batch of at least 2")
    if n_perm < 1:
        raise ValueError("n_perm must be positive")
    return [rng.permutation(batch_size) for _ in range(n_perm)]


def label_match_split(sigma: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices where the permuted row keeps the anchor's label vs. not.

    The two index sets partition range(len(y)); identity rows always land in
    the matching set.
    """
    sigma = np.asarray(sigma)
    y = np.asarray(y)
    if sigma.shape != y.shape:
        raise ValueError("sigma and y must have the same length")
    match = y == y[sigma]
    idx = np.arange(len(y))
    return idx[match], idx[~match]


@dataclass
class PerturbationDraws:
    """Perturbed latents per modality per draw: ``latents[m][e]``.

    ``sigmas`` is populated for the permute kind (draws shared across
    modalities) and empty otherwise.
    """

    kind: str
    latents: list[list[Tensor]]
    sigmas: list[np.ndarray] = field(default_factory=list)


def apply_perturbation(
    kind: str,
    model: MultimodalModel,
    xs: list[Tensor],
    latents: list[Tensor],
    n_samples: int,
    rng: np.random.Generator,
    noise_std: float = 1.0,
    counter: CostCounter | None = None,
) -> PerturbationDraws:
    """Draw n_samples perturbed versions of every modality's latent.

    Latent kinds reuse the clean encoder pass; input kinds re-encode and
    charge encoder passes per draw per modality. Fusion passes are charged
    later, by whoever evaluates the perturbed fusion.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown perturbation kind '{kind}' (choose from {KINDS})")
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    if kind in ("noise-latent", "noise-input") and not noise_std > 0.0:
        raise ValueError("noise perturbations need noise_std > 0")

    n_mod = model.n_modalities
    batch = latents[0].data.shape[0]

    if kind == "permute-latent":
        sigmas = sample_permutations(batch, n_samples, rng)
        drawn = [[ad.permute_rows(latents[m], s) for s in sigmas] for m in range(n_mod)]
        return PerturbationDraws(kind=kind, latents=drawn, sigmas=sigmas)

    drawn = [[] for _ in range(n_mod)]
    for _ in range(n_samples):
        for m in range(n_mod):
            if kind == "noise-latent":
                eps = rng.normal(0.0, noise_std, size=latents[m].data.shape)
                drawn[m].append(ad.add(latents[m], Tensor(eps)))
            elif kind == "noise-input":
                eps = rng.normal(0.0, noise_std, size=xs[m].data.shape)
                z = model.encoders[m](ad.add(xs[m], Tensor(eps)))
                if counter is not None:
                    counter.add_encoder(m, batch)
                drawn[m].append(z)
            else:  # zeromask-input
                z = model.encoders[m](Tensor(np.zeros_like(xs[m].data)))
                if counter is not None:
                    counter.add_encoder(m, batch)
                drawn[m].append(z)
    return PerturbationDraws(kind=kind, latents=drawn)
