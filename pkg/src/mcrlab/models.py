"""Late-fusion multimodal MLP with per-modality heads.

One encoder per modality maps inputs to a latent; the fusion MLP classifies
the concatenated latents; a linear unimodal head sits on each latent; a small
reconstruction head maps the fused class simplex back to the concatenated
latent dimension. Forward passes optionally report per-modality encoder and
fusion pass counts to a cost counter so perturbation cost claims can be
checked as exact integers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._util import save_npz
from .autodiff import ParamGroup, Tensor

_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden: tuple[int, ...] = (64, 64)
    latent_dim: int = 32
    activation: str = "relu"


@dataclass(frozen=True)
class ModelConfig:
    input_dims: tuple[int, ...]
    n_classes: int = 5
    encoder_hidden: tuple[int, ...] = (64, 64)
    latent_dim: int = 32
    fusion_hidden: tuple[int, ...] = (64,)
    recon_hidden: tuple[int, ...] = (64,)
    activation: str = "relu"

    def encoder_specs(self) -> list[EncoderSpec]:
        return [
            EncoderSpec(d, self.encoder_hidden, self.latent_dim, self.activation)
            for d in self.input_dims
        ]


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        # Uniform fan-in init; bound 1/sqrt(in_dim).
        bound = 1.0 / np.sqrt(in_dim)
        self.W = Tensor(rng.uniform(-bound, bound, size=(in_dim, out_dim)), requires_grad=True)
        self.b = Tensor(rng.uniform(-bound, bound, size=(out_dim,)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.W), self.b)

    def params(self) -> list[Tensor]:
        return [self.W, self.b]


class Mlp:
    """Plain MLP; activation between layers, none after the last."""

    def __init__(self, dims: list[int], activation: str, rng: np.random.Generator):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'")
        self.activation = activation
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]


@dataclass
class ForwardResult:
    latents: list[Tensor]
    fused_logits: Tensor
    uni_logits: list[Tensor]


class MultimodalModel:
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.n_modalities = len(config.input_dims)
        cat_dim = config.latent_dim * self.n_modalities
        self.encoders = [
            Mlp([s.input_dim, *s.hidden, s.latent_dim], s.activation, rng)
            for s in config.encoder_specs()
        ]
        self.uni_heads = [
            Mlp([config.latent_dim, config.n_classes], config.activation, rng)
            for _ in range(self.n_modalities)
        ]
        self.fusion = Mlp([cat_dim, *config.fusion_hidden, config.n_classes], config.activation, rng)
        self.recon_head = Mlp([config.n_classes, *config.recon_hidden, cat_dim], config.activation, rng)

    # parameter bookkeeping -------------------------------------------------

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []

        def grab(prefix: str, mlp: Mlp):
            for i, layer in enumerate(mlp.layers):
                out.append((f"{prefix}.{i}.W", layer.W))
                out.append((f"{prefix}.{i}.b", layer.b))

        for m, enc in enumerate(self.encoders, start=1):
            grab(f"encoder{m}", enc)
        for m, head in enumerate(self.uni_heads, start=1):
            grab(f"uni_head{m}", head)
        grab("fusion", self.fusion)
        grab("recon_head", self.recon_head)
        return out

    def param_groups(self) -> list[ParamGroup]:
        groups = [
            ParamGroup(f"encoder-{m}", enc.params(), role=f"encoder-{m}")
            for m, enc in enumerate(self.encoders, start=1)
        ]
        groups += [
            ParamGroup(f"uni-head-{m}", head.params(), role=f"uni-head-{m}")
            for m, head in enumerate(self.uni_heads, start=1)
        ]
        groups.append(ParamGroup("fusion", self.fusion.params(), role="fusion"))
        groups.append(ParamGroup("recon-head", self.recon_head.params(), role="recon-head"))
        return groups

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_params():
            if name not in state:
                raise KeyError(f"checkpoint missing parameter '{name}'")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for '{name}': checkpoint {arr.shape}, model {p.data.shape}"
                )
            p.data = arr.copy()


def build_model(config: ModelConfig, seed: int) -> MultimodalModel:
    return MultimodalModel(config, np.random.default_rng(seed))


# forward passes --------------------------------------------------------------


def fused_forward_from_latents(model: MultimodalModel, latents: list[Tensor], counter=None) -> Tensor:
    """Fusion logits from given latents. Never counts encoder passes."""
    if len(latents) != model.n_modalities:
        raise ValueError("one latent per modality required")
    logits = model.fusion(ad.concat_cols(latents))
    if counter is not None:
        counter.add_fusion(latents[0].data.shape[0])
    return logits


def forward(model: MultimodalModel, xs: list[Tensor], counter=None) -> ForwardResult:
    if len(xs) != model.n_modalities:
        raise ValueError("one input per modality required")
    latents = []
    for m, (enc, x) in enumerate(zip(model.encoders, xs)):
        latents.append(enc(x))
        if counter is not None:
            counter.add_encoder(m, x.data.shape[0])
    fused = fused_forward_from_latents(model, latents, counter)
    uni = [head(z) for head, z in zip(model.uni_heads, latents)]
    return ForwardResult(latents=latents, fused_logits=fused, uni_logits=uni)


def unimodal_model_forward(model: MultimodalModel, m: int, x: Tensor, counter=None) -> Tensor:
    """Logits of the standalone unimodal model for modality m (0-based)."""
    z = model.encoders[m](x)
    if counter is not None:
        counter.add_encoder(m, x.data.shape[0])
    return model.uni_heads[m](z)


# checkpoints ------------------------------------------------------------------


def save_checkpoint(model: MultimodalModel, path: str, meta: dict | None = None) -> None:
    arrays = {name: p.data for name, p in model.named_params()}
    payload = {
        "config": {
            "input_dims": list(model.config.input_dims),
            "n_classes": model.config.n_classes,
            "encoder_hidden": list(model.config.encoder_hidden),
            "latent_dim": model.config.latent_dim,
            "fusion_hidden": list(model.config.fusion_hidden),
            "recon_hidden": list(model.config.recon_hidden),
            "activation": model.config.activation,
        },
        "meta": meta or {},
    }
    arrays["__meta__"] = np.array(json.dumps(payload, sort_keys=True))
    save_npz(path, arrays)


def load_checkpoint(path: str) -> tuple[MultimodalModel, dict]:
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise ValueError(f"'{path}' is not a model checkpoint (missing __meta__)")
        payload = json.loads(str(data["__meta__"]))
        cfg = payload["config"]
        config = ModelConfig(
            input_dims=tuple(cfg["input_dims"]),
            n_classes=cfg["n_classes"],
            encoder_hidden=tuple(cfg["encoder_hidden"]),
            latent_dim=cfg["latent_dim"],
            fusion_hidden=tuple(cfg["fusion_hidden"]),
            recon_hidden=tuple(cfg["recon_hidden"]),
            activation=cfg["activation"],
        )
        model = MultimodalModel(config, np.random.default_rng(0))
        model.load_state({k: data[k] for k in data.files if k != "__meta__"})
    return model, payload["meta"]
