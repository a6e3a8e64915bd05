"""Synthetic two-modality classification data with controllable overlap.

Every row draws a label uniformly over the classes and a row type that decides
which modalities carry signal: both (shared), only one (unique-1 / unique-2)
or neither. A modality's base vector is the scaled one-hot label embedding
(zeroed when this row gives that modality no signal) plus isotropic Gaussian
noise; a fixed seeded linear map with orthonormal columns then embeds the base
into the observation space, so distances and noise scale survive the
projection. Splits are drawn from one seeded stream and are reproducible.

The module also carries small discrete-joint oracles used for verification:
exact mutual-information quantities by direct summation, and the exact
expected contrastive loss of the density-ratio critic, whose comparison
against log N bounds the informational content of the task.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from ._util import config_hash, save_npz, to_jsonable

ROW_TYPES = ("shared", "unique-1", "unique-2", "uninformative")


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 5
    dim: int = 16
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 1000
    shared_frac: float = 0.4
    unique_frac_1: float = 0.2
    unique_frac_2: float = 0.2
    noise_std: float = 1.0
    amplitude: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.dim < self.n_classes:
            raise ValueError("dim must be >= n_classes for an orthonormal embedding")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        fracs = (self.shared_frac, self.unique_frac_1, self.unique_frac_2)
        if any(f < 0 for f in fracs):
            raise ValueError("row-type fractions must be non-negative")
        if sum(fracs) > 1.0 + 1e-9:
            raise ValueError("shared + unique fractions must not exceed 1")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")
        if not self.amplitude > 0:
            raise ValueError("amplitude must be positive")


@dataclass
class Split:
    xs: list[np.ndarray]
    y: np.ndarray
    row_type: np.ndarray


@dataclass
class Dataset:
    spec: SyntheticSpec
    splits: dict[str, Split] = field(default_factory=dict)
    projections: list[np.ndarray] = field(default_factory=list)

    @property
    def n_modalities(self) -> int:
        return len(self.splits["train"].xs)

    @property
    def input_dims(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.splits["train"].xs)


def _orthonormal_embedding(dim: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((dim, n_classes))
    q, r = np.linalg.qr(a)
    # Fix the column signs so the factorization is unique.
    return q * np.sign(np.diag(r))


def generate(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    proj_seq, train_seq, val_seq, test_seq = root.spawn(4)

    proj_rng = np.random.default_rng(proj_seq)
    projections = [_orthonormal_embedding(spec.dim, spec.n_classes, proj_rng) for _ in range(2)]

    rest = 1.0 - spec.shared_frac - spec.unique_frac_1 - spec.unique_frac_2
    type_p = np.array([spec.shared_frac, spec.unique_frac_1, spec.unique_frac_2, max(rest, 0.0)])
    type_p = type_p / type_p.sum()

    def draw(n: int, seq) -> Split:
        rng = np.random.default_rng(seq)
        y = rng.integers(0, spec.n_classes, size=n)
        row_type = rng.choice(4, size=n, p=type_p)
        onehot = np.zeros((n, spec.n_classes))
        onehot[np.arange(n), y] = spec.amplitude
        xs = []
        for m in range(2):
            informative = (row_type == 0) | (row_type == m + 1)
            base = onehot * informative[:, None] + rng.normal(0.0, spec.noise_std, (n, spec.n_classes))
            xs.append(base @ projections[m].T)
        return Split(xs=xs, y=y, row_type=row_type)

    return Dataset(
        spec=spec,
        splits={
            "train": draw(spec.n_train, train_seq),
            "val": draw(spec.n_val, val_seq),
            "test": draw(spec.n_test, test_seq),
        },
        projections=projections,
    )


def save_dataset(ds: Dataset, npz_path: str) -> None:
    """Binary container of named arrays plus a JSON sidecar with the SyntheticSpec."""
    arrays = {}
    for split_name, split in ds.splits.items():
        for m, x in enumerate(split.xs, start=1):
            arrays[f"x{m}_{split_name}"] = x
        arrays[f"y_{split_name}"] = split.y
        arrays[f"rowtype_{split_name}"] = split.row_type
    for m, proj in enumerate(ds.projections, start=1):
        arrays[f"projection{m}"] = proj
    save_npz(npz_path, arrays)
    sidecar = {
        "kind": "mcrlab-dataset",
        "spec": to_jsonable(ds.spec),
        "config_hash": config_hash(ds.spec),
        "row_types": list(ROW_TYPES),
    }
    with open(_sidecar_path(npz_path), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sidecar_path(npz_path: str) -> str:
    return npz_path[: -len(".npz")] + ".json" if npz_path.endswith(".npz") else npz_path + ".json"


def load_dataset(npz_path: str) -> Dataset:
    with open(_sidecar_path(npz_path)) as fh:
        sidecar = json.load(fh)
    if sidecar.get("kind") != "mcrlab-dataset":
        raise ValueError(f"'{npz_path}' does not look like a dataset (bad sidecar)")
    spec = SyntheticSpec(**sidecar["spec"])
    with np.load(npz_path) as data:
        splits = {}
        for split_name in ("train", "val", "test"):
            xs = []
            for m in itertools.count(1):
                key = f"x{m}_{split_name}"
                if key not in data.files:
                    break
                xs.append(data[key])
            splits[split_name] = Split(
                xs=xs, y=data[f"y_{split_name}"], row_type=data[f"rowtype_{split_name}"]
            )
        projections = [data[f] for f in sorted(data.files) if f.startswith("projection")]
    return Dataset(spec=spec, splits=splits, projections=projections)


# discrete-joint oracles ------------------------------------------------------


@dataclass(frozen=True)
class DiscreteJoint:
    """Full probability table p[x1, x2, y] over finite supports."""

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 3:
            raise ValueError("joint table must be 3-d (x1, x2, y)")
        if (p < 0).any():
            raise ValueError("joint table has negative entries")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"joint table sums to {p.sum():.12f}, not 1")
        object.__setattr__(self, "p", p)


def random_joint(rng: np.random.Generator, shape: tuple[int, int, int], concentration: float = 1.0) -> DiscreteJoint:
    g = rng.gamma(concentration, size=shape)
    return DiscreteJoint(g / g.sum())


def _sum_plogq(num: np.ndarray, den: np.ndarray, weights: np.ndarray) -> float:
    # sum of weights * log(num / den) over cells where weights > 0.
    mask = weights > 0
    return float(np.sum(weights[mask] * (np.log(num[mask]) - np.log(den[mask]))))


MI_QUANTITIES = ("I(X1;Y|X2)", "I(X2;Y|X1)", "I(X1;X2)", "I(X1;X2|Y)", "I(X1,X2;Y)")


def mi_oracle(joint: DiscreteJoint, quantity: str) -> float:
    """Exact mutual information (nats) by direct summation over the table."""
    p = joint.p
    p12 = p.sum(axis=2)
    p1y = p.sum(axis=1)
    p2y = p.sum(axis=0)
    p1 = p12.sum(axis=1)
    p2 = p12.sum(axis=0)
    py = p1y.sum(axis=0)

    if quantity == "I(X1;X2)":
        return _sum_plogq(p12, np.outer(p1, p2), p12)
    if quantity == "I(X1;X2|Y)":
        num = p * py[None, None, :]
        den = p1y[:, None, :] * p2y[None, :, :]
        return _sum_plogq(num, den, p)
    if quantity == "I(X1;Y|X2)":
        num = p * p2[None, :, None]
        den = p12[:, :, None] * p2y[None, :, :]
        return _sum_plogq(num, den, p)
    if quantity == "I(X2;Y|X1)":
        num = p * p1[:, None, None]
        den = p12[:, :, None] * p1y[:, None, :]
        return _sum_plogq(num, den, p)
    if quantity == "I(X1,X2;Y)":
        den = p12[:, :, None] * py[None, None, :]
        return _sum_plogq(p, den, p)
    raise ValueError(f"unknown quantity '{quantity}' (choose from {MI_QUANTITIES})")


def mi_all(joint: DiscreteJoint) -> dict[str, float]:
    return {q: mi_oracle(joint, q) for q in MI_QUANTITIES}


# exact optimal-critic contrastive loss ---------------------------------------


def _compositions(total: int, k: int) -> np.ndarray:
    """All length-k tuples of non-negative ints summing to total."""
    out = []
    for bars in itertools.combinations(range(total + k - 1), k - 1):
        prev = -1
        counts = []
        for b in bars:
            counts.append(b - prev - 1)
            prev = b
        counts.append(total + k - 1 - prev - 1)
        out.append(counts)
    return np.asarray(out, dtype=np.int64)


def _direction_loss(p: np.ndarray, n_batch: int, cap: int) -> float:
    """Expected contrastive loss, anchors from axis 0 of p[x1, x2, y].

    The anchor (x1, y) and its positive x2 ~ p(x2 | x1, y) are scored by the
    density-ratio critic r(x2) = p(x2 | x1, y) / p(x2) against n_batch - 1
    candidates drawn from the marginal; the expectation over candidate counts
    is an exact multinomial sum.
    """
    p2 = p.sum(axis=(0, 2))
    support = np.where(p2 > 0)[0]
    marg = p2[support]
    comps = _compositions(n_batch - 1, len(support))
    n_terms = comps.shape[0] * p.shape[0] * p.shape[2] * len(support)
    if n_terms > cap:
        raise ValueError(
            f"exact enumeration needs {n_terms} terms (cap {cap}); "
            "use mode='mc' for Monte Carlo estimation"
        )
    log_pmf = (
        gammaln(n_batch)  # (n_batch - 1)!
        - gammaln(comps + 1.0).sum(axis=1)
        + comps @ np.log(marg)
    )
    pmf = np.exp(log_pmf)

    total = 0.0
    for x1 in range(p.shape[0]):
        for y in range(p.shape[2]):
            axy = p[x1, :, y].sum()
            if axy <= 0:
                continue
            cond = p[x1, support, y] / axy
            pos = np.where(cond > 0)[0]
            r = cond / marg
            scores = comps @ r  # expected critic mass of the candidate pool
            inner = np.log1p(scores[:, None] / r[None, pos])
            total += axy * float(pmf @ inner @ cond[pos])
    return total


def _direction_loss_mc(p: np.ndarray, n_batch: int, rng: np.random.Generator, n_samples: int) -> float:
    p2 = p.sum(axis=(0, 2))
    support = np.where(p2 > 0)[0]
    marg = p2[support]
    axy = p.sum(axis=1)
    flat = axy.reshape(-1)
    anchors = rng.choice(len(flat), size=n_samples, p=flat / flat.sum())
    total = 0.0
    for a in anchors:
        x1, y = divmod(a, p.shape[2])
        cond = p[x1, support, y] / axy[x1, y]
        r = cond / marg
        pos = rng.choice(len(support), p=cond)
        negs = rng.choice(len(support), size=n_batch - 1, p=marg / marg.sum())
        total += np.log1p(r[negs].sum() / r[pos])
    return total / n_samples


def optimal_critic_contrastive(
    joint: DiscreteJoint,
    n_batch: int,
    mode: str = "exact",
    cap: int = 2_000_000,
    rng: np.random.Generator | None = None,
    mc_samples: int = 20000,
) -> float:
    """Expected contrastive loss of the density-ratio critic, both directions
    averaged. Exact by default; raises when the enumeration exceeds the cap."""
    if n_batch < 2:
        raise ValueError("contrastive batch must be at least 2")
    p = joint.p
    if mode == "exact":
        fwd = _direction_loss(p, n_batch, cap)
        bwd = _direction_loss(p.swapaxes(0, 1), n_batch, cap)
    elif mode == "mc":
        if rng is None:
            raise ValueError("mode='mc' needs an rng")
        fwd = _direction_loss_mc(p, n_batch, rng, mc_samples)
        bwd = _direction_loss_mc(p.swapaxes(0, 1), n_batch, rng, mc_samples)
    else:
        raise ValueError("mode must be 'exact' or 'mc'")
    return 0.5 * (fwd + bwd)


def contrastive_bound_slack(joint: DiscreteJoint, n_batch: int, **kw) -> float:
    """Slack of: log N - optimal loss <= I(X2;Y|X1) + I(X1;Y|X2) + 2 I(X1;X2).

    Non-negative (up to tolerance) for every joint; shrinks as N grows."""
    rhs = (
        mi_oracle(joint, "I(X2;Y|X1)")
        + mi_oracle(joint, "I(X1;Y|X2)")
        + 2.0 * mi_oracle(joint, "I(X1;X2)")
    )
    return rhs - (np.log(n_batch) - optimal_critic_contrastive(joint, n_batch, **kw))
