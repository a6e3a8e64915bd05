"""Training loop, baseline methods and diagnostics.

One `train` entry point covers the regularized method and the baselines:

    mcr               task + unimodal + contrastive + reconstruction losses,
                      plus the influence game routed by the chosen strategy
    joint             cross-entropy on the fused head only
    multiloss         fused cross-entropy + weighted unimodal cross-entropies
    unimodal-<m>      encoder m and its linear head, nothing else
    ensemble          independently trained unimodal models, averaged softmax
    unipre-frozen     unimodal pretraining, then fusion with encoders frozen
    unipre-finetuned  unimodal pretraining, then all parameters at reduced
                      encoder learning rate

All methods share the batching and seeding scheme, so any two methods on the
same (data, seed) consume identical batches. joint is exactly mcr with every
lambda at zero, including the parameter trajectory. Optimization is plain SGD
(optional momentum) for step-for-step reproducibility.

Per epoch the loop records losses, validation accuracy, per-modality linear
probes, permutation-based importance scores and the mean divergence response
split by whether the permuted row kept its label. Early stopping tracks
validation accuracy and restores the best snapshot.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from ._util import config_hash, fmt, to_jsonable
from .autodiff import ParamGroup, Tensor
from .game import importance_scores, route_mipd_gradients, route_subset_gradients, strategy_matrix
from .losses import (
    LossReport,
    McrConfig,
    accuracy,
    ceb_loss,
    cross_entropy,
    jsd,
    jsd_per_row,
    mipd_loss_from_draws,
    supervised_contrastive,
)
from .models import (
    ModelConfig,
    MultimodalModel,
    forward,
    fused_forward_from_latents,
    unimodal_model_forward,
)
from .perturb import CostCounter, apply_perturbation, label_match_split, sample_permutations
from .synthdata import Dataset

log = logging.getLogger(__name__)

METHODS = (
    "mcr",
    "joint",
    "multiloss",
    "ensemble",
    "unipre-frozen",
    "unipre-finetuned",
)  # plus unimodal-<m>


@dataclass
class ArchConfig:
    encoder_hidden: tuple[int, ...] = (64, 64)
    latent_dim: int = 32
    fusion_hidden: tuple[int, ...] = (64,)
    recon_hidden: tuple[int, ...] = (64,)
    activation: str = "relu"


@dataclass
class OptimConfig:
    lr: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.0
    batch_size: int = 32
    epochs: int = 40
    patience: int = 10


@dataclass
class DiagConfig:
    probe_steps: int = 200
    probe_lr: float = 0.5
    n_perm: int = 4


@dataclass
class RunConfig:
    method: str = "mcr"
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    mcr: McrConfig = field(default_factory=McrConfig)
    diagnostics: DiagConfig = field(default_factory=DiagConfig)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train: LossReport
    val: LossReport
    val_accuracy: float
    importance: list[float]
    probe_accuracy: list[float]
    jsd_matching: float
    jsd_nonmatching: float


@dataclass
class TrainResult:
    model: object  # MultimodalModel or EnsembleModel
    records: list[EpochRecord]
    summary: dict


def _unimodal_index(method: str) -> int | None:
    m = re.fullmatch(r"unimodal-(\d+)", method)
    return int(m.group(1)) - 1 if m else None


def validate_method(method: str, n_modalities: int) -> None:
    idx = _unimodal_index(method)
    if idx is not None:
        if not 0 <= idx < n_modalities:
            raise ValueError(f"{method}: modality index out of range")
        return
    if method not in METHODS:
        raise ValueError(f"unknown method '{method}'")


# inference helpers -----------------------------------------------------------


def encode_latents(model: MultimodalModel, xs: list[np.ndarray]) -> list[np.ndarray]:
    return [enc(Tensor(x)).data for enc, x in zip(model.encoders, xs)]


def fused_logits_np(model: MultimodalModel, xs: list[np.ndarray]) -> np.ndarray:
    return forward(model, [Tensor(x) for x in xs]).fused_logits.data


def uni_logits_np(model: MultimodalModel, m: int, x: np.ndarray) -> np.ndarray:
    return unimodal_model_forward(model, m, Tensor(x)).data


class EnsembleModel:
    """Unimodal members; member m votes with its modality-m head."""

    def __init__(self, members: list[MultimodalModel]):
        self.members = members

    def predict_proba(self, xs: list[np.ndarray]) -> np.ndarray:
        probs = None
        for m, member in enumerate(self.members):
            logits = uni_logits_np(member, m, xs[m])
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            p = e / e.sum(axis=1, keepdims=True)
            probs = p if probs is None else probs + p
        return probs / len(self.members)


def ensemble_predict(members: list[MultimodalModel], xs: list[np.ndarray]) -> np.ndarray:
    """Mean-softmax vote over unimodal members; ties resolve to the lowest
    class index (argmax picks the first maximum)."""
    return np.argmax(EnsembleModel(members).predict_proba(xs), axis=1)


def linear_probe(
    z_train: np.ndarray,
    y_train: np.ndarray,
    z_eval: np.ndarray,
    y_eval: np.ndarray,
    n_classes: int,
    steps: int = 200,
    lr: float = 0.5,
) -> float:
    """Accuracy of a multinomial logistic head fit on the train latents.

    Fixed full-batch budget from zero init; no feature standardization, so a
    collapsed representation scores at chance instead of being rescued by
    preprocessing. Degenerate (constant) latents short-circuit to the
    majority-class rate with a warning.
    """
    z_train = np.asarray(z_train, dtype=np.float64)
    z_eval = np.asarray(z_eval, dtype=np.float64)
    if np.ptp(z_train, axis=0).max(initial=0.0) < 1e-12:
        log.warning("probe: degenerate latents, returning majority-class accuracy")
        counts = np.bincount(y_train, minlength=n_classes)
        return float(np.mean(y_eval == int(np.argmax(counts))))
    n = z_train.shape[0]
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y_train] = 1.0
    w = np.zeros((z_train.shape[1], n_classes))
    b = np.zeros(n_classes)
    for _ in range(steps):
        logits = z_train @ w + b
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (z_train.T @ g)
        b -= lr * g.sum(axis=0)
    pred = np.argmax(z_eval @ w + b, axis=1)
    return float(np.mean(pred == y_eval))


def error_matrix(uni_preds: list[np.ndarray], mm_preds: np.ndarray, y: np.ndarray) -> np.ndarray:
    """2 x (M+1) counts: rows (multimodal correct, incorrect), columns the
    number of unimodal models that were correct. Cells sum to len(y)."""
    y = np.asarray(y)
    mm_preds = np.asarray(mm_preds)
    if mm_preds.shape != y.shape:
        raise ValueError("multimodal predictions must match the label vector")
    n_correct = np.zeros(len(y), dtype=np.int64)
    for up in uni_preds:
        up = np.asarray(up)
        if up.shape != y.shape:
            raise ValueError("unimodal predictions must match the label vector")
        n_correct += up == y
    mm_ok = mm_preds == y
    out = np.zeros((2, len(uni_preds) + 1), dtype=np.int64)
    for k in range(len(uni_preds) + 1):
        out[0, k] = int(np.sum(mm_ok & (n_correct == k)))
        out[1, k] = int(np.sum(~mm_ok & (n_correct == k)))
    return out


def mce_estimate(model, data: Dataset, uni_m: int | None = None) -> float:
    """Generalization-gap proxy: test task loss minus train task loss."""

    def task_loss(split):
        if isinstance(model, EnsembleModel):
            p = np.clip(model.predict_proba(split.xs), 1e-12, None)
            return float(-np.mean(np.log(p[np.arange(len(split.y)), split.y])))
        if uni_m is not None:
            logits = uni_logits_np(model, uni_m, split.xs[uni_m])
        else:
            logits = fused_logits_np(model, split.xs)
        return cross_entropy(Tensor(logits), split.y).item()

    return task_loss(data.splits["test"]) - task_loss(data.splits["train"])


def mipd_subsets(
    model: MultimodalModel,
    latents: list[Tensor],
    sigmas: list[np.ndarray],
    mode: str = "singletons",
    clean_probs=None,
    counter=None,
) -> list[tuple[tuple[int, ...], Tensor]]:
    """Influence losses for modality subsets, sharing one permutation per draw.

    singletons: one loss per modality. all-subsets: every non-empty subset
    (supported up to 4 modalities), each subset's members permuted jointly."""
    n = model.n_modalities
    if mode == "singletons":
        subsets = [(i,) for i in range(n)]
    elif mode == "all-subsets":
        if n > 4:
            raise ValueError("all-subsets mode is supported up to 4 modalities")
        subsets = [
            tuple(i for i in range(n) if mask >> i & 1) for mask in range(1, 2**n)
        ]
    else:
        raise ValueError("mode must be 'singletons' or 'all-subsets'")
    if clean_probs is None:
        clean_probs = ad.softmax_rows(fused_forward_from_latents(model, latents, counter))
    out = []
    for subset in subsets:
        acc = None
        for sigma in sigmas:
            pert = list(latents)
            for m in subset:
                pert[m] = ad.permute_rows(latents[m], sigma)
            probs = ad.softmax_rows(fused_forward_from_latents(model, pert, counter))
            term = jsd(clean_probs, probs)
            acc = term if acc is None else ad.add(acc, term)
        out.append((subset, ad.mul(acc, -1.0 / len(sigmas))))
    return out


# the phase loop ---------------------------------------------------------------


@dataclass
class _PhaseOutcome:
    best_epoch: int
    stopped_early: bool
    cost_per_step: dict | None


def _mean_reports(reports: list[LossReport]) -> LossReport:
    def mean(vals):
        return float(np.mean(vals))  # nan-propagating on purpose

    n_uni = len(reports[0].uni)
    n_mipd = len(reports[0].mipd)
    return LossReport(
        task=mean([r.task for r in reports]),
        uni=[mean([r.uni[i] for r in reports]) for i in range(n_uni)],
        mipd=[mean([r.mipd[i] for r in reports]) for i in range(n_mipd)],
        con=mean([r.con for r in reports]),
        ceb=mean([r.ceb for r in reports]),
        total=mean([r.total for r in reports]),
    )


def _contrastive_all_pairs(latents: list[Tensor], y: np.ndarray, temperature: float) -> Tensor:
    pairs = [
        supervised_contrastive(latents[i], latents[j], y, temperature)
        for i in range(len(latents))
        for j in range(i + 1, len(latents))
    ]
    acc = pairs[0]
    for t in pairs[1:]:
        acc = ad.add(acc, t)
    return ad.mul(acc, 1.0 / len(pairs))


def _fused_step(
    model: MultimodalModel,
    trainable: list[ParamGroup],
    xs_t: list[Tensor],
    y: np.ndarray,
    lam: McrConfig,
    counter: CostCounter,
    perm_rng: np.random.Generator,
    opt: OptimConfig,
    velocity: dict,
) -> LossReport:
    fwd = forward(model, xs_t, counter)
    task_t = cross_entropy(fwd.fused_logits, y)
    loss_t = task_t

    uni_vals = [float("nan")] * model.n_modalities
    if lam.lambda_uni != 0.0:
        uni_ts = [cross_entropy(logits, y) for logits in fwd.uni_logits]
        uni_vals = [t.item() for t in uni_ts]
        s = uni_ts[0]
        for t in uni_ts[1:]:
            s = ad.add(s, t)
        loss_t = ad.add(loss_t, ad.mul(s, lam.lambda_uni))

    con_val = float("nan")
    if lam.lambda_con != 0.0:
        con_t = _contrastive_all_pairs(fwd.latents, y, lam.temperature)
        con_val = con_t.item()
        loss_t = ad.add(loss_t, ad.mul(con_t, lam.lambda_con))

    ceb_val = float("nan")
    if lam.lambda_ceb != 0.0:
        ceb_t = ceb_loss(fwd.latents, fwd.fused_logits, model.recon_head)
        ceb_val = ceb_t.item()
        loss_t = ad.add(loss_t, ad.mul(ceb_t, lam.lambda_ceb))

    loss_t.backward()

    mipd_vals = [float("nan")] * model.n_modalities
    if lam.lambda_m != 0.0:
        draws = apply_perturbation(
            lam.perturbation,
            model,
            xs_t,
            fwd.latents,
            lam.n_samples,
            perm_rng,
            lam.perturb_noise_std,
            counter,
        )
        clean_probs = ad.softmax_rows(fwd.fused_logits)
        groups = model.param_groups()
        if lam.subset_mode == "singletons":
            mipd_ts = [
                mipd_loss_from_draws(model, fwd.latents, i, draws.latents[i], clean_probs, counter)
                for i in range(model.n_modalities)
            ]
            mipd_vals = [t.item() for t in mipd_ts]
            route_mipd_gradients(
                mipd_ts, groups, strategy_matrix(lam.strategy, model.n_modalities), scale=lam.lambda_m
            )
        else:
            if draws.kind != "permute-latent":
                raise ValueError("all-subsets mode requires the permute-latent perturbation")
            subset_losses = mipd_subsets(
                model, fwd.latents, draws.sigmas, mode="all-subsets",
                clean_probs=clean_probs, counter=counter,
            )
            for subset, t in subset_losses:
                if len(subset) == 1:
                    mipd_vals[subset[0]] = t.item()
            route_subset_gradients(subset_losses, groups, lam.strategy, scale=lam.lambda_m)

    report = LossReport.compose(lam, task_t.item(), uni_vals, mipd_vals, con_val, ceb_val)
    ad.sgd_step(trainable, opt.lr, opt.weight_decay, opt.momentum, velocity)
    ad.zero_grads(model.param_groups())
    return report


def _unimodal_step(
    model: MultimodalModel,
    trainable: list[ParamGroup],
    m: int,
    x_t: Tensor,
    y: np.ndarray,
    counter: CostCounter,
    opt: OptimConfig,
    velocity: dict,
) -> LossReport:
    logits = unimodal_model_forward(model, m, x_t, counter)
    task_t = cross_entropy(logits, y)
    task_t.backward()
    val = task_t.item()
    ad.sgd_step(trainable, opt.lr, opt.weight_decay, opt.momentum, velocity)
    ad.zero_grads(model.param_groups())
    n = model.n_modalities
    return LossReport(task=val, uni=[float("nan")] * n, mipd=[float("nan")] * n, total=val)


def _epoch_diagnostics(
    model: MultimodalModel,
    data: Dataset,
    lam: McrConfig,
    diag: DiagConfig,
    diag_rng: np.random.Generator,
    uni_m: int | None,
    fused_eval: bool,
):
    train, val = data.splits["train"], data.splits["val"]
    z_train = encode_latents(model, train.xs)
    z_val = encode_latents(model, val.xs)
    n_classes = data.spec.n_classes
    probes = [
        linear_probe(zt, train.y, zv, val.y, n_classes, diag.probe_steps, diag.probe_lr)
        for zt, zv in zip(z_train, z_val)
    ]

    nan = float("nan")
    n_mod = model.n_modalities
    if uni_m is not None:
        logits = uni_logits_np(model, uni_m, val.xs[uni_m])
        task = cross_entropy(Tensor(logits), val.y).item()
        report = LossReport(task=task, uni=[nan] * n_mod, mipd=[nan] * n_mod, total=task)
        return report, accuracy(logits, val.y), [nan] * n_mod, probes, nan, nan

    latents_t = [Tensor(z) for z in z_val]
    fused = fused_forward_from_latents(model, latents_t)
    val_acc = accuracy(fused.data, val.y)
    task = cross_entropy(fused, val.y).item()

    uni_vals = [nan] * n_mod
    if lam.lambda_uni != 0.0:
        uni_vals = [
            cross_entropy(head(z), val.y).item() for head, z in zip(model.uni_heads, latents_t)
        ]
    con_val = (
        _contrastive_all_pairs(latents_t, val.y, lam.temperature).item()
        if lam.lambda_con != 0.0
        else nan
    )
    ceb_val = (
        ceb_loss(latents_t, fused, model.recon_head).item() if lam.lambda_ceb != 0.0 else nan
    )

    # Influence and divergence response diagnostics on the validation split,
    # shared draws across modalities; recorded for every fused method so the
    # columns are comparable across runs.
    importance = [nan] * n_mod
    jsd_match = jsd_nonmatch = nan
    if fused_eval:
        sigmas = sample_permutations(len(val.y), diag.n_perm, diag_rng)
        clean = ad.softmax_rows(fused)
        imp = []
        match_vals, nonmatch_vals = [], []
        for i in range(n_mod):
            acc_i = 0.0
            for sigma in sigmas:
                pert = list(latents_t)
                pert[i] = ad.permute_rows(latents_t[i], sigma)
                probs = ad.softmax_rows(fused_forward_from_latents(model, pert))
                rows = jsd_per_row(clean.data, probs.data)
                acc_i += float(rows.mean())
                m_idx, nm_idx = label_match_split(sigma, val.y)
                if m_idx.size:
                    match_vals.append(rows[m_idx].mean())
                if nm_idx.size:
                    nonmatch_vals.append(rows[nm_idx].mean())
            imp.append(acc_i / len(sigmas))
        importance = imp
        jsd_match = float(np.mean(match_vals)) if match_vals else nan
        jsd_nonmatch = float(np.mean(nonmatch_vals)) if nonmatch_vals else nan

    mipd_vals = [-v for v in importance] if lam.lambda_m != 0.0 else [nan] * n_mod
    report = LossReport.compose(lam, task, uni_vals, mipd_vals, con_val, ceb_val)
    return report, val_acc, importance, probes, jsd_match, jsd_nonmatch


def _run_phase(
    model: MultimodalModel,
    data: Dataset,
    run: RunConfig,
    lam: McrConfig,
    trainable: list[ParamGroup],
    uni_m: int | None,
    phase: str,
    records: list[EpochRecord],
    data_rng: np.random.Generator,
    perm_rng: np.random.Generator,
    diag_seq: np.random.SeedSequence,
    fused_eval: bool,
) -> _PhaseOutcome:
    opt = run.optimizer
    train_split = data.splits["train"]
    n = len(train_split.y)
    velocity: dict = {}
    counter = CostCounter.for_modalities(model.n_modalities)
    cost_per_step = None

    best_acc, best_epoch, best_state = -np.inf, -1, None
    epoch0 = records[-1].epoch + 1 if records else 0
    stopped = False

    for e in range(opt.epochs):
        order = data_rng.permutation(n)
        reports = []
        for step, lo in enumerate(range(0, n, opt.batch_size)):
            idx = order[lo : lo + opt.batch_size]
            if len(idx) < 2:
                continue  # a 1-row tail has no within-batch permutation
            y = train_split.y[idx]
            counter.reset()
            if uni_m is not None:
                x_t = Tensor(train_split.xs[uni_m][idx])
                rep = _unimodal_step(model, trainable, uni_m, x_t, y, counter, opt, velocity)
            else:
                xs_t = [Tensor(x[idx]) for x in train_split.xs]
                rep = _fused_step(model, trainable, xs_t, y, lam, counter, perm_rng, opt, velocity)
            if not np.isfinite(rep.total):
                raise RuntimeError(f"non-finite loss at phase '{phase}' epoch {e} step {step}")
            reports.append(rep)
            if cost_per_step is None and len(idx) == opt.batch_size:
                cost_per_step = dict(counter.totals(), batch_size=opt.batch_size)

        if not reports:
            raise RuntimeError(
                f"phase '{phase}': no usable batches (batch_size {opt.batch_size} on "
                f"{n} rows leaves only 1-row tails)"
            )
        diag_rng = np.random.default_rng(diag_seq.spawn(1)[0])
        val_report, val_acc, importance, probes, jm, jnm = _epoch_diagnostics(
            model, data, lam, run.diagnostics, diag_rng, uni_m, fused_eval
        )
        records.append(
            EpochRecord(
                epoch=epoch0 + e,
                phase=phase,
                train=_mean_reports(reports),
                val=val_report,
                val_accuracy=val_acc,
                importance=importance,
                probe_accuracy=probes,
                jsd_matching=jm,
                jsd_nonmatching=jnm,
            )
        )
        if val_acc > best_acc:
            best_acc, best_epoch, best_state = val_acc, e, model.state_dict()
        if e - best_epoch >= opt.patience:
            stopped = True
            break

    if best_state is not None:
        model.load_state(best_state)
    return _PhaseOutcome(
        best_epoch=epoch0 + best_epoch, stopped_early=stopped, cost_per_step=cost_per_step
    )


# method dispatch ---------------------------------------------------------------


def _effective_lambdas(run: RunConfig) -> McrConfig:
    if run.method == "mcr":
        return run.mcr
    if run.method == "multiloss":
        return replace(run.mcr, lambda_m=0.0, lambda_con=0.0, lambda_ceb=0.0)
    # joint, unipre fusion phases, unimodal phases
    return replace(run.mcr, lambda_uni=0.0, lambda_m=0.0, lambda_con=0.0, lambda_ceb=0.0)


def _groups_by_role(model: MultimodalModel) -> dict[str, ParamGroup]:
    return {g.role: g for g in model.param_groups()}


def _trainable_for(run: RunConfig, model: MultimodalModel) -> list[ParamGroup]:
    roles = _groups_by_role(model)
    n = model.n_modalities
    encoders = [roles[f"encoder-{m}"] for m in range(1, n + 1)]
    heads = [roles[f"uni-head-{m}"] for m in range(1, n + 1)]
    if run.method == "joint":
        return encoders + [roles["fusion"]]
    if run.method == "multiloss":
        return encoders + heads + [roles["fusion"]]
    lam = run.mcr
    groups = encoders + [roles["fusion"]]
    if lam.lambda_uni != 0.0:
        groups += heads
    if lam.lambda_ceb != 0.0:
        groups.append(roles["recon-head"])
    return groups


def train(run: RunConfig, data: Dataset) -> TrainResult:
    validate_method(run.method, data.n_modalities)
    model_cfg = ModelConfig(
        input_dims=data.input_dims,
        n_classes=data.spec.n_classes,
        encoder_hidden=tuple(run.arch.encoder_hidden),
        latent_dim=run.arch.latent_dim,
        fusion_hidden=tuple(run.arch.fusion_hidden),
        recon_hidden=tuple(run.arch.recon_hidden),
        activation=run.arch.activation,
    )
    root = np.random.SeedSequence(run.seed)
    init_seq, data_seq, perm_seq, diag_seq, member_seq = root.spawn(5)

    if run.method == "ensemble":
        member_seeds = member_seq.generate_state(data.n_modalities)
        records: list[EpochRecord] = []
        members = []
        for m in range(data.n_modalities):
            sub = replace(run, method=f"unimodal-{m + 1}", seed=int(member_seeds[m]))
            res = train(sub, data)
            members.append(res.model)
            for r in res.records:
                records.append(
                    replace(r, epoch=records[-1].epoch + 1 if records else 0, phase=f"member-{m + 1}")
                )
        ens = EnsembleModel(members)
        test = data.splits["test"]
        preds = ensemble_predict(members, test.xs)
        summary = _base_summary(run, data)
        summary.update(
            epochs_run=len(records),
            best_epoch=None,
            stopped_early=None,
            best_val_accuracy=max(r.val_accuracy for r in records),
            test_accuracy=float(np.mean(preds == test.y)),
            test_task_loss=None,
            mce_estimate=mce_estimate(ens, data),
            probe_test=None,
            importance_test=None,
            cost_per_step=None,
            probe_budget={"steps": run.diagnostics.probe_steps, "lr": run.diagnostics.probe_lr},
        )
        return TrainResult(ens, records, summary)

    model = MultimodalModel(model_cfg, np.random.default_rng(init_seq))
    data_rng = np.random.default_rng(data_seq)
    perm_rng = np.random.default_rng(perm_seq)
    records = []
    roles = _groups_by_role(model)
    uni_idx = _unimodal_index(run.method)

    if uni_idx is not None:
        trainable = [roles[f"encoder-{uni_idx + 1}"], roles[f"uni-head-{uni_idx + 1}"]]
        outcome = _run_phase(
            model, data, run, _effective_lambdas(run), trainable, uni_idx,
            "train", records, data_rng, perm_rng, diag_seq, fused_eval=False,
        )
    elif run.method in ("unipre-frozen", "unipre-finetuned"):
        for m in range(model.n_modalities):
            trainable = [roles[f"encoder-{m + 1}"], roles[f"uni-head-{m + 1}"]]
            _run_phase(
                model, data, run, _effective_lambdas(run), trainable, m,
                f"uni-{m + 1}", records, data_rng, perm_rng, diag_seq, fused_eval=False,
            )
        if run.method == "unipre-frozen":
            # Freezing also prunes the encoders out of the backward sweep.
            for m in range(1, model.n_modalities + 1):
                for p in roles[f"encoder-{m}"].params:
                    p.requires_grad = False
            trainable = [roles["fusion"]]
        else:
            for m in range(1, model.n_modalities + 1):
                roles[f"encoder-{m}"].lr_scale = 0.1
            trainable = [roles[f"encoder-{m}"] for m in range(1, model.n_modalities + 1)]
            trainable.append(roles["fusion"])
        outcome = _run_phase(
            model, data, run, _effective_lambdas(run), trainable, None,
            "fusion", records, data_rng, perm_rng, diag_seq, fused_eval=True,
        )
    else:
        trainable = _trainable_for(run, model)
        outcome = _run_phase(
            model, data, run, _effective_lambdas(run), trainable, None,
            "train", records, data_rng, perm_rng, diag_seq, fused_eval=True,
        )

    summary = _final_summary(run, data, model, records, outcome, uni_idx)
    return TrainResult(model, records, summary)


def _base_summary(run: RunConfig, data: Dataset) -> dict:
    return {
        "method": run.method,
        "seed": run.seed,
        "config": to_jsonable(run),
        "config_hash": config_hash(run),
        "data_hash": config_hash(data.spec),
        "n_modalities": data.n_modalities,
    }


def _final_summary(
    run: RunConfig,
    data: Dataset,
    model: MultimodalModel,
    records: list[EpochRecord],
    outcome: _PhaseOutcome,
    uni_idx: int | None,
) -> dict:
    train_split, test = data.splits["train"], data.splits["test"]
    if uni_idx is not None:
        logits = uni_logits_np(model, uni_idx, test.xs[uni_idx])
    else:
        logits = fused_logits_np(model, test.xs)
    test_acc = accuracy(logits, test.y)
    test_loss = cross_entropy(Tensor(logits), test.y).item()

    z_train = encode_latents(model, train_split.xs)
    z_test = encode_latents(model, test.xs)
    diag = run.diagnostics
    probe_test = [
        linear_probe(zt, train_split.y, zv, test.y, data.spec.n_classes, diag.probe_steps, diag.probe_lr)
        for zt, zv in zip(z_train, z_test)
    ]

    importance_test = None
    if uni_idx is None:
        rng = np.random.default_rng(np.random.SeedSequence([run.seed, 2**31 - 1]))
        sigmas = sample_permutations(len(test.y), diag.n_perm, rng)
        importance_test = importance_scores(model, [Tensor(z) for z in z_test], sigmas).tolist()

    summary = _base_summary(run, data)
    summary.update(
        epochs_run=len(records),
        best_epoch=outcome.best_epoch,
        stopped_early=outcome.stopped_early,
        best_val_accuracy=max(r.val_accuracy for r in records),
        test_accuracy=test_acc,
        test_task_loss=test_loss,
        mce_estimate=mce_estimate(model, data, uni_idx),
        probe_test=probe_test,
        importance_test=importance_test,
        cost_per_step=outcome.cost_per_step,
        probe_budget={"steps": diag.probe_steps, "lr": diag.probe_lr},
    )
    return summary


# epoch records as delimited text ------------------------------------------------


def records_to_csv(records: list[EpochRecord], n_modalities: int, meta: dict) -> str:
    cols = ["epoch", "phase", "train_task"]
    cols += [f"train_uni{m}" for m in range(1, n_modalities + 1)]
    cols += [f"train_mipd{m}" for m in range(1, n_modalities + 1)]
    cols += ["train_con", "train_ceb", "train_total", "val_task"]
    cols += [f"val_uni{m}" for m in range(1, n_modalities + 1)]
    cols += [f"val_mipd{m}" for m in range(1, n_modalities + 1)]
    cols += ["val_con", "val_ceb", "val_total", "val_accuracy"]
    cols += [f"importance{m}" for m in range(1, n_modalities + 1)]
    cols += [f"probe{m}" for m in range(1, n_modalities + 1)]
    cols += ["jsd_matching", "jsd_nonmatching"]

    lines = [f"# {k}={v}" for k, v in sorted(meta.items())]
    lines.append(",".join(cols))
    for r in records:
        row = [str(r.epoch), r.phase, fmt(r.train.task)]
        row += [fmt(v) for v in r.train.uni]
        row += [fmt(v) for v in r.train.mipd]
        row += [fmt(r.train.con), fmt(r.train.ceb), fmt(r.train.total), fmt(r.val.task)]
        row += [fmt(v) for v in r.val.uni]
        row += [fmt(v) for v in r.val.mipd]
        row += [fmt(r.val.con), fmt(r.val.ceb), fmt(r.val.total), fmt(r.val_accuracy)]
        row += [fmt(v) for v in r.importance]
        row += [fmt(v) for v in r.probe_accuracy]
        row += [fmt(r.jsd_matching), fmt(r.jsd_nonmatching)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
