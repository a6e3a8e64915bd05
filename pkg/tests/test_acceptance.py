"""Headline guarantees of the laboratory.

Each test records one PASS/FAIL line (echoed after the run) and then asserts.
The slow entries train real models; the whole file is sized to finish on a
single laptop core.
"""

import dataclasses
import time

import numpy as np
from scipy import stats as scistats

import mcrlab.autodiff as ad
from mcrlab.autodiff import Tensor
from mcrlab.losses import (
    McrConfig,
    analytic_mipd_gradient_check,
    ceb_loss,
    cross_entropy,
    mipd_loss,
    supervised_contrastive,
)
from mcrlab.models import forward, fused_forward_from_latents
from mcrlab.perturb import sample_permutations
from mcrlab.sweep import run_sweep
from mcrlab.synthdata import (
    SyntheticSpec,
    contrastive_bound_slack,
    generate,
    mi_oracle,
    random_joint,
)
from mcrlab.trainer import OptimConfig, RunConfig, records_to_csv, train

import oracles
from conftest import ACCEPTANCE_LINES, tiny_run, toy_batch, toy_model


def _record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name:22s} {detail}")
    assert ok, f"{name}: {detail}"


def _group_params(model, prefixes):
    out = []
    for g in model.param_groups():
        if any(g.role.startswith(p) for p in prefixes):
            out.extend(g.params)
    return out


# 1. every loss gradient against central finite differences ---------------------


def _fd_case(kind: str, seed: int):
    """One random instance: a scalar-graph builder and the params it reaches."""
    rng = np.random.default_rng(seed)
    n_classes = int(rng.integers(2, 5))
    dims = (int(rng.integers(3, 7)), int(rng.integers(3, 7)))
    n = int(rng.integers(3, 8))
    model = toy_model(seed=seed, input_dims=dims, n_classes=n_classes)
    xs_np, y = toy_batch(rng, input_dims=dims, n_classes=n_classes, n=n)
    xs = [Tensor(x) for x in xs_np]

    def latents():
        return [enc(x) for enc, x in zip(model.encoders, xs)]

    if kind == "cross-entropy":
        params = _group_params(model, ("encoder", "fusion"))
        graph = lambda: cross_entropy(forward(model, xs).fused_logits, y)
    elif kind == "mipd":
        sigmas = sample_permutations(n, 2, rng)
        i = seed % 2
        params = _group_params(model, ("encoder", "fusion"))
        graph = lambda: mipd_loss(model, latents(), i, sigmas)
    elif kind == "contrastive":
        params = _group_params(model, ("encoder",))
        graph = lambda: supervised_contrastive(*latents(), y, temperature=0.5)
    else:  # reconstruction; target detaches from the encoders, so wiggle the rest
        params = _group_params(model, ("fusion", "recon-head"))

        def graph():
            z = latents()
            return ceb_loss(z, fused_forward_from_latents(model, z), model.recon_head)

    return graph, params


def test_loss_gradients_match_finite_differences():
    t0 = time.time()
    worst = {}
    for kind in ("cross-entropy", "mipd", "contrastive", "ceb"):
        errs = []
        for s in range(20):
            graph, params = _fd_case(kind, 100 + s)
            analytic = ad.gradients(graph(), params)
            fd = oracles.fd_gradients(lambda: float(graph().data), [p.data for p in params])
            errs.append(oracles.rel_err(fd, analytic))
        worst[kind] = max(errs)
    took = time.time() - t0
    ok = all(v < 1e-5 for v in worst.values()) and took < 60
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    _record("gradient-check", ok, f"20 instances each, rel err {detail} [{took:.0f}s]")


# 2. backprop of the influence-game objective vs its closed form ----------------


def test_equilibrium_gradient_identity():
    worst = 0.0
    for s in range(10):
        rng = np.random.default_rng(200 + s)
        n_classes = int(rng.integers(2, 5))
        batch = int(rng.integers(2, 9))
        dims = (int(rng.integers(3, 7)), int(rng.integers(3, 7)))
        model = toy_model(seed=s, input_dims=dims, n_classes=n_classes)
        xs, _ = toy_batch(rng, input_dims=dims, n_classes=n_classes, n=batch)
        gap = analytic_mipd_gradient_check(
            model, [Tensor(x) for x in xs], rng.permutation(batch), rng.permutation(batch)
        )
        worst = max(worst, gap)
    _record("equilibrium-identity", worst < 1e-6, f"max abs gap {worst:.2e} over 10 seeds")


# 3. the information decomposition the regularizer is built on ------------------


def test_mutual_information_decomposition():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(120):
        shape = tuple(int(v) for v in rng.integers(2, 5, size=3))
        joint = random_joint(rng, shape)
        lhs = mi_oracle(joint, "I(X1,X2;Y)")
        rhs = (
            mi_oracle(joint, "I(X1;Y|X2)")
            + mi_oracle(joint, "I(X2;Y|X1)")
            + mi_oracle(joint, "I(X1;X2)")
            - mi_oracle(joint, "I(X1;X2|Y)")
        )
        worst = max(worst, abs(lhs - rhs))
    _record("mi-decomposition", worst < 1e-12, f"max abs gap {worst:.1e} over 120 joints")


# 4. information bound on the contrastive objective -----------------------------


def test_contrastive_bound_holds_and_tightens():
    rng = np.random.default_rng(9)
    min_slack = np.inf
    for _ in range(50):
        shape = tuple(int(v) for v in rng.integers(2, 4, size=3))
        min_slack = min(min_slack, contrastive_bound_slack(random_joint(rng, shape), n_batch=3))

    joint = random_joint(np.random.default_rng(5), (2, 2, 2))
    slacks = [contrastive_bound_slack(joint, n) for n in (2, 4, 6)]
    non_increasing = all(a >= b - 1e-12 for a, b in zip(slacks, slacks[1:]))

    ok = min_slack >= -1e-9 and non_increasing
    seq = " -> ".join(f"{s:.4f}" for s in slacks)
    _record("contrastive-bound", ok, f"min slack {min_slack:.2e} over 50 joints; gap {seq}")


# 5. forward-pass cost of the perturbation kinds --------------------------------


def test_perturbation_cost_accounting(tiny_data):
    def cost(cfg):
        return train(cfg, tiny_data).summary["cost_per_step"]

    base = cost(tiny_run("joint", epochs=1))
    mcr = tiny_run("mcr", epochs=1)
    permute = cost(dataclasses.replace(mcr, mcr=McrConfig(perturbation="permute-latent", n_samples=4)))
    noise = cost(dataclasses.replace(mcr, mcr=McrConfig(perturbation="noise-input", n_samples=4)))

    counts = base["encoder_passes"] + permute["encoder_passes"] + noise["encoder_passes"]
    all_ints = all(isinstance(v, int) for v in counts)
    b = base["batch_size"]
    ok = (
        all_ints
        and permute["encoder_passes"] == base["encoder_passes"]
        and noise["encoder_passes"] == [e + 4 * b for e in base["encoder_passes"]]
    )
    _record(
        "perturbation-cost", ok,
        f"batch {b}: baseline {base['encoder_passes']} == permute-latent "
        f"{permute['encoder_passes']}; noise-input {noise['encoder_passes']} (+4B each)",
    )


# 6. accuracy trend across the competition grid ----------------------------------

GRID_U1 = (0.20, 0.28, 0.36, 0.44)
GRID_S = (0.35, 0.25, 0.15, 0.05)
GRID_OPT = OptimConfig(lr=0.1, weight_decay=0.005, batch_size=32, epochs=25, patience=25)
GRID_SEEDS = (0, 1, 2)


def test_accuracy_declines_with_competition():
    t0 = time.time()
    acc = {}
    for u1 in GRID_U1:
        for s in GRID_S:
            data = generate(
                SyntheticSpec(shared_frac=s, unique_frac_1=u1, unique_frac_2=0.2, seed=11)
            )
            for method in ("joint", "mcr"):
                for seed in GRID_SEEDS:
                    res = train(RunConfig(method=method, seed=seed, optimizer=GRID_OPT), data)
                    acc[(u1, s, method, seed)] = res.summary["test_accuracy"]
    took = time.time() - t0

    # competition index: unique-to-shared ratio, pooled over cells and seeds
    rho, slope = {}, {}
    trend_ok = True
    for method in ("joint", "mcr"):
        pts = [
            (u1 / s, acc[(u1, s, method, seed)])
            for u1 in GRID_U1 for s in GRID_S for seed in GRID_SEEDS
        ]
        xs, ys = zip(*pts)
        rho[method], p = scistats.spearmanr(xs, ys)
        slope[method] = float(np.polyfit(xs, ys, 1)[0])
        trend_ok &= rho[method] < 0 and p < 0.05

    wins = sum(
        np.mean([acc[(u1, s, "mcr", seed)] for seed in GRID_SEEDS])
        >= np.mean([acc[(u1, s, "joint", seed)] for seed in GRID_SEEDS])
        for u1 in GRID_U1 for s in GRID_S
    )
    shallower = slope["joint"] < 0 and abs(slope["mcr"]) < abs(slope["joint"])

    ok = trend_ok and wins >= 12 and shallower and took < 1800
    _record(
        "competition-trend", ok,
        f"rho joint={rho['joint']:.2f} mcr={rho['mcr']:.2f}, wins {wins}/16, "
        f"slope joint={slope['joint']:+.4f} mcr={slope['mcr']:+.4f} [{took / 60:.1f}min]",
    )


# 7. weak-modality collapse under joint training, rescue under the regularizer ---

COLLAPSE_SPEC = SyntheticSpec(
    shared_frac=0.05, unique_frac_1=0.55, unique_frac_2=0.35, seed=11
)
COLLAPSE_OPT = OptimConfig(lr=0.1, weight_decay=0.01, batch_size=32, epochs=40, patience=40)


def test_joint_collapse_and_rescue():
    data = generate(COLLAPSE_SPEC)
    chance = 1.0 / COLLAPSE_SPEC.n_classes
    per_seed = []
    for seed in (0, 1, 2):
        joint = train(RunConfig(method="joint", seed=seed, optimizer=COLLAPSE_OPT), data)
        mcr = train(RunConfig(method="mcr", seed=seed, optimizer=COLLAPSE_OPT), data)
        weak = np.array([r.probe_accuracy[1] for r in joint.records])
        strong = np.array([r.probe_accuracy[0] for r in joint.records])
        val = np.array([r.val_accuracy for r in joint.records])
        near_chance = np.mean(np.abs(weak - chance) <= 0.03) >= 0.80
        tracks = np.mean(np.abs(strong - val) <= 0.05) >= 0.80
        lifted = mcr.records[-1].probe_accuracy[1] >= chance + 0.10
        per_seed.append((near_chance, tracks, lifted))
    passed = sum(all(flags) for flags in per_seed)
    detail = " ".join(
        f"s{i}:{''.join('+' if f else '-' for f in flags)}" for i, flags in enumerate(per_seed)
    )
    _record("collapse-rescue", passed >= 2, f"{passed}/3 seeds hold (near/track/lift {detail})")


# 8. ordering of the routing strategies on competition-heavy data ----------------

STRATEGY_SPEC = SyntheticSpec(
    shared_frac=0.05, unique_frac_1=0.55, unique_frac_2=0.35, seed=11
)
STRATEGY_OPT = COLLAPSE_OPT
# The batch-permutation estimator is too noisy at this scale for the routing
# strategies to separate; the gaussian latent estimator measures the same
# influence quantity with far lower draw variance, and there the ordering is
# stable across disjoint seed groups.
STRATEGY_PERTURBATION = "noise-latent"


def test_greedy_beats_collaborative():
    data = generate(STRATEGY_SPEC)
    means = {}
    for strategy in ("greedy", "collaborative", "independent"):
        cfg = McrConfig(strategy=strategy, perturbation=STRATEGY_PERTURBATION)
        accs = [
            train(
                RunConfig(method="mcr", seed=seed, optimizer=STRATEGY_OPT, mcr=cfg), data
            ).summary["test_accuracy"]
            for seed in range(5)
        ]
        means[strategy] = float(np.mean(accs))
    ok = means["greedy"] >= means["collaborative"]
    detail = " ".join(f"{k}={v:.4f}" for k, v in means.items())
    _record("strategy-ordering", ok, f"5-seed means: {detail}")


# 9. error-matrix accounting across a small sweep --------------------------------


def test_error_matrix_accounting(tmp_path):
    manifest = {
        "data": {"unique_frac_2": 0.2, "seed": 11},
        "run": {
            "optimizer": {
                "lr": 0.1, "weight_decay": 0.005, "batch_size": 32,
                "epochs": 25, "patience": 25,
            }
        },
        "methods": ["joint", "mcr", "unimodal-1", "unimodal-2"],
        "seeds": [0],
        "grid": {
            "U1": {"key": "data.unique_frac_1", "values": [0.28, 0.44]},
            "S": {"key": "data.shared_frac", "values": [0.25, 0.05]},
        },
    }
    assert run_sweep(manifest, tmp_path) == 0

    lines = [
        l for l in (tmp_path / "error_matrix.csv").read_text().splitlines()
        if not l.startswith("#")
    ]
    header = lines[0].split(",")
    rows = [dict(zip(header, l.split(","))) for l in lines[1:]]
    count_cols = [c for c in header if c.startswith("mm_")]
    sums_ok = all(
        sum(int(r[c]) for c in count_cols) == 1000 == int(r["total"]) for r in rows
    )

    region = {
        (r["cell"], r["method"]): sum(
            int(r[c]) for c in count_cols
            if c.startswith("mm_correct_uni") and not c.endswith("uni0")
        )
        for r in rows
    }
    cells = sorted({cell for cell, _ in region})
    wins = sum(region[(c, "mcr")] >= region[(c, "joint")] for c in cells)

    ok = sums_ok and wins > len(cells) / 2
    _record(
        "error-accounting", ok,
        f"all {len(rows)} matrices sum to 1000; mcr joint-correct region wins {wins}/{len(cells)} cells",
    )


# 10. bit-identical reruns -------------------------------------------------------


def test_rerun_is_bit_identical(tiny_data):
    cfg = tiny_run("mcr", epochs=3)
    first = train(cfg, tiny_data)
    second = train(cfg, tiny_data)
    meta = {"config_hash": first.summary["config_hash"], "seed": cfg.seed}
    csv_first = records_to_csv(first.records, tiny_data.n_modalities, meta)
    csv_second = records_to_csv(second.records, tiny_data.n_modalities, meta)
    state_first, state_second = first.model.state_dict(), second.model.state_dict()
    states_equal = all(np.array_equal(a, state_second[k]) for k, a in state_first.items())
    ok = csv_first == csv_second and states_equal
    _record(
        "determinism", ok,
        f"rerun CSV identical ({len(csv_first)} bytes), parameters identical",
    )
