"""Numerical property suite behind `mcrlab verify`.

Each check is independent, seeded, and prints one line with the measured
quantity next to its bound. The full suite is meant to run in well under a
minute. Checks:

  gradient-fd-*          losses vs central finite differences
  equilibrium-identity   backprop vs the closed-form influence-difference
                         gradient
  mi-identity            the four-term decomposition of I(X1,X2;Y)
  contrastive-bound      optimal-critic loss respects the information bound,
                         and its gap never widens as the batch grows
  cost-*                 forward-pass accounting of the perturbation kinds
  permutation-validity   sampled permutations are in-batch bijections
  routing-*              gradient routing matches explicitly composed
                         objectives per strategy
  importance-negation    importance scores are exactly negated influence
                         losses
  jsd-values             frozen divergence and cross-entropy constants

The hidden --inject-greedy-sign-flip flag corrupts one off-diagonal entry of
the greedy strategy matrix for the duration of the suite; the routing check
must then fail. It exists to prove the suite can catch a sign bug.
"""

from __future__ import annotations

import math
import time

import numpy as np

from . import autodiff as ad
from . import game
from .autodiff import Tensor
from .losses import (
    analytic_mipd_gradient_check,
    ceb_loss,
    cross_entropy,
    jsd,
    mipd_loss,
    mipd_loss_from_draws,
    supervised_contrastive,
)
from .models import ModelConfig, build_model, forward, fused_forward_from_latents
from .perturb import CostCounter, apply_perturbation, sample_permutations
from .synthdata import (
    SyntheticSpec,
    contrastive_bound_slack,
    generate,
    mi_all,
    optimal_critic_contrastive,
    random_joint,
)
from .trainer import ArchConfig, DiagConfig, OptimConfig, RunConfig, records_to_csv, train


def _toy_model(seed: int, activation: str = "tanh"):
    cfg = ModelConfig(
        input_dims=(5, 5),
        n_classes=3,
        encoder_hidden=(6,),
        latent_dim=4,
        fusion_hidden=(6,),
        recon_hidden=(6,),
        activation=activation,
    )
    return build_model(cfg, seed)


def _toy_batch(rng: np.random.Generator, n: int = 6):
    xs = [Tensor(rng.standard_normal((n, 5))) for _ in range(2)]
    y = rng.integers(0, 3, size=n)
    return xs, y


def _all_params(model):
    return [p for _, p in model.named_params()]


def _fd_gradients(build_loss, params, h: float = 1e-5) -> list[np.ndarray]:
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = build_loss().item()
            flat[i] = orig - h
            lo = build_loss().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def _norm_rel_err(fd: list[np.ndarray], ad_: list[np.ndarray]) -> float:
    f = np.concatenate([g.reshape(-1) for g in fd])
    a = np.concatenate([g.reshape(-1) for g in ad_])
    return float(np.linalg.norm(f - a) / max(np.linalg.norm(f), 1e-30))


def _fd_case(build_loss, params) -> float:
    ad_grads = ad.gradients(build_loss(), params)
    fd_grads = _fd_gradients(build_loss, params)
    return _norm_rel_err(fd_grads, ad_grads)


def _check_fd(loss_name: str, seed: int, n_seeds: int = 3) -> tuple[bool, str]:
    worst = 0.0
    for s in range(n_seeds):
        rng = np.random.default_rng(seed * 1000 + s)
        model = _toy_model(seed * 1000 + s)
        xs, y = _toy_batch(rng)
        params = _all_params(model)
        if loss_name == "task":
            build = lambda: cross_entropy(forward(model, xs).fused_logits, y)
        elif loss_name == "unimodal":
            build = lambda: cross_entropy(model.uni_heads[0](model.encoders[0](xs[0])), y)
        elif loss_name == "contrastive":
            build = lambda: supervised_contrastive(
                model.encoders[0](xs[0]), model.encoders[1](xs[1]), y, 0.2
            )
        elif loss_name == "influence":
            sigmas = sample_permutations(len(y), 2, np.random.default_rng(seed + 7))
            build = lambda: mipd_loss(
                model, [enc(x) for enc, x in zip(model.encoders, xs)], 0, sigmas
            )
        elif loss_name == "recon":
            # The reconstruction target is held fixed (stop-gradient), so the
            # finite-difference side must pin it at the base point too.
            latents0 = [enc(x) for enc, x in zip(model.encoders, xs)]
            target0 = Tensor(np.concatenate([z.data for z in latents0], axis=1))

            def build():
                latents = [enc(x) for enc, x in zip(model.encoders, xs)]
                fused = fused_forward_from_latents(model, latents)
                pred = model.recon_head(ad.softmax_rows(fused))
                diff = ad.sub(target0, pred)
                return ad.tmean(ad.mul(diff, diff))

            ad_grads = ad.gradients(
                ceb_loss(latents0, fused_forward_from_latents(model, latents0), model.recon_head),
                params,
            )
            fd_grads = _fd_gradients(build, params)
            worst = max(worst, _norm_rel_err(fd_grads, ad_grads))
            continue
        else:
            raise ValueError(loss_name)
        worst = max(worst, _fd_case(build, params))
    return worst < 1e-5, f"norm rel err {worst:.3e} < 1e-05 ({n_seeds} seeds)"


def _check_equilibrium(seed: int) -> tuple[bool, str]:
    worst = 0.0
    for s in range(5):
        rng = np.random.default_rng(seed * 77 + s)
        model = _toy_model(seed * 77 + s)
        xs, _ = _toy_batch(rng, n=6)
        sigma1, sigma2 = sample_permutations(6, 2, rng)
        worst = max(worst, analytic_mipd_gradient_check(model, xs, sigma1, sigma2))
    return worst < 1e-6, f"max abs discrepancy {worst:.3e} < 1e-06 (5 seeds)"


def _check_mi_identity(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(30):
        shape = tuple(rng.integers(2, 5, size=3))
        j = random_joint(rng, shape)
        mi = mi_all(j)
        lhs = mi["I(X1,X2;Y)"]
        rhs = mi["I(X1;Y|X2)"] + mi["I(X2;Y|X1)"] + mi["I(X1;X2)"] - mi["I(X1;X2|Y)"]
        worst = max(worst, abs(lhs - rhs))
    return worst < 1e-12, f"max abs identity gap {worst:.3e} < 1e-12 (30 joints)"


def _check_bound(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(12):
        shape = tuple(rng.integers(2, 5, size=3))
        j = random_joint(rng, shape)
        worst = min(worst, contrastive_bound_slack(j, 4))
    return worst >= -1e-9, f"min slack {worst:.3e} >= -1e-09 (12 joints, N=4)"


def _check_bound_monotonic(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed + 3)
    j = random_joint(rng, (3, 3, 3))
    gaps = []
    for n in (2, 4, 8):
        loss = optimal_critic_contrastive(j, n)
        mi = mi_all(j)
        rhs = mi["I(X2;Y|X1)"] + mi["I(X1;Y|X2)"] + 2 * mi["I(X1;X2)"]
        gaps.append(rhs - (math.log(n) - loss))
    ok = all(gaps[i + 1] <= gaps[i] + 1e-12 for i in range(len(gaps) - 1))
    return ok, f"gaps {['%.6f' % g for g in gaps]} non-increasing over N=2,4,8"


def _mipd_chain(model, xs, kind: str, n_samples: int, rng) -> CostCounter:
    counter = CostCounter.for_modalities(2)
    fwd = forward(model, xs, counter)
    draws = apply_perturbation(kind, model, xs, fwd.latents, n_samples, rng, 1.0, counter)
    clean = ad.softmax_rows(fwd.fused_logits)
    for i in range(2):
        mipd_loss_from_draws(model, fwd.latents, i, draws.latents[i], clean, counter)
    return counter


def _check_cost(kind: str, seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    model = _toy_model(seed, activation="relu")
    n, n_samples = 8, 4
    xs, _ = _toy_batch(rng, n=n)

    base = CostCounter.for_modalities(2)
    forward(model, xs, base)
    with_mipd = _mipd_chain(model, xs, kind, n_samples, rng)

    base_enc = base.totals()["encoder_passes"]
    got_enc = with_mipd.totals()["encoder_passes"]
    if kind == "permute-latent":
        want = base_enc
        ok = got_enc == want
        return ok, f"encoder passes {got_enc} == baseline {want} (exact)"
    want = [b + n_samples * n for b in base_enc]
    ok = got_enc == want
    return ok, f"encoder passes {got_enc} == baseline+{n_samples}*B {want} (exact)"


def _check_permutations(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    checked = 0
    for b in range(2, 10):
        for sigma in sample_permutations(b, 25, rng):
            if not np.array_equal(np.sort(sigma), np.arange(b)):
                return False, f"non-bijective draw at B={b}"
            checked += 1
    try:
        sample_permutations(1, 1, rng)
        return False, "B=1 was accepted"
    except ValueError:
        pass
    return True, f"{checked} draws bijective; B<2 rejected"


_STRATEGY_SIGNS = {
    "collaborative": [[1, 1], [1, 1]],
    "independent": [[1, 0], [0, 1]],
    "greedy": [[1, -1], [-1, 1]],
}


def _check_routing(strategy: str, seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    model = _toy_model(seed)
    xs, _ = _toy_batch(rng)
    fwd = forward(model, xs)
    sigmas = sample_permutations(6, 2, rng)
    clean = ad.softmax_rows(fwd.fused_logits)
    losses = [mipd_loss(model, fwd.latents, i, sigmas, clean_probs=clean) for i in range(2)]

    groups = model.param_groups()
    ad.zero_grads(groups)
    game.route_mipd_gradients(losses, groups, game.strategy_matrix(strategy, 2), scale=1.0)

    roles = {g.role: g for g in groups}
    signs = _STRATEGY_SIGNS[strategy]
    worst = 0.0
    for i in range(2):
        obj = None
        for j, k in enumerate(signs[i]):
            if k == 0:
                continue
            term = ad.mul(losses[j], float(k))
            obj = term if obj is None else ad.add(obj, term)
        want = ad.gradients(obj, roles[f"encoder-{i + 1}"].params)
        for p, w in zip(roles[f"encoder-{i + 1}"].params, want):
            got = p.grad if p.grad is not None else np.zeros_like(p.data)
            worst = max(worst, float(np.max(np.abs(got - w))))
    fusion_obj = ad.add(losses[0], losses[1])
    want = ad.gradients(fusion_obj, roles["fusion"].params)
    for p, w in zip(roles["fusion"].params, want):
        got = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, float(np.max(np.abs(got - w))))
    ad.zero_grads(groups)
    return worst < 1e-12, f"max abs routed-vs-composed gap {worst:.3e} < 1e-12"


def _check_importance(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    model = _toy_model(seed)
    xs, _ = _toy_batch(rng)
    latents = [enc(x) for enc, x in zip(model.encoders, xs)]
    sigmas = sample_permutations(6, 3, rng)
    scores = game.importance_scores(model, latents, sigmas)
    direct = np.array([-mipd_loss(model, latents, i, sigmas).item() for i in range(2)])
    ok = np.array_equal(scores, direct)
    return ok, "importance == -influence loss bitwise" if ok else f"mismatch {scores - direct}"


def _check_jsd_values(seed: int) -> tuple[bool, str]:
    one = Tensor(np.array([[1.0, 0.0]]))
    other = Tensor(np.array([[0.0, 1.0]]))
    v1 = jsd(one, other).item()
    if v1 != math.log(2.0):
        return False, f"disjoint JSD {v1!r} != ln 2"
    v2 = jsd(Tensor(np.array([[0.5, 0.5]])), Tensor(np.array([[1.0, 0.0]]))).item()
    if v2 != 0.21576155433883568:
        return False, f"half-overlap JSD {v2!r} unexpected"
    logits = Tensor(np.zeros((4, 5)))
    v3 = cross_entropy(logits, np.array([0, 1, 2, 3])).item()
    if v3 != math.log(5.0):
        return False, f"uniform CE {v3!r} != ln 5"
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(4), size=16)
    q = rng.dirichlet(np.ones(4), size=16)
    v = jsd(Tensor(p), Tensor(q)).item()
    if not 0.0 <= v <= math.log(2.0) + 1e-15:
        return False, f"random JSD {v} out of range"
    return True, "frozen constants exact; random JSD in [0, ln 2]"


def _check_determinism(seed: int) -> tuple[bool, str]:
    spec = SyntheticSpec(
        n_classes=3, dim=6, n_train=60, n_val=30, n_test=30,
        shared_frac=0.4, unique_frac_1=0.2, unique_frac_2=0.2, seed=seed,
    )
    data = generate(spec)
    run = RunConfig(
        method="mcr",
        seed=seed,
        arch=ArchConfig(encoder_hidden=(8,), latent_dim=4, fusion_hidden=(8,), recon_hidden=(8,)),
        optimizer=OptimConfig(epochs=2, batch_size=16, patience=5),
        diagnostics=DiagConfig(probe_steps=30),
    )
    csvs = []
    for _ in range(2):
        res = train(run, data)
        csvs.append(records_to_csv(res.records, 2, {"config_hash": "x", "seed": seed}))
    ok = csvs[0] == csvs[1]
    return ok, "two runs, identical epoch CSV bytes" if ok else "rerun diverged"


def all_checks() -> list[tuple[str, object]]:
    return [
        ("gradient-fd-task", lambda s: _check_fd("task", s)),
        ("gradient-fd-unimodal", lambda s: _check_fd("unimodal", s)),
        ("gradient-fd-contrastive", lambda s: _check_fd("contrastive", s)),
        ("gradient-fd-influence", lambda s: _check_fd("influence", s)),
        ("gradient-fd-recon", lambda s: _check_fd("recon", s)),
        ("equilibrium-identity", _check_equilibrium),
        ("mi-identity", _check_mi_identity),
        ("contrastive-bound", _check_bound),
        ("contrastive-bound-monotonic", _check_bound_monotonic),
        ("cost-permute-latent", lambda s: _check_cost("permute-latent", s)),
        ("cost-noise-input", lambda s: _check_cost("noise-input", s)),
        ("permutation-validity", _check_permutations),
        ("routing-collaborative", lambda s: _check_routing("collaborative", s)),
        ("routing-independent", lambda s: _check_routing("independent", s)),
        ("routing-greedy", lambda s: _check_routing("greedy", s)),
        ("importance-negation", _check_importance),
        ("jsd-values", _check_jsd_values),
        ("determinism-train", _check_determinism),
    ]


def run_checks(filter_substr: str = "", seed: int = 0, inject_greedy_sign_flip: bool = False) -> int:
    checks = [(n, f) for n, f in all_checks() if filter_substr in n]
    if not checks:
        print(f"no checks match '{filter_substr}'")
        return 2

    original = game.strategy_matrix
    if inject_greedy_sign_flip:

        def tampered(strategy, n_modalities, fusion_k=None):
            mat = original(strategy, n_modalities, fusion_k)
            if strategy == "greedy":
                mat.k[0, 1] = -mat.k[0, 1]
            return mat

        game.strategy_matrix = tampered

    t0 = time.time()
    failures = 0
    try:
        for name, fn in checks:
            start = time.time()
            try:
                ok, detail = fn(seed)
            except Exception as e:
                ok, detail = False, f"raised {type(e).__name__}: {e}"
            status = "PASS" if ok else "FAIL"
            failures += 0 if ok else 1
            print(f"{status}  {name:28s} {detail}  [{time.time() - start:.1f}s]")
    finally:
        game.strategy_matrix = original

    total = time.time() - t0
    print(f"verify: {len(checks) - failures}/{len(checks)} checks passed in {total:.1f}s")
    return 1 if failures else 0
