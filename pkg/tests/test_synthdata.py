"""Dataset generation, serialization, and the discrete-joint oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcrlab.synthdata import (
    MI_QUANTITIES,
    DiscreteJoint,
    SyntheticSpec,
    contrastive_bound_slack,
    generate,
    load_dataset,
    mi_all,
    mi_oracle,
    optimal_critic_contrastive,
    random_joint,
    save_dataset,
)
from mcrlab._util import save_npz

import oracles


def test_spec_validation_rejects_bad_fields():
    for bad in (
        dict(n_classes=1),
        dict(dim=3, n_classes=5),
        dict(n_train=0),
        dict(shared_frac=-0.1),
        dict(shared_frac=0.7, unique_frac_1=0.3, unique_frac_2=0.2),
        dict(noise_std=0.0),
        dict(amplitude=0.0),
    ):
        with pytest.raises(ValueError):
            SyntheticSpec(**bad).validate()
    SyntheticSpec().validate()


def test_generate_shapes_and_determinism():
    spec = SyntheticSpec(n_classes=3, dim=5, n_train=40, n_val=20, n_test=30, seed=9)
    a, b = generate(spec), generate(spec)
    assert a.n_modalities == 2
    assert a.input_dims == (5, 5)
    for name, n in (("train", 40), ("val", 20), ("test", 30)):
        split = a.splits[name]
        assert split.y.shape == (n,) and split.row_type.shape == (n,)
        assert all(x.shape == (n, 5) for x in split.xs)
        assert (split.y >= 0).all() and (split.y < 3).all()
        for m in range(2):
            assert np.array_equal(split.xs[m], b.splits[name].xs[m])
    c = generate(SyntheticSpec(n_classes=3, dim=5, n_train=40, n_val=20, n_test=30, seed=10))
    assert not np.array_equal(a.splits["train"].xs[0], c.splits["train"].xs[0])


def test_generate_row_types_follow_the_fractions():
    spec = SyntheticSpec(
        n_classes=2, dim=3, n_train=400, n_val=10, n_test=10,
        shared_frac=0.5, unique_frac_1=0.5, unique_frac_2=0.0, seed=1,
    )
    ds = generate(spec)
    rt = ds.splits["train"].row_type
    assert set(np.unique(rt)) <= {0, 1}  # zero-probability types never occur
    assert abs(np.mean(rt == 0) - 0.5) < 0.1


def test_generate_projections_are_orthonormal():
    ds = generate(SyntheticSpec(n_classes=4, dim=9, n_train=5, n_val=5, n_test=5))
    for proj in ds.projections:
        assert proj.shape == (9, 4)
        assert np.allclose(proj.T @ proj, np.eye(4), atol=1e-10)


def test_dataset_round_trip_and_reproducible_bytes(tmp_path):
    spec = SyntheticSpec(n_classes=3, dim=4, n_train=12, n_val=6, n_test=8, seed=2)
    ds = generate(spec)
    p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
    save_dataset(ds, str(p1))
    save_dataset(ds, str(p2))
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "a.json").exists()

    back = load_dataset(str(p1))
    assert back.spec == spec
    for name in ("train", "val", "test"):
        assert np.array_equal(back.splits[name].y, ds.splits[name].y)
        assert np.array_equal(back.splits[name].row_type, ds.splits[name].row_type)
        for m in range(2):
            assert np.array_equal(back.splits[name].xs[m], ds.splits[name].xs[m])
    for m in range(2):
        assert np.array_equal(back.projections[m], ds.projections[m])


def test_load_dataset_rejects_foreign_archives(tmp_path):
    path = tmp_path / "data.npz"
    save_npz(str(path), {"x": np.zeros(2)})
    (tmp_path / "data.json").write_text('{"kind": "something-else"}')
    with pytest.raises(ValueError, match="dataset"):
        load_dataset(str(path))


# discrete joints ---------------------------------------------------------------


def test_discrete_joint_validation():
    with pytest.raises(ValueError, match="3-d"):
        DiscreteJoint(np.ones((2, 2)) / 4)
    with pytest.raises(ValueError, match="negative"):
        DiscreteJoint(np.array([[[1.5, -0.5]], [[0.0, 0.0]]]) / 1.0)
    with pytest.raises(ValueError, match="sums"):
        DiscreteJoint(np.ones((2, 2, 2)))


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    shape=st.tuples(st.integers(2, 4), st.integers(2, 4), st.integers(2, 4)),
)
def test_mi_oracle_matches_entropy_reference(seed, shape):
    joint = random_joint(np.random.default_rng(seed), shape)
    want = oracles.mi_quantities(joint.p)
    for q in MI_QUANTITIES:
        assert mi_oracle(joint, q) == pytest.approx(want[q], abs=1e-12)
        assert mi_oracle(joint, q) >= -1e-12


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mi_chain_decomposition_is_exact(seed):
    joint = random_joint(np.random.default_rng(seed), (3, 4, 2))
    v = mi_all(joint)
    lhs = v["I(X1,X2;Y)"]
    rhs = v["I(X1;Y|X2)"] + v["I(X2;Y|X1)"] + v["I(X1;X2)"] - v["I(X1;X2|Y)"]
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_mi_oracle_rejects_unknown_quantities():
    joint = random_joint(np.random.default_rng(0), (2, 2, 2))
    with pytest.raises(ValueError, match="quantity"):
        mi_oracle(joint, "I(Y;Y)")


def test_optimal_critic_loss_is_log_n_under_full_independence():
    p = np.full((2, 3, 2), 1.0 / 12.0)
    loss = optimal_critic_contrastive(DiscreteJoint(p), n_batch=4)
    assert loss == pytest.approx(np.log(4), abs=1e-12)
    assert contrastive_bound_slack(DiscreteJoint(p), n_batch=4) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_contrastive_bound_holds_on_random_joints(seed):
    joint = random_joint(np.random.default_rng(seed), (2, 3, 2))
    assert contrastive_bound_slack(joint, n_batch=3) >= -1e-9


def test_contrastive_bound_gap_shrinks_with_batch_size():
    joint = random_joint(np.random.default_rng(5), (2, 3, 2))
    slacks = [contrastive_bound_slack(joint, n_batch=n) for n in (2, 4, 6)]
    assert slacks[0] >= slacks[1] >= slacks[2] >= -1e-9


def test_exact_enumeration_cap_is_enforced():
    joint = random_joint(np.random.default_rng(0), (4, 4, 4))
    with pytest.raises(ValueError, match="mc"):
        optimal_critic_contrastive(joint, n_batch=64, cap=1000)


def test_monte_carlo_estimate_tracks_the_exact_loss():
    joint = random_joint(np.random.default_rng(7), (2, 3, 2))
    exact = optimal_critic_contrastive(joint, n_batch=4)
    mc = optimal_critic_contrastive(
        joint, n_batch=4, mode="mc", rng=np.random.default_rng(8), mc_samples=20000
    )
    assert mc == pytest.approx(exact, abs=0.02)
