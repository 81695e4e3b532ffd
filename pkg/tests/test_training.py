import numpy as np
import pytest

from treempc.dataset import Dataset, StateBox
from treempc.errors import Diverged, ValidationError
from treempc.training import (SoftTreeParams, TrainConfig, grad, harden,
                              init_params, leaf_weights, loss, rmse,
                              soft_forward, train)

from invariants import (random_soft_params, soft_hard_margin_suite,
                        weight_normalization_suite)
from oracles import soft_loss_direct


def _random_batch(rng, p, size=24):
    X = rng.normal(size=(size, p.n))
    U = rng.normal(size=(size, p.m))
    return X, U


def _affine_dataset(rng, S=400, n=2, m=1):
    X = rng.uniform(-2.0, 2.0, size=(S, n))
    F = rng.normal(size=(n, m))
    g = rng.normal(size=m)
    return Dataset(X=X, U=X @ F + g, box=StateBox(-2 * np.ones(n),
                                                  2 * np.ones(n)),
                   delta=None)


def test_loss_matches_direct_products():
    rng = np.random.default_rng(0)
    for _ in range(40):
        p = random_soft_params(rng)
        X, U = _random_batch(rng, p)
        ours = loss(p, (X, U))
        ref = soft_loss_direct(p.a, p.b, p.c, p.d, p.alpha, X, U)
        assert ours == pytest.approx(ref, rel=1e-11, abs=1e-12)


def test_grad_matches_finite_differences():
    """Central differences on an extended-precision reference loss."""
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(25):
        p = random_soft_params(rng, max_depth=3, max_n=3)
        p.alpha = float(rng.choice([1.0, 10.0]))
        X, U = _random_batch(rng, p, size=12)
        Xl, Ul = X.astype(np.longdouble), U.astype(np.longdouble)
        ga, gb, gc, gd = grad(p, (X, U))
        analytic = np.concatenate([ga.ravel(), gb.ravel(),
                                   gc.ravel(), gd.ravel()])
        flat = p.pack()
        fd = np.empty_like(analytic)
        for k in range(flat.size):
            bumped = flat.copy()
            bumped[k] += h
            p.unpack(bumped)
            up = soft_loss_direct(p.a, p.b, p.c, p.d, p.alpha, Xl, Ul,
                                  dtype=np.longdouble)
            bumped[k] -= 2 * h
            p.unpack(bumped)
            down = soft_loss_direct(p.a, p.b, p.c, p.d, p.alpha, Xl, Ul,
                                    dtype=np.longdouble)
            fd[k] = float((up - down) / (2 * h))
        p.unpack(flat)
        big = np.abs(analytic) > 1e-8
        rel = np.abs(analytic[big] - fd[big]) / np.abs(analytic[big])
        assert rel.size == 0 or np.max(rel) < 1e-4


def test_leaf_weights_are_probabilities():
    dev, wmin = weight_normalization_suite(200, seed=2)
    assert dev <= 1e-12
    assert wmin >= 0.0


def test_soft_matches_hard_away_from_splits():
    # wrong-side leaf mass at margin 20/alpha is at most 1/(1+e^20) per
    # branch, so even O(10) law gaps stay far below the tolerance
    worst, n_cases, n_points = soft_hard_margin_suite(300, seed=3,
                                                      margin_factor=20.0)
    assert n_cases == 300 and n_points > 1000
    assert worst <= 1e-6


def test_soft_forward_edge_cases():
    # depth 0 ignores alpha entirely
    p = SoftTreeParams(depth=0, a=np.zeros((0, 2)), b=np.zeros(0),
                       c=np.array([[[2.0], [0.0]]]), d=np.array([[1.0]]),
                       alpha=123.0)
    x = np.array([3.0, 9.0])
    assert soft_forward(p, x)[0] == pytest.approx(7.0)
    # a point exactly on a depth-1 boundary blends the two leaves equally
    p1 = SoftTreeParams(depth=1, a=np.array([[1.0]]), b=np.array([0.0]),
                        c=np.zeros((2, 1, 1)), d=np.array([[0.0], [1.0]]),
                        alpha=50.0)
    assert soft_forward(p1, np.array([0.0]))[0] == pytest.approx(0.5)
    # saturated sigmoids reproduce hard routing
    t1 = p1.as_tree()
    p1.alpha = 1e6
    for xv in (-0.7, 0.4):
        x = np.array([xv])
        assert soft_forward(p1, x)[0] == pytest.approx(t1.predict(x)[0],
                                                       abs=1e-9)


def test_train_recovers_single_affine_law():
    rng = np.random.default_rng(4)
    ds = _affine_dataset(rng)
    tree, report = train(ds, 2, TrainConfig(epochs=5, batch_size=128))
    assert rmse(tree.predict_batch(ds.X), ds.U) <= 1e-6
    assert report.train_rmse <= 1e-6


def test_empty_leaves_inherit_sibling_laws():
    rng = np.random.default_rng(5)
    X = rng.uniform(-1.0, 1.0, size=(200, 2))
    U = X @ np.array([[0.5], [-0.25]]) + 0.1
    # root split sends every sample left; the right subtree sees nothing
    p = SoftTreeParams(depth=2,
                       a=np.array([[1.0, 0.0], [0.3, 1.0], [-0.2, 0.6]]),
                       b=np.array([5.0, 0.0, 0.1]),
                       c=rng.normal(size=(4, 2, 1)),
                       d=rng.normal(size=(4, 1)),
                       alpha=100.0)
    tree = harden(p, (X, U))
    assert np.array_equal(tree.leaf_c[2:], tree.leaf_c[:2])
    assert np.array_equal(tree.leaf_d[2:], tree.leaf_d[:2])
    far_right = np.array([10.0, 0.0])
    assert np.all(np.isfinite(tree.predict(far_right)))
    assert np.max(np.abs(tree.predict_batch(X) - U)) < 1e-8


def test_hardening_refits_exactly_representable_data():
    rng = np.random.default_rng(6)
    ds = _affine_dataset(rng, S=300)
    p = init_params(ds, 2, rng, noise=0.05)
    tree = harden(p, ds)
    # the 1e-8 refit ridge leaves a bias of the same order on small leaves
    assert rmse(tree.predict_batch(ds.X), ds.U) < 1e-8


def test_loss_history_trends_downward():
    rng = np.random.default_rng(7)
    X = rng.uniform(-2.0, 2.0, size=(600, 2))
    U = np.clip(X @ np.array([[-1.2], [0.7]]), -0.8, 0.8)
    ds = Dataset(X=X, U=U, box=StateBox(-2 * np.ones(2), 2 * np.ones(2)),
                 delta=None)
    _, report = train(ds, 2, TrainConfig(epochs=40, batch_size=128))
    hist = report.loss_history
    assert len(hist) == 40
    assert np.mean(hist[-10:]) <= np.mean(hist[:10])
    assert np.all(np.isfinite(hist))


def test_training_is_deterministic():
    rng = np.random.default_rng(8)
    ds = _affine_dataset(rng, S=256)
    cfg = TrainConfig(epochs=8, batch_size=64, seed=11)
    t1, r1 = train(ds, 2, cfg)
    t2, r2 = train(ds, 2, cfg)
    assert np.array_equal(t1.branch_a, t2.branch_a)
    assert np.array_equal(t1.branch_b, t2.branch_b)
    assert np.array_equal(t1.leaf_c, t2.leaf_c)
    assert np.array_equal(t1.leaf_d, t2.leaf_d)
    assert r1.loss_history == r2.loss_history
    t3, _ = train(ds, 2, TrainConfig(epochs=8, batch_size=64, seed=12))
    assert not np.array_equal(t3.branch_a, t1.branch_a)


def test_divergence_is_reported():
    rng = np.random.default_rng(9)
    ds = _affine_dataset(rng, S=64)
    cfg = TrainConfig(epochs=2, batch_size=32, learning_rate=1e160)
    with pytest.raises(Diverged):
        train(ds, 1, cfg)


def test_report_bookkeeping():
    rng = np.random.default_rng(10)
    ds = _affine_dataset(rng, S=200)
    tree, rep = train(ds, 1, TrainConfig(epochs=6, batch_size=64,
                                         validation_fraction=0.2))
    assert rep.n_train + rep.n_val == 200
    assert rep.n_val == 40
    assert rep.harden_delta == pytest.approx(rep.train_rmse - rep.soft_rmse)
    assert rep.epochs_run == 6
    assert rep.wall_seconds > 0
    d = rep.to_dict()
    assert d["n_train"] == 160 and len(d["loss_history"]) == 6


def test_restarts_keep_best_model():
    rng = np.random.default_rng(11)
    ds = _affine_dataset(rng, S=300)
    _, rep = train(ds, 2, TrainConfig(epochs=4, batch_size=128, restarts=3))
    assert 0 <= rep.restart_index < 3


def test_config_and_input_validation():
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0)
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(validation_fraction=0.6)
    with pytest.raises(ValidationError):
        TrainConfig(alpha_growth=0.9)
    with pytest.raises(ValidationError):
        TrainConfig(init_scheme="zeros")
    rng = np.random.default_rng(12)
    ds = _affine_dataset(rng, S=4)
    with pytest.raises(ValidationError):
        train(ds, 3, TrainConfig(epochs=1))   # 4 samples < 8 leaves
    with pytest.raises(ValidationError):
        SoftTreeParams(depth=1, a=np.zeros((1, 2)), b=np.zeros(1),
                       c=np.zeros((2, 2, 1)), d=np.zeros((2, 1)), alpha=0.0)
