import numpy as np
import pytest

import mela


def test_version():
    assert mela.__version__ == "0.1.0"


def test_ridge_matches_normal_equations():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(40, 6))
    y = np.arange(40) % 4
    lam = 0.1
    W = mela.ridge_fit(Z, y.tolist(), 4, lam)
    Y = np.eye(4)[y]
    expected = np.linalg.solve(Z.T @ Z + len(Z) * lam * np.eye(6), Z.T @ Y).T
    np.testing.assert_allclose(W, expected, atol=1e-10)


def test_logreg_separates_two_blobs():
    rng = np.random.default_rng(1)
    Z = np.vstack([rng.normal(-3, 1, size=(30, 2)), rng.normal(3, 1, size=(30, 2))])
    y = [0] * 30 + [1] * 30
    W, objective, converged = mela.logreg_fit(Z, y, 2, lambda2=0.01)
    assert converged
    assert objective > 0
    assert ((Z @ W.T).argmax(axis=1) == np.array(y)).all()


def test_prune_threshold():
    assert mela.prune_threshold(400, 5, 20, 2.0) == pytest.approx(100 - 2 * 75**0.5)


def test_clustering_accuracy():
    assert mela.clustering_accuracy([0, 0, 0, 1, 1], [1, 1, 2, 2, 2]) == pytest.approx(0.8)
    with pytest.raises(mela.ValidationError):
        mela.clustering_accuracy([], [])


def test_kmeans_two_blobs():
    rng = np.random.default_rng(2)
    pts = np.vstack([rng.normal(0, 1, size=(50, 2)), rng.normal(40, 1, size=(50, 2))])
    _, labels = mela.kmeans(pts, 2, seed=3)
    assert mela.clustering_accuracy(labels, [0] * 50 + [1] * 50) == 1.0


def test_bound_holds():
    for seed in range(5):
        r = mela.verify_bound(seed)
        assert r["pass"]
        assert r["gap"] >= 0
        assert r["identity_diff"] <= 1e-12


def test_config_rejects_unknown_keys():
    with pytest.raises(mela.ValidationError):
        mela.Config(overrides={"world.colour": "red"})
    assert "prune.q" in mela.config_keys()


def small_config():
    return mela.Config(
        overrides={
            "world.classes": "10",
            "world.dim": "8",
            "world.samples_per_class": "200",
            "world.test_classes": "5",
            "task.count": "120",
            "embed.m": "8",
            "train.epochs": "2",
            "pretrain.epochs": "3",
            "labeler.initial_clusters": "30",
            "eval.test_tasks": "20",
        }
    )


def test_compare_rows():
    rows = mela.compare(small_config(), ["initial", "mela", "kmeans"])
    assert [r["variant"] for r in rows] == ["initial", "mela", "kmeans"]
    for r in rows:
        assert r["error"] is None
        assert 0.0 <= r["accuracy"] <= 1.0


def test_sweep_csv():
    csv = mela.sweep(small_config(), "q", [0, 6.5])
    lines = csv.strip().splitlines()
    assert lines[0].startswith("q,cluster_count")
    assert len(lines) == 3
