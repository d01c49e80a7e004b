import json

import numpy as np
import pytest

from camfprint.evaluation import (
    EvaluationError,
    SimilarityMatrix,
    enumerated_matrix,
    heatmap_figure,
    overall_accuracy,
    render_heatmap,
    same_model_report,
    similarity_matrix,
    similarity_matrix_from_groups,
)
from camfprint.similarity import build_similarity_net
from camfprint.store import SignatureStore, StoreRecord


def _groups(devices, per_device, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    return {d: rng.standard_normal((per_device, dim)).astype(np.float32) for d in devices}


def _matrix(cells, devices=None):
    cells = np.asarray(cells, float)
    devices = devices or [f"D{k}_0" for k in range(len(cells))]
    return SimilarityMatrix(devices, cells, 100, 0.5, 0)


def constant(value):
    return lambda A, B: np.full(len(A), value)


def test_constant_scorer_gives_all_ones():
    devices = ["A_0", "B_0", "C_0"]
    m = similarity_matrix_from_groups(_groups(devices, 3), constant(1.0), devices, 50, eta=0.99)
    assert np.all(m.cells == 1.0)
    assert overall_accuracy(m).overall_accuracy == pytest.approx(1 / 3)


def test_cells_are_multiples_of_one_over_n():
    devices = ["A_0", "B_0"]
    rng = np.random.default_rng(0)
    m = similarity_matrix_from_groups(
        _groups(devices, 5), lambda A, B: rng.random(len(A)), devices, 10, eta=0.5
    )
    np.testing.assert_array_equal(m.cells * 10, np.round(m.cells * 10))
    np.testing.assert_array_equal(m.counts, m.cells * 10)


def test_eta_is_inclusive():
    devices = ["A_0", "B_0"]
    m = similarity_matrix_from_groups(_groups(devices, 2), constant(0.7), devices, 5, eta=0.7)
    assert np.all(m.cells == 1.0)


def test_matrix_seeded_and_order_independent():
    devices = ["A_0", "B_0", "C_0"]
    g = _groups(devices, 4)
    scorer = lambda A, B: (A[:, 0] > B[:, 0]).astype(float)
    a = similarity_matrix_from_groups(g, scorer, devices, 20, 0.5, seed=7)
    b = similarity_matrix_from_groups(g, scorer, devices, 20, 0.5, seed=7)
    np.testing.assert_array_equal(a.cells, b.cells)
    rev = similarity_matrix_from_groups(g, scorer, devices[::-1], 20, 0.5, seed=7)
    assert rev.cells.shape == (3, 3)


def test_enumerated_two_by_three_oracle():
    g = {"A_0": np.array([[0.0], [1.0], [2.0]]), "B_0": np.array([[10.0], [11.0], [12.0]])}
    # score 1 when left value + right value is even
    scorer = lambda A, B: ((A[:, 0] + B[:, 0]) % 2 == 0).astype(float)
    out = enumerated_matrix(g, scorer, ["A_0", "B_0"], eta=0.5)
    np.testing.assert_allclose(out, [[5 / 9, 5 / 9], [5 / 9, 5 / 9]])


def test_missing_device_group():
    with pytest.raises(EvaluationError, match="B_0"):
        similarity_matrix_from_groups({"A_0": np.zeros((1, 4))}, constant(1), ["A_0", "B_0"])


def test_identity_accuracy_is_one():
    r = overall_accuracy(_matrix(np.eye(4)))
    assert r.overall_accuracy == 1.0
    assert r.worst_confusions == []


@pytest.mark.parametrize("n", [2, 5, 31])
def test_all_zero_matrix_accuracy(n):
    assert overall_accuracy(_matrix(np.zeros((n, n)))).overall_accuracy == pytest.approx((n * n - n) / n**2)


def test_single_cell_flip_changes_accuracy_by_one_over_n2():
    n = 5
    base = overall_accuracy(_matrix(np.eye(n))).overall_accuracy
    cells = np.eye(n)
    cells[1, 3] = 1.0
    assert base - overall_accuracy(_matrix(cells)).overall_accuracy == pytest.approx(1 / n**2)


def test_matrix_validation():
    with pytest.raises(EvaluationError):
        SimilarityMatrix(["A_0"], np.zeros((2, 2)), 1, 0.5, 0)
    with pytest.raises(EvaluationError):
        SimilarityMatrix(["A_0"], [[1.5]], 1, 0.5, 0)


def test_confusions_and_same_model_report():
    devices = ["Nikon_D200_0", "Nikon_D200_1", "Agfa_X_0"]
    cells = np.array([[0.9, 0.4, 0.0], [0.3, 0.8, 0.1], [0.0, 0.0, 1.0]])
    r = overall_accuracy(_matrix(cells, devices))
    assert r.worst_confusions[0] == ("Nikon_D200_0", "Nikon_D200_1", 0.4)
    assert [c[2] for c in r.worst_confusions] == [0.4, 0.3, 0.1]
    assert len(r.same_model_confusions) == 2
    rep = same_model_report(r)
    assert rep.same_model_mean_error == pytest.approx(0.35)
    assert rep.cross_model_mean_error == pytest.approx(0.1 / 4)
    assert json.loads(r.to_json())["overall_accuracy"] == pytest.approx(r.overall_accuracy)


def test_csv_layout():
    csv = _matrix([[1.0, 0.25], [0.0, 0.5]], ["A_0", "B_0"]).to_csv()
    assert csv.splitlines() == [",A_0,B_0", "A_0,1.0,0.25", "B_0,0.0,0.5"]


def test_heatmap_labels_and_bytes(tmp_path):
    devices = [f"Cam{k}_0" for k in range(4)]
    m = _matrix(np.eye(4), devices)
    fig = heatmap_figure(m)
    ax = fig.axes[0]
    assert [t.get_text() for t in ax.get_xticklabels()] == devices
    assert [t.get_text() for t in ax.get_yticklabels()] == devices
    assert len(ax.texts) == 16
    a = render_heatmap(m, tmp_path / "a.png").read_bytes()
    b = render_heatmap(m, tmp_path / "b.png").read_bytes()
    assert a[:8] == b"\x89PNG\r\n\x1a\n" and a == b


def test_heatmap_unwritable(tmp_path):
    with pytest.raises(EvaluationError):
        render_heatmap(_matrix(np.eye(2)), tmp_path / "missing" / "x.png")


def test_similarity_matrix_from_store(tmp_path):
    store = SignatureStore(tmp_path / "s.store")
    rng = np.random.default_rng(0)
    with store.batch():
        for d in ("A_0", "B_0"):
            for k in range(3):
                store.put(StoreRecord(f"/{d}/{k}", d, "ab" * 32, rng.standard_normal(1024)))
    f_sim = build_similarity_net(seed=0)
    m = similarity_matrix(store, f_sim, ["A_0", "B_0"], n_pairs_per_cell=10, eta=0.5, seed=1)
    assert m.cells.shape == (2, 2)
    with pytest.raises(EvaluationError):
        similarity_matrix(store, f_sim, ["A_0", "B_0"], 10, 0.5, 1, paths={"/A_0/0"})
