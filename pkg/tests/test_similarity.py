import numpy as np
import pytest
import torch

from camfprint.similarity import (
    DEFAULT_GRID,
    PAIR_RECORD,
    Phase2Config,
    SimilarityNet,
    SimilarityNetSpec,
    Threshold,
    best_threshold,
    build_similarity_net,
    candidate_thresholds,
    f1_score,
    fit_similarity_net,
    learning_rate_at,
    load_similarity,
    make_pairs,
    read_pair_file,
    save_similarity,
    score,
    score_pairs,
    select_threshold,
    symmetry_gap,
    train_phase2,
    write_pair_file,
)
from conftest import make_signatures


@pytest.fixture(scope="module")
def f_sim():
    return build_similarity_net(seed=0).eval()


def test_pair_counts_and_labels():
    sigs = make_signatures(["A_0", "B_0", "C_0"], 4)
    pairs = make_pairs(sigs)
    assert len(pairs) == 66
    assert int(pairs.labels.sum()) == 3 * 6
    for p in pairs:
        assert p.label == int(p.s1.device_id == p.s2.device_id)
        assert p.s1 is not p.s2
    keys = {frozenset((int(a), int(b))) for a, b in zip(pairs.left, pairs.right)}
    assert len(keys) == 66


def test_pair_orientation_is_mixed_and_seeded():
    sigs = make_signatures(["A_0", "B_0"], 10)
    a, b = make_pairs(sigs, seed=1), make_pairs(sigs, seed=1)
    np.testing.assert_array_equal(a.left, b.left)
    frac = np.mean(a.left < a.right)
    assert 0.3 < frac < 0.7


def test_balanced_pairs():
    sigs = make_signatures(["A_0", "B_0", "C_0", "D_0"], 5)
    pairs = make_pairs(sigs, mode="balanced", seed=3)
    assert int(pairs.labels.sum()) == 4 * 10
    assert len(pairs) == 80


def test_make_pairs_errors():
    with pytest.raises(ValueError, match="no same-device"):
        make_pairs(make_signatures(["A_0", "B_0", "C_0"], 1))
    with pytest.raises(ValueError):
        make_pairs(make_signatures(["A_0"], 2), mode="weird")
    mixed = make_signatures(["A_0"], 2) + make_signatures(["A_0"], 1, version="b" * 64)
    with pytest.raises(ValueError, match="different extractors"):
        make_pairs(mixed)


def test_split_by_members():
    sigs = make_signatures(["A_0", "B_0"], 3)
    pairs = make_pairs(sigs)
    hold = np.array([False, False, True, False, True, True])
    train, val = pairs.split_by_members(hold)
    assert len(train) + len(val) == len(pairs)
    assert len(val) == 3
    assert all(hold[l] and hold[r] for l, r in zip(val.left, val.right))


def test_pair_file_roundtrip(tmp_path):
    sigs = make_signatures(["A_0", "B_0"], 3)
    pairs = make_pairs(sigs)
    ids = [10, 11, 12, 20, 21, 22]
    write_pair_file(tmp_path / "p.bin", pairs, ids)
    raw = (tmp_path / "p.bin").read_bytes()
    assert len(raw) == 17 * len(pairs)
    rec = read_pair_file(tmp_path / "p.bin")
    np.testing.assert_array_equal(rec["sig1"], np.array(ids)[pairs.left])
    np.testing.assert_array_equal(rec["label"], pairs.labels)
    assert int.from_bytes(raw[:8], "little") == ids[pairs.left[0]]
    (tmp_path / "bad.bin").write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        read_pair_file(tmp_path / "bad.bin")
    assert PAIR_RECORD.itemsize == 17


def test_fusion_layout(f_sim):
    s1, s2 = torch.rand(2, 1024), torch.rand(2, 1024)
    fused = f_sim.fusion(s1, s2)
    assert fused.shape == (2, 5120)
    torch.testing.assert_close(fused[:, :2048], f_sim.fc1(s1))
    torch.testing.assert_close(fused[:, 2048:4096], f_sim.fc1(s2))
    torch.testing.assert_close(fused[:, 4096:], s1 * s2)
    zero = f_sim.fusion(s1, torch.zeros(2, 1024))
    assert torch.all(zero[:, 4096:] == 0)


def test_layer_widths(f_sim):
    assert f_sim.fc1[0].in_features == 1024 and f_sim.fc1[0].out_features == 2048
    assert f_sim.fc2[0].in_features == 5120 and f_sim.fc2[0].out_features == 64
    assert f_sim.out.out_features == 1
    assert SimilarityNetSpec().fusion_dim == 5120


def test_fc1_is_shared(f_sim):
    names = [n for n, _ in f_sim.named_parameters()]
    assert sum(n.startswith("fc1.") for n in names) == 2  # one weight, one bias


def test_scores_in_unit_interval(f_sim):
    p = f_sim(torch.rand(5, 1024) * 2 - 1, torch.rand(5, 1024) * 2 - 1)
    assert torch.all((p >= 0) & (p <= 1))


def test_wrong_signature_length(f_sim):
    with pytest.raises(ValueError):
        f_sim(torch.rand(1, 512), torch.rand(1, 512))


def test_indexed_logits_match_direct(f_sim):
    S = torch.rand(6, 1024)
    left, right = torch.tensor([0, 1, 1, 5]), torch.tensor([2, 2, 0, 5])
    with torch.no_grad():
        torch.testing.assert_close(f_sim.indexed_logits(S, left, right), f_sim.logits(S[left], S[right]))


def test_lr_schedule():
    cfg = Phase2Config()
    got = [learning_rate_at(e, cfg) for e in range(1, 10)]
    assert got == [0.005] * 3 + [0.0025] * 3 + [0.00125] * 3
    assert learning_rate_at(30, cfg) == pytest.approx(0.005 * 0.5**9)


def test_phase2_config_validation():
    with pytest.raises(ValueError):
        Phase2Config(lr_decay_factor=0)
    with pytest.raises(ValueError):
        Phase2Config(pair_sampling="x")


def test_overfits_two_pairs():
    rng = np.random.default_rng(0)
    S = np.tanh(rng.standard_normal((3, 1024))).astype(np.float32)
    model = build_similarity_net(seed=1)
    cfg = Phase2Config(epochs=60, learning_rate=0.05, lr_decay_every=100, batch_size=2, momentum=0.9)
    res = fit_similarity_net(model, S, [0, 0], [1, 2], [1, 0], cfg)
    assert res.log[-1]["train_loss"] < 0.01
    assert [e["lr"] for e in res.log[:2]] == [0.05, 0.05]


def test_fit_needs_both_labels():
    S = np.zeros((2, 1024), np.float32)
    with pytest.raises(ValueError):
        fit_similarity_net(build_similarity_net(seed=0), S, [0], [1], [1], Phase2Config(epochs=1))


def test_train_phase2_records_version_and_logs():
    sigs = make_signatures(["A_0", "B_0"], 4)
    pairs = make_pairs(sigs)
    hold = np.array([False, False, True, True] * 2)
    tr, va = pairs.split_by_members(hold)
    model = build_similarity_net(seed=0)
    res = train_phase2(model, tr, Phase2Config(epochs=2), va)
    assert model.extractor_version == "a" * 64
    assert res.log[0]["val_f1"] is not None
    assert set(res.log[0]) >= {"epoch", "lr", "train_loss", "val_loss", "val_f1"}


def test_training_deterministic():
    sigs = make_signatures(["A_0", "B_0"], 4)
    pairs = make_pairs(sigs)
    logs = []
    for _ in range(2):
        m = build_similarity_net(seed=5)
        logs.append(train_phase2(m, pairs, Phase2Config(epochs=2, seed=5)).log)
    assert logs[0] == logs[1]


def test_score_version_checks(f_sim):
    a, b = make_signatures(["A_0"], 2)
    other = make_signatures(["B_0"], 1, version="b" * 64)[0]
    assert 0 <= score(f_sim, a, b) <= 1
    with pytest.raises(ValueError):
        score(f_sim, a, other)
    model = build_similarity_net(seed=0)
    model.extractor_version = "c" * 64
    with pytest.raises(ValueError, match="another extractor"):
        score(model, a, b)


def test_score_symmetry_not_assumed_but_finite(f_sim):
    a, b = make_signatures(["A_0"], 2)
    assert np.isfinite(score(f_sim, a, b)) and np.isfinite(score(f_sim, b, a))


def test_symmetry_gap(f_sim):
    rng = np.random.default_rng(0)
    A = np.tanh(rng.standard_normal((4, 1024))).astype(np.float32)
    B = np.tanh(rng.standard_normal((4, 1024))).astype(np.float32)
    gap = symmetry_gap(f_sim, A, B)
    assert gap["pairs"] == 4 and 0 <= gap["mean"] <= gap["max"] <= 1
    assert symmetry_gap(f_sim, A, A)["max"] == 0.0


def test_similarity_checkpoint_roundtrip(tmp_path):
    model = build_similarity_net(SimilarityNetSpec(hidden_units=8), seed=2)
    model.extractor_version = "d" * 64
    h = save_similarity(tmp_path / "s.ckpt", model)
    back = load_similarity(tmp_path / "s.ckpt")
    assert back.version == h == model.version
    assert back.extractor_version == "d" * 64
    assert back.spec.hidden_units == 8


# -- threshold -------------------------------------------------------------


def test_f1_score():
    assert f1_score([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.5)
    assert f1_score([0, 0], [1, 0]) == 0.0


def test_threshold_hand_oracle():
    scores = [0.97, 0.92, 0.40, 0.10]
    labels = [1, 1, 0, 0]
    eta, f1 = best_threshold(scores, labels)
    # every eta in (0.40, 0.92] reaches F1 = 1; largest such grid value wins
    assert (eta, f1) == (0.9, 1.0)


def test_threshold_inclusive_boundary():
    eta, f1 = best_threshold([0.95, 0.5], [1, 0], grid=[0.95])
    assert eta == 0.95 and f1 == 1.0


def test_threshold_undefined_f1():
    with pytest.raises(ValueError, match="F1 undefined"):
        best_threshold([0.2, 0.9], [1, 1])
    with pytest.raises(ValueError):
        best_threshold([0.2, 0.9], [1, 0], grid=[])


def test_candidate_thresholds_cover_every_split():
    s = np.array([0.2, 0.2, 0.5, 0.9])
    c = candidate_thresholds(s)
    splits = {tuple(s >= t) for t in c}
    assert len(splits) == len(np.unique(s)) + 1


def test_select_threshold_exhaustive(f_sim):
    sigs = make_signatures(["A_0", "B_0", "C_0"], 4)
    pairs = make_pairs(sigs)
    th = select_threshold(f_sim, pairs, "exhaustive")
    scores = score_pairs(f_sim, pairs)
    brute = max(f1_score(scores >= t, pairs.labels) for t in np.append(scores, 1.1))
    assert th.selection_f1 == brute
    assert th.extractor_version == "a" * 64 and th.similarity_version == f_sim.version
    with pytest.raises(ValueError):
        select_threshold(f_sim, pairs, "bogus")


def test_threshold_json_roundtrip(tmp_path):
    t = Threshold(0.95, 0.8, list(DEFAULT_GRID), "a" * 64, "b" * 64)
    t.save(tmp_path / "t.json")
    assert Threshold.load(tmp_path / "t.json") == t


def test_default_grid():
    assert DEFAULT_GRID[:3] == (0.5, 0.55, 0.6)
    assert DEFAULT_GRID[-1] == 0.995 and len(DEFAULT_GRID) == 15


def test_toy_finite_difference_gradient():
    torch.manual_seed(0)
    net = SimilarityNet(SimilarityNetSpec(signature_dim=8, fc1_units=6, hidden_units=4)).double()
    s1 = torch.tanh(torch.randn(3, 8, dtype=torch.float64))
    s2 = torch.tanh(torch.randn(3, 8, dtype=torch.float64))
    y = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    loss_fn = torch.nn.BCELoss()
    loss_fn(net(s1, s2), y).backward()
    eps, worst = 1e-6, 0.0
    for p in net.parameters():
        flat = p.data.view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + eps
            up = loss_fn(net(s1, s2), y).item()
            flat[k] = orig - eps
            down = loss_fn(net(s1, s2), y).item()
            flat[k] = orig
            num = (up - down) / (2 * eps)
            ana = p.grad.view(-1)[k].item()
            denom = max(abs(num), abs(ana))
            if denom > 1e-7:
                worst = max(worst, abs(num - ana) / denom)
    assert worst <= 1e-3
