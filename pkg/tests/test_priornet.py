import numpy as np
import pytest

from finepart import priornet as P
from finepart import tensor as T
from finepart.tensor import Tensor


def one_hot(labels, cols=None):
    labels = np.asarray(labels)
    k = cols or int(labels.max()) + 1
    return np.eye(k)[labels]


@pytest.fixture(scope="module")
def net():
    return P.PriorNet(seed=0)


def test_head_dimensions(net):
    assert [l.weight.shape[1] for l in net.head.layers] == [512, 256, 128]
    assert net.proj.weight.shape == (128, P.R_MAX)
    assert P.R_MAX == 5 and P.MARGIN == 100.0
    assert len({p.name for p in net.parameters()}) == len(net.parameters())


def test_features_identical_points_and_permutation(net):
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.5, 0.5, (512, 3))
    pts[7] = pts[3]
    f = P.extract_point_features(pts, net).data
    assert f.shape == (512, P.FEATURE_DIM)
    np.testing.assert_array_equal(f[7], f[3])
    perm = rng.permutation(512)
    np.testing.assert_allclose(P.extract_point_features(pts[perm], net).data, f[perm], rtol=0, atol=1e-10)
    with pytest.raises(P.PriorNetError):
        P.extract_point_features(pts[:100], net)


def test_feature_gradient_matches_finite_differences():
    small = P.PriorNet(seed=1, block_size=6)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.5, 0.5, (6, 3))
    w = rng.standard_normal((6, P.FEATURE_DIM))
    fn = lambda: T.sum(T.mul(P.extract_point_features(pts, small), w))
    assert T.grad_check(fn, small.feature_parameters()[:4]) < 1e-4


def test_gt_similarity_examples():
    np.testing.assert_array_equal(P.gt_similarity([0, 0, 1]), [[1, 1, 0], [1, 1, 0], [0, 0, 1]])
    s = P.gt_similarity([4, 4, 4, 4])
    assert np.all(s == 1) and np.linalg.matrix_rank(s) == 1


def test_gt_similarity_rank_equals_label_count():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(1, 33))
        labels = rng.integers(0, 6, n)
        assert np.linalg.matrix_rank(P.gt_similarity(labels)) == len(np.unique(labels))


def test_similarity_loss_examples():
    K = 100.0
    assert P.similarity_loss(Tensor(np.zeros((4, 2))), [1, 1, 1, 1], K).item() == 0.0
    assert P.similarity_loss(Tensor([[0.0], [K]]), [0, 1], K).item() == 0.0
    assert P.similarity_loss(Tensor([[0.0], [0.0], [K]]), [0, 0, 1], K).item() == 0.0
    assert P.similarity_loss(Tensor([[0.0], [0.0], [K / 2]]), [0, 0, 1], K).item() == pytest.approx(2 * K)


def test_similarity_loss_zero_iff_ideal():
    K = 10.0
    f = np.array([[0.0, 0], [0, 0], [K, 0], [K, 0]])
    assert P.similarity_loss(Tensor(f), [0, 0, 1, 1], K).item() == 0.0
    f[1, 1] = 1e-3
    assert P.similarity_loss(Tensor(f), [0, 0, 1, 1], K).item() > 0.0


def test_predict_similarity_examples():
    K = 100.0
    s = P.predict_similarity(Tensor([[0.0], [0.0], [50.0], [150.0]]), K).data
    assert s[0, 1] == 1.0 and s[0, 2] == pytest.approx(0.5) and s[0, 3] == 0.0
    np.testing.assert_array_equal(np.diag(s), 1.0)
    np.testing.assert_allclose(s, s.T, atol=1e-9)


def test_lowrank_head_rows(net):
    rng = np.random.default_rng(3)
    s = rng.random((512, 512))
    s = (s + s.T) / 2
    s[5] = s[9]
    m = P.lowrank_head(Tensor(s), net).data
    assert m.shape == (512, P.R_MAX)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(m[5], m[9])
    with pytest.raises(P.PriorNetError):
        P.lowrank_head(Tensor(np.ones((10, 10))), net)


def test_lowrank_loss_examples():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 3, 40)
    labels[:3] = [0, 1, 2]
    m = np.concatenate([one_hot(labels), np.zeros((40, 2))], axis=1)
    assert P.lowrank_loss(Tensor(m), 3, P.gt_similarity(labels)).item() == 0.0
    n = 8
    ones = np.concatenate([np.ones((n, 1)), np.zeros((n, 4))], axis=1)
    halves = np.repeat([0, 1], n // 2)
    assert P.lowrank_loss(Tensor(ones), 1, P.gt_similarity(halves)).item() == pytest.approx(n * n / 2)
    with pytest.raises(P.PriorNetError):
        P.lowrank_loss(Tensor(m), 6, P.gt_similarity(labels))


def test_lowrank_loss_and_select_rank_column_permutation_invariant():
    rng = np.random.default_rng(5)
    m = rng.random((30, 5))
    s_gt = P.gt_similarity(rng.integers(0, 3, 30))
    perm = [2, 0, 1]
    a = P.lowrank_loss(Tensor(m), 3, s_gt).item()
    b = P.lowrank_loss(Tensor(m[:, perm + [3, 4]]), 3, s_gt).item()
    assert a == pytest.approx(b, rel=1e-12)
    labels = rng.integers(0, 4, 30)
    labels[:4] = range(4)
    mh = np.concatenate([one_hot(labels), rng.random((30, 1)) * 0.01], axis=1)
    mh /= mh.sum(axis=1, keepdims=True)
    s = P.gt_similarity(labels)
    r1, _ = P.select_rank(mh, s)
    r2, _ = P.select_rank(mh[:, [3, 1, 0, 2, 4]], s)
    assert r1 == r2 == 4


def test_lowrank_head_gradient():
    small = P.PriorNet(seed=2)
    rng = np.random.default_rng(6)
    s = Tensor(rng.random((512, 512)), requires_grad=True)
    labels = rng.integers(0, 3, 512)
    order = np.arange(512)
    fn = lambda: P.lowrank_loss(P.lowrank_head(s, small, order), 3, P.gt_similarity(labels))
    assert T.grad_check(fn, [small.proj.weight, small.proj.bias]) < 1e-4


def test_select_rank_exact_recovery():
    labels = np.repeat([0, 1, 2], [5, 7, 4])
    m = np.concatenate([one_hot(labels), np.full((16, 2), 0.0)], axis=1)
    r, mr = P.select_rank(m, P.gt_similarity(labels))
    assert r == 3
    assert P.reconstruction_errors(m, P.gt_similarity(labels))[2] == 0.0
    np.testing.assert_array_equal(mr, one_hot(labels))
    single = np.concatenate([np.ones((6, 1)), np.zeros((6, 4))], axis=1)
    assert P.select_rank(single, np.ones((6, 6)))[0] == 1


def test_select_rank_tie_goes_to_smaller():
    # two identical-error truncations: r=1 and r=2 on a column of zeros
    m = np.concatenate([np.ones((4, 1)), np.zeros((4, 4))], axis=1)
    assert P.select_rank(m, np.ones((4, 4)))[0] == 1


def test_segment_block_rules():
    labels = np.array([2, 2, 0, 1, 1])
    seg = P.segment_block(one_hot(labels))
    assert len(np.unique(seg)) == 3
    assert all(len(set(seg[labels == k])) == 1 for k in range(3))
    assert P.segment_block(np.array([[0.5, 0.5]]))[0] == 0
    np.testing.assert_array_equal(P.segment_block(np.array([[0.1, 0.2, 0.7], [0.6, 0.3, 0.1]])), [1, 0])


def test_balanced_pool_warns_and_caps(caplog):
    rng = np.random.default_rng(7)
    blocks = [P.TrainBlock(rng.random((4, 3)), np.array([0, 0, 0, 0])) for _ in range(10)]
    blocks += [P.TrainBlock(rng.random((4, 3)), np.array([0, 1, 0, 1])) for _ in range(2)]
    with caplog.at_level("WARNING"):
        pool = P.balanced_pool(blocks, 5, 5, seed=0)
    assert sum(b.segment_count == 1 for b in pool) == 5
    assert sum(b.segment_count == 2 for b in pool) == 2
    assert "no training blocks with 3 segments" in caplog.text


def _separable_blocks(n=64, count=24, seed=0):
    rng = np.random.default_rng(seed)
    blocks = []
    for k in range(count):
        pts = rng.uniform(-0.5, 0.5, (n, 3))
        labels = np.zeros(n, dtype=np.int64)
        if k % 2:
            labels[n // 2:] = 1
            pts[: n // 2, 0] = rng.uniform(-0.5, -0.35, n // 2)
            pts[n // 2:, 0] = rng.uniform(0.35, 0.5, n // 2)
        blocks.append(P.TrainBlock(pts, labels))
    return blocks


@pytest.mark.slow
def test_training_on_separable_blocks_drives_similarity_loss_down():
    blocks = _separable_blocks()
    net = P.PriorNet(seed=0, block_size=64)
    cfg = P.PriorTrainConfig(per_count=12, epochs=50, batch_size=4, lr=5e-3, use_lowrank=False)
    initial = np.mean([P.similarity_loss(P.extract_point_features(b.local_points, net), b.labels).item() for b in blocks])
    net, hist = P.train_priornet(blocks, cfg, net)
    assert all(np.isfinite(h[1]) for h in hist)
    final = np.mean([P.similarity_loss(P.extract_point_features(b.local_points, net), b.labels).item() for b in blocks])
    assert final < 0.01 * initial


def test_training_is_deterministic_and_logs(tmp_path):
    rng = np.random.default_rng(8)
    blocks = [P.TrainBlock(rng.uniform(-0.5, 0.5, (512, 3)), rng.integers(0, 1 + k % 3, 512)) for k in range(6)]
    digests = []
    for run in range(2):
        cfg = P.PriorTrainConfig(per_count=2, epochs=1, batch_size=3, seed=4, log_path=tmp_path / f"log{run}.tsv")
        net, hist = P.train_priornet(blocks, cfg)
        net.save(tmp_path / f"p{run}.ckpt")
        digests.append((tmp_path / f"p{run}.ckpt").read_bytes())
        row = (tmp_path / f"log{run}.tsv").read_text().split("\n")[0].split("\t")
        assert row[0] == "1" and float(row[1]) == hist[0][1]
    assert digests[0] == digests[1]
    loaded = P.PriorNet.load(tmp_path / "p0.ckpt")
    np.testing.assert_array_equal(loaded.proj.weight.data, net.proj.weight.data)


def test_ablation_leaves_head_untouched():
    rng = np.random.default_rng(9)
    blocks = [P.TrainBlock(rng.uniform(-0.5, 0.5, (512, 3)), rng.integers(0, 2, 512)) for _ in range(3)]
    net = P.PriorNet(seed=3)
    before = [p.data.copy() for p in net.head_parameters()]
    P.train_priornet(blocks, P.PriorTrainConfig(per_count=3, epochs=1, batch_size=3, use_lowrank=False), net)
    for b, p in zip(before, net.head_parameters()):
        np.testing.assert_array_equal(b, p.data)


def test_segment_block_points_shapes(net):
    pts = np.random.default_rng(10).uniform(-0.5, 0.5, (512, 3))
    seg, feats, r = P.segment_block_points(pts, net)
    assert seg.shape == (512,) and feats.shape == (512, 128) and 1 <= r <= 5
    assert set(np.unique(seg).tolist()) == set(range(len(np.unique(seg))))
