import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import train_toy_recognizer
from taskcodec import data
from taskcodec.checkpoint import load_checkpoint
from taskcodec.models import load_recognizer, save_recognizer
from taskcodec.recognizer import (
    FeatureExtractor,
    LmclHead,
    Recognizer,
    RecognizerConfig,
    cosine_similarity,
    dump_embeddings,
    embed,
    kfold_accuracy,
    lmcl_loss,
    select_threshold,
    verify,
)
from taskcodec.tensor import Tensor, check_mode
from taskcodec.trainer import TrainConfig, pretrain_classifier

SMALL = RecognizerConfig(16, 16, (4, 8), 1, 8, 5)


def softmax_ce_reference(emb, w, labels):
    """Plain numpy softmax cross-entropy over cosines."""
    e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    c = w / np.linalg.norm(w, axis=0, keepdims=True)
    cos = e @ c
    lse = np.log(np.sum(np.exp(cos), axis=1))
    return float(np.mean(lse - cos[np.arange(len(labels)), labels]))


@pytest.mark.parametrize("seed", range(10))
def test_lmcl_degenerates_to_softmax(seed):
    rng = np.random.default_rng(seed)
    n, d, k = rng.integers(2, 9, 3)
    emb = rng.standard_normal((n, d))
    labels = rng.integers(0, k, n)
    head = LmclHead(d, k, scale=1.0, margin=0.0, seed=seed)
    with check_mode():
        head.weight = Tensor(head.weight.data, dtype=np.float64)
        loss = lmcl_loss(Tensor(emb), labels, head).item()
    assert abs(loss - softmax_ce_reference(emb, head.weight.data, labels)) < 1e-6


def test_lmcl_perfect_case_is_near_zero():
    head = LmclHead(2, 2, 30.0, 0.35)
    head.weight = Tensor(np.array([[1.0, -1.0], [0.0, 0.0]]), requires_grad=True)
    loss = lmcl_loss(Tensor(np.array([[3.0, 0.0]])), [0], head)
    assert loss.item() < 1e-8


def test_lmcl_label_range_checked():
    head = LmclHead(4, 3)
    with pytest.raises(ValueError, match="labels"):
        lmcl_loss(Tensor(np.ones((2, 4))), [0, 3], head)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.01, 100.0), seed=st.integers(0, 1000))
def test_lmcl_scale_invariant_in_embedding_norm(c, seed):
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((4, 6))
    labels = rng.integers(0, 3, 4)
    head = LmclHead(6, 3, seed=seed)
    with check_mode():
        head.weight = Tensor(head.weight.data, dtype=np.float64)
        a = lmcl_loss(Tensor(emb), labels, head).item()
        b = lmcl_loss(Tensor(emb * c), labels, head).item()
    assert abs(a - b) < 1e-6


@settings(max_examples=30, deadline=None)
@given(m1=st.floats(0, 1), m2=st.floats(0, 1), seed=st.integers(0, 1000))
def test_lmcl_nondecreasing_in_margin(m1, m2, seed):
    lo, hi = sorted((m1, m2))
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((5, 4))
    labels = rng.integers(0, 3, 5)
    head = LmclHead(4, 3, seed=seed)
    with check_mode():
        head.weight = Tensor(head.weight.data, dtype=np.float64)
        a = lmcl_loss(Tensor(emb), labels, head, margin=lo).item()
        b = lmcl_loss(Tensor(emb), labels, head, margin=hi).item()
    assert b >= a - 1e-12


def test_head_columns_unit_norm_after_every_step():
    faces = data.make_face_dataset(3, 6, 16, 16, seed=0)
    rec = Recognizer(RecognizerConfig(16, 16, (4, 8), 1, 8, 3), seed=0)
    norms = []
    normalize = rec.head.normalize

    def spy():
        normalize()
        norms.append(np.linalg.norm(rec.head.weight.data.astype(np.float64), axis=0))

    rec.head.normalize = spy
    config = TrainConfig.preset("classifier_pretrain", epochs=3, batch_size=4)
    pretrain_classifier(faces, rec.extractor, rec.head, config)
    assert len(norms) == 3 * 5
    assert np.max(np.abs(np.array(norms) - 1)) < 1e-6


def test_extractor_shapes_and_determinism(rng):
    ext = FeatureExtractor(SMALL, seed=0)
    x = Tensor(rng.uniform(-1, 1, (2, 3, 16, 16)))
    out = ext(x)
    assert out.shape == (2, 8)
    np.testing.assert_array_equal(ext(x).data, out.data)
    assert cosine_similarity(out.data[0], out.data[1]) < 1


def test_extractor_rejects_wrong_size():
    with pytest.raises(ValueError, match="16, 16"):
        FeatureExtractor(SMALL)(Tensor(np.zeros((1, 3, 16, 20))))


def test_recognizer_checkpoint_roundtrip(tmp_path):
    rec = Recognizer(SMALL, seed=3)
    save_recognizer(rec, tmp_path / "r.tckp")
    back = load_recognizer(tmp_path / "r.tckp")
    assert back.config == SMALL
    for (_, a), (_, b) in zip(rec.named_parameters(), back.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_embedding_dump_names(tmp_path, rng):
    ext = FeatureExtractor(SMALL)
    images = rng.uniform(-1, 1, (3, 3, 16, 16))
    emb = dump_embeddings(tmp_path / "e.tckp", ext, images, ["a.png", "b.png", "c.png"])
    state = load_checkpoint(tmp_path / "e.tckp")
    assert list(state) == ["emb/a.png", "emb/b.png", "emb/c.png"]
    np.testing.assert_array_equal(state["emb/b.png"], emb[1])


# -- verification ---------------------------------------------------------


def test_select_threshold_separable():
    sims = np.array([0.1, 0.2, 0.8, 0.9])
    same = np.array([False, False, True, True])
    t = select_threshold(sims, same)
    assert 0.2 < t < 0.8


def test_separable_pairs_give_full_accuracy():
    eye = np.eye(40)
    same_sims = cosine_similarity(eye[:20], eye[:20])
    diff_sims = cosine_similarity(eye[:20], eye[20:])
    sims = np.concatenate([same_sims, diff_sims])
    same = np.r_[np.ones(20, bool), np.zeros(20, bool)]
    order = np.random.default_rng(0).permutation(40)
    report = kfold_accuracy(sims[order], same[order])
    assert report.accuracy == 1.0 and not report.fallback
    assert len(report.fold_accuracies) == 10


def test_identical_images_through_extractor(rng):
    ext = FeatureExtractor(SMALL)
    images = rng.uniform(-1, 1, (20, 3, 16, 16))
    pairs = [(i, i, 1) for i in range(10)] + [(i, i + 10, 0) for i in range(10)]
    assert verify(pairs, ext, images).accuracy == 1.0


def test_flipped_labels_at_most_half():
    rng = np.random.default_rng(1)
    sims = np.r_[rng.uniform(0.6, 1.0, 50), rng.uniform(-0.2, 0.3, 50)]
    same = np.r_[np.ones(50, bool), np.zeros(50, bool)]
    order = rng.permutation(100)
    assert kfold_accuracy(sims[order], ~same[order]).accuracy <= 0.5


def test_threshold_never_sees_held_out_fold():
    n = 50
    sims = np.arange(n, dtype=float) / n
    same = np.arange(n) % 2 == 0
    seen = []

    def selector(s, y):
        seen.append(set(np.round(s * n).astype(int)))
        return select_threshold(s, y)

    kfold_accuracy(sims, same, 10, selector)
    for held, visible in zip(np.array_split(np.arange(n), 10), seen):
        assert visible.isdisjoint(held)
        assert len(visible) == n - len(held)


def test_few_pairs_fall_back_with_flag():
    with pytest.warns(UserWarning, match="single threshold"):
        report = kfold_accuracy([0.9, 0.1, 0.8], [True, False, True])
    assert report.fallback and report.accuracy == 1.0


def test_empty_pairs_rejected():
    with pytest.raises(ValueError):
        kfold_accuracy([], [])
    with pytest.raises(ValueError):
        verify([], FeatureExtractor(SMALL), np.zeros((0, 3, 16, 16)))


def test_pair_file_roundtrip(tmp_path):
    path = tmp_path / "pairs.txt"
    data.write_pairs(path, [("a.png", "b.png", 1), ("a.png", "c.png", 0)])
    assert path.read_text() == "a.png b.png 1\na.png c.png 0\n"
    assert data.read_pairs(path) == [("a.png", "b.png", 1), ("a.png", "c.png", 0)]
    path.write_text("a.png b.png yes\n")
    with pytest.raises(ValueError, match="pathA pathB"):
        data.read_pairs(path)


# -- training-run oracles --------------------------------------------------


@pytest.mark.slow
def test_classifier_on_frozen_features_fits_three_identities():
    faces = data.make_face_dataset(3, 20, 32, 32, seed=0)
    rec = Recognizer(RecognizerConfig(32, 32, (8, 16, 32), 1, 32, 3), seed=0)
    config = TrainConfig.preset("classifier_pretrain", epochs=50, batch_size=10, lr=0.1, lr_final=1e-3)
    pretrain_classifier(faces, rec.extractor, rec.head, config)
    pred = rec.head.predict(embed(rec.extractor, faces.images))
    assert np.mean(pred == faces.labels) > 0.9


@pytest.mark.slow
def test_trained_extractor_verifies_above_chance():
    accs = []
    for seed in range(10):
        rec, _, test = train_toy_recognizer(seed=seed, epochs=30)
        pairs = data.make_pairs(test.labels, 100, seed=seed)
        accs.append(verify(pairs, rec.extractor, test.images).accuracy)
    assert np.mean(accs) - 3 * np.std(accs) > 0.5, accs
