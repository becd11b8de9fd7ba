import numpy as np
import pytest
from scipy import ndimage

from attention3d.errors import CorpusTooSmall, ImageTooSmall, InputError, VocabularyMissing
from attention3d.features import (DogExtractor, FeatureFileBackend, Features, extract_features, match_features,
                                  read_feature_file, write_feature_file)
from attention3d.vocabulary import Vocabulary, build_vocabulary


def textured(seed=0, shape=(200, 260)):
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.random(shape), 2.5)
    img = (img - img.min()) / np.ptp(img)
    return (255 * img).astype(np.uint8)


def unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def test_uniform_image_has_no_features():
    assert len(extract_features(np.full((64, 64), 128, np.uint8))) == 0
    with pytest.raises(ImageTooSmall):
        extract_features(np.zeros((20, 100)))


def test_determinism_and_invariants():
    img = textured(1)
    a, b = extract_features(img), extract_features(img.copy())
    assert len(a) > 50
    assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.descriptors, b.descriptors)
    assert np.allclose(np.linalg.norm(a.descriptors, axis=1), 1.0, atol=1e-6)
    assert np.all(np.diff(a.responses) <= 0)
    assert np.all(a.scales > 0)
    h, w = img.shape
    assert np.all((a.pixels >= 0) & (a.pixels < [w, h]))


def test_shift_equivariance():
    big = textured(2, (240, 300))
    a = extract_features(big[:200, :260])
    b = extract_features(big[:200, 10:270])  # content moves 10 px left
    interior = (a.pixels[:, 0] > 30) & (a.pixels[:, 0] < 220) & (a.pixels[:, 1] > 20) & (a.pixels[:, 1] < 180)
    matches = match_features(a, b)
    good = [qi for qi, ti in matches
            if interior[qi] and np.linalg.norm(a.pixels[qi] - [10, 0] - b.pixels[ti]) < 1.5]
    assert len(good) >= 0.8 * interior.sum()


def test_match_basic(rng):
    d = unit_rows(rng.normal(size=(100, 128)))
    assert match_features(d, np.empty((0, 128))) == []
    assert match_features(d, d) == [(i, i) for i in range(100)]
    noisy = unit_rows(d + rng.normal(scale=0.05, size=d.shape))
    m = match_features(noisy, d)
    assert sum(q == t for q, t in m) >= 95
    # one-to-one
    assert len({t for _, t in m}) == len(m)


def test_feature_file_round_trip(tmp_path):
    f = extract_features(textured(3))
    write_feature_file(tmp_path / "frame_7.feat", f)
    g = FeatureFileBackend(tmp_path).extract(7)
    assert len(g) == len(f)
    assert np.allclose(g.pixels, f.pixels, atol=1e-4)
    assert np.allclose(g.descriptors, f.descriptors, atol=1e-6)
    assert match_features(g, f) == [(i, i) for i in range(len(f))]
    (tmp_path / "bad.feat").write_bytes((tmp_path / "frame_7.feat").read_bytes()[:-10])
    with pytest.raises(InputError):
        read_feature_file(tmp_path / "bad.feat")


def test_extractor_is_pluggable():
    class Fixed:
        def extract(self, image):
            return Features([[1.0, 2.0]], [1.0], [0.0], np.eye(128)[:1])

    assert len(extract_features(np.zeros((64, 64)), Fixed())) == 1
    assert DogExtractor(max_features=10).extract(textured(4)).pixels.shape[0] <= 10


# -- vocabulary -------------------------------------------------------------------

def planted_corpus(rng, k=3, L=2):
    """k**L centres separated at every tree level: k groups of k subgroups of ..."""
    centers = np.zeros((1, 128))
    for level in range(L):
        offsets = rng.normal(size=(k, 128)) * 10.0 ** (L - level)
        centers = (centers[:, None, :] + offsets[None]).reshape(-1, 128)
    return centers, centers.copy()


def test_planted_clusters_become_words(rng):
    centers, corpus = planted_corpus(rng, 3, 2)
    voc = Vocabulary(branching=3, levels=2, seed=0).fit(corpus)
    words = voc.quantize(centers)
    assert len(set(words.tolist())) == 9
    assert voc.n_words_ <= 9
    noisy = centers + rng.normal(scale=0.01, size=centers.shape)
    assert np.array_equal(voc.quantize(noisy), words)


def test_vocabulary_determinism_and_bounds(rng):
    corpus = unit_rows(rng.normal(size=(1200, 128)))
    a = build_vocabulary(corpus, 10, 3, seed=5)
    b = build_vocabulary(corpus, 10, 3, seed=5)
    assert np.array_equal(a.centers_, b.centers_) and np.array_equal(a.children_, b.children_)
    assert a.n_words_ <= 1000
    with pytest.raises(CorpusTooSmall):
        Vocabulary(10, 3).fit(corpus[:999])


def test_idf_and_retrieval(rng, tmp_path):
    base = unit_rows(rng.normal(size=(4000, 128)))
    docs = {i: base[80 * i:80 * (i + 1)] for i in range(50)}
    voc = build_vocabulary(base, 10, 3, seed=0, documents=docs)
    assert np.all(voc.idf_ >= 0)
    # idf by hand for one word
    w = next(iter(voc.documents_[0]))
    n_i = sum(w in set(voc.quantize(d).tolist()) for d in docs.values())
    assert voc.idf_[w] == pytest.approx(np.log(50 / n_i))
    for i in (0, 17, 49):
        assert voc.query(docs[i], n=1)[0][0] == i
    noisy = unit_rows(docs[17] + rng.normal(scale=0.02, size=docs[17].shape))
    assert 17 in [d for d, _ in voc.query(noisy, n=3)]
    voc.save(tmp_path / "vocab.bin")
    back = Vocabulary.load(tmp_path / "vocab.bin")
    assert back.query(noisy, n=3) == voc.query(noisy, n=3)
    empty = Vocabulary(10, 3).fit(base)
    with pytest.raises(VocabularyMissing):
        empty.query(docs[0])
