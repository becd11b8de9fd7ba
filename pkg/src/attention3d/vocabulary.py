"""Hierarchical k-means vocabulary tree with tf-idf inverted-index retrieval."""

from __future__ import annotations

import struct
import warnings
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .errors import CorpusTooSmall, InputError, VocabularyMissing


class Vocabulary(BaseEstimator, TransformerMixin):
    """Vocabulary tree of ``branching`` children per node and ``levels`` levels.

    ``fit`` grows the tree, ``index`` registers keyframe documents (which sets
    idf and the inverted index), ``transform`` maps a descriptor set to its
    L1-normalised tf-idf histogram ``{word: weight}``.
    """

    def __init__(self, branching=10, levels=3, seed=0, max_iter=25):
        self.branching = branching
        self.levels = levels
        self.seed = seed
        self.max_iter = max_iter

    # -- tree ---------------------------------------------------------------
    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        k, L = int(self.branching), int(self.levels)
        if len(X) < k**L:
            raise CorpusTooSmall(f"corpus of {len(X)} descriptors < {k}^{L}")
        centers, children = [X.mean(0)], [[]]
        stack = [(0, np.arange(len(X)), 0)]
        while stack:
            node, members, depth = stack.pop()
            if depth == L or len(members) <= 1:
                continue
            sub = X[members]
            if len(np.unique(sub, axis=0)) <= k:
                groups = [members[np.all(sub == u, axis=1)] for u in np.unique(sub, axis=0)]
                cents = [X[g[0]] for g in groups]
            else:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ConvergenceWarning)
                    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=self.max_iter,
                                random_state=self.seed, algorithm="lloyd").fit(sub)
                groups = [members[km.labels_ == c] for c in range(k)]
                cents = list(km.cluster_centers_)
            kids = []
            for g, c in zip(groups, cents):
                if len(g) == 0:
                    continue
                centers.append(np.asarray(c, float))
                children.append([])
                kids.append(len(centers) - 1)
                stack.append((kids[-1], g, depth + 1))
            children[node] = kids
        n = len(centers)
        self.centers_ = np.array(centers)
        self.children_ = np.full((n, k), -1, dtype=np.int64)
        for i, kids in enumerate(children):
            self.children_[i, :len(kids)] = kids
        leaf = self.children_[:, 0] < 0
        self.words_ = np.full(n, -1, dtype=np.int64)
        self.words_[leaf] = np.arange(int(leaf.sum()))
        self.n_words_ = int(leaf.sum())
        self.idf_ = np.zeros(self.n_words_)
        self.documents_ = {}
        self.inverted_ = {}
        return self

    def _check(self):
        if not hasattr(self, "centers_"):
            raise VocabularyMissing("vocabulary has not been built")

    def quantize(self, descriptors):
        """Word id of each descriptor (greedy descent)."""
        self._check()
        D = np.asarray(descriptors, dtype=float).reshape(len(descriptors), -1)
        node = np.zeros(len(D), dtype=np.int64)
        while True:
            kids = self.children_[node]
            active = kids[:, 0] >= 0
            if not active.any():
                break
            ka = kids[active]
            c = self.centers_[np.maximum(ka, 0)]
            d2 = ((c - D[active][:, None, :]) ** 2).sum(-1)
            d2[ka < 0] = np.inf
            node[active] = ka[np.arange(len(ka)), d2.argmin(1)]
        return self.words_[node]

    def _tf(self, descriptors):
        if len(descriptors) == 0:
            return {}
        w = self.quantize(descriptors)
        ids, counts = np.unique(w, return_counts=True)
        return dict(zip(ids.tolist(), counts.astype(float).tolist()))

    def _weigh(self, tf):
        vec = {w: c * self.idf_[w] for w, c in tf.items() if self.idf_[w] > 0}
        s = sum(vec.values())
        return {w: v / s for w, v in sorted(vec.items())} if s > 0 else {}

    def transform(self, descriptors):
        self._check()
        return self._weigh(self._tf(descriptors))

    # -- documents ----------------------------------------------------------
    def index(self, documents):
        """Register ``{doc_id: descriptors}``; recomputes idf = ln(N / n_i) over all documents."""
        self._check()
        self._tfs = getattr(self, "_tfs", {})
        for doc, desc in documents.items():
            self._tfs[doc] = self._tf(np.asarray(desc, float))
        self._reweigh()
        return self

    def _reweigh(self):
        N = len(self._tfs)
        df = np.zeros(self.n_words_)
        for tf in self._tfs.values():
            for w in tf:
                df[w] += 1
        self.idf_ = np.where(df > 0, np.log(N / np.maximum(df, 1)), 0.0)
        self.documents_ = {d: self._weigh(tf) for d, tf in sorted(self._tfs.items())}
        inv = {}
        for d, vec in self.documents_.items():
            for w, v in vec.items():
                inv.setdefault(w, []).append((d, v))
        self.inverted_ = inv

    def query(self, descriptors, n=5):
        """Top ``n`` document ids ranked by L1 distance of normalised histograms.

        Only documents that share at least one word with the query are ranked.
        """
        q = self.transform(descriptors)
        if not self.documents_:
            raise VocabularyMissing("no documents indexed")
        # |q - d|_1 = 2 - sum over shared words of (q + d - |q - d|)
        gain = {}
        for w, qv in q.items():
            for d, dv in self.inverted_.get(w, ()):
                gain[d] = gain.get(d, 0.0) + qv + dv - abs(qv - dv)
        ranked = sorted(gain.items(), key=lambda kv: (2.0 - kv[1], _key(kv[0])))
        return [(d, 2.0 - g) for d, g in ranked[:n]]

    # -- io -----------------------------------------------------------------
    def save(self, path):
        self._check()
        n, dim = self.centers_.shape
        docs = sorted(self._tfs.items()) if hasattr(self, "_tfs") else []
        parts = [struct.pack("<4sIIIIIqI", b"VOC1", self.branching, self.levels, n, dim, self.n_words_,
                             self.seed, len(docs)),
                 self.centers_.astype("<f8").tobytes(), self.children_.astype("<i8").tobytes()]
        for doc, tf in docs:
            arr = np.array(sorted(tf.items()), dtype="<f8").reshape(-1, 2)
            parts.append(struct.pack("<qI", int(doc), len(arr)) + arr.tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        head = struct.Struct("<4sIIIIIqI")
        magic, k, L, n, dim, n_words, seed, n_docs = head.unpack_from(raw)
        if magic != b"VOC1":
            raise InputError(f"{path}: not a vocabulary file")
        off = head.size
        vocab = cls(branching=k, levels=L, seed=seed)
        vocab.centers_ = np.frombuffer(raw, "<f8", n * dim, off).reshape(n, dim).copy()
        off += 8 * n * dim
        vocab.children_ = np.frombuffer(raw, "<i8", n * k, off).reshape(n, k).copy()
        off += 8 * n * k
        leaf = vocab.children_[:, 0] < 0
        vocab.words_ = np.full(n, -1, dtype=np.int64)
        vocab.words_[leaf] = np.arange(int(leaf.sum()))
        vocab.n_words_ = n_words
        vocab._tfs = {}
        for _ in range(n_docs):
            doc, m = struct.unpack_from("<qI", raw, off)
            off += 12
            arr = np.frombuffer(raw, "<f8", 2 * m, off).reshape(m, 2)
            off += 16 * m
            vocab._tfs[doc] = {int(w): float(c) for w, c in arr}
        vocab._reweigh()
        return vocab


def _key(doc):
    return (0, doc) if isinstance(doc, (int, np.integer)) else (1, str(doc))


def build_vocabulary(descriptors, branching=10, levels=3, seed=0, documents=None):
    vocab = Vocabulary(branching=branching, levels=levels, seed=seed).fit(descriptors)
    if documents:
        vocab.index(documents)
    return vocab


def retrieve_candidates(smap, query, n=5):
    """Ranked keyframe ids for a query descriptor set (``Features`` or array)."""
    vocab = getattr(smap, "vocabulary", None)
    if vocab is None or not hasattr(vocab, "centers_"):
        raise VocabularyMissing("map has no vocabulary")
    desc = getattr(query, "descriptors", query)
    return [d for d, _ in vocab.query(desc, n=n)]
