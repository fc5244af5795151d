"""Hierarchical k-means visual vocabulary with TF-IDF bag-of-words vectors.

Float descriptors are clustered with L2 k-means per tree node. Leaves are
words; every word carries an IDF weight learned from image document
frequencies. Similarity between two L1-normalized vectors is
``1 - 0.5 * sum(|a - b|)``.
"""

from __future__ import annotations

import struct
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from .errors import CorpusTooSmall, ParseError
from .features import DESCRIPTOR_DIM

_MAGIC = b"HSVOCAB\0"
_VERSION = 1


@dataclass
class BowVector:
    """Sparse L1-normalized TF-IDF vector plus a feature grouping by tree node.

    ``features`` maps a node id at the vocabulary's direct-index level to the
    indices of the features that descended through it; guided matching only
    compares features sharing a node.
    """

    words: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.words)

    def __bool__(self):
        return bool(self.words)


class Vocabulary:
    """Tree of cluster centers with branching ``k`` and depth ``L``.

    Nodes are stored flat: ``centers[i]`` and ``parent[i]``; the root is node 0
    and has no center. ``children`` is ``(n_nodes, k)`` padded with -1.
    ``word_of_node[i]`` is the word id of a leaf or -1.
    """

    def __init__(self, k: int, depth: int, centers, parent, word_of_node, idf, direct_level: int = 1):
        self.k = int(k)
        self.depth = int(depth)
        self.centers = np.asarray(centers, dtype=np.float32)
        self.parent = np.asarray(parent, dtype=np.int64)
        self.word_of_node = np.asarray(word_of_node, dtype=np.int64)
        self.idf = np.asarray(idf, dtype=float)
        self.direct_level = min(int(direct_level), self.depth)
        n = len(self.parent)
        self.children = np.full((n, self.k), -1, dtype=np.int64)
        fill = np.zeros(n, dtype=int)
        for i in range(1, n):
            p = self.parent[i]
            self.children[p, fill[p]] = i
            fill[p] += 1
        self.node_level = np.zeros(n, dtype=int)
        for i in range(1, n):
            self.node_level[i] = self.node_level[self.parent[i]] + 1
        self.leaf_nodes = np.nonzero(self.word_of_node >= 0)[0]
        self.node_of_word = np.empty(len(self.leaf_nodes), dtype=np.int64)
        self.node_of_word[self.word_of_node[self.leaf_nodes]] = self.leaf_nodes

    @property
    def n_words(self) -> int:
        return len(self.idf)

    def __eq__(self, other):
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return (
            self.k == other.k
            and self.depth == other.depth
            and np.array_equal(self.centers, other.centers)
            and np.array_equal(self.parent, other.parent)
            and np.array_equal(self.word_of_node, other.word_of_node)
            and np.array_equal(self.idf, other.idf)
        )

    # -- quantization -------------------------------------------------------

    def quantize(self, descriptors) -> tuple[np.ndarray, np.ndarray]:
        """Word id and direct-index node id for every descriptor."""
        d = np.asarray(descriptors, dtype=np.float32).reshape(-1, self.centers.shape[1])
        m = len(d)
        node = np.zeros(m, dtype=np.int64)
        direct = np.zeros(m, dtype=np.int64)
        for level in range(self.depth):
            ch = self.children[node]  # (m, k)
            has = ch >= 0
            active = has.any(axis=1)
            if not active.any():
                break
            c = self.centers[np.where(has, ch, 0)]  # (m, k, D)
            dist = np.einsum("mkd,mkd->mk", c - d[:, None, :], c - d[:, None, :])
            dist[~has] = np.inf
            best = ch[np.arange(m), np.argmin(dist, axis=1)]
            node = np.where(active, best, node)
            if level + 1 == self.direct_level:
                direct = node.copy()
        return self.word_of_node[node], direct

    def transform(self, descriptors) -> BowVector:
        d = np.asarray(descriptors, dtype=np.float32)
        if d.size == 0:
            return BowVector()
        words, direct = self.quantize(d)
        counts = np.bincount(words, minlength=self.n_words).astype(float)
        w = counts / len(words) * self.idf
        nz = np.nonzero(w > 0)[0]
        total = w[nz].sum()
        vec = {int(i): float(w[i] / total) for i in nz} if total > 0 else {}
        order = np.argsort(direct, kind="stable")
        nodes, starts = np.unique(direct[order], return_index=True)
        groups = np.split(order, starts[1:])
        return BowVector(vec, {int(n): g for n, g in zip(nodes, groups)})

    # -- persistence --------------------------------------------------------

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IIIIII", _VERSION, self.k, self.depth, len(self.parent), self.n_words, self.centers.shape[1]))
            fh.write(self.parent.astype("<i8").tobytes())
            fh.write(self.word_of_node.astype("<i8").tobytes())
            fh.write(self.centers.astype("<f4").tobytes())
            fh.write(self.idf.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> Vocabulary:
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:8] != _MAGIC:
            raise ParseError("not a vocabulary file", offset=0)
        hdr = struct.calcsize("<IIIIII")
        if len(data) < 8 + hdr:
            raise ParseError("truncated vocabulary header", offset=len(data))
        version, k, depth, n_nodes, n_words, dim = struct.unpack_from("<IIIIII", data, 8)
        if version != _VERSION:
            raise ParseError(f"unsupported vocabulary version {version}", offset=8)
        off = 8 + hdr
        sizes = [8 * n_nodes, 8 * n_nodes, 4 * n_nodes * dim, 8 * n_words]
        if len(data) < off + sum(sizes):
            raise ParseError("truncated vocabulary body", offset=len(data))
        parent = np.frombuffer(data, "<i8", n_nodes, off)
        off += sizes[0]
        word = np.frombuffer(data, "<i8", n_nodes, off)
        off += sizes[1]
        centers = np.frombuffer(data, "<f4", n_nodes * dim, off).reshape(n_nodes, dim)
        off += sizes[2]
        idf = np.frombuffer(data, "<f8", n_words, off)
        _validate_tree(parent, word, n_words, k)
        return cls(k, depth, centers.copy(), parent.copy(), word.copy(), idf.copy())


def _validate_tree(parent, word, n_words, k):
    n = len(parent)
    if n == 0 or parent[0] != -1:
        raise ParseError("vocabulary root missing")
    if np.any(parent[1:] < 0) or np.any(parent[1:] >= np.arange(1, n)):
        raise ParseError("vocabulary parent links are not a tree")
    n_children = np.bincount(parent[1:], minlength=n)
    if np.any(n_children > k):
        raise ParseError("node with more than k children")
    leaf = n_children == 0
    if np.any(word[leaf] < 0) or np.any(word[~leaf] >= 0):
        raise ParseError("leaf/word mapping incomplete")
    if not np.array_equal(np.sort(word[leaf]), np.arange(n_words)):
        raise ParseError("word ids are not a permutation")


def train_vocabulary(corpus, k: int = 10, depth: int = 3, seed: int = 0, iterations: int = 10) -> Vocabulary:
    """Recursive k-means++ clustering of a list of per-image descriptor arrays.

    A node holding at most ``k`` distinct descriptors gets one child per
    descriptor, so small clusters end early and the word count may fall
    below ``k**depth``.
    """
    docs = [np.asarray(d, dtype=np.float32).reshape(-1, DESCRIPTOR_DIM) for d in corpus]
    docs = [d for d in docs if len(d)]
    data = np.concatenate(docs) if docs else np.zeros((0, DESCRIPTOR_DIM), np.float32)
    if k < 2 or depth < 1:
        raise ValueError("need k >= 2 and depth >= 1")
    if len(data) < k**depth:
        raise CorpusTooSmall(f"{len(data)} descriptors, need >= {k ** depth}")
    rng = np.random.default_rng(seed)
    centers = [np.zeros(data.shape[1], np.float32)]
    parent = [-1]
    word = [-1]
    # breadth-first so node ids are level ordered
    queue = [(0, np.arange(len(data)), 0)]
    while queue:
        nxt = []
        for node, idx, level in queue:
            if level == depth:
                continue
            sub = data[idx]
            uniq, inv = np.unique(sub, axis=0, return_inverse=True)
            inv = inv.reshape(-1)
            if len(uniq) <= 1 and level > 0:
                continue
            if len(uniq) <= k:
                cents, labels = uniq, inv
            else:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")  # empty clusters are simply dropped
                    cents, labels = kmeans2(sub.astype(np.float64), k, iter=iterations, minit="++", seed=rng)
                cents = cents.astype(np.float32)
            for c in range(len(cents)):
                members = idx[labels == c]
                if len(members) == 0:
                    continue
                cid = len(parent)
                centers.append(cents[c])
                parent.append(node)
                word.append(-1)
                nxt.append((cid, members, level + 1))
        queue = nxt
    parent = np.array(parent)
    n_children = np.bincount(parent[1:], minlength=len(parent))
    word = np.full(len(parent), -1)
    leaves = np.nonzero(n_children == 0)[0]
    word[leaves] = np.arange(len(leaves))
    vocab = Vocabulary(k, depth, np.array(centers), parent, word, np.ones(len(leaves)))
    # document frequencies
    df = np.zeros(len(leaves))
    for d in docs:
        w, _ = vocab.quantize(d)
        df[np.unique(w)] += 1
    n_docs = max(len(docs), 1)
    vocab.idf = np.log1p(n_docs / np.maximum(df, 1.0))
    return vocab


def score(a: BowVector, b: BowVector) -> float:
    """L1 similarity in [0, 1]; 1 for identical non-empty vectors."""
    if not a or not b:
        return 0.0
    if len(a.words) > len(b.words):
        a, b = b, a
    s = 0.0
    bw = b.words
    for w, va in a.words.items():
        vb = bw.get(w)
        if vb is not None:
            s += abs(va) + abs(vb) - abs(va - vb)
    return min(max(0.5 * s, 0.0), 1.0)


class InvertedIndex:
    """Word to keyframe-id postings for fast candidate retrieval."""

    def __init__(self):
        self.postings: dict[int, set] = defaultdict(set)
        self.vectors: dict[int, BowVector] = {}

    def __len__(self):
        return len(self.vectors)

    def __contains__(self, kf_id):
        return kf_id in self.vectors

    def add(self, kf_id: int, bow: BowVector):
        if kf_id in self.vectors:
            self.remove(kf_id)
        self.vectors[kf_id] = bow
        for w in bow.words:
            self.postings[w].add(kf_id)

    def remove(self, kf_id: int):
        bow = self.vectors.pop(kf_id, None)
        if bow is None:
            return
        for w in bow.words:
            s = self.postings.get(w)
            if s is not None:
                s.discard(kf_id)
                if not s:
                    del self.postings[w]

    def sharing(self, bow: BowVector) -> set:
        """Keyframes sharing at least one word with ``bow``."""
        out = set()
        for w in bow.words:
            out |= self.postings.get(w, set())
        return out

    def query(self, bow: BowVector, exclude=(), min_score: float = 0.0, max_results: int | None = None):
        """``(kf_id, score)`` pairs sorted by descending score then ascending id."""
        exclude = set(exclude)
        out = []
        for kf in self.sharing(bow):
            if kf in exclude:
                continue
            s = score(bow, self.vectors[kf])
            if s >= min_score and s > 0:
                out.append((kf, s))
        out.sort(key=lambda x: (-x[1], x[0]))
        return out[:max_results] if max_results else out
