"""Tokenization, vocabulary, and a small skip-gram word-embedding trainer.

Word vectors are trained on the bundled corpus (one lowercase sentence per
line) with negative sampling. The corpus is authored so that the command
phrasings and their synonym variants share contexts, which is what lets a
command built from swapped-in synonyms land near the original in vector
space. Index 0 is the unknown token; its embedding row stays zero.
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .nn import load_model, save_model

UNK = "<unk>"
WORD_DIM = 32

_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, whitespace-split, punctuation stripped per token."""
    out = []
    for raw in text.lower().split():
        tok = raw.translate(_PUNCT)
        if tok:
            out.append(tok)
    return out


@dataclass
class Vocab:
    index: dict[str, int]  # token -> dense id, UNK at 0
    counts: np.ndarray  # occurrence count per id (UNK aggregates the pruned)

    @classmethod
    def build(cls, sentences: list[str], min_count: int = 2) -> "Vocab":
        freq = Counter(tok for s in sentences for tok in tokenize(s))
        kept = sorted(t for t, c in freq.items() if c >= min_count)
        index = {UNK: 0}
        counts = [0]
        for tok in kept:
            index[tok] = len(index)
            counts.append(freq[tok])
        counts[0] = sum(c for t, c in freq.items() if c < min_count)
        return cls(index=index, counts=np.array(counts, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.index)

    def ids(self, tokens: list[str]) -> np.ndarray:
        idx = self.index
        return np.array([idx.get(t, 0) for t in tokens], dtype=np.int64)

    def tokens_by_id(self) -> list[str]:
        out = [""] * len(self.index)
        for tok, i in self.index.items():
            out[i] = tok
        return out


class WordEmbeddings:
    """|V| x d embedding matrix plus its vocabulary."""

    def __init__(self, vocab: Vocab, vectors: np.ndarray):
        if vectors.shape[0] != len(vocab):
            raise ValueError("vector count does not match vocabulary size")
        self.vocab = vocab
        self.vectors = vectors.astype(np.float32)
        self.dim = vectors.shape[1]

    def embed_tokens(self, tokens: list[str]) -> np.ndarray:
        """Per-token rows, zero vector for out-of-vocabulary tokens."""
        if not tokens:
            return np.zeros((0, self.dim), dtype=np.float32)
        return self.vectors[self.vocab.ids(tokens)]

    def cosine(self, a: str, b: str) -> float:
        va, vb = self.embed_tokens([a])[0], self.embed_tokens([b])[0]
        denom = float(np.linalg.norm(va) * np.linalg.norm(vb))
        return float(va @ vb / denom) if denom > 0 else 0.0

    def nearest_words(self, token: str, k: int = 5) -> list[str]:
        tid = self.vocab.index.get(token, 0)
        v = self.vectors[tid]
        norms = np.linalg.norm(self.vectors, axis=1)
        denom = norms * max(float(np.linalg.norm(v)), 1e-12)
        sims = (self.vectors @ v) / np.maximum(denom, 1e-12)
        sims[tid] = -np.inf
        sims[0] = -np.inf
        order = np.argsort(-sims)[:k]
        names = self.vocab.tokens_by_id()
        return [names[i] for i in order]

    def spec(self) -> dict:
        return {"kind": "word-embeddings", "dim": self.dim, "tokens": self.vocab.tokens_by_id()}

    def save(self, path) -> None:
        save_model(path, self.spec(), [self.vectors])

    @classmethod
    def load(cls, path) -> "WordEmbeddings":
        spec, flat = load_model(path)
        if spec.get("kind") != "word-embeddings":
            raise ValueError(f"{path}: not a word-embeddings file")
        tokens = spec["tokens"]
        index = {tok: i for i, tok in enumerate(tokens)}
        vectors = flat.reshape(len(tokens), spec["dim"])
        return cls(Vocab(index=index, counts=np.zeros(len(tokens), dtype=np.int64)), vectors)


@dataclass
class SkipgramConfig:
    dim: int = WORD_DIM
    window: int = 2
    negatives: int = 5
    epochs: int = 120
    lr: float = 0.05
    min_count: int = 2
    batch: int = 256


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -30.0, 30.0)))


def train_skipgram(
    sentences: list[str], config: SkipgramConfig, seed: int
) -> tuple[WordEmbeddings, list[float]]:
    """Skip-gram with negative sampling; returns embeddings + per-epoch loss.

    Noise distribution is unigram^0.75. Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    vocab = Vocab.build(sentences, min_count=config.min_count)
    n_vocab = len(vocab)

    centers, contexts = [], []
    for sent in sentences:
        ids = vocab.ids(tokenize(sent))
        for i, cid in enumerate(ids):
            if cid == 0:
                continue
            lo, hi = max(0, i - config.window), min(len(ids), i + config.window + 1)
            for j in range(lo, hi):
                if j != i and ids[j] != 0:
                    centers.append(cid)
                    contexts.append(ids[j])
    centers = np.array(centers, dtype=np.int64)
    contexts = np.array(contexts, dtype=np.int64)
    if centers.size == 0:
        raise ValueError("corpus produced no training pairs")

    noise = vocab.counts.astype(np.float64) ** 0.75
    noise[0] = 0.0
    noise /= noise.sum()

    w_in = rng.uniform(-0.5 / config.dim, 0.5 / config.dim, size=(n_vocab, config.dim))
    w_out = np.zeros((n_vocab, config.dim))
    w_in[0] = 0.0

    losses: list[float] = []
    n_pairs = centers.size
    for epoch in range(config.epochs):
        lr = config.lr * max(1.0 - epoch / config.epochs, 1e-4)
        order = rng.permutation(n_pairs)
        total = 0.0
        for start in range(0, n_pairs, config.batch):
            sel = order[start : start + config.batch]
            c, p = centers[sel], contexts[sel]
            n = rng.choice(n_vocab, size=(sel.size, config.negatives), p=noise)
            v = w_in[c]  # (B, d)
            up = w_out[p]  # (B, d)
            un = w_out[n]  # (B, K, d)
            sp = _sigmoid(np.einsum("bd,bd->b", v, up))
            sn = _sigmoid(np.einsum("bd,bkd->bk", v, un))
            total += float(-(np.log(np.maximum(sp, 1e-12)).sum() + np.log(np.maximum(1 - sn, 1e-12)).sum()))
            gp = sp - 1.0  # (B,)
            dv = gp[:, None] * up + np.einsum("bk,bkd->bd", sn, un)
            np.add.at(w_in, c, -lr * dv)
            np.add.at(w_out, p, -lr * gp[:, None] * v)
            np.add.at(w_out, n.reshape(-1), -lr * (sn[:, :, None] * v[:, None, :]).reshape(-1, config.dim))
            w_in[0] = 0.0
            w_out[0] = 0.0
        losses.append(total / n_pairs)
    return WordEmbeddings(vocab, w_in.astype(np.float32)), losses


def load_bundled_corpus() -> list[str]:
    text = resources.files("microbuild.data").joinpath("corpus.txt").read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]


def load_corpus(path=None) -> list[str]:
    if path is None:
        return load_bundled_corpus()
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def corpus_check(
    sentences: list[str], required_tokens: list[str], min_sentences: int = 500, min_occurrences: int = 20
) -> list[str]:
    """Return a list of problems; empty means the corpus passes."""
    problems = []
    if len(sentences) < min_sentences:
        problems.append(f"only {len(sentences)} sentences (need >= {min_sentences})")
    freq = Counter(tok for s in sentences for tok in tokenize(s))
    for tok in sorted(set(required_tokens)):
        if freq[tok] < min_occurrences:
            problems.append(f"token '{tok}' occurs {freq[tok]} times (need >= {min_occurrences})")
    return problems


def substituted_word_pairs(original_texts: list[str], alternate_texts: list[str]) -> list[tuple[str, str]]:
    """Word swaps between paired phrasings, as (original, alternate) tuples.

    Computed as the multiset difference of each text pair; phrasings that
    only reorder shared words contribute nothing.
    """
    pairs = []
    for orig, alt in zip(original_texts, alternate_texts):
        a, b = Counter(tokenize(orig)), Counter(tokenize(alt))
        removed = sorted((a - b).elements())
        added = sorted((b - a).elements())
        pairs.extend(zip(removed, added))
    return sorted(set(pairs))
