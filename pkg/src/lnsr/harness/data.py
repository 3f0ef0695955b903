"""Synthetic tasks, TSV ingestion, corpora and batching.

Token ids 0..4 are reserved (PAD, CLS, SEP, MASK, UNK). Every sequence
starts with CLS, which is the position the classifier pools.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ..encoder import CLS, NUM_SPECIAL, SEP, UNK, Batch

DEFAULT_METRIC = {"pattern": "accuracy", "pair": "pearson_spearman", "acceptability": "mcc"}
MAX_ATTEMPTS = 5


class DataError(ValueError):
    pass


class DegenerateTaskError(DataError):
    pass


@dataclass
class Dataset:
    sequences: list[np.ndarray]
    labels: np.ndarray
    task_kind: str  # binary | multiclass | regression
    split: str
    vocab_size: int
    metric: str = "accuracy"
    name: str = ""
    vocab: dict[str, int] | None = field(default=None, repr=False)
    oov_rate: float | None = None

    def __post_init__(self):
        if len(self.sequences) == 0:
            raise DataError(f"{self.split} split is empty")
        if len(self.sequences) != len(self.labels):
            raise DataError("sequences and labels differ in length")
        if self.task_kind in ("binary", "multiclass"):
            if not np.all(self.labels == np.round(self.labels)) or self.labels.min() < 0:
                raise DataError("classification labels must be non-negative integers")
            if self.task_kind == "binary" and self.labels.max() > 1:
                raise DataError("binary labels must be 0/1")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def is_classification(self) -> bool:
        return self.task_kind != "regression"

    @property
    def num_labels(self) -> int:
        return int(self.labels.max()) + 1 if self.is_classification else 1

    @property
    def max_len(self) -> int:
        return max(len(s) for s in self.sequences)

    def subset(self, index: Sequence[int]) -> "Dataset":
        index = list(index)
        return replace(self, sequences=[self.sequences[i] for i in index], labels=self.labels[index])

    def batch(self, index: Sequence[int]) -> Batch:
        index = list(index)
        labels = self.labels[index]
        if self.is_classification:
            labels = labels.astype(np.int64)
        return Batch.from_sequences([self.sequences[i] for i in index], labels)

    def batches(self, order: Sequence[int], batch_size: int) -> Iterator[Batch]:
        order = list(order)
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start : start + batch_size])


@dataclass
class TaskData:
    train: Dataset
    eval: Dataset
    baseline_score: float | None = None
    attempts: int = 1


# -- baseline ----------------------------------------------------------------

def bag_of_tokens(ds: Dataset) -> np.ndarray:
    x = np.zeros((len(ds), ds.vocab_size))
    for i, s in enumerate(ds.sequences):
        np.add.at(x[i], s, 1.0)
    return x


def baseline_score(train: Dataset, eval_: Dataset) -> float:
    """Bag-of-tokens linear baseline: logistic regression (classification) or
    ridge regression (Pearson correlation) fitted on train, scored on eval."""
    from sklearn.linear_model import LogisticRegression, Ridge

    xtr, xev = bag_of_tokens(train), bag_of_tokens(eval_)
    if train.is_classification:
        clf = LogisticRegression(C=1.0, max_iter=2000)
        clf.fit(xtr, train.labels.astype(int))
        return float(np.mean(clf.predict(xev) == eval_.labels))
    reg = Ridge(alpha=1.0).fit(xtr, train.labels)
    pred = reg.predict(xev)
    if np.std(pred) == 0:
        return 0.0
    return float(np.corrcoef(pred, eval_.labels)[0, 1])


def _baseline_ok(score: float, train: Dataset, eval_: Dataset) -> bool:
    if train.is_classification:
        chance = np.bincount(eval_.labels.astype(int)).max() / len(eval_)
        return max(0.55, chance + 0.02) < score < 0.95
    return 0.05 < score < 0.95


# -- generators --------------------------------------------------------------

def _content(vocab: int) -> np.ndarray:
    return np.arange(NUM_SPECIAL, vocab)


def _pattern(n: int, vocab: int, seq_len: int, rng: np.random.Generator, lexicon_rng, attempt: int):
    """Polarity counting with a negation token that flips the next token."""
    content = lexicon_rng.permutation(_content(vocab))
    n_polar = max(2, len(content) // 4)
    pos = content[: n_polar // 2]
    neg = content[n_polar // 2 : n_polar]
    negator = content[n_polar]
    neutral = content[n_polar + 1 :]
    polarity = np.zeros(vocab)
    polarity[pos] = 1.0
    polarity[neg] = -1.0
    p_polar, p_neg = 0.3, 0.12 + 0.03 * attempt
    flip = 0.05
    seqs, labels = [], []
    body = seq_len - 1
    while len(seqs) < n:
        kind = rng.random(body)
        toks = np.where(
            kind < p_polar,
            rng.choice(np.concatenate([pos, neg]), body),
            np.where(kind < p_polar + p_neg, negator, rng.choice(neutral, body)),
        )
        sign = np.ones(body)
        sign[1:][toks[:-1] == negator] = -1.0
        score = float(np.sum(polarity[toks] * sign))
        if score == 0:
            continue
        y = int(score > 0)
        if rng.random() < flip:
            y = 1 - y
        seqs.append(np.concatenate([[CLS], toks]).astype(np.int64))
        labels.append(y)
    return seqs, np.array(labels, dtype=np.float64)


def _acceptability(n: int, vocab: int, seq_len: int, rng: np.random.Generator, lexicon_rng, attempt: int):
    """Tiny grammar (DET ADJ* NOUN VERB DET ADJ* NOUN [PREP DET NOUN]) vs corrupted strings."""
    content = lexicon_rng.permutation(_content(vocab))
    k = min(len(content) // 5, 6)
    cats = {name: content[i * k : (i + 1) * k] for i, name in enumerate(("DET", "ADJ", "NOUN", "VERB", "PREP"))}
    all_cats = list(cats)
    max_body = seq_len - 1

    def sentence():
        out = []
        for np_ in range(2):
            out.append(("DET", rng.choice(cats["DET"])))
            for _ in range(rng.integers(0, 2)):
                out.append(("ADJ", rng.choice(cats["ADJ"])))
            out.append(("NOUN", rng.choice(cats["NOUN"])))
            if np_ == 0:
                out.append(("VERB", rng.choice(cats["VERB"])))
        if len(out) + 3 <= max_body and rng.random() < 0.5:
            out += [("PREP", rng.choice(cats["PREP"])), ("DET", rng.choice(cats["DET"])), ("NOUN", rng.choice(cats["NOUN"]))]
        return out

    def corrupt(words):
        words = list(words)
        mode = rng.choice(3, p=[0.2, 0.4, 0.4])
        if mode == 0:
            cand = [i for i in range(len(words) - 1) if words[i][0] != words[i + 1][0]]
            i = cand[rng.integers(len(cand))]
            words[i], words[i + 1] = words[i + 1], words[i]
        elif mode == 1:
            i = rng.integers(len(words))
            other = [c for c in all_cats if c != words[i][0]]
            c = other[rng.integers(len(other))]
            words[i] = (c, rng.choice(cats[c]))
        else:
            verbs = [i for i, w in enumerate(words) if w[0] == "VERB"]
            del words[verbs[0]]
        return words

    flip = 0.03 + 0.02 * attempt
    seqs, labels = [], []
    for _ in range(n):
        words = sentence()
        y = int(rng.random() < 0.5)
        if not y:
            words = corrupt(words)
        if rng.random() < flip:
            y = 1 - y
        seqs.append(np.array([CLS] + [int(w) for _, w in words], dtype=np.int64))
        labels.append(y)
    return seqs, np.array(labels, dtype=np.float64)


def _pair(n: int, vocab: int, seq_len: int, rng: np.random.Generator, lexicon_rng, attempt: int):
    """Two segments; similarity mixes token overlap with a shared-topic signal."""
    content = lexicon_rng.permutation(_content(vocab))
    topic = content[: len(content) // 3]
    seg = max(2, (seq_len - 3) // 2)
    seqs, labels = [], []
    for _ in range(n):
        topical = rng.random() < 0.5
        pool = topic if topical else content
        a = rng.choice(pool, seg)
        keep = rng.random()
        b = np.where(rng.random(seg) < keep, a, rng.choice(content, seg))
        b = rng.permutation(b)
        sa, sb = set(a.tolist()), set(b.tolist())
        overlap = len(sa & sb) / len(sa | sb)
        topic_frac = np.isin(np.concatenate([a, b]), topic).mean()
        y = 0.5 * overlap + 0.5 * topic_frac + rng.normal(0, 0.02 + 0.02 * attempt)
        seqs.append(np.concatenate([[CLS], a, [SEP], b, [SEP]]).astype(np.int64))
        labels.append(float(np.clip(y, 0.0, 1.0)))
    return seqs, np.array(labels)


_GENERATORS = {"pattern": _pattern, "acceptability": _acceptability, "pair": _pair}


def make_synthetic_task(kind: str = "pattern", size: int = 200, vocab: int = 64, seed: int = 0,
                        eval_size: int | None = None, seq_len: int = 16, check: bool = True) -> TaskData:
    """Deterministic synthetic task with train/eval splits.

    The bag-of-tokens baseline must land strictly between chance and perfect;
    otherwise generation is retried with a perturbed recipe, up to five times.
    """
    if kind not in _GENERATORS:
        raise DataError(f"unknown synthetic task {kind!r}")
    if size < 20:
        raise DataError("size must be >= 20")
    if vocab < NUM_SPECIAL + 10:
        raise DataError("vocab too small for a synthetic task")
    eval_size = size if eval_size is None else eval_size
    gen = _GENERATORS[kind]
    task_kind = "regression" if kind == "pair" else "binary"
    last = None
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([seed, attempt])
        lexicon_rng = np.random.default_rng([seed, 999])
        seqs, labels = gen(size + eval_size, vocab, seq_len, rng, lexicon_rng, attempt)
        common = dict(task_kind=task_kind, vocab_size=vocab, metric=DEFAULT_METRIC[kind], name=kind)
        train = Dataset(seqs[:size], labels[:size], split="train", **common)
        eval_ = Dataset(seqs[size:], labels[size:], split="eval", **common)
        if task_kind == "binary" and len(np.unique(train.labels)) < 2:
            last = float("nan")
            continue
        if not check:
            return TaskData(train, eval_, None, attempt + 1)
        score = baseline_score(train, eval_)
        if _baseline_ok(score, train, eval_):
            return TaskData(train, eval_, score, attempt + 1)
        last = score
    raise DegenerateTaskError(f"{kind} task degenerate after {MAX_ATTEMPTS} attempts (last baseline {last})")


# -- TSV ingestion -----------------------------------------------------------

def build_vocab(texts: Sequence[str]) -> dict[str, int]:
    vocab: dict[str, int] = {}
    for text in texts:
        for tok in text.split():
            if tok not in vocab:
                vocab[tok] = NUM_SPECIAL + len(vocab)
    return vocab


def _read_rows(path: Path, n_cols: int, header: bool) -> list[tuple[int, list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE))
    out = []
    for lineno, row in enumerate(rows, start=1):
        if header and lineno == 1:
            continue
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != n_cols:
            raise DataError(f"{path}:{lineno}: expected {n_cols} tab-separated fields, got {len(row)}")
        out.append((lineno, row))
    if not out:
        raise DataError(f"{path}: no data rows")
    return out


def load_tsv(path: str | Path, schema: str = "single", label_kind: str = "binary",
             vocab: dict[str, int] | None = None, max_len: int | None = None,
             header: bool = False, metric: str | None = None, split: str | None = None) -> Dataset:
    """Load a GLUE-style TSV: ``sentence<TAB>label`` or ``s1<TAB>s2<TAB>label``.

    Whitespace tokenization. When ``vocab`` is None one is built from this
    file (the train split); otherwise unknown tokens map to UNK and the OOV
    rate is recorded.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if schema not in ("single", "pair"):
        raise DataError(f"unknown schema {schema!r}")
    if label_kind not in ("binary", "multiclass", "regression"):
        raise DataError(f"unknown label kind {label_kind!r}")
    n_cols = 2 if schema == "single" else 3
    rows = _read_rows(path, n_cols, header)
    texts, labels = [], []
    for lineno, row in rows:
        try:
            y = float(row[-1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: label {row[-1]!r} is not numeric") from None
        if label_kind != "regression" and (y != int(y) or y < 0):
            raise DataError(f"{path}:{lineno}: class label must be a non-negative integer")
        if label_kind == "binary" and y > 1:
            raise DataError(f"{path}:{lineno}: binary label must be 0 or 1")
        texts.append(row[:-1])
        labels.append(y)
    built = vocab is None
    if built:
        vocab = build_vocab([t for parts in texts for t in parts])
    seqs = []
    n_tok = n_oov = 0
    for parts in texts:
        ids = [CLS]
        for j, part in enumerate(parts):
            toks = part.split()
            mapped = [vocab.get(t, UNK) for t in toks]
            n_tok += len(toks)
            n_oov += sum(1 for t in toks if t not in vocab)
            ids += mapped
            if schema == "pair":
                ids.append(SEP)
        if max_len is not None:
            ids = ids[:max_len]
        seqs.append(np.array(ids, dtype=np.int64))
    default_metric = {"binary": "accuracy", "multiclass": "accuracy", "regression": "pearson_spearman"}[label_kind]
    return Dataset(
        sequences=seqs,
        labels=np.array(labels),
        task_kind=label_kind,
        split=split or ("train" if built else "eval"),
        vocab_size=NUM_SPECIAL + len(vocab),
        metric=metric or default_metric,
        name=path.stem,
        vocab=vocab,
        oov_rate=None if built else (n_oov / n_tok if n_tok else 0.0),
    )


# -- subsampling -------------------------------------------------------------

def subsample(ds: Dataset, ratio: float, rng: np.random.Generator) -> Dataset:
    """Random subset of ``round(ratio * n)`` examples, stratified by class."""
    if not 0 < ratio <= 1:
        raise DataError("ratio must lie in (0, 1]")
    if ratio == 1:
        return ds
    n = len(ds)
    target = max(1, round(ratio * n))
    if not ds.is_classification:
        idx = np.sort(rng.choice(n, target, replace=False))
        return ds.subset(idx)
    classes = np.unique(ds.labels)
    members = {c: np.flatnonzero(ds.labels == c) for c in classes}
    exact = {c: ratio * len(m) for c, m in members.items()}
    counts = {c: math.floor(v) for c, v in exact.items()}
    short = target - sum(counts.values())
    for c in sorted(classes, key=lambda c: exact[c] - counts[c], reverse=True)[:max(short, 0)]:
        counts[c] += 1
    chosen = []
    for c in classes:
        k = max(1, min(counts[c], len(members[c])))
        chosen.extend(rng.choice(members[c], k, replace=False).tolist())
    return ds.subset(sorted(chosen))


# -- pretraining corpus ------------------------------------------------------

def make_corpus(size: int, vocab: int, seq_len: int, seed: int, sample_seed: int | None = None) -> list[np.ndarray]:
    """Unlabeled sequences from a sparse first-order Markov chain over content tokens.

    ``seed`` fixes the chain; ``sample_seed`` (default: same) fixes which sequences are drawn,
    so a held-out corpus from the same chain uses a different ``sample_seed``.
    """
    rng = np.random.default_rng([seed, 4242])
    content = _content(vocab)
    c = len(content)
    trans = np.full((c, c), 0.2 / c)
    for i in range(c):
        succ = rng.choice(c, 4, replace=False)
        trans[i, succ] += 0.8 / 4
    trans /= trans.sum(axis=1, keepdims=True)
    cum = trans.cumsum(axis=1)
    if sample_seed is not None and sample_seed != seed:
        rng = np.random.default_rng([sample_seed, 4243])
    out = []
    body = seq_len - 1
    for _ in range(size):
        s = np.empty(body, dtype=np.int64)
        s[0] = rng.integers(c)
        u = rng.random(body)
        for t in range(1, body):
            s[t] = min(np.searchsorted(cum[s[t - 1]], u[t]), c - 1)
        out.append(np.concatenate([[CLS], content[s]]).astype(np.int64))
    return out


__all__ = [
    "DataError",
    "DegenerateTaskError",
    "Dataset",
    "TaskData",
    "make_synthetic_task",
    "load_tsv",
    "build_vocab",
    "subsample",
    "baseline_score",
    "bag_of_tokens",
    "make_corpus",
    "DEFAULT_METRIC",
]
