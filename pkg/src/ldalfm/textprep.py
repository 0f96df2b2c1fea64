"""Review text cleaning, vocabulary construction and per-item documents."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .ingest import Interaction

STOPWORDS_FILE = "stopwords_en.txt"
STOPWORDS_SHA256 = "019f104ba2ed07436d05f9cdd3383034ad66014edc27fc651f837e1a038b6451"
LEMMA_FILE = "lemmas_en.txt"
LEMMATIZER_VERSION = "rules-1"

VOCAB_FILE = "vocab.txt"
DOCS_FILE = "docs.txt"
CORPUS_META_FILE = "corpus.json"

_TOKEN_RE = re.compile(r"\w+(?:'\w+)*|[^\w\s]+")
_VOWELS = set("aeiou")


def _data_text(name: str) -> str:
    return resources.files("ldalfm").joinpath("data", name).read_text(encoding="utf-8")


def load_stopwords() -> frozenset[str]:
    return frozenset(w for w in _data_text(STOPWORDS_FILE).split())


class Lemmatizer:
    """Lemma table lookup with suffix-stripping fallback.

    Rules, tried in order on tokens longer than three characters:
    ``-ies`` -> ``-y``, ``-sses`` -> ``-ss``, ``-ches/-shes/-xes/-zes`` drop
    ``es``, ``-s`` (not ``-ss/-us/-is``) dropped, then ``-ing``/``-ed``
    removal with the usual undoubling and silent-e repair.
    """

    def __init__(self, table: dict[str, str] | None = None):
        if table is None:
            table = {}
            for line in _data_text(LEMMA_FILE).splitlines():
                line = line.strip()
                if line and not line.startswith("#"):
                    form, lemma = line.split()
                    table[form] = lemma
        self.table = table

    def __call__(self, word: str) -> str:
        if word in self.table:
            return self.table[word]
        if len(word) <= 3:
            return word
        if word.endswith("ies"):
            return word[:-3] + ("y" if len(word) > 4 else "ie")
        if word.endswith("sses"):
            return word[:-2]
        if word.endswith(("ches", "shes", "xes", "zes")):
            return word[:-2]
        if word.endswith("s") and not word.endswith(("ss", "us", "is")):
            return word[:-1]
        if word.endswith("eed"):
            return word
        for suffix in ("ing", "ed"):
            if word.endswith(suffix):
                stem = word[: -len(suffix)]
                if len(stem) >= 3 and _VOWELS & set(stem):
                    return _repair_stem(stem)
                return word
        return word


def _is_consonant(stem: str, i: int) -> bool:
    ch = stem[i]
    if ch in _VOWELS:
        return False
    if ch == "y":
        return i == 0 or not _is_consonant(stem, i - 1)
    return True


def _repair_stem(stem: str) -> str:
    if stem.endswith(("at", "bl", "iz")):
        return stem + "e"
    if stem[-1] == stem[-2] and _is_consonant(stem, len(stem) - 1) and stem[-1] not in "lsz":
        return stem[:-1]
    # short cvc stems (hop-, mak-) take back their silent e
    n = len(stem)
    cv = "".join("c" if _is_consonant(stem, i) else "v" for i in range(n))
    if cv.count("vc") == 1 and cv.endswith("cvc") and stem[-1] not in "wxy":
        return stem + "e"
    return stem


@dataclass
class TextPipeline:
    """tokenize -> lowercase -> drop stopwords/1-char -> strip non-letters -> lemmatize."""

    stopwords: frozenset[str] = field(default_factory=load_stopwords)
    lemmatizer: Callable[[str], str] = field(default_factory=Lemmatizer)

    def __call__(self, raw: str) -> list[str]:
        return preprocess_text(raw, self.stopwords, self.lemmatizer)


def preprocess_text(raw: str, stopwords: Iterable[str], lemmatizer: Callable[[str], str]) -> list[str]:
    stop = stopwords if isinstance(stopwords, (set, frozenset)) else set(stopwords)
    tokens = _TOKEN_RE.findall(raw.replace("’", "'"))
    tokens = [t.lower() for t in tokens]
    tokens = [t for t in tokens if len(t) > 1 and t not in stop]
    tokens = ["".join(ch for ch in t if ch.isalpha()) for t in tokens]
    return [lemmatizer(t) for t in tokens if t]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    @property
    def index(self) -> dict[str, int]:
        return self._index

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


def build_vocabulary(train_docs: Iterable[Sequence[str]], V_target: int) -> Vocabulary:
    """Top ``V_target`` tokens by raw frequency, ties broken lexicographically."""
    if V_target < 1:
        raise ValueError("V_target must be >= 1")
    counts = Counter()
    for doc in train_docs:
        counts.update(doc)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(tuple(t for t, _ in ranked[:V_target]))


@dataclass
class ItemDocument:
    item_id: int
    words: np.ndarray
    source_review_count: int

    def __len__(self) -> int:
        return len(self.words)


def tokenize_reviews(rows: Sequence[Interaction], pipeline: Callable[[str], list[str]] | None = None) -> list[list[str]]:
    pipeline = pipeline or TextPipeline()
    return [pipeline(x.review_text) for x in rows]


def aggregate_item_documents(
    train: Sequence[Interaction],
    vocab: Vocabulary,
    item_index: dict[str, int],
    tokens: Sequence[Sequence[str]] | None = None,
) -> list[ItemDocument]:
    """One document per train item, reviews concatenated in timestamp order.

    ``tokens`` may carry the already-cleaned token list of each train row;
    otherwise the default pipeline is run.  Out-of-vocabulary tokens are
    dropped; items left with nothing still get an (empty) document.
    """
    if tokens is None:
        tokens = tokenize_reviews(train)
    index = vocab.index
    per_item: dict[int, list[tuple[int, int, list[int]]]] = {j: [] for j in item_index.values()}
    for pos, (row, toks) in enumerate(zip(train, tokens)):
        ids = [index[t] for t in toks if t in index]
        per_item[item_index[row.item_id]].append((row.timestamp, pos, ids))
    docs = []
    for j in range(len(item_index)):
        reviews = sorted(per_item[j], key=lambda r: (r[0], r[1]))
        words = [w for _, _, ids in reviews for w in ids]
        docs.append(ItemDocument(j, np.array(words, dtype=np.int64), len(reviews)))
    return docs


def save_corpus(vocab: Vocabulary, docs: Sequence[ItemDocument], out_dir: str | Path) -> None:
    """Write ``vocab.txt`` (rank order), ``docs.txt`` (``item w w ...``) and a small sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / VOCAB_FILE).write_text("".join(t + "\n" for t in vocab.tokens), encoding="utf-8")
    lines = [" ".join([str(d.item_id)] + [str(w) for w in d.words]) + "\n" for d in docs]
    (out_dir / DOCS_FILE).write_text("".join(lines), encoding="utf-8")
    meta = {
        "V": len(vocab),
        "vocab_sha256": vocab.sha256(),
        "n_documents": len(docs),
        "n_tokens": int(sum(len(d) for d in docs)),
        "review_counts": [d.source_review_count for d in docs],
        "lemmatizer": LEMMATIZER_VERSION,
        "stopwords_sha256": STOPWORDS_SHA256,
    }
    (out_dir / CORPUS_META_FILE).write_text(json.dumps(meta, indent=1), encoding="utf-8")


def load_corpus(in_dir: str | Path) -> tuple[Vocabulary, list[ItemDocument]]:
    in_dir = Path(in_dir)
    vocab = Vocabulary(tuple((in_dir / VOCAB_FILE).read_text(encoding="utf-8").splitlines()))
    meta_path = in_dir / CORPUS_META_FILE
    review_counts = json.loads(meta_path.read_text())["review_counts"] if meta_path.exists() else None
    docs = []
    for n, line in enumerate((in_dir / DOCS_FILE).read_text(encoding="utf-8").splitlines()):
        parts = line.split()
        reviews = review_counts[n] if review_counts is not None else 0
        docs.append(ItemDocument(int(parts[0]), np.array([int(w) for w in parts[1:]], dtype=np.int64), reviews))
    return vocab, docs
