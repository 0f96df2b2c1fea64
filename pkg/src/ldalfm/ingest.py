"""Review ingestion, k-core filtering and train/validation/test splitting."""

from __future__ import annotations

import gzip
import io
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .rng import stage_rng

logger = logging.getLogger(__name__)

RATING_MIN = 1.0
RATING_MAX = 5.0

SPLIT_FILES = {"train": "train.jsonl", "validation": "validation.jsonl", "test": "test.jsonl"}
INDEX_FILE = "index.json"


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    rating: float
    review_text: str
    timestamp: int

    def to_json(self) -> dict:
        return {
            "reviewerID": self.user_id,
            "asin": self.item_id,
            "overall": self.rating,
            "reviewText": self.review_text,
            "unixReviewTime": self.timestamp,
        }


@dataclass
class LineError:
    line: int
    message: str


def _parse_record(obj) -> Interaction:
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    user, item = obj.get("reviewerID"), obj.get("asin")
    if not isinstance(user, str) or not isinstance(item, str):
        raise ValueError("reviewerID and asin must be strings")
    rating = obj.get("overall")
    if isinstance(rating, bool) or not isinstance(rating, (int, float)):
        raise ValueError("overall must be a number")
    rating = float(rating)
    if not math.isfinite(rating) or not RATING_MIN <= rating <= RATING_MAX:
        raise ValueError(f"overall={rating} outside [{RATING_MIN}, {RATING_MAX}]")
    ts = obj.get("unixReviewTime")
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise ValueError("unixReviewTime must be an integer")
    text = obj.get("reviewText", "")
    if text is None:
        text = ""
    if not isinstance(text, str):
        raise ValueError("reviewText must be a string")
    return Interaction(user, item, rating, text, ts)


def parse_reviews(source: IO[bytes] | Iterable[bytes], errors: list[LineError] | None = None) -> list[Interaction]:
    """Parse a JSON-lines review stream into interactions.

    Malformed lines are skipped and appended to ``errors`` (1-based line
    numbers).  Raises :class:`IngestError` when no line is valid.
    """
    out: list[Interaction] = []
    for lineno, raw in enumerate(source, start=1):
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                _reject(errors, lineno, f"invalid UTF-8: {exc}")
                continue
        if not raw.strip():
            continue
        try:
            out.append(_parse_record(json.loads(raw)))
        except (ValueError, TypeError) as exc:
            _reject(errors, lineno, str(exc))
    if not out:
        raise IngestError("no valid interactions")
    return out


def _reject(errors, lineno, message):
    logger.warning("line %d rejected: %s", lineno, message)
    if errors is not None:
        errors.append(LineError(lineno, message))


def read_reviews(path: str | Path, errors: list[LineError] | None = None) -> list[Interaction]:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return parse_reviews(fh, errors)


def dumps_interactions(data: Iterable[Interaction]) -> str:
    return "".join(json.dumps(x.to_json(), ensure_ascii=False) + "\n" for x in data)


def write_interactions(data: Iterable[Interaction], path: str | Path) -> None:
    Path(path).write_text(dumps_interactions(data), encoding="utf-8")


def load_interactions(path: str | Path) -> list[Interaction]:
    text = Path(path).read_bytes()
    if not text.strip():
        return []
    return parse_reviews(io.BytesIO(text))


def deduplicate(data: Iterable[Interaction]) -> list[Interaction]:
    """Drop repeated (user, item, timestamp, text) records, keeping the first."""
    seen = set()
    out = []
    for x in data:
        key = (x.user_id, x.item_id, x.timestamp, x.review_text)
        if key not in seen:
            seen.add(key)
            out.append(x)
    return out


def k_core_filter(data: list[Interaction], k: int) -> list[Interaction]:
    """Iteratively drop users and items with fewer than ``k`` interactions."""
    if k < 1:
        raise ValueError("k must be >= 1")
    cur = list(data)
    while True:
        users = Counter(x.user_id for x in cur)
        items = Counter(x.item_id for x in cur)
        kept = [x for x in cur if users[x.user_id] >= k and items[x.item_id] >= k]
        if len(kept) == len(cur):
            return kept
        cur = kept


@dataclass
class DatasetSplit:
    train: list[Interaction]
    validation: list[Interaction]
    test: list[Interaction]
    user_index: dict[str, int]
    item_index: dict[str, int]
    seed: int | None = None
    pruned: dict[str, int] = field(default_factory=lambda: {"validation": 0, "test": 0})

    @property
    def n_users(self) -> int:
        return len(self.user_index)

    @property
    def n_items(self) -> int:
        return len(self.item_index)

    def part(self, name: str) -> list[Interaction]:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]

    def arrays(self, name: str) -> "RatingArrays":
        rows = self.part(name)
        return RatingArrays(
            users=np.array([self.user_index[x.user_id] for x in rows], dtype=np.int64),
            items=np.array([self.item_index[x.item_id] for x in rows], dtype=np.int64),
            ratings=np.array([x.rating for x in rows], dtype=np.float64),
        )

    def counts(self) -> dict:
        return {
            "train": len(self.train),
            "validation": len(self.validation),
            "test": len(self.test),
            "users": self.n_users,
            "items": self.n_items,
            "pruned_validation": self.pruned["validation"],
            "pruned_test": self.pruned["test"],
        }


@dataclass
class RatingArrays:
    """Dense-id view of a list of interactions."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray

    def __len__(self) -> int:
        return len(self.ratings)


def split_dataset(data: list[Interaction], seed: int) -> DatasetSplit:
    """Uniform 80/10/10 split followed by cold-start pruning.

    A seeded permutation assigns the first ``floor(0.8 n)`` records to train
    and halves the remainder into validation and test.  Validation/test
    records whose user or item never occurs in train are removed.
    """
    n = len(data)
    if n < 10:
        raise ValueError(f"need at least 10 interactions to split, got {n}")
    order = stage_rng(seed, "split").permutation(n)
    n_train = n * 8 // 10
    n_val = (n - n_train) // 2
    train_idx = np.sort(order[:n_train])
    val_idx = np.sort(order[n_train:n_train + n_val])
    test_idx = np.sort(order[n_train + n_val:])

    train = [data[i] for i in train_idx]
    users = {x.user_id for x in train}
    items = {x.item_id for x in train}

    def prune(idx):
        rows = [data[i] for i in idx]
        kept = [x for x in rows if x.user_id in users and x.item_id in items]
        return kept, len(rows) - len(kept)

    val, n_pv = prune(val_idx)
    test, n_pt = prune(test_idx)
    return DatasetSplit(
        train=train,
        validation=val,
        test=test,
        user_index={u: j for j, u in enumerate(sorted(users))},
        item_index={i: j for j, i in enumerate(sorted(items))},
        seed=seed,
        pruned={"validation": n_pv, "test": n_pt},
    )


def save_split(split: DatasetSplit, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, fname in SPLIT_FILES.items():
        write_interactions(split.part(name), out_dir / fname)
    sidecar = {
        "seed": split.seed,
        "counts": split.counts(),
        "user_index": split.user_index,
        "item_index": split.item_index,
    }
    (out_dir / INDEX_FILE).write_text(json.dumps(sidecar, indent=1, sort_keys=True), encoding="utf-8")


def load_split(in_dir: str | Path) -> DatasetSplit:
    in_dir = Path(in_dir)
    sidecar = json.loads((in_dir / INDEX_FILE).read_text(encoding="utf-8"))
    parts = {name: load_interactions(in_dir / fname) for name, fname in SPLIT_FILES.items()}
    counts = sidecar["counts"]
    return DatasetSplit(
        train=parts["train"],
        validation=parts["validation"],
        test=parts["test"],
        user_index=sidecar["user_index"],
        item_index=sidecar["item_index"],
        seed=sidecar["seed"],
        pruned={"validation": counts["pruned_validation"], "test": counts["pruned_test"]},
    )
