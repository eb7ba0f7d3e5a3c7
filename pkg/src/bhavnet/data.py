"""Embedding tables, labeled pair files, splits and batching.

Embedding file: UTF-8 text, one ``token f1 f2 ... fd`` per line, optional
``count dim`` header. Pair file: ``w1<TAB>w2<TAB>label`` with label 0
(synonym) or 1 (antonym). Tokens are NFC-normalized and otherwise left
alone (no lowercasing, no lemmatization).
"""

from __future__ import annotations

import logging
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tensor import InvalidConfigError, Rng

logger = logging.getLogger(__name__)

SYNONYM = 0
ANTONYM = 1


class FormatError(ValueError):
    """A data file does not follow its line format."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.line = line


class VocabularyError(KeyError):
    """A token has no vector in the embedding table."""

    def __init__(self, token: str):
        super().__init__(token)
        self.token = token

    def __str__(self) -> str:
        return f"token not in embedding table: {self.token!r}"


def normalize(token: str) -> str:
    return unicodedata.normalize("NFC", token)


@dataclass
class EmbeddingTable:
    dim: int
    entries: dict[str, np.ndarray]
    language: str = "en"
    duplicates: int = 0

    def __contains__(self, token: str) -> bool:
        return normalize(token) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, token: str) -> np.ndarray:
        try:
            return self.entries[normalize(token)]
        except KeyError:
            raise VocabularyError(token) from None

    def lookup(self, tokens: Sequence[str]) -> np.ndarray:
        """Stack the vectors of ``tokens`` into an ``(n, dim)`` matrix."""
        if not tokens:
            return np.zeros((0, self.dim))
        return np.stack([self[t] for t in tokens])


@dataclass(frozen=True)
class LabeledPair:
    w1: str
    w2: str
    label: int
    language: str = "en"

    def __post_init__(self):
        object.__setattr__(self, "w1", normalize(self.w1))
        object.__setattr__(self, "w2", normalize(self.w2))
        if self.label not in (SYNONYM, ANTONYM):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.w1 == self.w2:
            raise ValueError(f"pair words must differ, got {self.w1!r} twice")


@dataclass
class Dataset:
    pairs: list[LabeledPair]
    counts: dict[str, Counter] = field(default_factory=dict)

    def __post_init__(self):
        if not self.counts:
            for p in self.pairs:
                self.counts.setdefault(p.language, Counter())[p.label] += 1


def _read_lines(path) -> list[str]:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as err:
        raise UnicodeDecodeError(err.encoding, err.object, err.start, err.end, f"{path}: not UTF-8") from None
    if text.startswith("\ufeff"):
        text = text[1:]
    return text.replace("\r\n", "\n").split("\n")


def load_embeddings(path, expected_dim: int | None = None, language: str = "en") -> EmbeddingTable:
    """Parse a text embedding file.

    A first line made of exactly two integers is read as a ``count dim``
    header and skipped. Duplicate tokens keep the last vector; the number of
    overwrites is logged and stored on the table.
    """
    lines = _read_lines(path)
    entries: dict[str, np.ndarray] = {}
    dim = expected_dim
    duplicates = 0
    header_dim = None
    seen_content = False
    for lineno, line in enumerate(lines, start=1):
        fields = line.rstrip().split(" ") if line.strip() else []
        fields = [f for f in fields if f]
        if not fields:
            continue
        if not seen_content and len(fields) == 2 and all(f.isdigit() for f in fields):
            header_dim = int(fields[1])
            seen_content = True
            continue
        seen_content = True
        token = normalize(fields[0])
        values = fields[1:]
        if not values:
            raise FormatError("token without a vector", path, lineno)
        try:
            vec = np.array([float(v) for v in values], dtype=np.float64)
        except ValueError:
            raise FormatError("non-numeric vector entry", path, lineno) from None
        if not np.all(np.isfinite(vec)):
            raise FormatError("non-finite vector entry", path, lineno)
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise FormatError(f"vector has {len(vec)} entries, expected {dim}", path, lineno)
        if token in entries:
            duplicates += 1
        entries[token] = vec
    if not entries:
        raise FormatError("no embedding vectors found", path)
    if header_dim is not None and header_dim != dim:
        raise FormatError(f"header declares dim {header_dim} but vectors have {dim}", path, 1)
    if duplicates:
        logger.warning("%s: %d duplicate tokens, last occurrence kept", path, duplicates)
    return EmbeddingTable(dim=dim, entries=entries, language=language, duplicates=duplicates)


def save_embeddings(table: EmbeddingTable, path, header: bool = True) -> None:
    # repr() of a float round-trips exactly
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(f"{len(table.entries)} {table.dim}\n")
        for token, vec in table.entries.items():
            fh.write(token + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def load_pairs(path, language: str = "en") -> list[LabeledPair]:
    pairs = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise FormatError(f"expected 3 tab-separated columns, got {len(cols)}", path, lineno)
        w1, w2, label = (c.strip() for c in cols)
        if label not in ("0", "1"):
            raise FormatError(f"label must be 0 or 1, got {label!r}", path, lineno)
        try:
            pairs.append(LabeledPair(w1, w2, int(label), language))
        except ValueError as err:
            raise FormatError(str(err), path, lineno) from None
    return pairs


def save_pairs(pairs: Sequence[LabeledPair], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(f"{p.w1}\t{p.w2}\t{p.label}\n")


def filter_resolvable(pairs: Sequence[LabeledPair], table: EmbeddingTable) -> tuple[list[LabeledPair], int]:
    kept = [p for p in pairs if p.w1 in table.entries and p.w2 in table.entries]
    return kept, len(pairs) - len(kept)


def stratified_split(
    pairs: Sequence[LabeledPair],
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    rng: Rng | None = None,
) -> tuple[list[LabeledPair], list[LabeledPair], list[LabeledPair]]:
    """Shuffle each label class and cut it by ``fractions`` (train, dev, test).

    Per-class cut points use largest-remainder rounding, so every split's
    count per class is within one of its exact share.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise InvalidConfigError(f"fractions must be three positive numbers summing to 1, got {tuple(fractions)}")
    rng = rng or Rng(0)
    splits: list[list[LabeledPair]] = [[], [], []]
    by_label: dict[int, list[LabeledPair]] = {}
    for p in pairs:
        by_label.setdefault(p.label, []).append(p)
    for label in sorted(by_label):
        members = by_label[label]
        order = rng.permutation(len(members))
        sizes = _apportion(len(members), fractions)
        if min(sizes) < 1:
            raise InvalidConfigError(
                f"class {label} has {len(members)} pairs; a split would get {min(sizes)}"
            )
        start = 0
        for k, size in enumerate(sizes):
            splits[k].extend(members[i] for i in order[start:start + size])
            start += size
    return splits[0], splits[1], splits[2]


def _apportion(n: int, fractions: Sequence[float]) -> list[int]:
    exact = [n * f for f in fractions]
    sizes = [int(math.floor(x)) for x in exact]
    remainders = sorted(range(len(exact)), key=lambda k: (-(exact[k] - sizes[k]), k))
    for k in remainders[: n - sum(sizes)]:
        sizes[k] += 1
    return sizes


def batches(pairs: Sequence[LabeledPair], batch_size: int, rng: Rng) -> Iterator[list[LabeledPair]]:
    """One epoch of shuffled batches; only the last may be short."""
    if not pairs:
        raise InvalidConfigError("cannot batch an empty dataset")
    if batch_size < 2:
        raise InvalidConfigError(f"batch size must be at least 2, got {batch_size}")
    order = rng.permutation(len(pairs))
    for start in range(0, len(pairs), batch_size):
        yield [pairs[i] for i in order[start:start + batch_size]]


def synthetic_task(
    n_pairs: int,
    dim: int,
    rng: Rng,
    noise: float = 0.1,
    language: str = "en",
    prefix: str = "w",
) -> tuple[list[LabeledPair], EmbeddingTable]:
    """Balanced toy task: synonyms are ``(v, v + e)``, antonyms ``(v, -v + e)``.

    ``v`` is standard normal, ``e`` is Gaussian with std ``noise``. Every
    pair gets two fresh tokens.
    """
    entries = {}
    pairs = []
    for i in range(n_pairs):
        label = i % 2
        v = rng.normal(dim)
        partner = (v if label == SYNONYM else -v) + rng.normal(dim, noise)
        a, b = f"{prefix}{i}a", f"{prefix}{i}b"
        entries[a], entries[b] = v, partner
        pairs.append(LabeledPair(a, b, label, language))
    order = rng.permutation(n_pairs)
    pairs = [pairs[i] for i in order]
    return pairs, EmbeddingTable(dim=dim, entries=entries, language=language)
