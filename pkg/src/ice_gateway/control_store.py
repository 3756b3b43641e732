"""Bank of control sentences and the strategies that pick one per injection."""

from __future__ import annotations

import enum
import json
import string
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping

from ice_gateway.errors import ConfigError, IceError
from ice_gateway.tokenizer import TokenCounter

# payload tokens of context a lexical match looks at
CONTEXT_TAIL_TOKENS = 512


class EmptyStore(IceError):
    pass


class UnknownId(IceError, KeyError):
    pass


class StoreFormatError(IceError):
    pass


@dataclass(frozen=True)
class ControlSentence:
    id: str
    text: str
    token_count: int
    tags: frozenset[str] = frozenset()
    priority: int = 0


def lexical_tokens(text: str) -> set[str]:
    words = (w.strip(string.punctuation).lower() for w in text.split())
    return {w for w in words if w}


def overlap_score(sentence_text: str, context_tail: str) -> Fraction:
    """Jaccard similarity of the lowercased word sets."""
    a, b = lexical_tokens(sentence_text), lexical_tokens(context_tail)
    return Fraction(len(a & b), max(1, len(a | b)))


class SelectionMode(str, enum.Enum):
    FIXED = "fixed"
    ROUND_ROBIN = "round_robin"
    LEXICAL_MATCH = "lexical_match"


@dataclass(frozen=True)
class SelectionStrategy:
    mode: SelectionMode = SelectionMode.ROUND_ROBIN
    fixed_id: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", SelectionMode(self.mode))
        if self.mode is SelectionMode.FIXED and not self.fixed_id:
            raise ConfigError("fixed selection needs a sentence id")

    @classmethod
    def fixed(cls, sentence_id: str) -> SelectionStrategy:
        return cls(SelectionMode.FIXED, sentence_id)

    @classmethod
    def from_config(cls, raw: Any) -> SelectionStrategy:
        if raw is None:
            return cls()
        if isinstance(raw, str):
            return cls(raw)
        if isinstance(raw, Mapping):
            return cls(raw.get("mode", "round_robin"), raw.get("id"))
        raise ConfigError(f"cannot read selection strategy from {raw!r}")


@dataclass(frozen=True)
class ControlStore:
    """Immutable snapshot of sentences, kept sorted by id."""

    sentences: tuple[ControlSentence, ...] = ()
    _by_id: Mapping[str, ControlSentence] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.sentences, key=lambda s: s.id))
        by_id: dict[str, ControlSentence] = {}
        for s in ordered:
            if s.id in by_id:
                raise StoreFormatError(f"duplicate sentence id {s.id!r}")
            by_id[s.id] = s
        object.__setattr__(self, "sentences", ordered)
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.sentences)

    def __contains__(self, sentence_id: object) -> bool:
        return sentence_id in self._by_id

    def get(self, sentence_id: str) -> ControlSentence:
        try:
            return self._by_id[sentence_id]
        except KeyError:
            raise UnknownId(sentence_id) from None

    @classmethod
    def from_records(cls, records: Iterable[Mapping[str, Any]], counter: TokenCounter) -> ControlStore:
        sentences = []
        for i, rec in enumerate(records):
            if not isinstance(rec, Mapping):
                raise StoreFormatError(f"entry {i} is not an object")
            sid, text = rec.get("id"), rec.get("text")
            if not isinstance(sid, str) or not sid:
                raise StoreFormatError(f"entry {i}: id must be a nonempty string")
            if not isinstance(text, str):
                raise StoreFormatError(f"entry {i}: text must be a string")
            tags = rec.get("tags", [])
            priority = rec.get("priority", 0)
            if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
                raise StoreFormatError(f"entry {i}: tags must be a list of strings")
            if not isinstance(priority, int) or isinstance(priority, bool):
                raise StoreFormatError(f"entry {i}: priority must be an integer")
            sentences.append(ControlSentence(sid, text, counter.count(text), frozenset(tags), priority))
        return cls(tuple(sentences))

    @classmethod
    def load(cls, path: str | Path, counter: TokenCounter) -> ControlStore:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise StoreFormatError(f"cannot read control store {path}: {exc}") from exc
        if not isinstance(data, list):
            raise StoreFormatError("control store file must hold a JSON array")
        return cls.from_records(data, counter)

    def validate(self, strategy: SelectionStrategy) -> None:
        if not self.sentences:
            raise EmptyStore("control store has no sentences")
        if strategy.mode is SelectionMode.FIXED:
            self.get(strategy.fixed_id)

    def candidates(self, strategy: SelectionStrategy) -> tuple[ControlSentence, ...]:
        """Every sentence ``strategy`` could ever return."""
        if strategy.mode is SelectionMode.FIXED:
            return (self.get(strategy.fixed_id),)
        return self.sentences

    def select(self, strategy: SelectionStrategy, context_tail: str = "", injection_index: int = 0) -> ControlSentence:
        if not self.sentences:
            raise EmptyStore("control store has no sentences")
        if strategy.mode is SelectionMode.FIXED:
            return self.get(strategy.fixed_id)
        if strategy.mode is SelectionMode.ROUND_ROBIN:
            return self.sentences[injection_index % len(self.sentences)]
        tail_words = lexical_tokens(context_tail)

        def rank(s: ControlSentence):
            words = lexical_tokens(s.text)
            score = Fraction(len(words & tail_words), max(1, len(words | tail_words)))
            # max() keeps the first maximum, and ids are ascending
            return score, s.priority

        return max(self.sentences, key=rank)


def select(store: ControlStore, strategy: SelectionStrategy, context_tail: str = "",
           injection_index: int = 0) -> ControlSentence:
    return store.select(strategy, context_tail, injection_index)


class ControlBank:
    """Holds the live store snapshot; :meth:`reload` swaps it atomically."""

    def __init__(self, store: ControlStore, path: str | Path | None = None,
                 counter: TokenCounter | None = None):
        self._store = store
        self._path = Path(path) if path else None
        self._counter = counter or TokenCounter()
        self._lock = threading.Lock()

    @classmethod
    def from_path(cls, path: str | Path, counter: TokenCounter) -> ControlBank:
        return cls(ControlStore.load(path, counter), path, counter)

    @property
    def store(self) -> ControlStore:
        return self._store

    @property
    def path(self) -> Path | None:
        return self._path

    def reload(self, check=None) -> ControlStore:
        """Re-read the backing file. ``check`` may veto the new snapshot by raising."""
        if self._path is None:
            raise StoreFormatError("control store has no backing file to reload")
        fresh = ControlStore.load(self._path, self._counter)
        if check is not None:
            check(fresh)
        with self._lock:
            self._store = fresh
        return fresh
