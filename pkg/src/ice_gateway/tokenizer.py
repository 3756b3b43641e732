"""Pluggable token counting.

Every quantity the gateway accounts for (context length, control length,
injection period) is measured with one :class:`TokenCounter`. Three counters
are built in; none of them is a real subword tokenizer, but any consistent
measure works for the ratio accounting.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from ice_gateway.errors import ConfigError, IceError

_WORD = re.compile(r"\S+")


class OutOfRange(IceError, ValueError):
    """Requested split point lies beyond the last token."""


class SplitNotAligned(IceError, ValueError):
    """A byte-mode split would land inside a multi-byte character."""


class TokenMode(str, enum.Enum):
    WHITESPACE = "whitespace"
    BYTE = "byte"
    FIXED_CHARS = "fixed_chars"


@dataclass(frozen=True)
class TokenCounter:
    """Immutable token measure.

    ``whitespace`` counts runs of non-whitespace characters, ``byte`` counts
    UTF-8 bytes and ``fixed_chars`` counts ``ceil(len(text) / chars_per_token)``.
    """

    mode: TokenMode = TokenMode.WHITESPACE
    chars_per_token: int | None = None
    description: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", TokenMode(self.mode))
        if self.mode is TokenMode.FIXED_CHARS:
            if not isinstance(self.chars_per_token, int) or self.chars_per_token < 1:
                raise ConfigError("fixed_chars mode needs a positive chars_per_token")
        elif self.chars_per_token is not None:
            raise ConfigError(f"chars_per_token is only valid in fixed_chars mode, not {self.mode.value}")
        if not self.description:
            label = self.mode.value
            if self.mode is TokenMode.FIXED_CHARS:
                label = f"fixed_chars({self.chars_per_token})"
            object.__setattr__(self, "description", label)

    @classmethod
    def whitespace(cls) -> TokenCounter:
        return cls(TokenMode.WHITESPACE)

    @classmethod
    def byte(cls) -> TokenCounter:
        return cls(TokenMode.BYTE)

    @classmethod
    def fixed_chars(cls, n: int) -> TokenCounter:
        return cls(TokenMode.FIXED_CHARS, chars_per_token=n)

    @classmethod
    def from_config(cls, section: Mapping[str, Any] | None) -> TokenCounter:
        """Build a counter from the ``tokenizer`` config section."""
        section = dict(section or {})
        mode = section.get("mode", "whitespace")
        try:
            mode = TokenMode(mode)
        except ValueError:
            raise ConfigError(f"unknown tokenizer.mode {mode!r}") from None
        if mode is TokenMode.FIXED_CHARS:
            return cls.fixed_chars(section.get("chars_per_token", 0))
        return cls(mode)

    def count(self, text: str) -> int:
        if not text:
            return 0
        if self.mode is TokenMode.WHITESPACE:
            return len(_WORD.findall(text))
        if self.mode is TokenMode.BYTE:
            return len(text.encode("utf-8"))
        return math.ceil(len(text) / self.chars_per_token)

    def stable_count(self, text: str) -> int:
        """Number of tokens in ``text`` that appending more text cannot change.

        A trailing word with no whitespace after it, or a trailing partial
        character group, may still grow as a stream delivers more text.
        """
        if not text:
            return 0
        if self.mode is TokenMode.WHITESPACE:
            n = self.count(text)
            return n if text[-1].isspace() else n - 1
        if self.mode is TokenMode.BYTE:
            return self.count(text)
        return len(text) // self.chars_per_token

    def split_at(self, text: str, n: int) -> tuple[str, str]:
        """Split ``text`` so that the prefix holds exactly ``n`` tokens.

        In whitespace mode the whitespace after the n-th word goes to the
        suffix, so ``"a b c"`` split at 1 gives ``("a", " b c")``.
        """
        if n < 0:
            raise OutOfRange(f"negative split point {n}")
        if n == 0:
            return "", text
        total = self.count(text)
        if n > total:
            raise OutOfRange(f"split point {n} exceeds token count {total}")
        if self.mode is TokenMode.WHITESPACE:
            for i, match in enumerate(_WORD.finditer(text), start=1):
                if i == n:
                    cut = match.end()
                    return text[:cut], text[cut:]
        if self.mode is TokenMode.BYTE:
            raw = text.encode("utf-8")
            try:
                prefix = raw[:n].decode("utf-8")
            except UnicodeDecodeError:
                raise SplitNotAligned(f"byte {n} falls inside a multi-byte character") from None
            return prefix, text[len(prefix):]
        cut = n * self.chars_per_token
        return text[:cut], text[cut:]

    def split_at_or_after(self, text: str, n: int) -> tuple[str, str]:
        """Like :meth:`split_at` but moves forward to the next legal boundary.

        Only byte mode ever moves; there a split may advance by up to three
        bytes to the end of the character it would otherwise cut.
        """
        total = self.count(text)
        while True:
            try:
                return self.split_at(text, n)
            except SplitNotAligned:
                n += 1
                if n > total:
                    raise


def count_tokens(counter: TokenCounter, text: str) -> int:
    return counter.count(text)


def split_at_token(counter: TokenCounter, text: str, n: int) -> tuple[str, str]:
    return counter.split_at(text, n)
