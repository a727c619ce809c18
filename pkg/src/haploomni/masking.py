"""Hybrid attention masks driven by per-position modality tags.

Text and timestep spans are causal, vision and noise spans are bidirectional,
and every position sees all earlier spans in full.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch


class TokenType(enum.Enum):
    TEXT = "T"
    VISION = "V"
    TIMESTEP = "S"
    NOISE = "N"

    @property
    def bidirectional(self) -> bool:
        return self in (TokenType.VISION, TokenType.NOISE)

    @classmethod
    def from_char(cls, ch: str) -> "TokenType":
        try:
            return cls(ch)
        except ValueError:
            raise ValueError(
                f"invalid token type character {ch!r}; expected one of T, V, S, N"
            ) from None


@dataclass(frozen=True)
class TokenTypeSequence:
    tags: tuple[TokenType, ...]

    def __post_init__(self):
        if len(self.tags) == 0:
            raise ValueError("token type sequence must be nonempty")
        if not all(isinstance(t, TokenType) for t in self.tags):
            raise TypeError("every position needs a TokenType tag")

    @classmethod
    def of(cls, tags: Iterable[TokenType] | str) -> "TokenTypeSequence":
        if isinstance(tags, str):
            return cls(tuple(TokenType.from_char(c) for c in tags))
        return cls(tuple(tags))

    def __len__(self) -> int:
        return len(self.tags)

    def __str__(self) -> str:
        return "".join(t.value for t in self.tags)

    @property
    def span_index(self) -> np.ndarray:
        tags = self.tags
        out = np.zeros(len(tags), dtype=np.int64)
        for i in range(1, len(tags)):
            out[i] = out[i - 1] + (tags[i] is not tags[i - 1])
        return out

    def positions_of(self, kind: TokenType) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.tags) if t is kind], dtype=np.int64)

    def spans(self) -> list[tuple[TokenType, int, int]]:
        """Contiguous same-type spans as ``(type, start, stop)``."""
        out = []
        start = 0
        for i in range(1, len(self.tags) + 1):
            if i == len(self.tags) or self.tags[i] is not self.tags[start]:
                out.append((self.tags[start], start, i))
                start = i
        return out

    def append(self, kind: TokenType) -> "TokenTypeSequence":
        return TokenTypeSequence(self.tags + (kind,))


@dataclass(frozen=True)
class AttentionMask:
    """``allowed[q, k]`` is True when query ``q`` may attend key ``k``."""

    allowed: np.ndarray
    seq: TokenTypeSequence

    def __len__(self) -> int:
        return self.allowed.shape[0]

    def as_tensor(self, rows: slice | None = None) -> torch.Tensor:
        a = self.allowed if rows is None else self.allowed[rows]
        return torch.from_numpy(np.ascontiguousarray(a))

    def render(self, on: str = "#", off: str = "·") -> str:
        return "\n".join("".join(on if v else off for v in row) for row in self.allowed)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return self.seq == other.seq and np.array_equal(self.allowed, other.allowed)

    __hash__ = None


def _coerce(seq) -> TokenTypeSequence:
    if isinstance(seq, TokenTypeSequence):
        return seq
    if isinstance(seq, (str, Sequence)) and len(seq) == 0:
        raise ValueError("cannot build a mask for an empty sequence")
    return TokenTypeSequence.of(seq)


def build_mask(seq: TokenTypeSequence | str | Sequence[TokenType]) -> AttentionMask:
    seq = _coerce(seq)
    span = seq.span_index
    bidir = np.array([t.bidirectional for t in seq.tags])
    idx = np.arange(len(seq))
    earlier = span[None, :] < span[:, None]
    same = span[None, :] == span[:, None]
    causal = idx[None, :] <= idx[:, None]
    allowed = earlier | (same & (bidir[:, None] | causal))
    return AttentionMask(allowed=allowed, seq=seq)


def extend_mask_for_decoding(mask: AttentionMask, new_type: TokenType) -> AttentionMask:
    """Grow ``mask`` by one appended position of type ``new_type``."""
    seq = mask.seq.append(new_type)
    n = len(mask)
    grid = np.zeros((n + 1, n + 1), dtype=bool)
    grid[:n, :n] = mask.allowed
    joins = mask.seq.tags[-1] is new_type
    span = mask.seq.span_index
    new_span = span[-1] + (0 if joins else 1)
    # every earlier position is in an earlier span or the same span
    grid[n, :] = True
    if joins and new_type.bidirectional:
        members = span == new_span
        grid[:n, n] = members
    return AttentionMask(allowed=grid, seq=seq)
