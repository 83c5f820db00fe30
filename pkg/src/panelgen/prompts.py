"""Unified prompt template, its parser, and the hashed-vocabulary tokenizer.

A prompt set (one overall description plus one text per panel) serializes to
a single line:

    [SET] {overall} [SCENE-1] {p1} [SCENE-2] {p2} ...

with single-space joins. Input texts must be whitespace-canonical (single
spaces, no leading/trailing whitespace) and must not contain the reserved
delimiters, which makes compose/parse an exact round trip.

Text encoding is a hashed toy tokenizer: lowercase whitespace tokens, FNV-1a
64-bit hash mod the vocabulary, fixed width L with zeroed, attention-masked
padding. Ids 0 and 1 are reserved (EMPTY for empty text, NULL for the
classifier-free-guidance unconditional branch).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, embedding

SET_DELIM = "[SET]"
SCENE_PREFIX = "[SCENE-"
_SCENE_TOKEN = re.compile(r"^\[SCENE-([0-9]+)\]$")

EMPTY_ID = 0
NULL_ID = 1
RESERVED_IDS = 2

_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211
_U64 = (1 << 64) - 1


class PromptFormatError(ValueError):
    """Template violation; position is a character offset where applicable."""

    def __init__(self, message: str, position: Optional[int] = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


@dataclass(frozen=True)
class PromptSet:
    """Overall set description plus per-panel texts, slot-aligned with a PanelSet."""

    overall: str
    per_panel: Tuple[str, ...]

    def __init__(self, overall: str, per_panel: Sequence[str]):
        object.__setattr__(self, "overall", overall)
        object.__setattr__(self, "per_panel", tuple(per_panel))


def _check_text(text: str, what: str) -> None:
    if SET_DELIM in text:
        raise PromptFormatError(f"{what} contains reserved delimiter {SET_DELIM!r}")
    if SCENE_PREFIX in text:
        raise PromptFormatError(f"{what} contains reserved delimiter prefix {SCENE_PREFIX!r}")
    if " ".join(text.split()) != text:
        raise PromptFormatError(
            f"{what} is not whitespace-canonical (single spaces, no edge whitespace)")


def compose_prompt(ps: PromptSet) -> str:
    if not ps.per_panel:
        raise PromptFormatError("a prompt set needs at least one panel text (n+m ≥ 1)")
    _check_text(ps.overall, "overall text")
    parts = [SET_DELIM]
    if ps.overall:
        parts.append(ps.overall)
    for k, text in enumerate(ps.per_panel, start=1):
        _check_text(text, f"panel {k - 1} text")
        parts.append(f"[SCENE-{k}]")
        if text:
            parts.append(text)
    return " ".join(parts)


def parse_prompt(text: str) -> PromptSet:
    """Exact inverse of compose_prompt; rejects malformed input with a position."""
    if " ".join(text.split()) != text:
        raise PromptFormatError("prompt is not whitespace-canonical", position=0)
    if not text:
        raise PromptFormatError("empty prompt", position=0)
    tokens = text.split(" ")
    offsets = []
    pos = 0
    for tok in tokens:
        offsets.append(pos)
        pos += len(tok) + 1
    if tokens[0] != SET_DELIM:
        raise PromptFormatError(f"prompt must start with {SET_DELIM}", position=0)

    segments: List[List[str]] = [[]]
    scene_numbers: List[Tuple[int, int]] = []
    for tok, off in zip(tokens[1:], offsets[1:]):
        match = _SCENE_TOKEN.match(tok)
        if match is not None:
            numeral = match.group(1)
            if numeral != str(int(numeral)):
                raise PromptFormatError(f"non-canonical scene number {numeral!r}", position=off)
            scene_numbers.append((int(numeral), off))
            segments.append([])
        elif tok == SET_DELIM or tok.startswith(SCENE_PREFIX):
            raise PromptFormatError(f"malformed delimiter token {tok!r}", position=off)
        elif not tok:
            raise PromptFormatError("empty token", position=off)
        else:
            segments[-1].append(tok)
    if not scene_numbers:
        raise PromptFormatError("prompt declares no scenes ([SCENE-1] required)",
                                position=len(text))
    for i, (num, off) in enumerate(scene_numbers, start=1):
        if num != i:
            raise PromptFormatError(f"scene numbering gap: expected [SCENE-{i}], got [SCENE-{num}]",
                                    position=off)
    return PromptSet(" ".join(segments[0]), [" ".join(seg) for seg in segments[1:]])


# -- tokenizer and embeddings -------------------------------------------------


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


def token_ids(text: str, vocab_size: int, length: int) -> Tuple[np.ndarray, np.ndarray]:
    """Fixed-width id row and validity mask for one text.

    Empty text maps to the reserved EMPTY token at position 0. Padding
    positions carry id 0 with mask 0; they are zeroed in the embedding and
    masked out of attention.
    """
    if vocab_size <= RESERVED_IDS:
        raise ValueError(f"vocab_size must exceed {RESERVED_IDS}, got {vocab_size}")
    words = text.lower().split()
    if not words:
        ids_list = [EMPTY_ID]
    else:
        span = vocab_size - RESERVED_IDS
        ids_list = [RESERVED_IDS + fnv1a64(w.encode("utf-8")) % span for w in words[:length]]
    ids = np.zeros(length, dtype=np.int64)
    mask = np.zeros(length, dtype=np.float64)
    ids[:len(ids_list)] = ids_list
    mask[:len(ids_list)] = 1.0
    return ids, mask


def null_token_ids(length: int) -> Tuple[np.ndarray, np.ndarray]:
    """The dedicated NULL token row for the unconditional branch."""
    ids = np.zeros(length, dtype=np.int64)
    mask = np.zeros(length, dtype=np.float64)
    ids[0] = NULL_ID
    mask[0] = 1.0
    return ids, mask


def positional_signal(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal position features: first half sin, second half cos."""
    half = dim // 2
    positions = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    angles = positions * freqs[None, :]
    out = np.zeros((length, dim), dtype=np.float64)
    out[:, :half] = np.sin(angles)
    out[:, half:2 * half] = np.cos(angles)
    return out.astype(dtype)


@dataclass
class TextEmbedding:
    """L×D (or B×L×D) embedded text plus its validity mask over positions."""

    values: Tensor
    mask: np.ndarray


def embed_ids(table: Tensor, ids: np.ndarray, mask: np.ndarray) -> TextEmbedding:
    """Table lookup + positional signal, zeroed at padding. ids: (L,) or (B, L)."""
    length = ids.shape[-1]
    dim = table.shape[1]
    pe = positional_signal(length, dim, dtype=table.dtype)
    values = (embedding(table, ids) + pe) * mask[..., None].astype(table.dtype)
    return TextEmbedding(values, mask)


def encode_text(text: str, table: Tensor, length: int = 64) -> TextEmbedding:
    ids, mask = token_ids(text, int(table.shape[0]), length)
    return embed_ids(table, ids, mask)


def null_prompt(table: Tensor, length: int = 64) -> TextEmbedding:
    ids, mask = null_token_ids(length)
    return embed_ids(table, ids, mask)


def encode_batch(texts: Sequence[str], table: Tensor, length: int = 64,
                 null_flags: Optional[np.ndarray] = None) -> TextEmbedding:
    """Batched encoding; rows with a set null flag use the NULL token instead."""
    vocab = int(table.shape[0])
    ids = np.zeros((len(texts), length), dtype=np.int64)
    mask = np.zeros((len(texts), length), dtype=np.float64)
    for i, text in enumerate(texts):
        if null_flags is not None and null_flags[i]:
            ids[i], mask[i] = null_token_ids(length)
        else:
            ids[i], mask[i] = token_ids(text, vocab, length)
    return embed_ids(table, ids, mask)
