"""Closed-vocabulary caption conditioning.

A learned embedding table plus a single affine projector turn a task tag
and template caption into the conditioning matrix consumed by the
denoiser's cross-attention. Task routing is positional: slot 0 always
holds a reserved task token.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from . import synthdata
from .errors import ValidationError, VocabularyError

L_MAX = 24
D_TEXT = 128
EMBED_WIDTH = 64

PAD, GEN_TOKEN, EDIT_TOKEN, NULL_TOKEN = "[pad]", "[generate]", "[edit]", "[null]"

_GRAMMAR = ("a", "and", "the", "to", "of", "with", "every")
_NOUNS = ("background", "colors", "shape")
_VERBS = ("add", "remove", "recolor", "replace", "move", "change", "invert", "outline")
_POSITION = ("left", "right", "above", "below", "top", "bottom")
_COUNTS = ("two", "three", "four")


def default_words() -> list[str]:
    words = [PAD, GEN_TOKEN, EDIT_TOKEN, NULL_TOKEN]
    words += list(_GRAMMAR) + list(_POSITION) + list(_COUNTS)
    words += list(synthdata.SHAPES) + [synthdata.PLURALS[s] for s in synthdata.SHAPES]
    words += list(synthdata.COLOR_NAMES) + list(synthdata.BACKGROUND_NAMES)
    words += list(_VERBS) + list(_NOUNS)
    return words


class Vocabulary:
    """Word <-> id table. Index in the word list is the id."""

    def __init__(self, words: list[str] | None = None):
        self.words = list(words) if words is not None else default_words()
        if len(set(self.words)) != len(self.words):
            raise ValidationError("vocabulary contains duplicate words")
        self._ids = {w: i for i, w in enumerate(self.words)}
        for special in (PAD, GEN_TOKEN, EDIT_TOKEN, NULL_TOKEN):
            if special not in self._ids:
                raise ValidationError(f"vocabulary missing special token {special}")

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    def task_id(self, task: str) -> int:
        if task == "generate":
            return self._ids[GEN_TOKEN]
        if task == "edit":
            return self._ids[EDIT_TOKEN]
        raise ValidationError(f"unknown task {task!r}")

    def word_id(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise VocabularyError(f"word {word!r} is not in the vocabulary") from None

    def tokenize(self, task: str, caption: list[str]) -> np.ndarray:
        """[task token, caption words..., pad...] as int64 ids of length L_MAX."""
        if len(caption) > L_MAX - 1:
            raise ValidationError(f"caption too long ({len(caption)} words)")
        ids = np.full(L_MAX, self.pad_id, dtype=np.int64)
        ids[0] = self.task_id(task)
        for i, w in enumerate(caption):
            ids[i + 1] = self.word_id(w)
        return ids

    def null_tokens(self, task: str | None = None) -> np.ndarray:
        """Null conditioning ids.

        Without a task: a single [null] token then pads (the fully
        unconditional sequence). With a task: the task token is kept and
        the caption is replaced by [null], which is what training-time
        caption dropping and the sampler's guidance branch use.
        """
        ids = np.full(L_MAX, self.pad_id, dtype=np.int64)
        if task is None:
            ids[0] = self._ids[NULL_TOKEN]
        else:
            ids[0] = self.task_id(task)
            ids[1] = self._ids[NULL_TOKEN]
        return ids


class TextEncoder(nn.Module):
    """Embedding lookup followed by a light affine projector.

    Padded positions are zeroed after projection, so sequences that differ
    only in padding produce identical non-pad rows and exactly-zero pad rows.
    """

    def __init__(self, vocab: Vocabulary, d_text: int = D_TEXT,
                 embed_width: int = EMBED_WIDTH):
        super().__init__()
        self.vocab = vocab
        self.d_text = d_text
        self.table = nn.Embedding(len(vocab), embed_width)
        self.projector = nn.Linear(embed_width, d_text)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.dtype != torch.int64:
            ids = ids.long()
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None]
        out = self.projector(self.table(ids))
        keep = (ids != self.vocab.pad_id).unsqueeze(-1).to(out.dtype)
        out = out * keep
        return out[0] if squeeze else out

    @torch.no_grad()
    def null_condition(self) -> torch.Tensor:
        """Embedding of the bare [null] sequence; deterministic given params."""
        ids = torch.from_numpy(self.vocab.null_tokens())
        return self.forward(ids)


def embed_tokens(encoder: TextEncoder, ids: np.ndarray) -> torch.Tensor:
    return encoder(torch.from_numpy(np.ascontiguousarray(ids)))
