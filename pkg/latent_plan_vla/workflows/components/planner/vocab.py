"""
Planner token vocabulary.

Ids are dense and fixed by construction order:
    specials | response tags | punctuation | coordinate bins C0..C{B-1}
    | option letters | caption markers | task tokens | reasoning words

Text rendering: consecutive word-like tokens are joined by one space, a single
space separates </think> from <answer>, everything else is concatenated.
Coordinate bins render as their bin centre to 3 decimals.
"""
from __future__ import annotations

import hashlib
import math
import re
from typing import Dict, Iterable, List, Sequence

import numpy as np

from latent_plan_vla.api.sources.sim.tasks import TASK_LIBRARY
from latent_plan_vla.schemas.general.errors import DomainError
from latent_plan_vla.schemas.general.general import COORD_BINS, OBJECT_COLOURS, OPTION_LETTERS
from latent_plan_vla.utils.formatters.general import format_coord

PAD, BOS, EOS, SEP, WIN = '<pad>', '<bos>', '<eos>', '<sep>', '<win>'
THINK, THINK_END, ANSWER, ANSWER_END = '<think>', '</think>', '<answer>', '</answer>'
SPECIALS = (PAD, BOS, EOS, SEP, WIN)
TAGS = (THINK, THINK_END, ANSWER, ANSWER_END)
PUNCTUATION = ('[', '(', ',', ')', ']')
CAPTION_MARKERS = ('GRIP', 'OPEN', 'CLOSED', 'HELD', 'FREE', 'GOAL')

REASONING_WORDS = (
    'reach', 'the', 'block', 'then', 'grasp', 'it', 'lift', 'carry', 'to', 'tray', 'bin',
    'release', 'move', 'gripper', 'is', 'open', 'closed', 'holding', 'nothing', 'object',
    'left', 'right', 'above', 'below', 'goal', 'near', 'far', 'first', 'next', 'finally',
    'approach', 'drop', 'dropped', 'again', 'replan', 'retry', 'check', 'yes', 'no', 'place',
    'put', 'down', 'over', 'toward', 'plan', 'path', 'from', 'start', 'end', 'at', 'in', 'and',
    'a', 'on', 'so', 'now', 'already', 'empty', 'target', 'slowly', 'up', 'current', 'where',
) + OBJECT_COLOURS

_TEXT_TOKEN_RE = re.compile(r'</?think>|</?answer>|<[a-z]+>|[\[\](),]|\d+(?:\.\d{1,3})?|[A-Za-z_\-]+|\s+')
_WORD_RE = re.compile(r"[A-Za-z_\-]+")


def task_token(name: str) -> str:
    return f"TASK_{name}"


class TokenVocab:
    """
    - ids dense in [0, size)
    - detokenize(tokenize(s)) == s for any string rendered from tokens
    """

    def __init__(self, coord_bins: int = COORD_BINS, task_names: Iterable[str] = None):
        self.coord_bins = coord_bins
        task_names = sorted(TASK_LIBRARY, key=lambda n: TASK_LIBRARY[n].task_id) if task_names is None else list(task_names)
        tokens: List[str] = list(SPECIALS) + list(TAGS) + list(PUNCTUATION)
        self.coord_offset = len(tokens)
        tokens += [f"C{i}" for i in range(coord_bins)]
        tokens += list(OPTION_LETTERS)
        tokens += list(CAPTION_MARKERS)
        tokens += [task_token(n) for n in task_names]
        self.word_offset = len(tokens)
        tokens += list(REASONING_WORDS)
        if len(set(tokens)) != len(tokens):
            raise DomainError("duplicate vocabulary entries")
        self.tokens = tokens
        self.index: Dict[str, int] = {t: i for i, t in enumerate(tokens)}
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.sep_id = self.index[SEP]
        self.win_id = self.index[WIN]
        self._words = {t for t in tokens if _WORD_RE.fullmatch(t)}

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str):
        return token in self.index

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise DomainError(f"token {token!r} is not in the vocabulary") from None

    def ids(self, tokens: Iterable[str]) -> List[int]:
        return [self.id(t) for t in tokens]

    def token(self, i: int) -> str:
        if not 0 <= int(i) < self.size:
            raise DomainError(f"token id {i} outside [0, {self.size})")
        return self.tokens[int(i)]

    def digest(self) -> str:
        return hashlib.sha256('\n'.join(self.tokens).encode('utf-8')).hexdigest()

    # ---------- coordinates ----------
    def coord_id(self, v: float) -> int:
        b = min(self.coord_bins - 1, max(0, int(math.floor(v * self.coord_bins))))
        return self.coord_offset + b

    def is_coord(self, i: int) -> bool:
        return self.coord_offset <= i < self.coord_offset + self.coord_bins

    def coord_value(self, i: int) -> float:
        """bin centre (i + 0.5) / B"""
        return (i - self.coord_offset + 0.5) / self.coord_bins

    # ---------- text ----------
    def _render(self, i: int) -> str:
        if self.is_coord(i):
            return format_coord(self.coord_value(i))
        return self.tokens[i]

    def _is_word(self, i: int) -> bool:
        return self.tokens[i] in self._words

    def detokenize(self, ids: Sequence[int]) -> str:
        out: List[str] = []
        prev = None
        for i in ids:
            i = int(i)
            self.token(i)
            if prev is not None and (
                    (self._is_word(prev) and self._is_word(i))
                    or (self.tokens[prev] == THINK_END and self.tokens[i] == ANSWER)):
                out.append(' ')
            out.append(self._render(i))
            prev = i
        return ''.join(out)

    def tokenize(self, text: str) -> List[int]:
        """
        Split rendered text back into ids. Numbers are quantised to their
        coordinate bin; whitespace is dropped. Unknown pieces raise DomainError.
        """
        ids: List[int] = []
        pos = 0
        for m in _TEXT_TOKEN_RE.finditer(text):
            if m.start() != pos:
                raise DomainError(f"cannot tokenize {text[pos:m.start()]!r}")
            pos = m.end()
            piece = m.group(0)
            if piece.isspace():
                continue
            if piece[0].isdigit():
                v = float(piece)
                if not 0.0 <= v <= 1.0:
                    raise DomainError(f"coordinate {piece} outside [0, 1]")
                ids.append(self.coord_id(v))
            else:
                ids.append(self.id(piece))
        if pos != len(text):
            raise DomainError(f"cannot tokenize {text[pos:]!r}")
        return ids

    def as_array(self, ids: Sequence[int]) -> np.ndarray:
        return np.asarray(list(ids), dtype=np.int64)
