###############################################################################
#
# CADA desk-scale text-to-image person retrieval.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.
#
###############################################################################
"""
Tokenization, attribute-phrase extraction and attribute masking.

Captions are closed-vocabulary: whole words only, five reserved specials at
ids 0..4. Attribute phrases are runs of one or more adjectives followed by a
single noun, tagged through a plain two-column lexicon.
"""
from dataclasses import dataclass, field
from pathlib import Path
import re

import numpy as np
from logbook import Logger

from cada.errors import LoadError, ValidationError

log = Logger("cada.textproc")

PAD, CLS, ENC, MASK, UNK = "[PAD]", "[CLS]", "[ENC]", "[MASK]", "[UNK]"
SPECIALS = (PAD, CLS, ENC, MASK, UNK)
PAD_ID, CLS_ID, ENC_ID, MASK_ID, UNK_ID = range(len(SPECIALS))

ADJ, NOUN, OTHER = "ADJ", "NOUN", "OTHER"
TAGS = (ADJ, NOUN, OTHER)

_WORD = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


def split_words(text):
    """Lowercase ``text`` and return its words; punctuation is dropped."""
    return _WORD.findall(str(text).lower())


class Vocabulary:
    """Dense word <-> id map with the reserved specials first."""

    def __init__(self, words=()):
        self.id_to_token = list(SPECIALS)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        for word in words:
            self.add(word)

    def add(self, word):
        if word not in self.token_to_id:
            self.token_to_id[word] = len(self.id_to_token)
            self.id_to_token.append(word)
        return self.token_to_id[word]

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, word):
        return word in self.token_to_id

    def encode(self, word):
        return self.token_to_id.get(word, UNK_ID)

    def decode(self, token_id):
        return self.id_to_token[int(token_id)]

    @property
    def words(self):
        return self.id_to_token[len(SPECIALS):]

    def save(self, path):
        Path(path).write_text("".join(w + "\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path):
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise LoadError(f"cannot read vocabulary {path}: {e}")
        vocab = cls(w for w in lines if w)
        if len(vocab) - len(SPECIALS) != len([w for w in lines if w]):
            raise LoadError(f"vocabulary {path} has duplicate or reserved words")
        return vocab


class PosLexicon:
    """word -> ADJ | NOUN | OTHER. Unknown words are OTHER."""

    def __init__(self, tags=None):
        self.tags = dict(tags or {})
        bad = {w: t for w, t in self.tags.items() if t not in TAGS}
        if bad:
            raise ValidationError(f"unknown part-of-speech tags: {bad}")

    def tag(self, word):
        return self.tags.get(word, OTHER)

    def __contains__(self, word):
        return word in self.tags

    def __len__(self):
        return len(self.tags)

    def save(self, path):
        lines = [f"{w}\t{t}\n" for w, t in sorted(self.tags.items())]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path):
        tags = {}
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise LoadError(f"cannot read lexicon {path}: {e}")
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise LoadError(f"{path}:{n}: expected 'word<TAB>TAG', got {line!r}")
            tags[parts[0]] = parts[1].strip()
        return cls(tags)


@dataclass
class TokenSequence:
    """
    Fixed-length id row.

    ``length`` counts real tokens including the leading special; rows at or
    past ``length`` are [PAD] and flagged in ``pad_mask``. ``words`` holds the
    real words after the leading special, index ``i`` sitting at token ``i+1``.
    """

    ids: np.ndarray
    length: int
    pad_mask: np.ndarray
    words: tuple
    attribute_spans: list = field(default_factory=list)

    @property
    def max_len(self):
        return len(self.ids)

    def with_leading(self, token_id):
        """Same words, different leading special (CLS for the encoder, ENC for the decoder)."""
        ids = self.ids.copy()
        ids[0] = token_id
        return TokenSequence(ids, self.length, self.pad_mask.copy(), self.words, list(self.attribute_spans))


@dataclass
class MaskedText:
    ids: np.ndarray
    mask_positions: np.ndarray
    labels: np.ndarray

    @property
    def n_masked(self):
        return len(self.mask_positions)

    def restore(self):
        ids = self.ids.copy()
        ids[self.mask_positions] = self.labels
        return ids


def tokenize(text, vocab, max_len=72, leading=CLS, lexicon=None):
    """
    Turn a caption into a TokenSequence.

    Words past ``max_len - 1`` are dropped; the leading special is prepended
    and the row padded to ``max_len``. With a lexicon the attribute spans
    are filled in as well.
    """
    if leading not in (CLS, ENC):
        raise ValidationError(f"leading token must be {CLS} or {ENC}, got {leading}")
    if max_len < 2:
        raise ValidationError(f"max_len must leave room for one word, got {max_len}")
    words = split_words(text)
    if not words:
        raise ValidationError(f"cannot tokenize empty text {text!r}")
    words = tuple(words[: max_len - 1])

    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = vocab.encode(leading)
    ids[1 : len(words) + 1] = [vocab.encode(w) for w in words]
    length = len(words) + 1
    pad_mask = np.arange(max_len) >= length
    tokens = TokenSequence(ids, length, pad_mask, words)
    if lexicon is not None:
        tokens.attribute_spans = extract_attributes(tokens, lexicon)
    return tokens


def detokenize(tokens, vocab):
    """Words of a sequence (or raw id row) with specials and pads removed."""
    ids = tokens.ids if isinstance(tokens, TokenSequence) else np.asarray(tokens)
    return [vocab.decode(i) for i in ids if int(i) >= len(SPECIALS)]


def extract_attributes(tokens, lexicon):
    """
    Spans (start, end) of ADJ+ NOUN phrases, in token coordinates.

    Scans left to right; a run of adjectives closed by one noun is a span and
    scanning resumes after the noun. Adjective runs not closed by a noun are
    skipped.
    """
    tags = [lexicon.tag(w) for w in tokens.words]
    spans = []
    i = 0
    while i < len(tags):
        if tags[i] != ADJ:
            i += 1
            continue
        j = i
        while j < len(tags) and tags[j] == ADJ:
            j += 1
        if j < len(tags) and tags[j] == NOUN:
            spans.append((i + 1, j + 2))
            i = j + 1
        else:
            i = j
    return spans


def mask_attributes(tokens, spans, alpha, rng):
    """
    Mask whole attribute phrases, each selected independently with ``alpha``.

    One uniform draw per span is consumed whatever ``alpha`` is, so masks of
    different rates share the same random stream.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"masking rate must lie in [0, 1], got {alpha}")
    ids = tokens.ids.copy()
    positions = []
    draws = rng.random(len(spans))
    for (start, end), draw in zip(spans, draws):
        if draw < alpha:
            positions.extend(range(start, end))
    positions = np.asarray(sorted(positions), dtype=np.int64)
    labels = tokens.ids[positions].copy()
    ids[positions] = MASK_ID
    return MaskedText(ids, positions, labels)


def mask_random_tokens(tokens, rate, rng):
    """Token-level masking over every real word (MLM-style comparison)."""
    if not 0.0 <= rate <= 1.0:
        raise ValidationError(f"masking rate must lie in [0, 1], got {rate}")
    ids = tokens.ids.copy()
    candidates = np.arange(1, tokens.length)
    draws = rng.random(len(candidates))
    positions = candidates[draws < rate].astype(np.int64)
    labels = tokens.ids[positions].copy()
    ids[positions] = MASK_ID
    return MaskedText(ids, positions, labels)
