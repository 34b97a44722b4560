"""Phenotype records, the text template, and a closed-vocabulary word tokenizer."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ATTRIBUTES = ("dx_group", "sex", "age", "srs")
SENSITIVE_CHOICES = ("sex", "age", "srs")

# one vocabulary token per key literal, so each attribute value sits at one fixed index
KEY_LITERALS = {
    "dx_group": "diagnostic group:",
    "sex": "sex:",
    "age": "age:",
    "srs": "social responsiveness scale version:",
}
DX_NAMES = ("asd", "adhd", "control")
SEX_VALUES = ("male", "female")
SRS_VALUES = ("child", "adult")
MAX_AGE = 120
PAD, CLS = "<pad>", "<cls>"
ADULT_AGE = 18


class TokenizationError(ValueError):
    pass


def round_age(age: float) -> int:
    """Nearest integer, halves away from zero."""
    return int(math.floor(abs(age) + 0.5)) * (1 if age >= 0 else -1)


def srs_for_age(age: float) -> str:
    return "child" if age < ADULT_AGE else "adult"


@dataclass(frozen=True)
class PhenotypeRecord:
    """One subject's phenotype. ``dx_positive`` is the diagnosis; ``dx_name`` its display name."""

    dx_positive: bool
    sex: str
    age: float
    srs: str | None = None
    dx_name: str = "asd"
    sensitive_attribute: str = "sex"

    def __post_init__(self):
        if self.sex not in SEX_VALUES:
            raise ValueError(f"sex must be one of {SEX_VALUES}, got {self.sex!r}")
        if not (0 <= self.age <= MAX_AGE) or not math.isfinite(self.age):
            raise ValueError(f"age out of range: {self.age}")
        if self.dx_name not in DX_NAMES[:2]:
            raise ValueError(f"dx_name must be one of {DX_NAMES[:2]}")
        if self.sensitive_attribute not in SENSITIVE_CHOICES:
            raise ValueError(f"sensitive attribute must be one of {SENSITIVE_CHOICES}")
        expected = srs_for_age(self.age)
        if self.srs is None:
            object.__setattr__(self, "srs", expected)
        elif self.srs != expected:
            raise ValueError(f"srs {self.srs!r} inconsistent with age {self.age}")

    @property
    def dx_group(self) -> str:
        return self.dx_name if self.dx_positive else "control"

    def value(self, attr: str) -> str:
        """Rendered (categorical) value of ``attr``; age compares on its rounded value."""
        if attr == "dx_group":
            return self.dx_group
        if attr == "sex":
            return self.sex
        if attr == "age":
            return str(round_age(self.age))
        if attr == "srs":
            return self.srs
        raise KeyError(f"unknown attribute {attr!r}")

    def with_dx(self, positive: bool) -> "PhenotypeRecord":
        return PhenotypeRecord(positive, self.sex, self.age, self.srs, self.dx_name,
                               self.sensitive_attribute)


def render_template(rec: PhenotypeRecord) -> str:
    return (f"diagnostic group: {rec.dx_group}, sex: {rec.sex}, age: {round_age(rec.age)}, "
            f"social responsiveness scale version: {rec.srs}")


def build_vocab() -> list[str]:
    return ([PAD, CLS] + list(KEY_LITERALS.values()) + list(DX_NAMES) + list(SEX_VALUES)
            + list(SRS_VALUES) + [str(a) for a in range(MAX_AGE + 1)])


VOCAB = build_vocab()
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
# <cls> then (key, value) per attribute
SEQ_LEN = 1 + 2 * len(ATTRIBUTES)
ATTR_POS = {a: 2 + 2 * k for k, a in enumerate(ATTRIBUTES)}


@dataclass(frozen=True)
class TokenSequence:
    token_ids: tuple[int, ...]
    attr_pos: dict = field(default_factory=lambda: dict(ATTR_POS))

    def __len__(self):
        return len(self.token_ids)

    @property
    def pad_mask(self) -> np.ndarray:
        return np.array([t != TOKEN_ID[PAD] for t in self.token_ids])


def _lookup(word: str) -> int:
    try:
        return TOKEN_ID[word]
    except KeyError:
        raise TokenizationError(f"out-of-vocabulary word {word!r}") from None


def tokenize(text: str, length: int = SEQ_LEN) -> TokenSequence:
    fields = text.split(", ")
    if len(fields) != len(ATTRIBUTES):
        raise TokenizationError(f"expected {len(ATTRIBUTES)} fields, got {len(fields)}: {text!r}")
    ids = [TOKEN_ID[CLS]]
    for attr, fld in zip(ATTRIBUTES, fields):
        key = KEY_LITERALS[attr]
        if not fld.startswith(key + " "):
            raise TokenizationError(f"expected {key!r} in field {fld!r}")
        ids += [_lookup(key), _lookup(fld[len(key) + 1:])]
    if len(ids) > length:
        raise TokenizationError(f"sequence of {len(ids)} tokens exceeds length {length}")
    ids += [TOKEN_ID[PAD]] * (length - len(ids))
    return TokenSequence(tuple(ids))


def detokenize(seq: TokenSequence) -> str:
    words = [VOCAB[t] for t in seq.token_ids if VOCAB[t] not in (PAD, CLS)]
    return ", ".join(f"{k} {v}" for k, v in zip(words[::2], words[1::2]))


def attribute_index(seq: TokenSequence, attr: str) -> int:
    try:
        return seq.attr_pos[attr]
    except KeyError:
        raise KeyError(f"unknown attribute {attr!r}") from None


def encode_records(records) -> np.ndarray:
    """Token-id matrix (B, S) for a batch of records."""
    return np.array([tokenize(render_template(r)).token_ids for r in records], dtype=np.int64)


def write_vocab(path) -> None:
    Path(path).write_text("\n".join(VOCAB) + "\n")


def read_vocab(path) -> list[str]:
    return Path(path).read_text().splitlines()
