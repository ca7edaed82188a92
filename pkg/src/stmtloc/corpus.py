"""Function corpus handling.

A corpus is a list of functions. Each function is a list of statements
(one source line per statement, comments already stripped), a binary
label, and for vulnerable functions the 0-based indices of the flawed
statements. Corpora are stored as JSONL, one function per line:

    {"id": "...", "statements": [...], "label": 0|1, "vuln_lines": [...]}

This module also ships a synthetic corpus generator that plants known
multi-statement flaw patterns into background code, so selection quality
can be measured against exact ground truth.
"""

from __future__ import annotations

import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD_TOKEN = "<PAD>"
UNK_TOKEN = "<UNK>"
PAD_INDEX = 0
UNK_INDEX = 1

STRING_LITERAL = "STR"
CHAR_LITERAL = "CHR"


class DataError(RuntimeError):
    """Raised for malformed corpora, vocabularies, or checkpoints."""


# Alternatives are tried left to right, so multi-char operators must be
# listed before their prefixes (">>=" before ">>" before ">").
_TOKEN_RE = re.compile(
    r"""
    (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<char>'(?:[^'\\\n]|\\.)*')
  | (?P<number>(?:0[xX][0-9a-fA-F]+|(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)[uUlLfF]*)
  | (?P<identifier>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<operator><<=|>>=|\.\.\.|->|\+\+|--|<<|>>|<=|>=|==|!=|&&|\|\||\+=|-=|\*=|/=|%=|&=|\|=|\^=|\S)
    """,
    re.VERBOSE,
)


def tokenize_statement(statement: str) -> list[str]:
    """Split one C statement into tokens.

    String and character literals are collapsed to the placeholder
    tokens STR and CHR; their contents never reach the vocabulary.
    Non-ASCII bytes are dropped before matching.
    """
    text = statement.encode("ascii", "ignore").decode("ascii")
    tokens: list[str] = []
    for match in _TOKEN_RE.finditer(text):
        if match.lastgroup == "string":
            tokens.append(STRING_LITERAL)
        elif match.lastgroup == "char":
            tokens.append(CHAR_LITERAL)
        else:
            tokens.append(match.group())
    return tokens


def detokenize_statement(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


@dataclass
class FunctionRecord:
    """One function: raw statements plus label and flaw annotations."""

    function_id: str
    statements: list[str]
    label: int
    vuln_indices: set[int] = field(default_factory=set)
    origin: str = ""

    def __post_init__(self) -> None:
        if not self.statements:
            raise ValueError(f"{self.function_id}: function has no statements")
        if self.label not in (0, 1):
            raise ValueError(f"{self.function_id}: label must be 0 or 1")
        self.vuln_indices = set(self.vuln_indices)
        for idx in self.vuln_indices:
            if not isinstance(idx, int) or idx < 0 or idx >= len(self.statements):
                raise ValueError(
                    f"{self.function_id}: vuln index {idx} outside "
                    f"[0, {len(self.statements)})"
                )
        if self.vuln_indices and self.label != 1:
            raise ValueError(
                f"{self.function_id}: flaw annotations on a non-vulnerable function"
            )


class Vocabulary:
    """Token-to-index mapping with reserved <PAD>=0 and <UNK>=1."""

    def __init__(self, tokens: Iterable[str] = ()) -> None:
        self._token_to_index: dict[str, int] = {PAD_TOKEN: PAD_INDEX, UNK_TOKEN: UNK_INDEX}
        self._tokens: list[str] = [PAD_TOKEN, UNK_TOKEN]
        for token in tokens:
            self.add(token)

    def add(self, token: str) -> int:
        if token in self._token_to_index:
            raise DataError(f"duplicate vocabulary entry: {token!r}")
        if not token or any(ch.isspace() for ch in token):
            raise DataError(f"vocabulary entry is empty or contains whitespace: {token!r}")
        index = len(self._tokens)
        self._token_to_index[token] = index
        self._tokens.append(token)
        return index

    def index(self, token: str) -> int:
        return self._token_to_index.get(token, UNK_INDEX)

    def tokens(self) -> list[str]:
        """All tokens in index order, including the reserved two."""
        return list(self._tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_index

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return self._tokens == other._tokens

    def save(self, path: str) -> None:
        with open(path, "w", encoding="ascii") as fh:
            for token in self._tokens:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, "r", encoding="ascii") as fh:
            lines = [line.rstrip("\n") for line in fh]
        while lines and lines[-1] == "":
            lines.pop()
        if lines[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise DataError(f"{path}: vocabulary must start with {PAD_TOKEN}, {UNK_TOKEN}")
        return cls(lines[2:])


def build_vocabulary(corpus: Sequence[FunctionRecord], min_count: int = 1) -> Vocabulary:
    """Count tokens across all statements and keep those seen >= min_count times.

    Tokens are ordered by descending frequency, then lexicographically,
    so the mapping is independent of corpus order.
    """
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for record in corpus:
        for statement in record.statements:
            counts.update(tokenize_statement(statement))
    kept = sorted(
        (token for token, freq in counts.items() if freq >= min_count),
        key=lambda token: (-counts[token], token),
    )
    return Vocabulary(kept)


@dataclass
class TokenizedFunction:
    """Fixed-shape integer view of one function.

    tokens has shape (max_statements, max_tokens); rows past the real
    statement count are all <PAD>, as are token positions past each
    statement's length. statement_mask marks real rows. Flaw indices
    beyond max_statements are dropped and remembered via truncated_truth
    so evaluation can count the function as not fully coverable.
    """

    function_id: str
    tokens: np.ndarray
    statement_mask: np.ndarray
    label: int
    vuln_indices: set[int]
    truncated_truth: bool
    n_statements: int

    def __post_init__(self) -> None:
        if self.tokens.ndim != 2:
            raise ValueError("tokens must be a 2-d array")
        if self.statement_mask.shape != (self.tokens.shape[0],):
            raise ValueError("statement_mask length must match the statement axis")


def encode_function(
    record: FunctionRecord,
    vocab: Vocabulary,
    max_statements: int,
    max_tokens: int,
) -> TokenizedFunction:
    """Map a function onto a (max_statements, max_tokens) index grid."""
    if max_statements < 1 or max_tokens < 1:
        raise ValueError("max_statements and max_tokens must be positive")
    tokens = np.zeros((max_statements, max_tokens), dtype=np.int64)
    n_real = min(len(record.statements), max_statements)
    for row in range(n_real):
        toks = tokenize_statement(record.statements[row])[:max_tokens]
        for col, tok in enumerate(toks):
            tokens[row, col] = vocab.index(tok)
    mask = np.zeros(max_statements, dtype=np.int64)
    mask[:n_real] = 1
    kept = {idx for idx in record.vuln_indices if idx < max_statements}
    return TokenizedFunction(
        function_id=record.function_id,
        tokens=tokens,
        statement_mask=mask,
        label=record.label,
        vuln_indices=kept,
        truncated_truth=len(kept) < len(record.vuln_indices),
        n_statements=n_real,
    )


def encode_corpus(
    corpus: Sequence[FunctionRecord],
    vocab: Vocabulary,
    max_statements: int,
    max_tokens: int,
) -> list[TokenizedFunction]:
    return [encode_function(r, vocab, max_statements, max_tokens) for r in corpus]


def _largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    raw = [total * r for r in ratios]
    counts = [int(x) for x in raw]
    short = total - sum(counts)
    by_remainder = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in by_remainder[:short]:
        counts[i] += 1
    return counts


def split_corpus(
    corpus: Sequence[FunctionRecord],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list[FunctionRecord], list[FunctionRecord], list[FunctionRecord]]:
    """Shuffle and split into train/valid/test, stratified by label.

    Each label stratum is split by largest-remainder rounding, so split
    sizes stay within one function of the requested ratios per stratum.
    """
    if len(corpus) < 3:
        raise DataError(f"need at least 3 functions to split, got {len(corpus)}")
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be positive and sum to 1, got {ratios}")
    rng = random.Random(seed)
    splits: tuple[list[FunctionRecord], ...] = ([], [], [])
    for label in (0, 1):
        stratum = [r for r in corpus if r.label == label]
        rng.shuffle(stratum)
        counts = _largest_remainder(len(stratum), ratios)
        start = 0
        for part, count in zip(splits, counts):
            part.extend(stratum[start : start + count])
            start += count
    for part in splits:
        rng.shuffle(part)
    return splits


def save_jsonl(corpus: Sequence[FunctionRecord], path: str) -> None:
    """Write one JSON object per line; vuln_lines only when present."""
    with open(path, "w", encoding="ascii") as fh:
        for record in corpus:
            obj: dict = {
                "id": record.function_id,
                "statements": record.statements,
                "label": record.label,
            }
            if record.vuln_indices:
                obj["vuln_lines"] = sorted(record.vuln_indices)
            fh.write(json.dumps(obj, sort_keys=False) + "\n")


def load_jsonl(path: str) -> list[FunctionRecord]:
    records: list[FunctionRecord] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            missing = {"id", "statements", "label"} - obj.keys()
            if missing:
                raise DataError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            statements = obj["statements"]
            if not isinstance(statements, list) or not all(
                isinstance(s, str) for s in statements
            ):
                raise DataError(f"{path}:{lineno}: statements must be a list of strings")
            try:
                record = FunctionRecord(
                    function_id=str(obj["id"]),
                    statements=statements,
                    label=obj["label"],
                    vuln_indices=set(obj.get("vuln_lines", [])),
                )
            except (ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if record.function_id in seen_ids:
                raise DataError(f"{path}:{lineno}: duplicate id {record.function_id!r}")
            seen_ids.add(record.function_id)
            records.append(record)
    if not records:
        raise DataError(f"{path}: corpus is empty")
    return records


# --------------------------------------------------------------------------
# Synthetic corpus generation.

_TYPES = ["int", "long", "char", "size_t", "unsigned"]
_BINOPS = ["+", "-", "*", "&", "|"]
_CMPS = ["<", ">", "<=", ">=", "==", "!="]
_NUMBERS = ["0", "1", "2", "4", "8", "16", "32", "64", "128", "256"]
_BENIGN_CALLS = ["log_msg", "init_state", "get_field", "next_item", "store_val", "sync_buf"]
_BASE_IDENTIFIERS = [
    "buf", "len", "idx", "ptr", "src", "dst", "tmp", "val",
    "cnt", "size", "data", "arr", "pos", "num", "out", "res",
]

# Anchor call names are unique per pattern step; each synthetic flaw
# pattern is recognizable only through these anchors plus their order.
_ANCHOR_STEMS = [
    "copy_overrun", "unchecked_index", "stale_free", "raw_deref",
    "signed_cast", "untrusted_len", "double_close", "wild_offset",
]


@dataclass
class SyntheticConfig:
    n_functions: int = 500
    length_range: tuple[int, int] = (6, 10)
    n_patterns: int = 3
    pattern_len: int = 3
    vuln_ratio: float = 0.5
    vocab_size: int = 40

    def validate(self) -> None:
        lo, hi = self.length_range
        if self.n_functions < 1:
            raise DataError("n_functions must be >= 1")
        if self.n_patterns < 1 or self.pattern_len < 1:
            raise DataError("n_patterns and pattern_len must be >= 1")
        if lo < 1 or hi < lo:
            raise DataError(f"bad length_range {self.length_range}")
        if not 0.0 <= self.vuln_ratio <= 1.0:
            raise DataError("vuln_ratio must lie in [0, 1]")
        if lo < self.pattern_len:
            raise DataError(
                f"shortest function length {lo} cannot hold a pattern of "
                f"{self.pattern_len} consecutive statements"
            )
        if self.vocab_size < 8:
            raise DataError("vocab_size must be >= 8")


class SyntheticGenerator:
    """Plants fixed flaw patterns into otherwise benign C-like functions.

    A pattern is an ordered group of statement templates built around
    an API family unique to the pattern step, always applied to the
    external `taint` input. Vulnerable functions receive one complete
    pattern as a consecutive statement block at a random offset, with
    fresh identifier renames shared across the block. Benign functions
    are background statements only, sampled independently per function,
    and never mention the taint input or any flaw API.
    """

    def __init__(self, config: SyntheticConfig, seed: int = 0) -> None:
        config.validate()
        self.config = config
        self.seed = seed
        self._identifiers = list(_BASE_IDENTIFIERS)
        k = 0
        while len(self._identifiers) < config.vocab_size:
            self._identifiers.append(f"var{k}")
            k += 1
        self._identifiers = self._identifiers[: max(config.vocab_size, 8)]
        rng = random.Random(seed)
        self.patterns = [
            [self._anchor_template(j, m, rng) for m in range(config.pattern_len)]
            for j in range(config.n_patterns)
        ]

    @staticmethod
    def _anchor_template(pattern_id: int, step: int, rng: random.Random) -> list[str]:
        # Flawed statements combine an API family unique to (pattern,
        # step) with the shared taint argument: call name, buffer, and
        # length macro carry the family, taint marks the flawed data
        # flow. Only the placeholder varies between functions, so
        # instances of one pattern stay recognizable despite renaming.
        stem = _ANCHOR_STEMS[(pattern_id + step) % len(_ANCHOR_STEMS)]
        call = f"{stem}_{pattern_id}_{step}"
        buf = f"{stem}_buf_{pattern_id}_{step}"
        size = f"{stem}_SIZE_{pattern_id}_{step}".upper()
        num = rng.choice(_NUMBERS)
        shapes = [
            ["$0", "=", call, "(", "taint", ",", buf, ",", size, "+", num, ")", ";"],
            [call, "(", "taint", ",", "$0", ",", size, ")", ";"],
            ["if", "(", call, "(", "taint", ",", buf, ")", "<", size, ")", "{"],
            [buf, "[", "$0", "]", "=", call, "(", "taint", ",", size, ")", ";"],
            ["while", "(", call, "(", "taint", ",", size, ")", "!=", num, ")", "{"],
        ]
        return list(rng.choice(shapes))

    def _background_statement(self, rng: random.Random) -> str:
        pick = lambda pool: rng.choice(pool)
        a, b, c = (pick(self._identifiers) for _ in range(3))
        forms = [
            f"{pick(_TYPES)} {a} = {pick(_NUMBERS)} ;",
            f"{a} = {b} {pick(_BINOPS)} {pick(_NUMBERS)} ;",
            f"{a} = {b} {pick(_BINOPS)} {c} ;",
            f"if ( {a} {pick(_CMPS)} {b} ) {{",
            f"for ( {a} = 0 ; {a} < {pick(_NUMBERS)} ; {a} ++ ) {{",
            f"{a} [ {pick(_NUMBERS)} ] = {b} ;",
            f"{a} = {pick(_BENIGN_CALLS)} ( {b} ) ;",
            f"return {a} ;",
            f"{a} ++ ;",
            "}",
        ]
        return rng.choice(forms)

    @staticmethod
    def _render(template: Sequence[str], names: dict[str, str]) -> str:
        return " ".join(names.get(tok, tok) for tok in template)

    def generate(self) -> list[FunctionRecord]:
        cfg = self.config
        master = random.Random(self.seed)
        n_vuln = round(cfg.n_functions * cfg.vuln_ratio)
        labels = [1] * n_vuln + [0] * (cfg.n_functions - n_vuln)
        master.shuffle(labels)
        records = []
        for i, label in enumerate(labels):
            rng = random.Random(self.seed * 1_000_003 + i)
            records.append(self._one_function(i, label, rng))
        return records

    def _one_function(self, index: int, label: int, rng: random.Random) -> FunctionRecord:
        cfg = self.config
        lo, hi = cfg.length_range
        length = rng.randint(lo, hi)
        statements = [self._background_statement(rng) for _ in range(length)]
        vuln: set[int] = set()
        origin = "background"
        if label == 1:
            pattern_id = rng.randrange(cfg.n_patterns)
            pattern = self.patterns[pattern_id]
            start = rng.randint(0, length - cfg.pattern_len)
            rows = range(start, start + cfg.pattern_len)
            placeholders = sorted(
                {tok for template in pattern for tok in template if tok.startswith("$")}
            )
            # Renames draw from the shared identifier pool: fresh within a
            # function, reused across the corpus, so variable names never
            # identify a particular function or its label.
            fresh = rng.sample(self._identifiers, len(placeholders))
            names = dict(zip(placeholders, fresh))
            for template, row in zip(pattern, rows):
                statements[row] = self._render(template, names)
            vuln = set(rows)
            origin = f"pattern:{pattern_id}"
        return FunctionRecord(
            function_id=f"synth_{index:05d}",
            statements=statements,
            label=label,
            vuln_indices=vuln,
            origin=origin,
        )


def generate_synthetic(config: SyntheticConfig, seed: int = 0) -> list[FunctionRecord]:
    return SyntheticGenerator(config, seed).generate()
