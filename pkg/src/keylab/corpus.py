"""Synthetic tagged chain-of-thought corpora, tokenization, and dataset IO.

Responses decompose into a thinking segment and an answer segment wrapped in
atomic tag tokens: <Thinking>y_think</Thinking><Answer>y_answer</Answer>.
Ordinary text is tokenized character-level over a fixed alphabet; the tags,
BOS, EOS, and PAD are single vocabulary entries that plain text can never
produce.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass
from importlib import resources as importlib_resources
from typing import NamedTuple

import numpy as np

from .errors import (
    CapacityError,
    DataError,
    DatasetFormatError,
    TagLiteralError,
    UnknownSymbolError,
)

PAD = "<PAD>"
BOS = "<BOS>"
EOS = "<EOS>"
THINK_OPEN = "<Thinking>"
THINK_CLOSE = "</Thinking>"
ANSWER_OPEN = "<Answer>"
ANSWER_CLOSE = "</Answer>"

TAG_LITERALS = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)
SPECIAL_TOKENS = (PAD, BOS, EOS, THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)

# Character alphabet for ordinary text: digits, letters, punctuation, space.
# Newline is included so prompts can separate the instruction, question, and
# response turns, and so untagged outputs keep the answer on its own line.
ALPHABET = string.digits + string.ascii_letters + string.punctuation + " \n"

TASK_KINDS = ("arithmetic-addition", "arithmetic-subtraction", "multiple-choice-lookup")

# Above this many candidate examples we stop materializing the whole space
# and switch to rejection sampling of indices.
_ENUMERATION_LIMIT = 2_000_000

_MC_LETTERS = "ABCD"


def system_instruction() -> str:
    """The verbatim system instruction embedded in every generated prompt."""
    return _load_resource("system_prompt.txt")


def _load_resource(name: str) -> str:
    ref = importlib_resources.files("keylab.resources").joinpath(name)
    return ref.read_text(encoding="utf-8")


@dataclass(frozen=True)
class RawExample:
    """One prompt/thinking/answer triple in plain text."""

    prompt: str
    thinking: str
    answer: str

    def validate(self) -> None:
        if not self.answer:
            raise DataError("answer must be non-empty")
        for field_name, text in (("thinking", self.thinking), ("answer", self.answer)):
            for tag in TAG_LITERALS:
                if tag in text:
                    raise TagLiteralError(f"{field_name} contains tag literal {tag!r}")


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token/id maps with atomic special tokens."""

    token_to_id: dict
    id_to_token: dict
    pad_id: int
    bos_id: int
    eos_id: int
    think_open_id: int
    think_close_id: int
    answer_open_id: int
    answer_close_id: int

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    @property
    def special_ids(self) -> tuple:
        return (
            self.pad_id,
            self.bos_id,
            self.eos_id,
            self.think_open_id,
            self.think_close_id,
            self.answer_open_id,
            self.answer_close_id,
        )

    @property
    def tag_ids(self) -> tuple:
        return (
            self.think_open_id,
            self.think_close_id,
            self.answer_open_id,
            self.answer_close_id,
        )


def build_vocabulary() -> Vocabulary:
    """The canonical vocabulary: 7 special tokens followed by the alphabet."""
    tokens = list(SPECIAL_TOKENS) + list(ALPHABET)
    token_to_id = {tok: i for i, tok in enumerate(tokens)}
    id_to_token = {i: tok for i, tok in enumerate(tokens)}
    return Vocabulary(
        token_to_id=token_to_id,
        id_to_token=id_to_token,
        pad_id=token_to_id[PAD],
        bos_id=token_to_id[BOS],
        eos_id=token_to_id[EOS],
        think_open_id=token_to_id[THINK_OPEN],
        think_close_id=token_to_id[THINK_CLOSE],
        answer_open_id=token_to_id[ANSWER_OPEN],
        answer_close_id=token_to_id[ANSWER_CLOSE],
    )


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Character-level ids. Tag literals in text stay plain characters."""
    ids = []
    for ch in text:
        tok_id = vocab.token_to_id.get(ch)
        if tok_id is None:
            raise UnknownSymbolError(f"character {ch!r} is outside the supported alphabet")
        ids.append(tok_id)
    return ids


def detokenize(ids, vocab: Vocabulary) -> str:
    """Inverse of tokenize; special ids render as their literal token strings."""
    out = []
    for i in ids:
        tok = vocab.id_to_token.get(int(i))
        if tok is None:
            raise UnknownSymbolError(f"id {int(i)} is outside the vocabulary")
        out.append(tok)
    return "".join(out)


@dataclass(frozen=True)
class TaggedExample:
    """Tokenized example with the answer-span boundary.

    target_ids spells <Thinking> thinking </Thinking> <Answer> answer </Answer> EOS;
    boundary_T indexes the </Thinking> token. untagged_target_ids spells
    thinking answer EOS for the untagged baseline.
    """

    prompt_ids: list[int]
    target_ids: list[int]
    boundary_T: int
    untagged_target_ids: list[int]


def reconstruct(example: RawExample, vocab: Vocabulary) -> TaggedExample:
    """Build the tagged and untagged token targets for one example."""
    example.validate()
    prompt_ids = [vocab.bos_id] + tokenize(example.prompt, vocab)
    think_ids = tokenize(example.thinking, vocab)
    answer_ids = tokenize(example.answer, vocab)
    target_ids = (
        [vocab.think_open_id]
        + think_ids
        + [vocab.think_close_id, vocab.answer_open_id]
        + answer_ids
        + [vocab.answer_close_id, vocab.eos_id]
    )
    boundary = 1 + len(think_ids)
    untagged = think_ids + answer_ids + [vocab.eos_id]
    return TaggedExample(
        prompt_ids=prompt_ids,
        target_ids=target_ids,
        boundary_T=boundary,
        untagged_target_ids=untagged,
    )


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Parameters of a synthetic task corpus."""

    kind: str
    digits: int
    train_count: int
    eval_count: int
    seed: int

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise DataError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.digits < 1:
            raise DataError("digit range must be >= 1")
        if self.train_count < 1 or self.eval_count < 1:
            raise DataError("train and eval counts must be >= 1")


class CorpusSplit(NamedTuple):
    train: list
    eval: list


def _operand_range(digits: int) -> tuple[int, int]:
    # 1-digit operands include 0; d-digit operands have exactly d digits.
    lo = 0 if digits == 1 else 10 ** (digits - 1)
    hi = 10**digits - 1
    return lo, hi


def task_capacity(spec: SyntheticTaskSpec) -> int:
    """Number of distinct prompts the task space supports."""
    lo, hi = _operand_range(spec.digits)
    n = hi - lo + 1
    if spec.kind == "arithmetic-addition":
        return n * n
    if spec.kind == "arithmetic-subtraction":
        return n * (n + 1) // 2
    # multiple-choice-lookup: ordered 4-tuple of distinct values times the
    # correct slot; distinct (tuple, slot) pairs give distinct prompts.
    if n < 4:
        return 0
    return n * (n - 1) * (n - 2) * (n - 3) * 4


def _column_digits(value: int, width: int) -> list[int]:
    return [(value // 10**i) % 10 for i in range(width)]


def _addition_example(a: int, b: int) -> RawExample:
    width = max(len(str(a)), len(str(b)))
    da = _column_digits(a, width)
    db = _column_digits(b, width)
    parts = []
    carry = 0
    for i in range(width):
        total = da[i] + db[i] + carry
        terms = f"{da[i]}+{db[i]}" + ("+1" if carry else "")
        carry = total // 10
        parts.append(f"{terms}={total} c{carry}")
    thinking = "; ".join(parts) + "\n"
    return RawExample(prompt=f"{a}+{b}=?", thinking=thinking, answer=str(a + b))


def _subtraction_example(a: int, b: int) -> RawExample:
    width = max(len(str(a)), len(str(b)))
    da = _column_digits(a, width)
    db = _column_digits(b, width)
    parts = []
    borrow = 0
    for i in range(width):
        raw = da[i] - db[i] - borrow
        terms = f"{da[i]}-{db[i]}" + ("-1" if borrow else "")
        borrow = 1 if raw < 0 else 0
        digit = raw + 10 * borrow
        parts.append(f"{terms}={digit} b{borrow}")
    thinking = "; ".join(parts) + "\n"
    return RawExample(prompt=f"{a}-{b}=?", thinking=thinking, answer=str(a - b))


def _nth_skipping(rank: int, used_sorted: list[int], lo: int) -> int:
    """lo+rank, counting only values not already used."""
    v = lo + rank
    for u in used_sorted:
        if u <= v:
            v += 1
        else:
            break
    return v


def _multiple_choice_example(index: int, n: int, lo: int) -> RawExample:
    slot = index % 4
    t = index // 4
    ranks = []
    for remaining in (n, n - 1, n - 2, n - 3):
        ranks.append(t % remaining)
        t //= remaining
    options: list[int] = []
    for r in ranks:
        options.append(_nth_skipping(r, sorted(options), lo))
    target = options[slot]
    letter = _MC_LETTERS[slot]
    listing = " ".join(f"{_MC_LETTERS[i]}={options[i]}" for i in range(4))
    question = f"Which option equals {target}? {listing}"
    return RawExample(prompt=question, thinking=f"{letter}={target}\n", answer=letter)


def _decode_index(spec: SyntheticTaskSpec, index: int) -> RawExample:
    lo, hi = _operand_range(spec.digits)
    n = hi - lo + 1
    if spec.kind == "arithmetic-addition":
        a, b = divmod(index, n)
        return _addition_example(lo + a, lo + b)
    if spec.kind == "arithmetic-subtraction":
        # index k -> pair (i, j) with j <= i over the lower triangle.
        i = (math.isqrt(8 * index + 1) - 1) // 2
        j = index - i * (i + 1) // 2
        return _subtraction_example(lo + i, lo + j)
    return _multiple_choice_example(index, n, lo)


def _frame_prompt(question: str) -> str:
    return f"{system_instruction()}\nUser: {question}\nAssistant:"


def generate_corpus(spec: SyntheticTaskSpec) -> CorpusSplit:
    """Deterministic disjoint train/eval examples for a synthetic task."""
    spec.validate()
    capacity = task_capacity(spec)
    requested = spec.train_count + spec.eval_count
    if requested > capacity:
        raise CapacityError(
            f"{spec.kind} with {spec.digits}-digit operands supports {capacity} "
            f"distinct examples; {requested} requested"
        )
    rng = np.random.default_rng(spec.seed)
    if capacity <= _ENUMERATION_LIMIT:
        indices = rng.permutation(capacity)[:requested]
    else:
        chosen: list[int] = []
        seen = set()
        while len(chosen) < requested:
            for idx in rng.integers(0, capacity, size=2 * (requested - len(chosen))):
                if idx not in seen:
                    seen.add(int(idx))
                    chosen.append(int(idx))
                    if len(chosen) == requested:
                        break
        indices = np.array(chosen)
    examples = []
    for idx in indices:
        bare = _decode_index(spec, int(idx))
        examples.append(
            RawExample(
                prompt=_frame_prompt(bare.prompt),
                thinking=bare.thinking,
                answer=bare.answer,
            )
        )
    return CorpusSplit(train=examples[: spec.train_count], eval=examples[spec.train_count :])


def load_dataset(path) -> list[RawExample]:
    """Read a JSONL dataset of prompt/thinking/answer records."""
    examples = []
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read dataset {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(record, dict):
            raise DatasetFormatError(f"line {lineno}: expected a JSON object")
        for field_name in ("prompt", "thinking", "answer"):
            if field_name not in record:
                raise DatasetFormatError(f"line {lineno}: missing field {field_name!r}")
            if not isinstance(record[field_name], str):
                raise DatasetFormatError(f"line {lineno}: field {field_name!r} must be a string")
        if not record["answer"]:
            raise DatasetFormatError(f"line {lineno}: empty answer")
        example = RawExample(
            prompt=record["prompt"],
            thinking=record["thinking"],
            answer=record["answer"],
        )
        try:
            example.validate()
        except DataError as exc:
            raise DatasetFormatError(f"line {lineno}: {exc}") from exc
        examples.append(example)
    return examples


def save_dataset(path, examples) -> None:
    """Write examples as JSONL, one prompt/thinking/answer object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {"prompt": ex.prompt, "thinking": ex.thinking, "answer": ex.answer},
                    ensure_ascii=False,
                )
                + "\n"
            )
