"""Tokenization, vocabulary, SQuAD ingestion, example encoding, partitioning.

The tokenizer is a deterministic rule tokenizer (lowercase, whitespace
split, punctuation as standalone tokens) with character offsets into the
original text, which is what lets predicted token spans map back to exact
context substrings.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EncodeError, ParseError, PartitionError
from .model import PAD_ID, Batch

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = 0, 1, 2, 3
_RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")

assert PAD == PAD_ID


def tokenize(text: str) -> list[tuple[str, int, int]]:
    """Split into lowercase tokens with (char_begin, char_end) offsets.

    Alphanumeric runs stay together; any other non-space character becomes
    its own token. Offsets always reference the original string.
    """
    out = []
    run_start = None
    for i, ch in enumerate(text):
        if ch.isspace():
            if run_start is not None:
                out.append((text[run_start:i].lower(), run_start, i))
                run_start = None
        elif ch.isalnum():
            if run_start is None:
                run_start = i
        else:
            if run_start is not None:
                out.append((text[run_start:i].lower(), run_start, i))
                run_start = None
            out.append((ch.lower(), i, i + 1))
    if run_start is not None:
        out.append((text[run_start:].lower(), run_start, len(text)))
    return out


@dataclass(frozen=True)
class Vocab:
    token_to_id: dict[str, int]

    def __post_init__(self):
        for i, tok in enumerate(_RESERVED):
            if self.token_to_id.get(tok) != i:
                raise ParseError(f"reserved token {tok} must have id {i}")
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ParseError("vocabulary ids must be dense from 0")

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def tokens_in_order(self) -> list[str]:
        by_id = sorted(self.token_to_id.items(), key=lambda kv: kv[1])
        return [tok for tok, _ in by_id]

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps({"tokens": self.tokens_in_order()}, ensure_ascii=False),
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path) -> "Vocab":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            tokens = data["tokens"]
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"cannot read vocabulary from {path}: {exc}") from exc
        return cls({tok: i for i, tok in enumerate(tokens)})


def build_vocab(corpus, max_size: int) -> Vocab:
    """Reserved tokens plus the most frequent corpus tokens, ties broken
    lexicographically."""
    if max_size < 5:
        max_size = 4  # degenerate: reserved tokens only
    counts: dict[str, int] = {}
    for text in corpus:
        for token, _, _ in tokenize(text):
            counts[token] = counts.get(token, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    mapping = {tok: i for i, tok in enumerate(_RESERVED)}
    for token, _ in ranked[: max_size - 4]:
        mapping[token] = len(mapping)
    return Vocab(mapping)


@dataclass(frozen=True)
class RawExample:
    id: str
    title: str
    context: str
    question: str
    answers: tuple[tuple[str, int], ...]  # (text, answer_start)

    def valid_answers(self) -> tuple[tuple[str, int], ...]:
        return tuple(
            (text, start) for text, start in self.answers
            if 0 <= start and self.context[start:start + len(text)] == text
        )


@dataclass(frozen=True)
class SquadData:
    examples: list[RawExample]
    dropped_examples: int = 0
    dropped_answers: int = 0


def load_squad(path) -> SquadData:
    """Read SQuAD v1.1 JSON. Answers whose offsets do not reproduce their
    text are dropped; an example with no surviving answer is dropped with
    a counted warning."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc

    examples: list[RawExample] = []
    dropped_examples = 0
    dropped_answers = 0
    try:
        articles = raw["data"]
        for a_idx, article in enumerate(articles):
            title = article.get("title", "")
            for p_idx, para in enumerate(article["paragraphs"]):
                context = para["context"]
                for qa in para["qas"]:
                    answers = tuple(
                        (ans["text"], int(ans["answer_start"])) for ans in qa["answers"]
                    )
                    ex = RawExample(str(qa["id"]), title, context, qa["question"], answers)
                    kept = ex.valid_answers()
                    dropped_answers += len(answers) - len(kept)
                    if not kept:
                        dropped_examples += 1
                        log.warning(
                            "dropping %s (article %d, paragraph %d): no answer matches its offset",
                            ex.id, a_idx, p_idx,
                        )
                        continue
                    examples.append(RawExample(ex.id, title, context, ex.question, kept))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: not SQuAD v1.1 shaped: {exc!r}") from exc
    return SquadData(examples, dropped_examples, dropped_answers)


@dataclass(frozen=True)
class EncodedExample:
    example_id: str
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    pad_mask: tuple[int, ...]
    start_pos: int
    end_pos: int
    context_token_offsets: tuple[tuple[int, int], ...]

    @property
    def context_begin(self) -> int:
        """Index of the first context token: [CLS] question [SEP] come first."""
        return int(np.argmax(np.asarray(self.segment_ids) == 1))

    @property
    def context_end(self) -> int:
        """One past the last context token (the final [SEP] is excluded)."""
        return self.context_begin + len(self.context_token_offsets)

    def to_json_line(self) -> str:
        return json.dumps({
            "example_id": self.example_id,
            "token_ids": list(self.token_ids),
            "segment_ids": list(self.segment_ids),
            "pad_mask": list(self.pad_mask),
            "start_pos": self.start_pos,
            "end_pos": self.end_pos,
            "context_token_offsets": [list(o) for o in self.context_token_offsets],
        }, ensure_ascii=False)

    @classmethod
    def from_json_dict(cls, d: dict) -> "EncodedExample":
        return cls(
            example_id=str(d["example_id"]),
            token_ids=tuple(int(v) for v in d["token_ids"]),
            segment_ids=tuple(int(v) for v in d["segment_ids"]),
            pad_mask=tuple(int(v) for v in d["pad_mask"]),
            start_pos=int(d["start_pos"]),
            end_pos=int(d["end_pos"]),
            context_token_offsets=tuple(
                (int(b), int(e)) for b, e in d["context_token_offsets"]
            ),
        )


def encode_example(vocab: Vocab, raw: RawExample, max_seq_len: int) -> EncodedExample | None:
    """Pack [CLS] question [SEP] context [SEP] to fixed length and align the
    first gold answer to token positions. Returns None when the answer does
    not survive context truncation."""
    q_tokens = tokenize(raw.question)
    budget = max_seq_len - 3 - len(q_tokens)
    if budget < 0:
        raise EncodeError(
            f"question of {len(q_tokens)} tokens exceeds the {max_seq_len - 3}-token budget"
        )
    c_tokens = tokenize(raw.context)
    kept = c_tokens[:budget]

    answer_text, answer_start = raw.answers[0]
    a_begin, a_end = answer_start, answer_start + len(answer_text)
    overlap = [i for i, (_, b, e) in enumerate(c_tokens) if b < a_end and e > a_begin]
    if not overlap or overlap[-1] >= len(kept):
        return None  # answer empty or (partly) beyond the truncated context

    ids = [CLS] + [vocab.id_of(t) for t, _, _ in q_tokens] + [SEP] \
        + [vocab.id_of(t) for t, _, _ in kept] + [SEP]
    n = len(ids)
    segments = [0] * (2 + len(q_tokens)) + [1] * (len(kept) + 1)
    mask = [1] * n
    ids += [PAD] * (max_seq_len - n)
    segments += [0] * (max_seq_len - n)
    mask += [0] * (max_seq_len - n)

    context_base = 2 + len(q_tokens)
    return EncodedExample(
        example_id=raw.id,
        token_ids=tuple(ids),
        segment_ids=tuple(segments),
        pad_mask=tuple(mask),
        start_pos=context_base + overlap[0],
        end_pos=context_base + overlap[-1],
        context_token_offsets=tuple((b, e) for _, b, e in kept),
    )


@dataclass(frozen=True)
class ClientShard:
    client_id: str
    examples: tuple[EncodedExample, ...]

    def __len__(self) -> int:
        return len(self.examples)


def partition(examples, k: int, val_frac: float, seed: int):
    """Seeded shuffle, then ceil(val_frac * N) validation examples and a
    round-robin split of the rest into k shards (sizes differ by <= 1)."""
    if not 0 <= val_frac < 1:
        raise PartitionError(f"val_frac must be in [0, 1), got {val_frac}")
    if k < 1:
        raise PartitionError(f"need at least one client, got k={k}")
    pool = list(examples)
    random.Random(seed).shuffle(pool)
    # ceil, nudged so float noise in val_frac * N cannot round an exact integer up
    n_val = max(0, math.ceil(val_frac * len(pool) - 1e-9))
    validation = pool[:n_val]
    train = pool[n_val:]
    if k > len(train):
        raise PartitionError(f"cannot spread {len(train)} training examples over {k} clients")
    shards = [
        ClientShard(f"client_{i + 1}", tuple(train[i::k]))
        for i in range(k)
    ]
    return shards, validation


def write_shard(path, shard: ClientShard) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in shard.examples:
            f.write(ex.to_json_line() + "\n")


def read_shard(path, client_id: str | None = None) -> ClientShard:
    path = Path(path)
    examples = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                examples.append(EncodedExample.from_json_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{line_no}: bad shard line: {exc}") from exc
    return ClientShard(client_id or path.stem, tuple(examples))


def to_batch(examples) -> Batch:
    """Stack encoded examples into model input arrays."""
    examples = list(examples)
    return Batch(
        token_ids=np.array([ex.token_ids for ex in examples], dtype=np.int64),
        segment_ids=np.array([ex.segment_ids for ex in examples], dtype=np.int64),
        pad_mask=np.array([ex.pad_mask for ex in examples], dtype=np.int64),
        start_pos=np.array([ex.start_pos for ex in examples], dtype=np.int64),
        end_pos=np.array([ex.end_pos for ex in examples], dtype=np.int64),
    )
