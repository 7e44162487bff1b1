"""Answer normalization and the EM / precision / recall / F1 suite.

Scores are computed per question against every gold answer and the best
gold wins (max over golds, by exact match for EM and by F1 for the rest).
Dataset-level numbers are plain means over questions.
"""

from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

from .errors import MetricError, ParseError, SpanDecodeError
from .textproc import EncodedExample

_ARTICLES = frozenset(("a", "an", "the"))
_PUNCT = frozenset(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    return " ".join(t for t in text.split() if t not in _ARTICLES)


@dataclass(frozen=True)
class TokenOverlap:
    """Bag-of-tokens confusion counts between a prediction and one gold."""

    tp: int
    fp: int
    fn: int


def token_overlap(pred_tokens: Sequence[str], gold_tokens: Sequence[str]) -> TokenOverlap:
    pred_bag = Counter(pred_tokens)
    gold_bag = Counter(gold_tokens)
    tp = sum((pred_bag & gold_bag).values())
    return TokenOverlap(tp=tp, fp=len(pred_tokens) - tp, fn=len(gold_tokens) - tp)


def _require_golds(golds: Sequence[str]) -> None:
    if not golds:
        raise MetricError("at least one gold answer is required")


def exact_match(prediction: str, golds: Sequence[str]) -> int:
    """1 if the normalized prediction equals any normalized gold, else 0."""
    _require_golds(golds)
    norm = normalize_answer(prediction)
    return int(any(norm == normalize_answer(g) for g in golds))


def _f1_one(prediction: str, gold: str) -> tuple[float, float, float]:
    pred_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens and not gold_tokens:
        # both normalize to nothing (e.g. gold was pure articles); they agree
        return 1.0, 1.0, 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0, 0.0, 0.0
    ov = token_overlap(pred_tokens, gold_tokens)
    if ov.tp == 0:
        return 0.0, 0.0, 0.0
    precision = ov.tp / (ov.tp + ov.fp)
    recall = ov.tp / (ov.tp + ov.fn)
    return 2 * precision * recall / (precision + recall), precision, recall


def f1_score(prediction: str, golds: Sequence[str]) -> tuple[float, float, float]:
    """(f1, precision, recall) against the gold that maximizes f1."""
    _require_golds(golds)
    return max((_f1_one(prediction, g) for g in golds), key=lambda t: t[0])


def span_to_text(example: EncodedExample, context: str, start: int, end: int) -> str:
    """Map a token span back to the context characters it covers.

    start/end index into the full encoded sequence; both must land on
    context tokens.
    """
    lo = example.context_begin
    hi = lo + len(example.context_token_offsets)
    if not (lo <= start <= end < hi):
        raise SpanDecodeError(
            f"span ({start}, {end}) outside context tokens [{lo}, {hi})"
        )
    first = example.context_token_offsets[start - lo]
    last = example.context_token_offsets[end - lo]
    return context[first[0]:last[1]]


@dataclass(frozen=True)
class EvalItem:
    """One validation question: encoded input, its gold answers, raw context."""

    example: EncodedExample
    golds: tuple[str, ...]
    context: str


@dataclass(frozen=True)
class QuestionScore:
    example_id: str
    em: int
    f1: float
    precision: float
    recall: float
    error: bool = False


@dataclass(frozen=True)
class Report:
    em: float
    f1: float
    precision: float
    recall: float
    n_questions: int
    per_question: tuple[QuestionScore, ...]

    def to_json(self) -> dict:
        return {
            "em": self.em,
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "n_questions": self.n_questions,
            "per_question": [
                {"id": q.example_id, "em": q.em, "f1": q.f1, "error": q.error}
                for q in self.per_question
            ],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def write_val_items(path, items: Sequence[EvalItem]) -> None:
    """Validation JSONL: the encoded-example fields plus context and golds."""
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            row = json.loads(item.example.to_json_line())
            row["context"] = item.context
            row["golds"] = list(item.golds)
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_val_items(path) -> list[EvalItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                golds = tuple(str(g) for g in row.pop("golds"))
                context = str(row.pop("context"))
                example = EncodedExample.from_json_dict(row)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path} line {lineno}: {exc}") from exc
            if not golds:
                raise ParseError(f"{path} line {lineno}: empty golds list")
            items.append(EvalItem(example, golds, context))
    return items


def evaluate(
    predict_fn: Callable[[EncodedExample], tuple[int, int]],
    dataset: Sequence[EvalItem],
) -> Report:
    """Score predict_fn over a dataset.

    A question whose span cannot be decoded scores zero and is flagged
    rather than aborting the whole evaluation.
    """
    if not dataset:
        raise MetricError("cannot evaluate an empty dataset")
    per: list[QuestionScore] = []
    for item in dataset:
        try:
            start, end = predict_fn(item.example)
            text = span_to_text(item.example, item.context, start, end)
        except SpanDecodeError:
            per.append(QuestionScore(item.example.example_id, 0, 0.0, 0.0, 0.0, True))
            continue
        em = exact_match(text, item.golds)
        f1, precision, recall = f1_score(text, item.golds)
        per.append(QuestionScore(item.example.example_id, em, f1, precision, recall))
    n = len(per)
    return Report(
        em=sum(q.em for q in per) / n,
        f1=sum(q.f1 for q in per) / n,
        precision=sum(q.precision for q in per) / n,
        recall=sum(q.recall for q in per) / n,
        n_questions=n,
        per_question=tuple(per),
    )
