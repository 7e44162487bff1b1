"""HTTP inference service over a trained checkpoint.

Answers questions on supplied contexts, records feedback for later local
training, and exposes session history. Serving never mutates parameters:
requests read an immutable snapshot, and a checkpoint reload swaps the
whole snapshot atomically. Corrections land in the feedback log in the
shape client.add_local_example consumes.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from .combiner import read_history
from .errors import (
    CheckpointError, ConfigError, DataError, ParseError, RequestError,
)
from .model import ModelConfig, ParamVector, forward, predict_span
from .textproc import CLS, PAD, SEP, EncodedExample, Vocab, tokenize, to_batch
from .wire import FeedbackRecord, append_feedback, load_checkpoint

log = logging.getLogger(__name__)

MAX_BODY_BYTES = 1 << 20

# set to "1" to copy full context text into feedback records; default logs
# only the caller-supplied context_id
LOG_CONTEXT_ENV = "FEDQAS_LOG_CONTEXT"


@dataclass(frozen=True)
class Answer:
    text: str
    char_start: int
    char_end: int
    token_start: int
    token_end: int
    score: float

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "char_start": self.char_start,
            "char_end": self.char_end,
            "token_start": self.token_start,
            "token_end": self.token_end,
            "score": self.score,
        }


def encode_for_inference(vocab: Vocab, question: str, context: str,
                         max_seq_len: int) -> EncodedExample:
    """Pack [CLS] question [SEP] context [SEP] with no answer alignment.

    Same layout as training encoding; start_pos/end_pos are dummies."""
    q_tokens = tokenize(question)
    budget = max_seq_len - 3 - len(q_tokens)
    if budget < 0:
        raise RequestError(
            f"question of {len(q_tokens)} tokens exceeds the "
            f"{max_seq_len - 3}-token budget"
        )
    kept = tokenize(context)[:budget]
    if not kept:
        raise RequestError("context is empty after tokenization")

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
        example_id=f"ask-{uuid.uuid4().hex[:8]}",
        token_ids=tuple(ids),
        segment_ids=tuple(segments),
        pad_mask=tuple(mask),
        start_pos=context_base,
        end_pos=context_base,
        context_token_offsets=tuple((b, e) for _, b, e in kept),
    )


def ask(params: ParamVector, config: ModelConfig, vocab: Vocab,
        context: str, question: str) -> Answer:
    """Best in-context span for the question, mapped back to characters."""
    if not question.strip():
        raise RequestError("question must be non-empty")
    if not context.strip():
        raise RequestError("context must be non-empty")
    enc = encode_for_inference(vocab, question, context, config.max_seq_len)
    out = forward(params, config, to_batch([enc]))
    start, end, score = predict_span(
        out.start_logits[0], out.end_logits[0],
        effective_len=enc.context_end,
        max_answer_len=config.max_answer_len,
        first_index=enc.context_begin,
    )
    offsets = enc.context_token_offsets
    char_start = offsets[start - enc.context_begin][0]
    char_end = offsets[end - enc.context_begin][1]
    return Answer(
        text=context[char_start:char_end],
        char_start=char_start,
        char_end=char_end,
        token_start=start,
        token_end=end,
        score=float(score),
    )


class QAService:
    """Immutable parameter snapshot plus feedback and history stores."""

    def __init__(self, config: ModelConfig, params: ParamVector, vocab: Vocab,
                 feedback_path, history_path):
        if vocab.size > config.vocab_size:
            raise ConfigError(
                f"vocabulary of {vocab.size} entries exceeds the model's "
                f"{config.vocab_size} embedding rows"
            )
        self._snapshot = (config, params)
        self._vocab = vocab
        self._feedback_path = Path(feedback_path)
        self._history_path = Path(history_path)
        self._write_lock = threading.Lock()

    @classmethod
    def from_files(cls, checkpoint_path, vocab_path, feedback_path,
                   history_path) -> "QAService":
        config, params = load_checkpoint(checkpoint_path)
        return cls(config, params, Vocab.load(vocab_path),
                   feedback_path, history_path)

    @property
    def model_config(self) -> ModelConfig:
        return self._snapshot[0]

    def ask(self, context: str, question: str) -> Answer:
        config, params = self._snapshot
        return ask(params, config, self._vocab, context, question)

    def record_feedback(self, record: FeedbackRecord) -> None:
        # one writer at a time; append_feedback fsyncs before returning
        with self._write_lock:
            append_feedback(self._feedback_path, record)

    def rounds(self) -> list[dict]:
        if not self._history_path.exists():
            return []
        return [r.to_dict() for r in read_history(self._history_path)]

    def reload(self, checkpoint_path) -> None:
        """Swap in a newer checkpoint of the same model shape."""
        config, params = load_checkpoint(checkpoint_path)
        if config != self._snapshot[0]:
            raise CheckpointError("checkpoint config changed across reload")
        self._snapshot = (config, params)


def _field(body: dict, name: str, kind, required: bool = True):
    if name not in body or body[name] is None:
        if required:
            raise RequestError(f"missing field {name!r}")
        return None
    value = body[name]
    if kind is int and isinstance(value, bool):
        raise RequestError(f"field {name!r} must be an integer")
    if not isinstance(value, kind):
        raise RequestError(f"field {name!r} must be {kind.__name__}")
    return value


def _make_handler(service: QAService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

        def _json(self, status: int, obj) -> None:
            body = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _read_body(self) -> Optional[dict]:
            try:
                length = int(self.headers.get("Content-Length") or 0)
            except ValueError:
                self._json(400, {"error": "bad Content-Length"})
                return None
            if length > MAX_BODY_BYTES:
                # drain before responding so the client's send never wedges
                remaining = length
                while remaining > 0:
                    chunk = self.rfile.read(min(remaining, 1 << 16))
                    if not chunk:
                        break
                    remaining -= len(chunk)
                self._json(413, {"error": f"body exceeds {MAX_BODY_BYTES} bytes"})
                return None
            try:
                body = json.loads(self.rfile.read(length).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                self._json(400, {"error": "body must be a UTF-8 JSON object"})
                return None
            if not isinstance(body, dict):
                self._json(400, {"error": "body must be a JSON object"})
                return None
            return body

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            if self.path == "/health":
                self._json(200, {"status": "ok"})
            elif self.path == "/rounds":
                try:
                    self._json(200, service.rounds())
                except (ParseError, ValueError, KeyError) as exc:
                    self._json(500, {"error": f"history unreadable: {exc}"})
            else:
                self._json(404, {"error": "not found"})

        def do_POST(self):
            if self.path == "/ask":
                self._post_ask()
            elif self.path == "/feedback":
                self._post_feedback()
            else:
                self._json(404, {"error": "not found"})

        def _post_ask(self):
            body = self._read_body()
            if body is None:
                return
            try:
                context = _field(body, "context", str)
                question = _field(body, "question", str)
                answer = service.ask(context, question)
            except RequestError as exc:
                self._json(400, {"error": str(exc)})
                return
            self._json(200, answer.to_dict())

        def _post_feedback(self):
            body = self._read_body()
            if body is None:
                return
            try:
                record = FeedbackRecord(
                    id=uuid.uuid4().hex,
                    timestamp=time.time(),
                    question=_field(body, "question", str),
                    context_id=_field(body, "context_id", str),
                    pred_start=_field(body, "pred_start", int),
                    pred_end=_field(body, "pred_end", int),
                    pred_text=_field(body, "pred_text", str),
                    correction=_field(body, "correction", str, required=False),
                    context=(
                        _field(body, "context", str, required=False)
                        if os.environ.get(LOG_CONTEXT_ENV) == "1" else None
                    ),
                )
            except (RequestError, DataError) as exc:
                self._json(400, {"error": str(exc)})
                return
            service.record_feedback(record)
            self._json(200, {"id": record.id})

    return Handler


def build_server(service: QAService, host: str = "127.0.0.1",
                 port: int = 0) -> ThreadingHTTPServer:
    return ThreadingHTTPServer((host, port), _make_handler(service))


def serve(checkpoint_path, vocab_path, feedback_path, history_path,
          host: str = "0.0.0.0", port: int = 8080) -> ThreadingHTTPServer:
    """Load everything and return a ready server; caller runs serve_forever."""
    service = QAService.from_files(checkpoint_path, vocab_path,
                                   feedback_path, history_path)
    return build_server(service, host, port)
