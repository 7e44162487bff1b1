"""Local training and the client-side store for user-added examples.

A client never ships text anywhere. It trains on its shard, returns
parameters, and keeps any examples its user adds in an append-only JSONL
file beside the shard.
"""

from __future__ import annotations

import json
import logging
import os
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .errors import ConfigError, ExampleValidationError, ShapeError, TrainingError
from .fedcore import ModelUpdate
from .model import ModelConfig, ParamVector, grad, manifest_for, sgd_step
from .textproc import (
    ClientShard, EncodedExample, RawExample, Vocab, encode_example, read_shard,
    to_batch,
)
from .wire import fnv1a64

log = logging.getLogger(__name__)


def derive_shuffle_seed(base_seed: int, round_id: int, client_id: str) -> int:
    """Per-(round, client) shuffle seed, identical however the client runs.

    A pure hash keeps socket clients and in-process simulation on the same
    training trajectory for the same base seed.
    """
    return fnv1a64(f"{base_seed}:{round_id}:{client_id}".encode("utf-8"))


@dataclass(frozen=True)
class Hyperparams:
    epochs: int = 1
    batch_size: int = 8
    lr: float = 5e-5
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")


def client_update(
    global_params: ParamVector,
    config: ModelConfig,
    shard: ClientShard,
    hyper: Hyperparams,
    round_id: int = 1,
) -> ModelUpdate:
    """Epochs of minibatch SGD starting from the global parameters.

    One RNG drives every epoch's shuffle, so epoch 2 sees a different order
    than epoch 1 but the whole run is a pure function of shuffle_seed.
    The final partial batch is trained on, not dropped.
    """
    examples = list(shard.examples)
    if not examples:
        raise TrainingError(f"shard {shard.client_id!r} is empty")
    if global_params.manifest != manifest_for(config):
        raise ShapeError("global parameters do not match the model config")
    params = global_params
    order = list(range(len(examples)))
    rng = random.Random(hyper.shuffle_seed)
    for _ in range(hyper.epochs):
        rng.shuffle(order)
        for lo in range(0, len(order), hyper.batch_size):
            batch = to_batch([examples[i] for i in order[lo:lo + hyper.batch_size]])
            params = sgd_step(params, grad(params, config, batch), hyper.lr)
    return ModelUpdate(shard.client_id, round_id, len(examples), params)


def _raw_to_json(raw: RawExample) -> dict:
    return {
        "id": raw.id,
        "title": raw.title,
        "context": raw.context,
        "question": raw.question,
        "answers": [{"text": t, "answer_start": s} for t, s in raw.answers],
    }


def _raw_from_json(obj: dict) -> RawExample:
    return RawExample(
        id=str(obj["id"]),
        title=str(obj.get("title", "")),
        context=str(obj["context"]),
        question=str(obj["question"]),
        answers=tuple((str(a["text"]), int(a["answer_start"])) for a in obj["answers"]),
    )


@dataclass(frozen=True)
class LocalStore:
    """One client's private data: its shard plus user-added raw examples."""

    shard_path: Path
    base_shard: ClientShard
    added_raw: tuple[RawExample, ...] = ()

    @property
    def added_path(self) -> Path:
        return self.shard_path.with_suffix(".added.jsonl")

    @property
    def size(self) -> int:
        return len(self.base_shard.examples) + len(self.added_raw)


def open_store(shard_path, client_id: str) -> LocalStore:
    shard_path = Path(shard_path)
    base = read_shard(shard_path, client_id)
    store = LocalStore(shard_path, base)
    if store.added_path.exists():
        added = []
        with open(store.added_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    added.append(_raw_from_json(json.loads(line)))
        store = replace(store, added_raw=tuple(added))
    return store


def add_local_example(store: LocalStore, raw: RawExample) -> LocalStore:
    """Append one user-supplied example to the client's private store.

    The answer text must reproduce at its claimed offset; the write is a
    single flushed+fsynced line so a crash cannot leave a torn record.
    """
    if not raw.answers:
        raise ExampleValidationError("an added example needs at least one answer")
    if len(raw.valid_answers()) != len(raw.answers):
        raise ExampleValidationError(
            "answer text does not appear at its claimed context offset"
        )
    line = json.dumps(_raw_to_json(raw), sort_keys=True)
    with open(store.added_path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
        fh.flush()
        os.fsync(fh.fileno())
    return replace(store, added_raw=store.added_raw + (raw,))


def generate_training_points(
    store: LocalStore, vocab: Vocab, max_seq_len: int
) -> list[EncodedExample]:
    """Encode every added raw example; unencodable ones are skipped, not fatal."""
    points = []
    skipped = 0
    for raw in store.added_raw:
        enc = encode_example(vocab, raw, max_seq_len)
        if enc is None:
            skipped += 1
        else:
            points.append(enc)
    if skipped:
        log.warning("skipped %d added example(s) that no longer fit the encoder", skipped)
    return points


def training_shard(store: LocalStore, vocab: Vocab, max_seq_len: int) -> ClientShard:
    """Base shard plus freshly encoded added examples, as one shard."""
    extra = generate_training_points(store, vocab, max_seq_len)
    return ClientShard(
        store.base_shard.client_id, store.base_shard.examples + tuple(extra)
    )
