"""Round orchestration: broadcast, collect, aggregate, evaluate, checkpoint.

The combiner never sees raw text. It holds the global parameters, a
validation set, and a transport; the transport is either simulated
in-process or a socket server speaking the framed protocol. Both produce
identical parameter trajectories for the same base seed because each
client's shuffle seed is a pure function of (base seed, round, client id).
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .client import Hyperparams, client_update, derive_shuffle_seed
from .errors import ConfigError, ProtocolError, SessionError, ShapeError
from .fedcore import (
    AggregationPolicy, ModelUpdate, fedavg, incremental_merge, validate_update,
)
from .metrics import EvalItem, Report, evaluate
from .model import (
    ModelConfig, ParamVector, forward, manifest_for, predict_span,
)
from .textproc import ClientShard, to_batch
from .wire import (
    FrameReader, Kind, Message, encode_message, manifest_digest, param_digest,
    save_checkpoint,
)

log = logging.getLogger(__name__)

_RECV_CHUNK = 1 << 16


@dataclass(frozen=True)
class SessionConfig:
    rounds: int = 5
    expected_clients: int = 5
    round_timeout: float = 120.0
    policy: AggregationPolicy = AggregationPolicy.INCREMENTAL
    quorum: Optional[int] = None
    max_round_attempts: int = 3

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError(f"need at least one round, got {self.rounds}")
        if self.expected_clients < 1:
            raise ConfigError("need at least one client")
        if self.quorum is None:
            object.__setattr__(self, "quorum", self.expected_clients)
        if not 1 <= self.quorum <= self.expected_clients:
            raise ConfigError(
                f"quorum {self.quorum} must lie in [1, {self.expected_clients}]"
            )
        if self.round_timeout <= 0:
            raise ConfigError("round_timeout must be positive")
        if self.max_round_attempts < 1:
            raise ConfigError("max_round_attempts must be >= 1")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    participants: tuple[str, ...]
    n_total: int
    aggregate_digest: str
    val_em: Optional[float]
    val_f1: Optional[float]
    wall_time: float

    def __post_init__(self):
        if self.round < 1:
            raise ConfigError(f"round index must be >= 1, got {self.round}")
        if self.wall_time <= 0:
            raise ConfigError("wall_time must be positive")

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "participants": list(self.participants),
            "n_total": self.n_total,
            "aggregate_digest": self.aggregate_digest,
            "val_em": self.val_em,
            "val_f1": self.val_f1,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RoundRecord":
        return cls(
            round=int(obj["round"]),
            participants=tuple(str(c) for c in obj["participants"]),
            n_total=int(obj["n_total"]),
            aggregate_digest=str(obj["aggregate_digest"]),
            val_em=None if obj.get("val_em") is None else float(obj["val_em"]),
            val_f1=None if obj.get("val_f1") is None else float(obj["val_f1"]),
            wall_time=float(obj["wall_time"]),
        )


def read_history(path) -> list[RoundRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(RoundRecord.from_dict(json.loads(line)))
    return records


def select_clients(connected: Sequence[str], config: SessionConfig) -> Optional[list[str]]:
    """All connected clients in id order, capped at expected_clients.

    None signals an aborted round (below quorum)."""
    ordered = sorted(connected)
    if len(ordered) < config.quorum:
        return None
    return ordered[:config.expected_clients]


def span_predictor(params: ParamVector, config: ModelConfig) -> Callable:
    """predict_fn for evaluate(): best in-context span per example."""

    def predict(example) -> tuple[int, int]:
        batch = to_batch([example])
        logits = forward(params, config, batch)
        start, end, _ = predict_span(
            logits.start_logits[0], logits.end_logits[0],
            effective_len=example.context_end,
            max_answer_len=config.max_answer_len,
            first_index=example.context_begin,
        )
        return start, end

    return predict


def evaluate_params(params: ParamVector, config: ModelConfig,
                    items: Sequence[EvalItem]) -> Report:
    return evaluate(span_predictor(params, config), items)


ShardSource = Union[ClientShard, Callable[[], ClientShard]]


class InProcessTransport:
    """Simulated clients trained sequentially inside the combiner process.

    Sequential and sorted by client id, so a run is a pure function of its
    seeds. Shards may be given as callables re-read each round, which is
    how locally added examples enter later rounds.
    """

    def __init__(self, shards: dict[str, ShardSource], model_config: ModelConfig,
                 hyper: Hyperparams, base_seed: int):
        if not shards:
            raise ConfigError("need at least one client shard")
        self._shards = dict(shards)
        self._config = model_config
        self._hyper = hyper
        self._base_seed = base_seed

    def connected_clients(self) -> list[str]:
        return sorted(self._shards)

    def collect(self, round_id: int, selected: Sequence[str],
                global_params: ParamVector) -> list[ModelUpdate]:
        updates = []
        for client_id in sorted(selected):
            source = self._shards[client_id]
            shard = source() if callable(source) else source
            hyper = replace(
                self._hyper,
                shuffle_seed=derive_shuffle_seed(self._base_seed, round_id, client_id),
            )
            updates.append(
                client_update(global_params, self._config, shard, hyper, round_id)
            )
        return updates

    def close(self) -> None:
        pass


def _send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))


def _recv_message(sock: socket.socket, reader: FrameReader,
                  deadline: Optional[float] = None) -> Message:
    while True:
        msg = reader.next_message()
        if msg is not None:
            return msg
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("timed out waiting for a frame")
            sock.settimeout(remaining)
        data = sock.recv(_RECV_CHUNK)
        if not data:
            raise ProtocolError("connection closed mid-stream")
        reader.feed(data)


class SocketTransport:
    """Combiner side of the socket protocol.

    Clients connect and HELLO; each round the combiner broadcasts MODEL
    frames and one reader thread per client deposits the returned UPDATE
    into a queue. Collection stops when every selected client answered or
    the round deadline passes.
    """

    def __init__(self, host: str, port: int, model_config: ModelConfig,
                 round_timeout: float = 120.0):
        self._config = model_config
        self._manifest = manifest_for(model_config)
        self._digest = manifest_digest(self._manifest)
        self._round_timeout = round_timeout
        self._clients: dict[str, tuple[socket.socket, FrameReader]] = {}
        self._lock = threading.Lock()
        self._running = True
        self._server = socket.create_server((host, port))
        self._server.settimeout(0.1)
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True)
        self._acceptor.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.getsockname()[:2]

    def _accept_loop(self) -> None:
        while self._running:
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._handshake, args=(conn,), daemon=True).start()

    def _handshake(self, conn: socket.socket) -> None:
        reader = FrameReader()
        try:
            conn.settimeout(10.0)
            msg = _recv_message(conn, reader)
            if msg.kind is not Kind.HELLO:
                _send_message(conn, Message.error(1, "expected HELLO"))
                conn.close()
                return
            if msg.manifest_digest != self._digest:
                _send_message(conn, Message.error(2, "parameter manifest mismatch"))
                conn.close()
                return
            conn.settimeout(None)
            with self._lock:
                self._clients[msg.client_id] = (conn, reader)
            log.info("client %s connected", msg.client_id)
        except (OSError, ProtocolError, TimeoutError) as exc:
            log.warning("handshake failed: %s", exc)
            conn.close()

    def wait_for_clients(self, count: int, timeout: float) -> None:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                if len(self._clients) >= count:
                    return
            time.sleep(0.02)

    def connected_clients(self) -> list[str]:
        with self._lock:
            return sorted(self._clients)

    def _read_update(self, client_id: str, round_id: int, deadline: float,
                     out: queue.Queue) -> None:
        sock, reader = self._clients[client_id]
        try:
            while True:
                msg = _recv_message(sock, reader, deadline)
                if msg.kind is Kind.ERROR:
                    log.warning("client %s reported error %d: %s",
                                client_id, msg.code, msg.text)
                    return
                if msg.kind is not Kind.UPDATE:
                    log.warning("client %s sent unexpected %s frame",
                                client_id, msg.kind.name)
                    continue
                try:
                    params = ParamVector(msg.values, self._manifest)
                except ShapeError as exc:
                    log.warning("client %s update rejected: %s", client_id, exc)
                    return
                out.put(ModelUpdate(msg.client_id, msg.round_id,
                                    msg.n_examples, params))
                return
        except (OSError, ProtocolError, TimeoutError) as exc:
            log.warning("no update from %s this round: %s", client_id, exc)

    def collect(self, round_id: int, selected: Sequence[str],
                global_params: ParamVector) -> list[ModelUpdate]:
        with self._lock:
            conns = {cid: self._clients[cid] for cid in selected}
        for cid, (sock, _) in conns.items():
            try:
                _send_message(sock, Message.model(round_id, global_params.values))
            except OSError as exc:
                log.warning("broadcast to %s failed: %s", cid, exc)
        deadline = time.monotonic() + self._round_timeout
        out: queue.Queue = queue.Queue()
        threads = [
            threading.Thread(target=self._read_update,
                             args=(cid, round_id, deadline, out), daemon=True)
            for cid in selected
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=max(0.0, deadline - time.monotonic()) + 1.0)
        updates = []
        while not out.empty():
            updates.append(out.get_nowait())
        return updates

    def close(self) -> None:
        self._running = False
        with self._lock:
            clients = list(self._clients.values())
            self._clients.clear()
        for sock, _ in clients:
            try:
                _send_message(sock, Message.done())
                sock.close()
            except OSError:
                pass
        self._server.close()
        self._acceptor.join(timeout=2.0)


def run_socket_client(host: str, port: int, client_id: str,
                      model_config: ModelConfig, shard_source: ShardSource,
                      hyper: Hyperparams, base_seed: int,
                      connect_timeout: float = 30.0) -> int:
    """Client-side loop: HELLO, then train on every MODEL frame until DONE.

    Returns the number of rounds trained.
    """
    manifest = manifest_for(model_config)
    sock = socket.create_connection((host, port), timeout=connect_timeout)
    sock.settimeout(None)
    reader = FrameReader()
    rounds_done = 0
    try:
        _send_message(sock, Message.hello(client_id, manifest_digest(manifest)))
        while True:
            msg = _recv_message(sock, reader)
            if msg.kind is Kind.DONE:
                return rounds_done
            if msg.kind is Kind.ERROR:
                raise SessionError(
                    f"combiner rejected {client_id}: {msg.code} {msg.text}"
                )
            if msg.kind is not Kind.MODEL:
                raise ProtocolError(f"unexpected {msg.kind.name} frame from combiner")
            params = ParamVector(msg.values, manifest)
            shard = shard_source() if callable(shard_source) else shard_source
            round_hyper = replace(
                hyper,
                shuffle_seed=derive_shuffle_seed(base_seed, msg.round_id, client_id),
            )
            update = client_update(params, model_config, shard, round_hyper,
                                   round_id=msg.round_id)
            _send_message(sock, Message.update(msg.round_id, client_id,
                                               update.n_examples,
                                               update.params.values))
            rounds_done += 1
    finally:
        sock.close()


class Combiner:
    """Owns the global parameters and drives rounds over a transport."""

    def __init__(self, model_config: ModelConfig, session: SessionConfig,
                 initial_params: ParamVector, transport,
                 val_items: Sequence[EvalItem] = (),
                 out_dir: Optional[Path] = None):
        if initial_params.manifest != manifest_for(model_config):
            raise ShapeError("initial parameters do not match the model config")
        self.model_config = model_config
        self.session = session
        self.global_params = initial_params
        self.transport = transport
        self.val_items = list(val_items)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.records: list[RoundRecord] = []
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self._manifest = manifest_for(model_config)

    def _history_path(self) -> Optional[Path]:
        return None if self.out_dir is None else self.out_dir / "history.jsonl"

    def run_round(self, round_id: int) -> Optional[RoundRecord]:
        """One broadcast-train-collect-aggregate cycle. None means aborted."""
        started = time.perf_counter()
        selected = select_clients(self.transport.connected_clients(), self.session)
        if selected is None:
            log.warning("round %d aborted: below quorum", round_id)
            return None
        updates = self.transport.collect(round_id, selected, self.global_params)
        valid = []
        for update in updates:
            rejection = validate_update(update, self._manifest, round_id)
            if rejection is None:
                valid.append(update)
            else:
                log.warning("round %d: rejected update from %s (%s: %s)",
                            round_id, update.client_id, rejection.reason,
                            rejection.detail)
        if not valid:
            raise SessionError(
                f"round {round_id} collected no valid update",
                records=tuple(self.records),
            )
        if len(valid) < self.session.quorum:
            log.warning("round %d aborted: %d valid update(s), quorum %d",
                        round_id, len(valid), self.session.quorum)
            return None
        aggregate = fedavg(valid)
        if self.session.policy is AggregationPolicy.INCREMENTAL:
            self.global_params = incremental_merge(self.global_params, aggregate,
                                                   round_id)
        else:
            self.global_params = aggregate
        val_em = val_f1 = None
        if self.val_items:
            report = evaluate_params(self.global_params, self.model_config,
                                     self.val_items)
            val_em, val_f1 = report.em, report.f1
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / f"round_{round_id:03d}.ckpt",
                            self.model_config, self.global_params)
            save_checkpoint(self.out_dir / "latest.ckpt",
                            self.model_config, self.global_params)
        record = RoundRecord(
            round=round_id,
            participants=tuple(sorted(u.client_id for u in valid)),
            n_total=sum(u.n_examples for u in valid),
            aggregate_digest=param_digest(self.global_params),
            val_em=val_em,
            val_f1=val_f1,
            wall_time=max(time.perf_counter() - started, 1e-9),
        )
        return record

    def _append_history(self, record: RoundRecord) -> None:
        path = self._history_path()
        if path is not None:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

    def run_session(self) -> list[RoundRecord]:
        """rounds successful rounds; aborted rounds are retried, not counted."""
        try:
            for round_id in range(1, self.session.rounds + 1):
                record = None
                for attempt in range(1, self.session.max_round_attempts + 1):
                    record = self.run_round(round_id)
                    if record is not None:
                        break
                    if attempt < self.session.max_round_attempts:
                        time.sleep(min(0.2 * attempt, 2.0))
                if record is None:
                    raise SessionError(
                        f"round {round_id} failed "
                        f"{self.session.max_round_attempts} attempt(s)",
                        records=tuple(self.records),
                    )
                self.records.append(record)
                self._append_history(record)
                log.info("round %d done: em=%s f1=%s (%.2fs, n=%d)",
                         round_id, record.val_em, record.val_f1,
                         record.wall_time, record.n_total)
        finally:
            self.transport.close()
        return list(self.records)
