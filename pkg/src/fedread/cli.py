"""Command-line entry point binding every workflow: data preparation,
in-process simulation, the socket combiner and client, evaluation,
ad-hoc asking, serving, and local example addition.

Exit codes are a stable scripting contract: 0 success, 2 usage or
validation failure, 3 session failure, 4 checkpoint corruption.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .client import Hyperparams, add_local_example, open_store, training_shard
from .combiner import (
    Combiner,
    InProcessTransport,
    SessionConfig,
    SocketTransport,
    evaluate_params,
    run_socket_client,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    EncodeError,
    ExampleValidationError,
    MetricError,
    ParseError,
    PartitionError,
    ProtocolError,
    RequestError,
    SessionError,
    ShapeError,
    TrainingError,
)
from .fedcore import AggregationPolicy
from .metrics import EvalItem, read_val_items, write_val_items
from .model import ModelConfig, init_params
from .qaservice import QAService, ask as ask_model, build_server
from .textproc import (
    RawExample,
    Vocab,
    build_vocab,
    encode_example,
    load_squad,
    partition,
    read_shard,
    write_shard,
)
from .wire import fnv1a64, load_checkpoint, param_digest, save_checkpoint

log = logging.getLogger(__name__)

# validation and bad-input errors; session and corruption failures map separately
_USAGE_ERRORS = (
    ParseError,
    ConfigError,
    DataError,
    EncodeError,
    ExampleValidationError,
    MetricError,
    PartitionError,
    RequestError,
    ShapeError,
)

EXIT_USAGE = 2
EXIT_SESSION = 3
EXIT_CORRUPT = 4


def _seed_default() -> int:
    raw = os.environ.get("FEDQAS_SEED")
    if raw is None:
        return 42
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"FEDQAS_SEED must be an integer, got {raw!r}") from None


def _configure_logging(quiet: bool) -> None:
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"address must be HOST:PORT, got {text!r}")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"bad port in address {text!r}") from None


def _read_json_file(path: Path, what: str) -> dict:
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{what} {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ParseError(f"{what} {path} must hold a JSON object")
    return obj


def _load_data_dir(data_dir) -> tuple[Vocab, dict, list[EvalItem]]:
    """Read the artifacts prepare wrote: vocabulary, meta, validation set."""
    d = Path(data_dir)
    vocab_path = d / "vocab.json"
    if not vocab_path.exists():
        raise DataError(f"no vocab.json in {d}; run prepare first")
    vocab = Vocab.load(vocab_path)
    meta = _read_json_file(d / "meta.json", "meta") if (d / "meta.json").exists() else {}
    val_path = d / "val.jsonl"
    val_items = read_val_items(val_path) if val_path.exists() else []
    return vocab, meta, val_items


def _shard_paths(data_dir, limit: Optional[int]) -> list[Path]:
    # stems are client_<i>, so (length, name) orders client_2 before client_10;
    # .added.jsonl side files are store overlays, not shards of their own
    paths = sorted(
        (p for p in Path(data_dir).glob("client_*.jsonl")
         if not p.stem.endswith(".added")),
        key=lambda p: (len(p.stem), p.stem),
    )
    if not paths:
        raise DataError(f"no client_*.jsonl shards in {data_dir}")
    if limit is not None:
        if limit < 1:
            raise ConfigError(f"need at least one client, got {limit}")
        if limit > len(paths):
            raise ConfigError(f"asked for {limit} clients but found {len(paths)} shards")
        paths = paths[:limit]
    return paths


def _model_config(args, vocab: Optional[Vocab], meta: dict) -> ModelConfig:
    """Model geometry for a session: an explicit JSON file wins, otherwise
    small defaults sized from the prepared data. The combiner and every
    socket client must resolve to the same config or the handshake fails."""
    if args.model_config:
        obj = _read_json_file(Path(args.model_config), "model config")
        try:
            return ModelConfig(**obj)
        except TypeError as exc:
            raise ConfigError(f"bad model config {args.model_config}: {exc}") from exc
    if vocab is None:
        raise ConfigError("no vocab.json found; pass --model-config instead")
    max_seq_len = meta.get("max_seq_len")
    if max_seq_len is None:
        raise ConfigError("meta.json lacks max_seq_len; pass --model-config instead")
    return ModelConfig(
        vocab_size=vocab.size,
        d_model=32,
        n_heads=4,
        n_layers=2,
        d_ff=64,
        max_seq_len=int(max_seq_len),
        max_answer_len=8,
        init_seed=args.seed,
    )


def _print_rounds(records) -> None:
    print(f"{'round':>5}  {'clients':>7}  {'n':>6}  {'em':>7}  {'f1':>7}  {'seconds':>8}")
    for rec in records:
        em = "-" if rec.val_em is None else f"{rec.val_em:.4f}"
        f1 = "-" if rec.val_f1 is None else f"{rec.val_f1:.4f}"
        print(
            f"{rec.round:>5}  {len(rec.participants):>7}  {rec.n_total:>6}"
            f"  {em:>7}  {f1:>7}  {rec.wall_time:>8.2f}"
        )


class _ParallelTransport(InProcessTransport):
    """In-process transport that trains selected clients in a thread pool.

    Each client's update is an independent deterministic computation, so
    the result is identical to the sequential transport; aggregation
    orders by client_id regardless of completion order.
    """

    def collect(self, round_id, selected, global_params):
        order = sorted(selected)
        if len(order) < 2:
            return super().collect(round_id, order, global_params)
        one = InProcessTransport.collect
        with ThreadPoolExecutor(max_workers=min(len(order), 8)) as pool:
            parts = list(
                pool.map(lambda cid: one(self, round_id, [cid], global_params), order)
            )
        return [update for part in parts for update in part]


def _cmd_prepare(args) -> int:
    if args.clients < 1:
        raise ConfigError(f"need at least one client, got {args.clients}")
    data = load_squad(args.input)
    raws = data.examples
    if not raws:
        raise DataError(f"no usable examples in {args.input}")
    corpus = [r.context for r in raws] + [r.question for r in raws]
    vocab = build_vocab(corpus, args.vocab_size)
    by_id = {r.id: r for r in raws}

    encoded = []
    skipped = 0
    for raw in raws:
        enc = encode_example(vocab, raw, args.max_seq_len)
        if enc is None:
            skipped += 1
        else:
            encoded.append(enc)
    if skipped:
        log.warning("%d example(s) did not survive encoding at max_seq_len=%d",
                    skipped, args.max_seq_len)
    if not encoded:
        raise DataError("no example survived encoding; raise --max-seq-len")

    shards, val_encoded = partition(encoded, args.clients, args.val_frac, args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.json")
    val_items = [
        EvalItem(
            enc,
            tuple(text for text, _ in by_id[enc.example_id].valid_answers()),
            by_id[enc.example_id].context,
        )
        for enc in val_encoded
    ]
    write_val_items(out / "val.jsonl", val_items)
    for shard in shards:
        write_shard(out / f"{shard.client_id}.jsonl", shard)

    meta = {
        "clients": args.clients,
        "dropped_answers": data.dropped_answers,
        "dropped_examples": data.dropped_examples,
        "examples": len(encoded),
        "max_seq_len": args.max_seq_len,
        "seed": args.seed,
        "shard_sizes": {s.client_id: len(s.examples) for s in shards},
        "skipped_encoding": skipped,
        "train": sum(len(s.examples) for s in shards),
        "val_frac": args.val_frac,
        "validation": len(val_items),
        "vocab_size": vocab.size,
    }
    (out / "meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"prepared {meta['train']} training examples over {args.clients} shard(s), "
        f"{meta['validation']} validation, vocab {vocab.size}"
    )
    return 0


def _run_session(args, config: ModelConfig, transport, val_items) -> int:
    session = SessionConfig(
        rounds=args.rounds,
        expected_clients=args.expected,
        round_timeout=args.timeout,
        policy=AggregationPolicy.parse(args.policy),
        quorum=args.quorum,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    combiner = Combiner(config, session, init_params(config), transport,
                        val_items, out_dir=out)
    records = combiner.run_session()
    save_checkpoint(out / "final.ckpt", config, combiner.global_params)
    _print_rounds(records)
    print(f"final digest {param_digest(combiner.global_params)}")
    return 0


def _cmd_simulate(args) -> int:
    vocab, meta, val_items = _load_data_dir(args.data)
    paths = _shard_paths(args.data, args.clients)
    config = _model_config(args, vocab, meta)
    # read through each client's local store, as the socket client does,
    # so examples added between rounds join the next round's training set
    shards = {
        p.stem: (lambda p=p, cid=p.stem: training_shard(
            open_store(p, cid), vocab, config.max_seq_len))
        for p in paths
    }
    hyper = Hyperparams(epochs=args.epochs, batch_size=args.batch, lr=args.lr)
    transport_cls = _ParallelTransport if args.parallel else InProcessTransport
    transport = transport_cls(shards, config, hyper, base_seed=args.seed)
    args.expected = len(shards)
    return _run_session(args, config, transport, val_items)


def _cmd_combiner(args) -> int:
    vocab, meta, val_items = _load_data_dir(args.data)
    config = _model_config(args, vocab, meta)
    host, port = _parse_addr(args.listen)
    transport = SocketTransport(host, port, config, round_timeout=args.timeout)
    bound_host, bound_port = transport.address
    print(f"listening on {bound_host}:{bound_port}", flush=True)
    args.expected = args.clients
    quorum = args.quorum if args.quorum is not None else args.clients
    try:
        transport.wait_for_clients(quorum, timeout=args.timeout)
    except TimeoutError:
        transport.close()
        raise SessionError(
            f"quorum of {quorum} client(s) not reached within {args.timeout:.0f}s"
        ) from None
    return _run_session(args, config, transport, val_items)


def _cmd_client(args) -> int:
    host, port = _parse_addr(args.connect)
    shard_path = Path(args.data)
    if not shard_path.exists():
        raise DataError(f"no shard file at {shard_path}")
    client_id = args.client_id or shard_path.stem
    data_dir = shard_path.parent

    vocab_path = Path(args.vocab) if args.vocab else data_dir / "vocab.json"
    vocab = Vocab.load(vocab_path) if vocab_path.exists() else None
    meta_path = data_dir / "meta.json"
    meta = _read_json_file(meta_path, "meta") if meta_path.exists() else {}
    config = _model_config(args, vocab, meta)

    if vocab is not None:
        # re-read through the local store each round so examples added
        # mid-session join the next round's training set
        def source():
            return training_shard(open_store(shard_path, client_id), vocab,
                                  config.max_seq_len)
    else:
        def source():
            return read_shard(shard_path, client_id)

    hyper = Hyperparams(epochs=args.epochs, batch_size=args.batch, lr=args.lr)
    attempts = args.retries + 1
    trained = 0
    last: Optional[BaseException] = None
    for attempt in range(attempts):
        if attempt:
            time.sleep(min(0.5 * attempt, 2.0))
        try:
            trained += run_socket_client(
                host, port, client_id, config, source, hyper, args.seed,
                connect_timeout=args.timeout,
            )
            print(f"{client_id} trained {trained} round(s)")
            return 0
        except (ProtocolError, ConnectionError, TimeoutError, OSError) as exc:
            last = exc
            log.warning("%s lost the combiner (%s); reconnecting", client_id, exc)
    raise SessionError(f"{client_id} gave up after {attempts} attempt(s): {last}")


def _cmd_evaluate(args) -> int:
    config, params = load_checkpoint(args.ckpt)
    items = read_val_items(args.data)
    if not items:
        raise DataError(f"no validation items in {args.data}")
    report = evaluate_params(params, config, items)
    summary = report.to_json()
    del summary["per_question"]
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        report.save(args.out)
        log.info("full report written to %s", args.out)
    return 0


def _cmd_ask(args) -> int:
    config, params = load_checkpoint(args.ckpt)
    vocab = Vocab.load(args.vocab)
    if vocab.size > config.vocab_size:
        raise ConfigError(
            f"vocabulary of {vocab.size} exceeds the checkpoint's embedding "
            f"table of {config.vocab_size}"
        )
    context = Path(args.context).read_text(encoding="utf-8")
    answer = ask_model(params, config, vocab, context, args.question)
    print(json.dumps(answer.to_dict(), sort_keys=True))
    return 0


def _cmd_serve(args) -> int:
    service = QAService.from_files(args.ckpt, args.vocab, args.feedback, args.history)
    server = build_server(service, host=args.host, port=args.port)
    bound_host, bound_port = server.server_address[:2]
    print(f"serving on {bound_host}:{bound_port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    return 0


def _cmd_add_example(args) -> int:
    store_path = Path(args.store)
    if store_path.is_dir():
        if not args.client_id:
            raise ConfigError("--client-id is required when --store is a directory")
        store_path = store_path / f"{args.client_id}.jsonl"
    if not store_path.exists():
        raise DataError(f"no shard file at {store_path}")
    client_id = args.client_id or store_path.stem

    context = Path(args.context).read_text(encoding="utf-8")
    if args.answer_start < 0:
        raise ExampleValidationError(f"answer_start must be >= 0, got {args.answer_start}")
    content = f"{args.question}\x00{args.answer}\x00{args.answer_start}\x00{context}"
    raw = RawExample(
        id=f"local-{fnv1a64(content.encode('utf-8')):016x}",
        title="local",
        context=context,
        question=args.question,
        answers=((args.answer, args.answer_start),),
    )
    store = open_store(store_path, client_id)
    store = add_local_example(store, raw)
    print(f"added {raw.id}; {client_id} now holds {store.size} example(s)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=_seed_default(),
                        help="base seed for every random choice "
                             "(FEDQAS_SEED overrides the default)")
    common.add_argument("--quiet", action="store_true",
                        help="only warnings and errors on stderr")

    parser = argparse.ArgumentParser(
        prog="fedread",
        description="Federated span-extraction question answering.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("prepare", parents=[common],
                       help="split a SQuAD-format file into client shards")
    p.add_argument("--input", required=True, help="SQuAD v1.1 JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clients", type=int, default=5, help="number of shards")
    p.add_argument("--val-frac", type=float, default=0.2,
                   help="fraction held out for validation")
    p.add_argument("--vocab-size", type=int, default=8000)
    p.add_argument("--max-seq-len", type=int, default=384)
    p.set_defaults(fn=_cmd_prepare)

    def session_flags(p, with_policy=True):
        p.add_argument("--rounds", type=int, default=5)
        p.add_argument("--epochs", type=int, default=1, help="local epochs per round")
        p.add_argument("--batch", type=int, default=8, help="local minibatch size")
        p.add_argument("--lr", type=float, default=5e-5, help="local learning rate")
        if with_policy:
            p.add_argument("--policy", choices=["plain", "incremental"],
                           default="incremental", help="aggregation policy")
            p.add_argument("--quorum", type=int, default=None,
                           help="fewest clients a round may proceed with")
        p.add_argument("--timeout", type=float, default=120.0,
                       help="per-round collection timeout in seconds")
        p.add_argument("--model-config", default=None,
                       help="JSON file of model dimensions (defaults are "
                            "derived from the prepared data)")

    p = sub.add_parser("simulate", parents=[common],
                       help="run a whole federated session in one process")
    p.add_argument("--data", required=True, help="directory written by prepare")
    p.add_argument("--out", required=True, help="output directory for "
                                                "history and checkpoints")
    p.add_argument("--clients", type=int, default=None,
                   help="use only the first K shards (default: all)")
    session_flags(p)
    p.add_argument("--parallel", action="store_true",
                   help="train clients in a thread pool (same results)")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("combiner", parents=[common],
                       help="run the combiner side of a socket session")
    p.add_argument("--listen", required=True, metavar="HOST:PORT",
                   help="bind address (port 0 picks a free port)")
    p.add_argument("--data", required=True, help="directory written by prepare "
                                                 "(vocab, meta, validation)")
    p.add_argument("--out", required=True)
    p.add_argument("--clients", type=int, default=5,
                   help="clients expected per round")
    session_flags(p)
    p.set_defaults(fn=_cmd_combiner)

    p = sub.add_parser("client", parents=[common],
                       help="train one client against a remote combiner")
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.add_argument("--data", required=True, help="this client's shard file")
    p.add_argument("--client-id", default=None,
                   help="client name (default: shard file stem)")
    p.add_argument("--vocab", default=None,
                   help="vocab.json (default: next to the shard)")
    session_flags(p, with_policy=False)
    p.add_argument("--retries", type=int, default=3,
                   help="reconnection attempts after a lost connection")
    p.set_defaults(fn=_cmd_client)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score a checkpoint on a validation file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="val.jsonl from prepare")
    p.add_argument("--out", default=None, help="write the full per-question report here")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("ask", parents=[common],
                       help="answer one question over a context file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--context", required=True, help="text file holding the passage")
    p.add_argument("--question", required=True)
    p.set_defaults(fn=_cmd_ask)

    p = sub.add_parser("serve", parents=[common],
                       help="serve a checkpoint over HTTP")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--feedback", required=True, help="feedback JSONL path")
    p.add_argument("--history", required=True, help="history JSONL path")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(fn=_cmd_serve)

    p = sub.add_parser("add-example", parents=[common],
                       help="append one labeled example to a client's local store")
    p.add_argument("--store", required=True,
                   help="shard file, or its directory plus --client-id")
    p.add_argument("--client-id", default=None)
    p.add_argument("--context", required=True, help="text file holding the passage")
    p.add_argument("--question", required=True)
    p.add_argument("--answer", required=True)
    p.add_argument("--answer-start", type=int, required=True,
                   help="character offset of the answer in the context")
    p.set_defaults(fn=_cmd_add_example)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        parser = build_parser()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        if code is None:
            return 0
        return code if isinstance(code, int) else EXIT_USAGE
    _configure_logging(args.quiet)
    try:
        return args.fn(args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (SessionError, ProtocolError, TrainingError, TimeoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SESSION
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConnectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SESSION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
