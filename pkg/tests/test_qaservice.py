import json
import threading
import urllib.error
import urllib.request

import numpy as np
import pytest

from fedread.client import Hyperparams, client_update
from fedread.combiner import RoundRecord
from fedread.errors import CheckpointError, ConfigError, RequestError
from fedread.model import ModelConfig, ParamVector, init_params, manifest_for
from fedread.qaservice import (
    Answer, QAService, ask, build_server, encode_for_inference, serve,
)
from fedread.textproc import (
    CLS, SEP, ClientShard, RawExample, build_vocab, encode_example, tokenize,
)
from fedread.wire import list_feedback, save_checkpoint

CONFIG = ModelConfig(
    vocab_size=64, d_model=16, n_heads=2, n_layers=1, d_ff=32,
    max_seq_len=64, max_answer_len=8, init_seed=7,
)

CONTEXT = ("The Apollo program was the third United States human spaceflight "
           "program. First manned flight of Apollo was in 1968. Apollo ran "
           "from 1961 to 1972.")
QUESTION = "What year did the first manned Apollo flight occur?"

VOCAB = build_vocab([CONTEXT, QUESTION], max_size=CONFIG.vocab_size)


def trained_params():
    raw = RawExample("apollo-1", "apollo", CONTEXT, QUESTION,
                     (("1968", CONTEXT.index("1968")),))
    enc = encode_example(VOCAB, raw, CONFIG.max_seq_len)
    assert enc is not None
    shard = ClientShard("client_1", (enc,))
    hyper = Hyperparams(epochs=40, batch_size=8, lr=0.1, shuffle_seed=1)
    return client_update(init_params(CONFIG), CONFIG, shard, hyper).params


class TestEncodeForInference:
    def test_layout_matches_training_encoding(self):
        enc = encode_for_inference(VOCAB, "what ran", "apollo ran here", 16)
        q = tokenize("what ran")
        c = tokenize("apollo ran here")
        assert enc.token_ids[0] == CLS
        assert enc.token_ids[1 + len(q)] == SEP
        assert enc.token_ids[2 + len(q) + len(c)] == SEP
        assert enc.context_begin == 2 + len(q)
        assert enc.context_end == enc.context_begin + len(c)
        assert enc.context_token_offsets == tuple((b, e) for _, b, e in c)
        assert len(enc.token_ids) == 16
        assert sum(enc.pad_mask) == 3 + len(q) + len(c)

    def test_long_context_truncated_to_budget(self):
        enc = encode_for_inference(VOCAB, "what", "a " * 100, 10)
        assert len(enc.context_token_offsets) == 10 - 3 - 1

    def test_oversized_question_rejected(self):
        with pytest.raises(RequestError, match="budget"):
            encode_for_inference(VOCAB, "word " * 30, "apollo", 16)


class TestAsk:
    def test_answer_is_a_faithful_context_span(self):
        answer = ask(init_params(CONFIG), CONFIG, VOCAB, CONTEXT, QUESTION)
        assert CONTEXT[answer.char_start:answer.char_end] == answer.text
        assert answer.token_start <= answer.token_end
        assert answer.text in CONTEXT

    def test_trained_model_answers_the_apollo_question(self):
        answer = ask(trained_params(), CONFIG, VOCAB, CONTEXT, QUESTION)
        assert answer.text == "1968"

    def test_fixed_checkpoint_means_identical_responses(self):
        params = init_params(CONFIG)
        a = ask(params, CONFIG, VOCAB, CONTEXT, QUESTION)
        b = ask(params, CONFIG, VOCAB, CONTEXT, QUESTION)
        assert a == b

    def test_empty_inputs_rejected(self):
        params = init_params(CONFIG)
        with pytest.raises(RequestError):
            ask(params, CONFIG, VOCAB, CONTEXT, "   ")
        with pytest.raises(RequestError):
            ask(params, CONFIG, VOCAB, "", QUESTION)

    def test_random_inputs_always_yield_in_context_spans(self):
        import random
        words = ["apollo", "program", "flight", "ran", "from", "was", "in"]
        params = init_params(CONFIG)
        rng = random.Random(5)
        for _ in range(25):
            ctx = " ".join(rng.choices(words, k=rng.randint(3, 12)))
            q = " ".join(rng.choices(words, k=rng.randint(1, 5)))
            answer = ask(params, CONFIG, VOCAB, ctx, q)
            assert ctx[answer.char_start:answer.char_end] == answer.text


def history_lines():
    records = [
        RoundRecord(i, ("client_1", "client_2"), 9, f"{i:016x}", 0.1 * i,
                    0.2 * i, 0.5)
        for i in range(1, 6)
    ]
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)


def http(method, url, body=None, raw=None):
    data = raw if raw is not None else (
        None if body is None else json.dumps(body).encode("utf-8"))
    req = urllib.request.Request(url, data=data, method=method,
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, json.loads(resp.read().decode("utf-8")), resp.headers
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read().decode("utf-8")), err.headers


@pytest.fixture
def live(tmp_path):
    service = QAService(CONFIG, init_params(CONFIG), VOCAB,
                        tmp_path / "feedback.jsonl", tmp_path / "history.jsonl")
    (tmp_path / "history.jsonl").write_text(history_lines(), encoding="utf-8")
    server = build_server(service)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    try:
        yield base, service, tmp_path
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5.0)


FEEDBACK_BODY = {
    "question": QUESTION,
    "context_id": "apollo-1",
    "pred_start": 97,
    "pred_end": 101,
    "pred_text": "1968",
    "correction": None,
}


class TestHttpEndpoints:
    def test_health(self, live):
        base, _, _ = live
        status, body, _ = http("GET", base + "/health")
        assert (status, body) == (200, {"status": "ok"})

    def test_ask_round_trip_matches_direct_call(self, live):
        base, service, _ = live
        status, body, headers = http("POST", base + "/ask",
                                     {"context": CONTEXT, "question": QUESTION})
        assert status == 200
        assert body == service.ask(CONTEXT, QUESTION).to_dict()
        assert headers["Access-Control-Allow-Origin"] == "*"

    def test_ask_validation_errors_are_400(self, live):
        base, _, _ = live
        for bad in ({"context": CONTEXT}, {"question": QUESTION},
                    {"context": "", "question": QUESTION},
                    {"context": CONTEXT, "question": 7}):
            status, body, _ = http("POST", base + "/ask", bad)
            assert status == 400
            assert "error" in body

    def test_malformed_json_is_400(self, live):
        base, _, _ = live
        status, body, _ = http("POST", base + "/ask", raw=b"{not json")
        assert status == 400
        assert "error" in body
        status, body, _ = http("POST", base + "/ask", raw=b"[1, 2]")
        assert status == 400

    def test_oversized_body_is_413(self, live):
        base, _, _ = live
        raw = b'{"question": "' + b"q" * (1 << 20) + b'"}'
        status, body, _ = http("POST", base + "/ask", raw=raw)
        assert status == 413
        assert "error" in body

    def test_unknown_path_is_404(self, live):
        base, _, _ = live
        assert http("GET", base + "/nope")[0] == 404
        assert http("POST", base + "/nope", {})[0] == 404

    def test_feedback_is_durable_before_the_response(self, live):
        base, _, tmp = live
        status, body, _ = http("POST", base + "/feedback", FEEDBACK_BODY)
        assert status == 200
        records = list_feedback(tmp / "feedback.jsonl")
        assert [r.id for r in records] == [body["id"]]
        assert records[0].pred_text == "1968"
        assert records[0].correction is None
        assert records[0].context is None

    def test_feedback_correction_round_trips(self, live):
        base, _, tmp = live
        body = dict(FEEDBACK_BODY, correction="Apollo program")
        status, resp, _ = http("POST", base + "/feedback", body)
        assert status == 200
        assert list_feedback(tmp / "feedback.jsonl")[0].correction == "Apollo program"

    def test_feedback_validation_errors_are_400(self, live):
        base, _, tmp = live
        missing = {k: v for k, v in FEEDBACK_BODY.items() if k != "pred_text"}
        assert http("POST", base + "/feedback", missing)[0] == 400
        inverted = dict(FEEDBACK_BODY, pred_start=9, pred_end=3)
        assert http("POST", base + "/feedback", inverted)[0] == 400
        assert list_feedback(tmp / "feedback.jsonl") == []

    def test_context_logged_only_when_opted_in(self, live, monkeypatch):
        base, _, tmp = live
        with_context = dict(FEEDBACK_BODY, context=CONTEXT)
        http("POST", base + "/feedback", with_context)
        monkeypatch.setenv("FEDQAS_LOG_CONTEXT", "1")
        http("POST", base + "/feedback", with_context)
        records = list_feedback(tmp / "feedback.jsonl")
        assert records[0].context is None
        assert records[1].context == CONTEXT

    def test_rounds_returns_history_verbatim(self, live):
        base, _, _ = live
        status, body, _ = http("GET", base + "/rounds")
        assert status == 200
        assert [r["round"] for r in body] == [1, 2, 3, 4, 5]
        assert body[2]["val_em"] == pytest.approx(0.3)

    def test_options_preflight(self, live):
        base, _, _ = live
        req = urllib.request.Request(base + "/ask", method="OPTIONS")
        with urllib.request.urlopen(req, timeout=10) as resp:
            assert resp.status == 204
            assert resp.headers["Access-Control-Allow-Origin"] == "*"
            assert "POST" in resp.headers["Access-Control-Allow-Methods"]


class TestServiceObject:
    def test_rounds_without_history_file_is_empty(self, tmp_path):
        service = QAService(CONFIG, init_params(CONFIG), VOCAB,
                            tmp_path / "fb.jsonl", tmp_path / "absent.jsonl")
        assert service.rounds() == []

    def test_vocab_larger_than_embedding_rejected(self, tmp_path):
        small = ModelConfig(vocab_size=8, d_model=16, n_heads=2, n_layers=1,
                            d_ff=32, max_seq_len=64, max_answer_len=8, init_seed=7)
        with pytest.raises(ConfigError):
            QAService(small, init_params(small), VOCAB,
                      tmp_path / "fb.jsonl", tmp_path / "history.jsonl")

    def test_from_files_and_serve_round_trip(self, tmp_path):
        ckpt = tmp_path / "model.ckpt"
        save_checkpoint(ckpt, CONFIG, trained_params())
        VOCAB.save(tmp_path / "vocab.json")
        server = serve(ckpt, tmp_path / "vocab.json", tmp_path / "fb.jsonl",
                       tmp_path / "history.jsonl", host="127.0.0.1", port=0)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            base = f"http://127.0.0.1:{server.server_address[1]}"
            status, body, _ = http("POST", base + "/ask",
                                   {"context": CONTEXT, "question": QUESTION})
            assert status == 200
            assert body["text"] == "1968"
            assert http("GET", base + "/rounds")[1] == []
        finally:
            server.shutdown()
            server.server_close()
            thread.join(timeout=5.0)

    def test_reload_swaps_parameters_atomically(self, tmp_path):
        service = QAService(CONFIG, init_params(CONFIG), VOCAB,
                            tmp_path / "fb.jsonl", tmp_path / "history.jsonl")
        before = service.ask(CONTEXT, QUESTION)
        ckpt = tmp_path / "trained.ckpt"
        save_checkpoint(ckpt, CONFIG, trained_params())
        service.reload(ckpt)
        after = service.ask(CONTEXT, QUESTION)
        assert after.text == "1968"
        assert before.score != after.score

    def test_reload_rejects_changed_config(self, tmp_path):
        service = QAService(CONFIG, init_params(CONFIG), VOCAB,
                            tmp_path / "fb.jsonl", tmp_path / "history.jsonl")
        other = ModelConfig(vocab_size=64, d_model=16, n_heads=2, n_layers=1,
                            d_ff=32, max_seq_len=64, max_answer_len=8, init_seed=9)
        ckpt = tmp_path / "other.ckpt"
        save_checkpoint(ckpt, other, init_params(other))
        with pytest.raises(CheckpointError):
            service.reload(ckpt)
