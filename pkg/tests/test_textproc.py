import json

import pytest

from fedread.errors import EncodeError, ParseError, PartitionError
from fedread.textproc import (
    CLS, PAD, SEP, UNK, ClientShard, RawExample, Vocab,
    build_vocab, encode_example, load_squad, partition, read_shard,
    to_batch, tokenize, write_shard,
)

APOLLO = "The Apollo program ran from 1961 to 1972, and was supported by Gemini."


def make_squad_file(tmp_path, contexts_qas, name="squad.json"):
    data = {"version": "1.1", "data": [{
        "title": "t",
        "paragraphs": [
            {"context": ctx, "qas": qas} for ctx, qas in contexts_qas
        ],
    }]}
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


class TestTokenize:
    def test_hand_tokenized_example(self):
        assert tokenize("Project Apollo, 1968.") == [
            ("project", 0, 7),
            ("apollo", 8, 14),
            (",", 14, 15),
            ("1968", 16, 20),
            (".", 20, 21),
        ]

    def test_empty_text(self):
        assert tokenize("") == []

    def test_offsets_reproduce_tokens(self):
        text = "Dwight D. Eisenhower's administration (1953-1961)!"
        for token, b, e in tokenize(text):
            assert text[b:e].lower() == token

    def test_stable_on_own_output(self):
        text = "He said: 'go, now'."
        joined = " ".join(t for t, _, _ in tokenize(text))
        assert [t for t, _, _ in tokenize(joined)] == [t for t, _, _ in tokenize(text)]


class TestVocab:
    def test_build_from_tiny_corpus(self):
        vocab = build_vocab(["a a b"], max_size=6)
        assert vocab.size == 6
        assert vocab.token_to_id == {
            "[PAD]": 0, "[UNK]": 1, "[CLS]": 2, "[SEP]": 3, "a": 4, "b": 5,
        }

    def test_frequency_then_lexicographic(self):
        vocab = build_vocab(["b b c a a"], max_size=7)
        # a and b tie at 2, a sorts first; c trails
        assert vocab.token_to_id["a"] == 4
        assert vocab.token_to_id["b"] == 5
        assert vocab.token_to_id["c"] == 6

    def test_reserved_only_when_too_small(self):
        vocab = build_vocab(["a b c"], max_size=4)
        assert vocab.size == 4
        assert vocab.id_of("a") == UNK

    def test_deterministic(self):
        corpus = ["the quick brown fox", "the lazy dog"]
        assert build_vocab(corpus, 10).token_to_id == build_vocab(corpus, 10).token_to_id

    def test_save_load_round_trip(self, tmp_path):
        vocab = build_vocab(["x y z z"], max_size=8)
        vocab.save(tmp_path / "vocab.json")
        assert Vocab.load(tmp_path / "vocab.json").token_to_id == vocab.token_to_id


class TestLoadSquad:
    def test_minimal_fixture(self, tmp_path):
        path = make_squad_file(tmp_path, [(APOLLO, [{
            "id": "q1", "question": "How long did it run?",
            "answers": [{"text": "1961 to 1972", "answer_start": 28}],
        }])])
        data = load_squad(path)
        assert len(data.examples) == 1
        assert data.dropped_examples == 0
        ex = data.examples[0]
        assert ex.context[28:40] == "1961 to 1972"

    def test_misaligned_answer_dropped_with_warning(self, tmp_path, caplog):
        path = make_squad_file(tmp_path, [(APOLLO, [{
            "id": "q1", "question": "How long?",
            "answers": [{"text": "1961 to 1972", "answer_start": 5}],
        }])])
        with caplog.at_level("WARNING", logger="fedread.textproc"):
            data = load_squad(path)
        assert data.examples == []
        assert data.dropped_examples == 1
        assert sum(1 for r in caplog.records if r.levelname == "WARNING") == 1

    def test_partially_valid_answers_kept(self, tmp_path):
        path = make_squad_file(tmp_path, [(APOLLO, [{
            "id": "q1", "question": "How long?",
            "answers": [
                {"text": "1961 to 1972", "answer_start": 0},
                {"text": "1961 to 1972", "answer_start": 28},
            ],
        }])])
        data = load_squad(path)
        assert len(data.examples) == 1
        assert data.examples[0].answers == (("1961 to 1972", 28),)
        assert data.dropped_answers == 1

    def test_malformed_json_raises_with_location(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"data": [', encoding="utf-8")
        with pytest.raises(ParseError) as err:
            load_squad(path)
        assert "line" in str(err.value)

    def test_wrong_shape_raises(self, tmp_path):
        path = tmp_path / "odd.json"
        path.write_text('{"data": [{"paragraphs": [{"qas": [{}]}]}]}', encoding="utf-8")
        with pytest.raises(ParseError):
            load_squad(path)


class TestEncodeExample:
    def _vocab(self):
        return build_vocab([APOLLO.lower(), "when apollo ran from"], max_size=64)

    def test_answer_span_alignment(self):
        context = "apollo ran from 1961 to 1972"
        raw = RawExample("x", "t", context, "when", (("1961 to 1972", 16),))
        vocab = build_vocab([context, "when"], max_size=32)
        enc = encode_example(vocab, raw, max_seq_len=16)
        assert enc is not None
        # layout: [CLS] when [SEP] apollo ran from 1961 to 1972 [SEP]
        assert enc.start_pos == 6 and enc.end_pos == 8
        covered = enc.context_token_offsets[enc.start_pos - enc.context_begin:
                                            enc.end_pos - enc.context_begin + 1]
        assert context[covered[0][0]:covered[-1][1]] == "1961 to 1972"

    def test_segments_and_padding(self):
        raw = RawExample("x", "t", "alpha beta", "q", (("beta", 6),))
        vocab = build_vocab(["alpha beta q"], max_size=16)
        enc = encode_example(vocab, raw, max_seq_len=10)
        assert list(enc.segment_ids[:6]) == [0, 0, 0, 1, 1, 1]
        assert enc.token_ids[0] == CLS
        assert enc.token_ids[2] == SEP and enc.token_ids[5] == SEP
        assert all(t == PAD for t in enc.token_ids[6:])
        assert all(m == 0 for m in enc.pad_mask[6:])

    def test_truncated_answer_skipped(self):
        context = " ".join(f"w{i}" for i in range(30)) + " needle"
        raw = RawExample("x", "t", context, "find", ((("needle"), context.index("needle")),))
        vocab = build_vocab([context, "find"], max_size=64)
        assert encode_example(vocab, raw, max_seq_len=12) is None

    def test_question_too_long_raises(self):
        raw = RawExample("x", "t", "ctx", "a b c d e f", (("ctx", 0),))
        vocab = build_vocab(["ctx a b c d e f"], max_size=32)
        with pytest.raises(EncodeError):
            encode_example(vocab, raw, max_seq_len=8)

    def test_deterministic(self):
        raw = RawExample("x", "t", APOLLO, "what ran", (("Apollo program", 4),))
        vocab = self._vocab()
        assert encode_example(vocab, raw, 48) == encode_example(vocab, raw, 48)

    def test_oov_tokens_become_unk(self):
        raw = RawExample("x", "t", "zzz yyy", "qqq", (("zzz", 0),))
        vocab = build_vocab(["unrelated words only"], max_size=16)
        enc = encode_example(vocab, raw, max_seq_len=10)
        assert enc.token_ids[1] == UNK  # the question token
        assert enc.token_ids[3] == UNK  # first context token


def _encoded_pool(n):
    vocab = build_vocab(["alpha beta gamma delta"], max_size=32)
    out = []
    for i in range(n):
        raw = RawExample(f"ex{i}", "t", "alpha beta gamma", "q", (("beta", 6),))
        out.append(encode_example(vocab, raw, max_seq_len=12))
    return out


class TestPartition:
    def test_ten_examples_five_clients(self):
        shards, validation = partition(_encoded_pool(10), k=5, val_frac=0.2, seed=1)
        assert len(validation) == 2
        assert sorted(len(s) for s in shards) == [1, 1, 2, 2, 2]

    def test_zero_val_frac(self):
        shards, validation = partition(_encoded_pool(6), k=2, val_frac=0.0, seed=1)
        assert validation == []
        assert sum(len(s) for s in shards) == 6

    def test_deterministic_in_seed(self):
        pool = _encoded_pool(9)
        a = partition(pool, 3, 0.25, seed=42)
        b = partition(pool, 3, 0.25, seed=42)
        assert [s.examples for s in a[0]] == [s.examples for s in b[0]]
        assert a[1] == b[1]

    def test_disjoint_cover(self):
        pool = _encoded_pool(11)
        shards, validation = partition(pool, 4, 0.3, seed=3)
        seen = list(validation)
        for s in shards:
            seen.extend(s.examples)
        assert sorted(e.example_id for e in seen) == sorted(e.example_id for e in pool)

    def test_too_many_clients_rejected(self):
        with pytest.raises(PartitionError):
            partition(_encoded_pool(4), k=5, val_frac=0.2, seed=1)


class TestShardIO:
    def test_write_read_round_trip(self, tmp_path):
        shard = ClientShard("client_1", tuple(_encoded_pool(3)))
        write_shard(tmp_path / "client_1.jsonl", shard)
        loaded = read_shard(tmp_path / "client_1.jsonl", "client_1")
        assert loaded == shard

    def test_field_names_exact(self, tmp_path):
        shard = ClientShard("client_1", tuple(_encoded_pool(1)))
        write_shard(tmp_path / "s.jsonl", shard)
        line = json.loads((tmp_path / "s.jsonl").read_text().splitlines()[0])
        assert set(line) == {
            "example_id", "token_ids", "segment_ids", "pad_mask",
            "start_pos", "end_pos", "context_token_offsets",
        }


class TestToBatch:
    def test_round_trips_fields(self):
        pool = _encoded_pool(4)
        batch = to_batch(pool)
        assert batch.size == 4
        assert batch.start_pos[0] == pool[0].start_pos
        assert batch.token_ids.shape == (4, 12)
