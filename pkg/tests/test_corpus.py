import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from campus.corpus import (
    CorpusError,
    Dataset,
    EncodedCorpus,
    InstructionSample,
    Template,
    Turn,
    Vocab,
    encode,
    load_dataset,
    load_many,
    load_records,
    render_text,
    split_text,
    tokenize,
)


def write_jsonl(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")


class TestLoad:
    def test_file_order_ids(self, tmp_path):
        f = tmp_path / "d.jsonl"
        write_jsonl(f, [{"instruction": f"q{i}", "output": f"a{i}"} for i in range(3)])
        ds = load_dataset(str(f))
        assert [s.id for s in ds] == [0, 1, 2]

    def test_empty_file_is_valid(self, tmp_path):
        f = tmp_path / "d.jsonl"
        f.write_text("", encoding="utf-8")
        assert len(load_dataset(str(f))) == 0

    def test_missing_output_and_turns_names_line(self, tmp_path):
        f = tmp_path / "d.jsonl"
        write_jsonl(f, [{"instruction": "ok", "output": "fine"}, {"instruction": "broken"}])
        with pytest.raises(CorpusError, match="line 2"):
            load_dataset(str(f))

    def test_malformed_json_names_line(self, tmp_path):
        f = tmp_path / "d.jsonl"
        f.write_text('{"instruction": "a", "output": "b"}\nnot json\n', encoding="utf-8")
        with pytest.raises(CorpusError, match="line 2"):
            load_dataset(str(f))

    def test_duplicate_explicit_ids(self, tmp_path):
        f = tmp_path / "d.jsonl"
        write_jsonl(f, [{"id": 0, "output": "x"}, {"id": 0, "output": "y"}])
        with pytest.raises(CorpusError, match="duplicate"):
            load_dataset(str(f))

    def test_explicit_ids_must_be_contiguous(self, tmp_path):
        f = tmp_path / "d.jsonl"
        write_jsonl(f, [{"id": 5, "output": "x"}, {"id": 6, "output": "y"}])
        with pytest.raises(CorpusError, match="contiguous"):
            load_dataset(str(f))

    def test_source_default_and_field(self, tmp_path):
        f = tmp_path / "d.jsonl"
        write_jsonl(f, [{"output": "x"}, {"output": "y", "source": "math"}])
        ds = load_dataset(str(f), default_source="code")
        assert [s.source for s in ds] == ["code", "math"]

    def test_turns_must_alternate(self):
        rec = {"turns": [{"role": "user", "text": "a"}, {"role": "user", "text": "b"}]}
        with pytest.raises(CorpusError, match="alternate"):
            load_records([json.dumps(rec)])

    def test_load_many_assigns_global_ids(self, tmp_path):
        f1, f2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_jsonl(f1, [{"output": "x"}, {"output": "y"}])
        write_jsonl(f2, [{"output": "z"}])
        ds = load_many([str(f1), str(f2)], ["code", "math"])
        assert [(s.id, s.source) for s in ds] == [(0, "code"), (1, "code"), (2, "math")]

    def test_load_many_source_count_mismatch(self, tmp_path):
        f = tmp_path / "a.jsonl"
        write_jsonl(f, [{"output": "x"}])
        with pytest.raises(CorpusError, match="--source"):
            load_many([str(f)], ["a", "b"])


class TestRender:
    def test_single_turn_template(self):
        s = InstructionSample(id=0, instruction="Hello.", output="Hello! How can I help you today?")
        text = render_text(s)
        assert text == "### Instruction:\nHello.\n\n### Response:\nHello! How can I help you today?"

    def test_input_block_only_when_present(self):
        with_input = InstructionSample(id=0, instruction="q", input="data", output="a")
        without = InstructionSample(id=1, instruction="q", output="a")
        assert "### Input:\ndata" in render_text(with_input)
        assert "### Input:" not in render_text(without)

    def test_two_turn_markers_appear_twice(self):
        s = InstructionSample(
            id=0, turns=(Turn("user", "hi"), Turn("assistant", "yo"), Turn("user", "more"), Turn("assistant", "done"))
        )
        text = render_text(s)
        assert text.count("### Instruction:") == 2
        assert text.count("### Response:") == 2
        assert text.index("hi") < text.index("yo") < text.index("more") < text.index("done")

    def test_custom_template(self, tmp_path):
        f = tmp_path / "tpl.json"
        f.write_text(json.dumps({"instruction": "Q:\n", "response": "A:\n", "separator": "\n"}), encoding="utf-8")
        tpl = Template.from_file(str(f))
        s = InstructionSample(id=0, instruction="q", output="a")
        assert render_text(s, tpl) == "Q:\nq\nA:\na"

    @given(
        st.tuples(
            st.text(alphabet="abcXYZ 09", min_size=1, max_size=8),
            st.text(alphabet="abcXYZ 09", max_size=8),
            st.text(alphabet="abcXYZ 09", min_size=1, max_size=8),
        ),
        st.tuples(
            st.text(alphabet="abcXYZ 09", min_size=1, max_size=8),
            st.text(alphabet="abcXYZ 09", max_size=8),
            st.text(alphabet="abcXYZ 09", min_size=1, max_size=8),
        ),
    )
    @settings(max_examples=200, deadline=None)
    def test_injective_on_marker_free_fields(self, a, b):
        sa = InstructionSample(id=0, instruction=a[0], input=a[1], output=a[2])
        sb = InstructionSample(id=1, instruction=b[0], input=b[1], output=b[2])
        if a != b:
            assert render_text(sa) != render_text(sb)


class TestTokenize:
    def test_incremental_ids(self):
        v = Vocab()
        ts = tokenize("a b a", v)
        assert ts.tokens == [1, 2, 1]
        assert v.size == 3  # includes the unknown id

    def test_hello_dot_splits_punctuation(self):
        assert split_text("Hello.") == ["Hello", "."]

    def test_empty_text(self):
        assert tokenize("", Vocab()).tokens == []

    def test_frozen_vocab_maps_unknown_to_zero(self):
        v = Vocab()
        tokenize("a b", v)
        v.freeze()
        assert tokenize("a c", v).tokens == [1, 0]

    def test_round_trip_strings(self):
        v = Vocab()
        ts = tokenize("Hello. How are you?", v)
        assert ts.strings() == split_text("Hello. How are you?")

    @given(st.text(alphabet="abz .!?09", max_size=60))
    @settings(max_examples=200, deadline=None)
    def test_deterministic(self, text):
        assert tokenize(text, Vocab()).tokens == tokenize(text, Vocab()).tokens


class TestEncode:
    def test_output_mask_covers_exactly_the_output(self):
        s = InstructionSample(id=0, instruction="Hello.", output="Hello! How can I help you today?")
        v = Vocab()
        enc = encode(s, v)
        masked = [tok for tok, m in zip(enc.tokens, enc.output_mask) if m]
        assert [v.string_of(t) for t in masked] == split_text(s.output)
        assert enc.text[enc.mask_from_char :].startswith("Hello! How")

    def test_content_excludes_markers(self):
        s = InstructionSample(id=0, instruction="Hello.", output="Hello! How can I help you today?")
        enc = encode(s, Vocab())
        # 2 instruction tokens + 9 output tokens under the split rule
        assert enc.content_token_count == 11

    def test_multi_turn_mask_hits_assistant_turns_only(self):
        s = InstructionSample(id=0, turns=(Turn("user", "aa bb"), Turn("assistant", "cc"), Turn("user", "dd"), Turn("assistant", "ee ff")))
        v = Vocab()
        enc = encode(s, v)
        masked = [v.string_of(t) for t, m in zip(enc.tokens, enc.output_mask) if m]
        assert masked == ["cc", "ee", "ff"]

    def test_piecewise_tokenization_matches_whole_text(self):
        s = InstructionSample(id=0, instruction="Hello there.", input="x=1", output="Sure! Done.")
        v = Vocab()
        enc = encode(s, v)
        assert [v.string_of(t) for t in enc.tokens] == split_text(enc.text)

    def test_corpus_build_freezes_vocab(self):
        ds = Dataset([InstructionSample(id=0, instruction="a", output="b")])
        corpus = EncodedCorpus.build(ds)
        assert corpus.vocab.frozen
        assert 0 in corpus.by_id

    def test_dataset_digest_stable_and_content_sensitive(self):
        d1 = Dataset([InstructionSample(id=0, instruction="a", output="b")])
        d2 = Dataset([InstructionSample(id=0, instruction="a", output="b")])
        d3 = Dataset([InstructionSample(id=0, instruction="a", output="c")])
        assert d1.digest() == d2.digest()
        assert d1.digest() != d3.digest()
