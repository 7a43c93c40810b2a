import json

import pytest

from clcbench.dataset import generate_synthetic, load_dataset, save_dataset
from clcbench.errors import DataError


class TestLoadDataset:
    def test_single_item(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(
            json.dumps({"id": "q1", "question": "who?", "chunks": ["text"], "answers": ["a"]}) + "\n"
        )
        items = load_dataset(path)
        assert len(items) == 1
        assert items[0].id == "q1"

    def test_missing_field_names_line_and_field(self, tmp_path):
        path = tmp_path / "d.jsonl"
        good = json.dumps({"id": "q1", "question": "who?", "chunks": ["c"], "answers": ["a"]})
        bad = json.dumps({"id": "q2", "question": "what?", "chunks": ["c"]})
        path.write_text(good + "\n" + bad + "\n")
        with pytest.raises(DataError, match=r"line 2: missing field 'answers'"):
            load_dataset(path)

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(DataError, match="line 1"):
            load_dataset(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text("")
        with pytest.raises(DataError):
            load_dataset(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope.jsonl")

    def test_round_trip_order_preserved(self, tmp_path):
        items = generate_synthetic(n_items=100, n_chunks=2, chunk_len=48, seed=4)
        path = tmp_path / "d.jsonl"
        save_dataset(items, path)
        loaded = load_dataset(path)
        assert len(loaded) == 100
        assert [it.id for it in loaded] == [it.id for it in items]
        assert [it.answers for it in loaded] == [it.answers for it in items]


class TestGenerateSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(5, 3, 64, seed=9)
        b = generate_synthetic(5, 3, 64, seed=9)
        assert [it.chunks for it in a] == [it.chunks for it in b]
        assert [it.question for it in a] == [it.question for it in b]

    def test_shapes(self):
        items = generate_synthetic(5, 4, 64, seed=1)
        assert len(items) == 5
        for it in items:
            assert len(it.chunks) == 4
            assert it.question
            assert len(it.answers) == 1

    def test_answer_appears_in_exactly_one_chunk(self):
        for seed in (0, 1, 2):
            for it in generate_synthetic(20, 3, 64, seed=seed):
                hits = sum(1 for c in it.chunks if it.answers[0] in c)
                assert hits == 1, (it.id, it.answers)

    def test_chunks_reach_target_length(self):
        for it in generate_synthetic(5, 2, 80, seed=3):
            for c in it.chunks:
                assert len(c) >= 80

    def test_bad_sizes(self):
        with pytest.raises(DataError):
            generate_synthetic(0, 2, 64, seed=0)
