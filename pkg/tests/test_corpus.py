import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from videoqa.corpus import (
    AnnotatedExample,
    AnswerVocabulary,
    CaptionRecord,
    CorpusError,
    FeatureStore,
    QATriplet,
    TranscriptSegment,
    VideoFeatures,
    build_vocabulary,
    normalize_answer,
    normalize_segments,
    read_annotations,
    read_captions,
    read_transcripts,
    read_triplets,
    read_video_features,
    sample_features,
    write_annotations,
    write_captions,
    write_transcripts,
    write_triplets,
    write_video_features,
)
from conftest import make_store


class TestNormalizeAnswer:
    def test_lowercase_collapse_strip(self):
        assert normalize_answer(" The  Spoon.") == "the spoon"

    def test_identity(self):
        assert normalize_answer("spoon") == "spoon"

    def test_empty(self):
        assert normalize_answer("") == ""

    def test_strips_all_terminal_punctuation(self):
        assert normalize_answer("really?!") == "really"
        assert normalize_answer("a, b,") == "a, b"

    @given(st.text(max_size=60))
    @settings(max_examples=200)
    def test_idempotent(self, text):
        once = normalize_answer(text)
        assert normalize_answer(once) == once


class TestBuildVocabulary:
    def test_min_count_threshold(self):
        answers = ["cat"] * 3 + ["dog"] * 2 + ["fox"]
        assert build_vocabulary(answers, min_count=2).entries == ["cat", "dog"]

    def test_tie_breaks_lexicographic_with_max_size(self):
        answers = ["b"] * 5 + ["a"] * 5 + ["c"]
        vocab = build_vocabulary(answers, min_count=1, max_size=2)
        assert vocab.entries == ["a", "b"]

    def test_empty_result(self):
        vocab = build_vocabulary(["x"], min_count=2)
        assert vocab.entries == [] and len(vocab) == 0

    def test_index_inverse_of_entries(self):
        vocab = build_vocabulary(["a", "b", "b", "c"], min_count=1)
        assert all(vocab.entries[i] == a for a, i in vocab.index.items())

    def test_order_independent(self, rng):
        answers = [f"a{i}" for i in range(30) for _ in range(i % 5 + 1)]
        reference = build_vocabulary(answers, min_count=2, max_size=10).entries
        for _ in range(5):
            shuffled = list(answers)
            rng.shuffle(shuffled)
            assert build_vocabulary(shuffled, min_count=2, max_size=10).entries == reference

    def test_save_load_roundtrip(self, tmp_path):
        vocab = build_vocabulary(["b", "b", "a"], min_count=1)
        vocab.save(tmp_path / "v.txt")
        assert AnswerVocabulary.load(tmp_path / "v.txt").entries == vocab.entries

    def test_min_count_must_be_positive(self):
        with pytest.raises(ValueError):
            build_vocabulary(["a"], min_count=0)


class TestTripletIO:
    def _triplets(self):
        return [
            QATriplet("v1", 0.0, 4.25, "Add the what to the bowl?", "brown sugar"),
            QATriplet("v1", 4.25, 9.5, "Use a what?", "spoon"),
            QATriplet("v2", 0.1 + 0.2, 1e-9 + 2.5, "What now?", "bread"),
        ]

    def test_roundtrip_identity(self, tmp_path):
        path = tmp_path / "t.jsonl"
        original = self._triplets()
        write_triplets(original, path)
        assert read_triplets(path) == original

    def test_float_precision_preserved(self, tmp_path):
        path = tmp_path / "t.jsonl"
        write_triplets(self._triplets(), path)
        back = read_triplets(path)
        assert back[2].start_s == 0.1 + 0.2
        assert abs(back[2].end_s - (1e-9 + 2.5)) < 1e-9

    def test_missing_field_names_it(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text('{"video_id": "v", "start_s": 0, "end_s": 1, "question": "Q?"}\n')
        with pytest.raises(CorpusError, match="answer"):
            read_triplets(path)

    def test_malformed_line_carries_line_number(self, tmp_path):
        path = tmp_path / "t.jsonl"
        good = '{"video_id": "v", "start_s": 0, "end_s": 1, "question": "Q?", "answer": "a"}'
        path.write_text(good + "\n{not json\n")
        with pytest.raises(CorpusError, match="line 2"):
            read_triplets(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text("")
        assert read_triplets(path) == []


def test_transcripts_roundtrip(tmp_path):
    transcripts = {
        "v1": [TranscriptSegment("v1", 0.0, 3.5, "hello there"),
               TranscriptSegment("v1", 3.5, 7.0, "big bowl")],
        "v2": [TranscriptSegment("v2", 1.0, 2.0, "one")],
    }
    path = tmp_path / "tr.jsonl"
    write_transcripts(transcripts, path)
    assert read_transcripts(path) == transcripts


def test_captions_roundtrip(tmp_path):
    records = [CaptionRecord("v1", "woman slicing fresh bread", 4.0)]
    path = tmp_path / "c.jsonl"
    write_captions(records, path)
    assert read_captions(path) == records


def test_annotations_roundtrip_and_normalization(tmp_path):
    path = tmp_path / "a.jsonl"
    path.write_text(
        json.dumps({"video_id": "v", "question": "What?", "answers": ["The Spoon.", "spoon"],
                    "answer_type": "Object", "start_s": 1.0, "end_s": 3.0}) + "\n"
    )
    (ex,) = read_annotations(path)
    assert ex.answers == ["the spoon", "spoon"]
    assert ex.answer_type == "Object"
    write_annotations([ex], tmp_path / "b.jsonl")
    assert read_annotations(tmp_path / "b.jsonl") == [ex]


def test_annotations_require_answers(tmp_path):
    path = tmp_path / "a.jsonl"
    path.write_text(json.dumps({"video_id": "v", "question": "What?", "answers": []}) + "\n")
    with pytest.raises(CorpusError, match="answers"):
        read_annotations(path)


class TestNormalizeSegments:
    def test_sorts_and_drops_zero_duration(self):
        segs = [
            TranscriptSegment("v", 5.0, 8.0, "later"),
            TranscriptSegment("v", 0.0, 0.0, "empty duration"),
            TranscriptSegment("v", 1.0, 4.0, "earlier"),
        ]
        cleaned, dropped = normalize_segments(segs)
        assert [s.text for s in cleaned] == ["earlier", "later"]
        assert dropped == 1

    def test_clamps_overlap(self):
        segs = [
            TranscriptSegment("v", 0.0, 5.0, "first"),
            TranscriptSegment("v", 3.0, 8.0, "second"),
        ]
        cleaned, dropped = normalize_segments(segs)
        assert cleaned[1].start_s == 5.0 and dropped == 0

    def test_drops_fully_contained(self):
        segs = [
            TranscriptSegment("v", 0.0, 5.0, "outer"),
            TranscriptSegment("v", 1.0, 4.0, "inner"),
        ]
        cleaned, dropped = normalize_segments(segs)
        assert len(cleaned) == 1 and dropped == 1

    def test_drops_blank_text(self):
        cleaned, dropped = normalize_segments([TranscriptSegment("v", 0.0, 1.0, "   ")])
        assert cleaned == [] and dropped == 1


class TestSampleFeatures:
    def test_identity_when_sizes_match(self, rng):
        vf = VideoFeatures("v", rng.standard_normal((20, 4)).astype(np.float32))
        out, mask = sample_features(vf, 20)
        assert np.array_equal(out, vf.features) and mask.all()

    def test_zero_pads_short_video(self, rng):
        vf = VideoFeatures("v", rng.standard_normal((5, 4)).astype(np.float32))
        out, mask = sample_features(vf, 20)
        assert np.array_equal(out[:5], vf.features)
        assert not out[5:].any()
        assert mask[:5].all() and not mask[5:].any()

    def test_equally_spaced_indices(self, rng):
        # hand-derived from the index rule: round(i * 39 / 3) = 0, 13, 26, 39
        vf = VideoFeatures("v", rng.standard_normal((40, 3)).astype(np.float32))
        out, mask = sample_features(vf, 4)
        expected_rows = vf.features[[0, 13, 26, 39]]
        assert np.array_equal(out, expected_rows) and mask.all()

    def test_single_target_row_selects_first(self, rng):
        vf = VideoFeatures("v", rng.standard_normal((7, 3)).astype(np.float32))
        out, mask = sample_features(vf, 1)
        assert np.array_equal(out[0], vf.features[0]) and mask.all()

    def test_output_shape_and_mask_consistency(self, rng):
        for big_t in (1, 3, 9, 24):
            for t in (1, 4, 9, 16):
                vf = VideoFeatures("v", rng.standard_normal((big_t, 5)).astype(np.float32))
                out, mask = sample_features(vf, t)
                assert out.shape == (t, 5) and mask.shape == (t,)
                assert mask.sum() == min(big_t, t)
                # endpoint-inclusive: first row always represented,
                # last row too whenever more than one row is selected
                assert np.array_equal(out[0], vf.features[0])
                if big_t >= t >= 2:
                    assert np.array_equal(out[-1], vf.features[-1])


class TestFeatureFiles:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        feats = rng.standard_normal((13, 7)).astype(np.float32)
        path = tmp_path / "v.vqf"
        write_video_features(VideoFeatures("v", feats), path)
        back = read_video_features(path, "v")
        assert back.video_id == "v"
        assert back.features.tobytes() == feats.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.vqf"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CorpusError, match="magic"):
            read_video_features(path)

    def test_nan_rejected(self):
        feats = np.zeros((2, 2), dtype=np.float32)
        feats[0, 0] = np.nan
        with pytest.raises(CorpusError, match="NaN"):
            VideoFeatures("v", feats)

    def test_store_clip_bounds(self, tmp_path, rng):
        feats = rng.standard_normal((10, 3)).astype(np.float32)
        store = make_store(tmp_path, {"v": feats})
        clip = store.clip("v", 2.3, 5.7)
        assert np.array_equal(clip.features, feats[2:6])
        whole = store.clip("v", None, None)
        assert np.array_equal(whole.features, feats)

    def test_store_clip_never_empty(self, tmp_path, rng):
        feats = rng.standard_normal((4, 3)).astype(np.float32)
        store = make_store(tmp_path, {"v": feats})
        clip = store.clip("v", 3.9, 3.95)
        assert clip.features.shape[0] >= 1

    def test_store_missing_video(self, tmp_path, rng):
        store = make_store(tmp_path, {"v": rng.standard_normal((2, 3))})
        with pytest.raises(KeyError, match="nope"):
            store.get("nope")
