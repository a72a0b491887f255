import itertools
import json
from collections import Counter

import numpy as np
import pytest
import torch

from videoqa.corpus import AnnotatedExample, build_vocabulary
from videoqa.evaluate import (
    EvalReport,
    evaluate,
    ivqa_accuracy,
    question_type_split,
    quartile_split,
    topk_hit,
)
from videoqa.model import TokenVocab, VideoQAModel
from videoqa.synth import content_word_vector
from conftest import make_store

GTS = ["spoon", "spoon", "fork", "knife", "cup"]


class TestIvqaAccuracy:
    def test_two_or_more_matches(self):
        assert ivqa_accuracy("spoon", GTS) == 1.0

    def test_single_match(self):
        assert ivqa_accuracy("fork", GTS) == 0.5

    def test_no_match(self):
        assert ivqa_accuracy("bowl", GTS) == 0.0

    def test_requires_exactly_five(self):
        with pytest.raises(ValueError, match="5"):
            ivqa_accuracy("spoon", ["spoon", "spoon"])

    def test_permutation_invariant(self):
        for perm in itertools.permutations(GTS):
            assert ivqa_accuracy("spoon", list(perm)) == 1.0
            assert ivqa_accuracy("fork", list(perm)) == 0.5


class TestTopkHit:
    def test_full_k_always_hits(self):
        scores = np.array([0.1, 0.9, 0.3])
        assert all(topk_hit(scores, t, 3) == 1 for t in range(3))

    def test_strict_max_hits_at_one(self):
        assert topk_hit(np.array([0.1, 5.0, 0.3]), 1, 1) == 1
        assert topk_hit(np.array([0.1, 5.0, 0.3]), 0, 1) == 0

    def test_tie_ranks_lower_index_first(self):
        # ranking of [3, 2, 2]: index 0, then 1 (tie, lower index), then 2
        scores = np.array([3.0, 2.0, 2.0])
        assert topk_hit(scores, 2, 2) == 0
        assert topk_hit(scores, 1, 2) == 1
        assert topk_hit(scores, 2, 3) == 1

    def test_monotone_in_k(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            scores = rng.integers(0, 4, size=8).astype(float)  # many ties
            target = int(rng.integers(0, 8))
            hits = [topk_hit(scores, target, k) for k in range(1, 9)]
            assert all(a <= b for a, b in zip(hits, hits[1:]))
            assert hits[-1] == 1

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        scores = rng.standard_normal(6)
        for target in range(6):
            for k in (1, 3, 6):
                assert topk_hit(scores, target, k) == topk_hit(scores + 100.0, target, k)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            topk_hit(np.zeros(3), 0, 4)


def ex(answer, question="What is it?", freq_name=None, answer_type=None, video="v"):
    return AnnotatedExample(
        video_id=video, question=question, answers=[answer], answer_type=answer_type
    )


class TestQuartileSplit:
    def test_distinct_frequencies(self):
        examples = [ex(f"a{i}") for i in range(8)]
        freqs = Counter({f"a{i}": 8 - i for i in range(8)})
        quartiles = quartile_split(examples, freqs)
        assert quartiles == [[0, 1], [2, 3], [4, 5], [6, 7]]

    def test_uniform_frequency_uses_tie_rules(self):
        examples = [ex(a) for a in ["d", "c", "b", "a", "h", "g", "f", "e"]]
        freqs = Counter({a: 3 for a in "abcdefgh"})
        quartiles = quartile_split(examples, freqs)
        assert [len(q) for q in quartiles] == [2, 2, 2, 2]
        # sorted by answer string ascending: a, b, c, d, e, f, g, h
        assert quartiles[0] == [3, 2]

    def test_remainder_goes_to_early_quartiles(self):
        examples = [ex(f"a{i}") for i in range(10)]
        freqs = Counter({f"a{i}": 10 - i for i in range(10)})
        sizes = [len(q) for q in quartile_split(examples, freqs)]
        assert sizes == [3, 3, 2, 2]

    def test_disjoint_cover_and_balance(self):
        rng = np.random.default_rng(2)
        for n in (1, 2, 3, 5, 9, 17):
            examples = [ex(f"a{rng.integers(0, 5)}") for _ in range(n)]
            freqs = Counter({f"a{i}": int(rng.integers(1, 9)) for i in range(5)})
            quartiles = quartile_split(examples, freqs)
            flat = [i for q in quartiles for i in q]
            assert sorted(flat) == list(range(n))
            assert len(quartiles) == 4
            assert len(quartiles[0]) >= len(quartiles[3]) >= len(quartiles[0]) - 1

    def test_unseen_answer_counts_as_zero_frequency(self):
        examples = [ex("rare"), ex("common")]
        freqs = Counter({"common": 5})
        quartiles = quartile_split(examples, freqs)
        assert quartiles[0] == [1]  # "common" first


class TestQuestionTypeSplit:
    def test_interrogative_word(self):
        groups = question_type_split([ex("a", question="What is shown?")])
        assert groups == {"what": [0]}

    def test_answer_type_tag_wins(self):
        groups = question_type_split([ex("a", answer_type="Color")])
        assert groups == {"color": [0]}

    def test_empty(self):
        assert question_type_split([]) == {}

    def test_non_interrogative_goes_to_other(self):
        groups = question_type_split(
            [ex("a", question="Name the tool."), ex("b", question="Where is it?")]
        )
        assert groups == {"other": [0], "where": [1]}


@pytest.fixture
def eval_setup(tmp_path, tiny_cfg, seeded_torch):
    """Random-parameter model over a 50-answer vocabulary and crafted features."""
    words = [f"w{i:02d}" for i in range(50)]
    vocab = build_vocabulary(words, min_count=1)
    token_vocab = TokenVocab.build(["you check the what here"] + words)
    tiny_cfg.token_vocab_size = len(token_vocab)
    model = VideoQAModel(tiny_cfg)
    model.eval()
    rng = np.random.default_rng(4)
    feats = {f"v{i}": rng.standard_normal((6, tiny_cfg.d_v)).astype(np.float32) for i in range(8)}
    store = make_store(tmp_path, feats)
    return model, token_vocab, vocab, store, words


class TestEvaluate:
    def test_random_model_matches_analytic_baseline(self, eval_setup):
        model, token_vocab, vocab, store, words = eval_setup
        rng = np.random.default_rng(5)
        examples = [
            AnnotatedExample(
                video_id=f"v{rng.integers(0, 8)}",
                question="You check the what here?",
                answers=[words[rng.integers(0, 50)]],
            )
            for _ in range(1000)
        ]
        report = evaluate(model, token_vocab, examples, vocab, store, protocol="zero_shot")
        # uniform targets independent of a fixed predictor: hits ~ Binomial(1000, 1/50)
        assert 0.002 <= report.top1 <= 0.05
        assert report.oov_fraction == 0.0
        assert report.n_samples == 1000

    def test_oov_sample_scores_zero_and_is_counted(self, eval_setup):
        model, token_vocab, vocab, store, words = eval_setup
        examples = [
            AnnotatedExample("v0", "You check the what here?", [words[0]]),
            AnnotatedExample("v1", "You check the what here?", ["not in vocabulary"]),
        ]
        report = evaluate(model, token_vocab, examples, vocab, store)
        assert report.oov_fraction == 0.5

    def test_empty_set_rejected(self, eval_setup):
        model, token_vocab, vocab, store, _ = eval_setup
        with pytest.raises(ValueError, match="empty"):
            evaluate(model, token_vocab, [], vocab, store)

    def test_ivqa_metric_needs_five_answers(self, eval_setup):
        model, token_vocab, vocab, store, words = eval_setup
        examples = [AnnotatedExample("v0", "What?", [words[0]] * 3)]
        with pytest.raises(ValueError, match="5"):
            evaluate(model, token_vocab, examples, vocab, store, metrics=("top1", "ivqa"))

    def test_report_recomputable_from_dump(self, eval_setup, tmp_path):
        model, token_vocab, vocab, store, words = eval_setup
        rng = np.random.default_rng(6)
        examples = [
            AnnotatedExample(
                f"v{rng.integers(0, 8)}", "You check the what here?", [words[rng.integers(0, 50)]]
            )
            for _ in range(60)
        ]
        dump = tmp_path / "preds.jsonl"
        report = evaluate(model, token_vocab, examples, vocab, store, dump_path=dump)
        rows = [json.loads(line) for line in dump.read_text().splitlines()]
        assert len(rows) == 60
        assert set(rows[0]) == {"video_id", "question", "pred", "score"}
        recomputed = np.mean([row["pred"] in exm.answers for row, exm in zip(rows, examples)])
        assert abs(recomputed - report.top1) < 1e-12

    def test_deterministic(self, eval_setup):
        model, token_vocab, vocab, store, words = eval_setup
        examples = [AnnotatedExample("v0", "You check the what here?", [words[3]])] * 5
        r1 = evaluate(model, token_vocab, examples, vocab, store)
        r2 = evaluate(model, token_vocab, examples, vocab, store)
        assert r1 == r2

    def test_quartiles_and_types_in_report(self, eval_setup):
        model, token_vocab, vocab, store, words = eval_setup
        examples = [
            AnnotatedExample("v0", "What now?", [words[0]], answer_type="object"),
            AnnotatedExample("v1", "Where now?", [words[1]], answer_type="action"),
            AnnotatedExample("v2", "Who now?", [words[2]]),
            AnnotatedExample("v3", "How now?", [words[3]]),
        ]
        freqs = Counter({words[0]: 9, words[1]: 5, words[2]: 2, words[3]: 1})
        report = evaluate(model, token_vocab, examples, vocab, store, train_freqs=freqs)
        assert set(report.per_quartile) == {"Q1", "Q2", "Q3", "Q4"}
        assert set(report.per_type) == {"object", "action", "who", "how"}
        text = report.format_text()
        assert "quartile" in text and "Q1" in text

    def test_report_round_trips_to_json(self, eval_setup, tmp_path):
        model, token_vocab, vocab, store, words = eval_setup
        examples = [AnnotatedExample("v0", "What?", [words[0]] * 5)]
        report = evaluate(model, token_vocab, examples, vocab, store, metrics=("top1", "top10", "ivqa"))
        report.save(tmp_path / "r.json")
        data = json.loads((tmp_path / "r.json").read_text())
        assert data == report.to_dict()
        assert data["ivqa_acc"] in (0.0, 0.5, 1.0)


def test_memorized_model_reaches_perfect_top1(tmp_path, tiny_cfg):
    """Overfit oracle for evaluate(): the memorizing model scores 1.0."""
    from videoqa.corpus import QATriplet
    from videoqa.train import TrainConfig, prepare_pretrain_examples, train

    words = ["bread", "spoon", "bowl", "knife"]
    rng = np.random.default_rng(7)
    feats, triplets, examples = {}, [], []
    for i, w in enumerate(words):
        mat = content_word_vector(w, tiny_cfg.d_v)[None, :].repeat(6, axis=0)
        mat += 0.05 * rng.standard_normal(mat.shape).astype(np.float32)
        feats[f"v{i}"] = mat
        triplets.append(QATriplet(f"v{i}", 0.0, 6.0, "You check the what here?", w))
        examples.append(
            AnnotatedExample(f"v{i}", "You check the what here?", [w], start_s=0.0, end_s=6.0)
        )
    store = make_store(tmp_path, feats)
    token_vocab = TokenVocab.build([t.question for t in triplets] + words)
    tiny_cfg.token_vocab_size = len(token_vocab)
    torch.manual_seed(0)
    model = VideoQAModel(tiny_cfg)
    data = prepare_pretrain_examples(triplets, store, token_vocab, tiny_cfg)
    train(model, token_vocab, TrainConfig(clips_per_batch=4, videos_per_batch=4, epochs=150, lr0=3e-3, seed=0), data)

    vocab = build_vocabulary(words, min_count=1)
    report = evaluate(model, token_vocab, examples, vocab, store)
    assert report.top1 == 1.0
    assert report.oov_fraction == 0.0
