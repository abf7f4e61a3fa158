import numpy as np
import pytest

from lmkrec.errors import IntegrityError, ParamError
from lmkrec.knn import SearchResult, top_k_search
from lmkrec.recognition import (
    FusionParams,
    Prediction,
    aggregate_class_scores,
    canonical,
    fuse_with_classifier,
    predict,
    predict_from_search,
    read_classifier_probs,
    read_predictions_csv,
    write_predictions_csv,
)
from lmkrec.store import DescriptorSet
from lmkrec.synth import SynthSpec, generate_synthetic


def result(sims, rows=None, qid="q"):
    sims = np.asarray([sims], dtype=np.float32)
    rows = np.arange(sims.shape[1]) if rows is None else np.asarray(rows)
    return SearchResult((qid,), rows[None, :], sims)


class TestAggregate:
    def test_single_class_top3_sum(self):
        table = aggregate_class_scores(result([0.9, 0.8, 0.7, 0.6]), [4, 4, 4, 4], 3)
        assert table[0] == {4: pytest.approx(2.4, abs=1e-6)}

    def test_alternating_classes_k1(self):
        table = aggregate_class_scores(result([0.9, 0.8, 0.7, 0.6]), [1, 2, 1, 2], 1)
        assert table[0] == {1: pytest.approx(0.9, abs=1e-6), 2: pytest.approx(0.8, abs=1e-6)}

    def test_nonlandmark_neighbors_excluded(self):
        assert aggregate_class_scores(result([0.9, 0.8]), [-1, -1], 3) == [{}]

    def test_fewer_neighbors_than_k_agg(self):
        table = aggregate_class_scores(result([0.5, 0.25]), [3, 3], 5)
        assert table[0][3] == pytest.approx(0.75, abs=1e-7)

    def test_missing_labels(self):
        with pytest.raises(IntegrityError):
            aggregate_class_scores(result([0.5]), None, 3)

    def test_monotone_in_neighbor_similarity(self):
        labels = [1, 2, 1, 2, 1]
        base = aggregate_class_scores(result([0.9, 0.8, 0.5, 0.4, 0.3]), labels, 3)[0]
        bumped = aggregate_class_scores(result([0.9, 0.8, 0.6, 0.4, 0.3]), labels, 3)[0]
        assert bumped[1] >= base[1]


class TestFuse:
    def test_absent_prob_identity(self):
        assert fuse_with_classifier(2.4, None, 0.5) == 2.4

    def test_alpha_zero_identity(self):
        assert fuse_with_classifier(2.4, 0.1, 0.0) == 2.4

    def test_hand_value(self):
        assert fuse_with_classifier(2.4, 0.49, 0.5) == pytest.approx(1.68, rel=1e-12)

    def test_bad_prob(self):
        with pytest.raises(ParamError):
            fuse_with_classifier(1.0, 1.2, 0.5)


class TestPredict:
    def test_single_class_self_match(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((4, 8))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        index = DescriptorSet(ids=list("abcd"), matrix=m, labels=[7, 7, 7, 7], normalized=True)
        q = DescriptorSet(ids=["q"], matrix=m[:1], normalized=True)
        (p,) = predict(q, index, params=FusionParams(k_agg=3))
        res = top_k_search(q, index, 4)
        assert p.landmark == 7
        assert p.confidence == pytest.approx(float(np.maximum(res.similarities[0, :3].astype(float), 0).sum()), rel=1e-12)

    def test_abstains_when_all_neighbors_nonlandmark(self):
        index = DescriptorSet(ids=["a", "b"], matrix=np.eye(2), labels=[-1, -1], normalized=True)
        q = DescriptorSet(ids=["q"], matrix=[[1.0, 0.0]], normalized=True)
        assert predict(q, index) == [Prediction("q", -1, 0.0)]

    def test_tie_goes_to_lower_landmark(self):
        preds = predict_from_search(result([0.5, 0.5]), [9, 3], params=FusionParams(k_agg=1))
        assert preds[0].landmark == 3

    def test_classifier_can_flip_argmax(self):
        res = result([0.9, 0.8])
        probs = {"q": {1: 0.01, 2: 0.99}}
        assert predict_from_search(res, [1, 2], probs, FusionParams(k_agg=1, alpha=1.0))[0].landmark == 2

    def test_zero_prob_abstains(self):
        res = result([0.9])
        assert predict_from_search(res, [1], {"q": {1: 0.0}}, FusionParams(k_agg=1))[0].abstains

    def test_k_agg_above_k(self):
        with pytest.raises(ParamError):
            predict_from_search(result([0.9]), [1], params=FusionParams(k_agg=3))

    def test_scaling_similarities_scales_confidence(self):
        rng = np.random.default_rng(1)
        sims = np.sort(rng.uniform(0.1, 1, (20, 10)), axis=1)[:, ::-1].astype(np.float32)
        rows = np.tile(np.arange(10), (20, 1))
        labels = rng.integers(0, 4, 10)
        ids = tuple(f"q{i}" for i in range(20))
        a = predict_from_search(SearchResult(ids, rows, sims), labels)
        b = predict_from_search(SearchResult(ids, rows, (sims * np.float32(0.5))), labels)
        for x, y in zip(a, b):
            assert x.landmark == y.landmark
            assert y.confidence == pytest.approx(0.5 * x.confidence, rel=1e-6)

    def test_clustered_five_class_accuracy(self):
        spec = SynthSpec(num_landmarks=5, images_per_landmark=20, queries_per_landmark=40,
                         num_distractor_queries=0, num_nonlandmark_refs=10, dim=64,
                         sigma=0.5, seed=42)
        data = generate_synthetic(spec)
        preds = predict(data.queries, data.index)
        acc = np.mean([p.landmark == data.truth[p.query_id] for p in preds])
        assert acc >= 0.95

    def test_deterministic(self):
        data = generate_synthetic(SynthSpec(num_landmarks=8, dim=32, num_distractor_queries=20, seed=3))
        assert predict(data.queries, data.index) == predict(data.queries, data.index, workers=4)


class TestPredictionType:
    def test_abstention_must_have_zero_confidence(self):
        with pytest.raises(IntegrityError):
            Prediction("q", -1, 0.5)

    def test_suppressed_flag(self):
        assert Prediction("q", 3, -1.5).suppressed


class TestCsv:
    def test_round_trip(self, tmp_path):
        preds = [Prediction("a", 3, 1.2345678), Prediction("b", -1, 0.0), Prediction("c", 5, -2.5)]
        path = tmp_path / "p.csv"
        write_predictions_csv(preds, path)
        assert path.read_text().splitlines() == [
            "query_id,landmark_id,confidence", "a,3,1.234568", "b,,0.000000", "c,5,-2.500000"]
        back = read_predictions_csv(path)
        assert back == [Prediction("a", 3, canonical(1.2345678)), preds[1], preds[2]]

    def test_explicit_abstain_label(self, tmp_path):
        path = tmp_path / "p.csv"
        write_predictions_csv([Prediction("b", -1, 0.0)], path, abstain_as_empty=False)
        assert path.read_text().splitlines()[1] == "b,-1,0.000000"
        assert read_predictions_csv(path)[0].landmark == -1

    def test_classifier_probs(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("query_id,landmark_id,prob\nq1,4,0.25\nq1,5,0.5\n")
        assert read_classifier_probs(path) == {"q1": {4: 0.25, 5: 0.5}}
        path.write_text("query_id,landmark_id,prob\nq1,4,1.5\n")
        with pytest.raises(ParamError):
            read_classifier_probs(path)
