'''
Tests for retrieval recall, zero-shot classification, the length probe and the report writers.
'''

import json

import numpy as np
import pytest

from numerics import ContractViolation
from data_synth import PROMPT_TEMPLATES, generate_classification_set
from evaluation import (
    DEFAULT_PROBE_LENGTHS,
    LengthProbeCurve,
    effective_length_probe,
    evaluate_retrieval,
    predict_classes,
    recall_at_k,
    resolve_probe_lengths,
    retrieval_payload,
    write_json,
    write_probe_csv,
    zero_shot_classify,
)
from visualizations import (
    PROBE_DIV_ID,
    create_ablation_plot,
    create_probe_plot,
    write_figure,
)
from conftest import TINY_SYNTH, unit_rows


def brute_force_recall(sim, k):
    '''Count, per query, the gallery items that beat the target or tie it from a lower index.'''
    hits = 0
    for q in range(sim.shape[0]):
        target = sim[q, q]
        better = np.sum(sim[q] > target) + np.sum(sim[q, :q] == target)
        hits += better < k
    return hits / sim.shape[0]


# -------------------------------------------------------------------------------------------------
# Recall@K
# -------------------------------------------------------------------------------------------------


class TestRecallAtK:

    def test_matches_brute_force(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            n = int(rng.integers(1, 17))
            img = unit_rows(rng.normal(size=(n, 4)))
            txt = unit_rows(rng.normal(size=(n, 4)))
            reports = recall_at_k(img, txt, ks=(1, 5, 10))
            sim = img @ txt.T
            for k in (1, 5, 10):
                assert reports['image_to_text'].recall(k) == pytest.approx(brute_force_recall(sim, k))
                assert reports['text_to_image'].recall(k) == pytest.approx(brute_force_recall(sim.T, k))

    def test_perfect_pairing(self):
        reports = recall_at_k(np.eye(5), np.eye(5))
        assert reports['image_to_text'].recalls == [1.0, 1.0, 1.0]

    def test_reversed_pairing(self):
        img = np.eye(4)
        reports = recall_at_k(img, img[::-1], ks=(1, 4))
        assert reports['text_to_image'].recall(1) == 0.0
        assert reports['text_to_image'].recall(4) == 1.0

    def test_ties_go_to_lower_index(self):
        same = np.tile([[1.0, 0.0]], (4, 1))
        # only query 0 has its target at the lowest tied index
        assert recall_at_k(same, same, ks=(1, 2))['image_to_text'].recalls == [0.25, 0.5]

    def test_duplicate_gallery_item(self):
        e = np.eye(3)
        img = e[[0, 0, 2]]
        txt = e[[0, 0, 2]]
        report = recall_at_k(img, txt, ks=(1, 2))['image_to_text']
        assert report.recall(1) == pytest.approx(2 / 3)
        assert report.recall(2) == 1.0

    def test_contracts(self):
        with pytest.raises(ContractViolation):
            recall_at_k(np.eye(3), np.eye(2, 3))
        with pytest.raises(ContractViolation):
            recall_at_k(np.eye(3), np.eye(3), ks=(5, 1))
        with pytest.raises(ContractViolation):
            recall_at_k(2 * np.eye(3), np.eye(3))

    def test_report_dict(self):
        report = recall_at_k(np.eye(2), np.eye(2), ks=(1,))['text_to_image']
        assert report.to_dict() == {'direction': 'text_to_image', 'ks': [1], 'recalls': [1.0], 'n': 2}

    def test_evaluate_retrieval_shapes(self, tiny_model, tiny_records, vocab):
        reports = evaluate_retrieval(tiny_model, tiny_records, vocab, ks=(1, 5))
        assert set(reports) == {'long', 'short'}
        for kind in reports.values():
            for report in kind.values():
                assert report.n_queries == 8
                assert all(0.0 <= r <= 1.0 for r in report.recalls)
                assert report.recalls == sorted(report.recalls)
        payload = retrieval_payload(reports)
        assert [d['direction'] for d in payload['long']] == ['image_to_text', 'text_to_image']


# -------------------------------------------------------------------------------------------------
# Zero-shot classification
# -------------------------------------------------------------------------------------------------


class TestZeroShot:

    def test_single_class_is_perfect(self, tiny_model, vocab):
        images = [np.zeros((4, 4))] * 3
        assert zero_shot_classify(tiny_model, images, [0, 0, 0], ['red cat'], PROMPT_TEMPLATES, vocab) == 1.0

    def test_ties_pick_lower_class(self):
        classes = unit_rows([[1.0, 0.0], [1.0, 0.0]])
        assert predict_classes(unit_rows([[1.0, 0.2]]), classes).tolist() == [0]

    def test_prediction_invariant_to_image_scaling(self, rng):
        classes = unit_rows(rng.normal(size=(5, 6)))
        images = rng.normal(size=(10, 6))
        np.testing.assert_array_equal(predict_classes(images, classes), predict_classes(3.5 * images, classes))

    def test_accuracy_on_generated_set(self, tiny_model, vocab):
        images, labels, names = generate_classification_set(4, 3, 4, TINY_SYNTH)
        accuracy = zero_shot_classify(tiny_model, images, labels, names, PROMPT_TEMPLATES[:2], vocab)
        assert 0.0 <= accuracy <= 1.0
        assert accuracy * len(labels) == pytest.approx(round(accuracy * len(labels)))

    def test_contracts(self, tiny_model, vocab):
        with pytest.raises(ContractViolation):
            zero_shot_classify(tiny_model, [np.zeros((4, 4))], [0], ['red cat', 'blue dog'], [], vocab)
        with pytest.raises(ContractViolation):
            zero_shot_classify(tiny_model, [np.zeros((4, 4))], [0, 1], ['red cat', 'blue dog'], PROMPT_TEMPLATES,
                               vocab)


# -------------------------------------------------------------------------------------------------
# Effective-length probe
# -------------------------------------------------------------------------------------------------


class TestLengthProbe:

    def test_resolve_lengths(self, tiny_records):
        assert resolve_probe_lengths(DEFAULT_PROBE_LENGTHS, tiny_records) == [5, 10, 15, 18]
        assert resolve_probe_lengths([3, 'full'], tiny_records) == [3, 18]

    def test_full_length_matches_plain_recall(self, tiny_model, tiny_records, vocab):
        curve = effective_length_probe(tiny_model, tiny_records, [5, 10, 18], vocab, tag='tiny')
        plain = evaluate_retrieval(tiny_model, tiny_records, vocab, kinds=('long',), ks=(1,))
        assert curve.r_at_1[-1] == plain['long']['text_to_image'].recall(1)
        assert curve.lengths == [5, 10, 18]
        assert curve.tag == 'tiny'

    def test_lengths_must_ascend(self, tiny_model, tiny_records, vocab):
        with pytest.raises(ContractViolation):
            effective_length_probe(tiny_model, tiny_records, [10, 5], vocab)
        with pytest.raises(ContractViolation):
            effective_length_probe(tiny_model, tiny_records, [5, 5], vocab)

    def test_length_beyond_context(self, tiny_model, tiny_records, vocab):
        with pytest.raises(ContractViolation, match='context'):
            effective_length_probe(tiny_model, tiny_records, [5, 30], vocab)

    def test_empty_records(self, tiny_model, vocab):
        with pytest.raises(ContractViolation):
            effective_length_probe(tiny_model, [], [5], vocab)

    def test_gain(self):
        curve = LengthProbeCurve([5, 20, 40], [0.1, 0.3, 0.7])
        assert curve.gain(20, 40) == pytest.approx(0.4)


# -------------------------------------------------------------------------------------------------
# Report files and figures
# -------------------------------------------------------------------------------------------------


class TestReports:

    def test_probe_csv(self, tmp_path):
        path = write_probe_csv(tmp_path / 'probe.csv', LengthProbeCurve([5, 10], [0.5, 0.25]))
        assert path.read_text() == 'length,r_at_1\n5,0.500000\n10,0.250000\n'

    def test_json_is_sorted(self, tmp_path):
        path = write_json(tmp_path / 'out' / 'r.json', {'b': 1, 'a': [1, 2]})
        text = path.read_text()
        assert text.endswith('\n')
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {'a': [1, 2], 'b': 1}

    def test_probe_plot(self, tmp_path):
        curves = [LengthProbeCurve([5, 20], [0.2, 0.4], 'short_baseline'),
                  LengthProbeCurve([5, 20], [0.3, 0.6], 'kps_pcm')]
        fig = create_probe_plot(curves)
        assert len(fig.data) == 2
        first = write_figure(fig, tmp_path / 'a.html', PROBE_DIV_ID).read_bytes()
        second = write_figure(create_probe_plot(curves), tmp_path / 'b.html', PROBE_DIV_ID).read_bytes()
        assert first == second
        assert PROBE_DIV_ID.encode() in first

    def test_probe_plot_needs_curves(self):
        with pytest.raises(ValueError):
            create_probe_plot([])

    def test_ablation_plot(self):
        rows = [{'variant': 'kps_pcm', 'short_r1': 0.5, 'long_r1': 0.6},
                {'variant': 'direct_ft', 'short_r1': 0.4, 'long_r1': 0.5}]
        assert len(create_ablation_plot(rows).data) == 2
        with pytest.raises(ValueError, match='long_r1'):
            create_ablation_plot([{'variant': 'kps_pcm', 'short_r1': 0.5}])
