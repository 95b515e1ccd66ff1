'''
Tests for linear and knowledge-preserved positional-table stretching.
'''

import numpy as np
import pytest

from numerics import ContractViolation
from data_synth import tokenize
from encoders import PositionalTable, encode_text, init_model
from pe_stretch import (
    StretchSpec,
    kps_stretch,
    linear_stretch,
    source_coordinates,
    stretch_model,
    stretch_summary,
)
from conftest import tiny_model_config


@pytest.fixture
def table77(rng):
    return PositionalTable(rng.normal(size=(77, 16)).astype(np.float32))


class TestLengths:

    def test_kps_77_to_248(self, table77):
        out = kps_stretch(table77, keep=20, ratio=4)
        assert out.rows == 248
        np.testing.assert_array_equal(out.table[:20], table77.table[:20])

    def test_linear_77_to_231(self, table77):
        assert linear_stretch(table77, 3).rows == 231

    def test_target_length_formula(self):
        assert StretchSpec('kps', 4.0, 20).target_length(77) == 248
        assert StretchSpec('linear', 3.0).target_length(77) == 231
        assert StretchSpec('linear', 1.5).target_length(77) == 115

    def test_result_is_trainable(self, table77):
        assert kps_stretch(table77).trainable
        assert linear_stretch(table77, 2).trainable


class TestIdentities:

    def test_ratio_one_is_identity(self, table77):
        np.testing.assert_array_equal(linear_stretch(table77, 1).table, table77.table)
        np.testing.assert_array_equal(kps_stretch(table77, keep=20, ratio=1).table, table77.table)

    def test_integer_ratio_hits_source_rows(self, table77):
        out = linear_stretch(table77, 3)
        for i in range(77):
            np.testing.assert_array_equal(out.table[3 * i], table77.table[i])

    def test_kps_row_after_keep_is_source_keep_row(self, table77):
        out = kps_stretch(table77, keep=20, ratio=4)
        np.testing.assert_array_equal(out.table[20], table77.table[20])
        np.testing.assert_array_equal(out.table[24], table77.table[21])

    def test_interpolated_rows_are_convex_combinations(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            rows = int(rng.integers(22, 40))
            table = PositionalTable(rng.normal(size=(rows, 6)))
            spec = StretchSpec('kps', float(rng.uniform(1.0, 5.0)), 20)
            out = kps_stretch(table, spec.keep, spec.ratio)
            coords, _ = source_coordinates(spec, rows)
            lo = np.floor(coords).astype(int)
            hi = np.minimum(np.ceil(coords).astype(int), rows - 1)
            low = np.minimum(table.table[lo], table.table[hi]) - 1e-12
            high = np.maximum(table.table[lo], table.table[hi]) + 1e-12
            assert np.all(out.table >= low) and np.all(out.table <= high)

    def test_last_rows_clamp_to_last_source_row(self, table77):
        out = linear_stretch(table77, 3)
        # coordinate 76 + 2/3 blends row 76 with itself
        np.testing.assert_allclose(out.table[-1], table77.table[-1], rtol=1e-6)


class TestContracts:

    def test_ratio_below_one(self, table77):
        with pytest.raises(ContractViolation):
            linear_stretch(table77, 0.5)

    def test_keep_must_be_inside_table(self, table77):
        with pytest.raises(ContractViolation):
            kps_stretch(table77, keep=77, ratio=2)
        with pytest.raises(ContractViolation):
            kps_stretch(table77, keep=0, ratio=2)

    def test_unknown_mode(self):
        with pytest.raises(ContractViolation):
            StretchSpec('cubic', 2.0).validate(77)


class TestModelStretch:

    def test_short_prompts_unchanged_after_kps(self, vocab):
        rng = np.random.default_rng(11)
        model = init_model(tiny_model_config(len(vocab), context_len=77), dtype=np.float64)
        stretched = stretch_model(model, StretchSpec('kps', 4.0, 20))
        assert stretched.config.context_len == 248
        assert stretched.config.positional_origin == 'kps'
        words = [w for w in vocab.tokens]
        for _ in range(50):
            n = int(rng.integers(0, 19))
            text = ' '.join(rng.choice(words, size=n))
            seq = tokenize(text, vocab, 77)
            np.testing.assert_array_equal(encode_text(model, seq, dtype=np.float64),
                                          encode_text(stretched, seq, dtype=np.float64))

    def test_linear_stretch_changes_short_prompts(self, vocab):
        model = init_model(tiny_model_config(len(vocab), context_len=77), dtype=np.float64)
        stretched = stretch_model(model, StretchSpec('linear', 3.0))
        seq = tokenize('a photo of a red cat', vocab, 77)
        assert not np.array_equal(encode_text(model, seq, dtype=np.float64),
                                  encode_text(stretched, seq, dtype=np.float64))

    def test_summary(self, table77):
        spec = StretchSpec('kps', 4.0, 20)
        summary = stretch_summary(table77, kps_stretch(table77, 20, 4.0), spec)
        assert summary['targetLength'] == 248
        assert summary['preservedRows'] >= 21
        assert 0 < summary['meanNearestCosine'] <= 1.0
