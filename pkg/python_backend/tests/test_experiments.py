'''
The full ablation suite on the default synthetic corpus. Slow: run with `pytest -m slow`.
'''

import json

import pandas as pd
import pytest

from settings import load_config
from evaluation import LengthProbeCurve
from experiment_runner import ExperimentRunner

LONG_TRAINED = ('direct_ft', 'pcm_only', 'kps_only', 'kps_pcm')


@pytest.fixture(scope='module')
def suite(tmp_path_factory):
    root = tmp_path_factory.mktemp('suite')
    artifacts = ExperimentRunner(load_config()).ablation_suite(str(root))
    table = json.loads((root / 'ablation.json').read_text())
    rows = {row['variant']: row for row in table['rows']}
    return root, artifacts, table, rows


@pytest.mark.slow
class TestAblationSuite:

    def test_table_shape(self, suite):
        _, artifacts, table, rows = suite
        assert table['baseline'] == 'short_baseline'
        assert table['n_eval'] == 200
        assert table['grid'] == 'kps x pcm'
        assert list(rows) == ['short_baseline', 'direct_ft', 'pcm_only', 'kps_only', 'kps_pcm',
                              'undistinguished', 'mixed_length', 'bounded']
        assert rows['kps_pcm']['kps'] and rows['kps_pcm']['pcm']
        assert not rows['direct_ft']['kps'] and not rows['direct_ft']['pcm']
        assert rows['bounded']['strategy'] == 'bounded'
        for path in artifacts.values():
            assert path

    def test_long_training_helps_long_captions(self, suite):
        _, _, _, rows = suite
        baseline = rows['short_baseline']['long_r1']
        for variant in LONG_TRAINED:
            assert rows[variant]['long_r1'] >= baseline + 0.20, variant

    def test_kps_pcm_keeps_short_captions(self, suite):
        _, _, _, rows = suite
        baseline = rows['short_baseline']['short_r1']
        direct_drop = baseline - rows['direct_ft']['short_r1']
        kps_pcm_drop = baseline - rows['kps_pcm']['short_r1']
        assert direct_drop >= kps_pcm_drop + 0.05

    def test_kps_pcm_best_on_mean(self, suite):
        _, _, _, rows = suite
        for variant in ('direct_ft', 'pcm_only', 'kps_only'):
            assert rows['kps_pcm']['mean_r1'] >= rows[variant]['mean_r1'], variant

    def test_probe_curves(self, suite):
        root, _, _, _ = suite
        for variant in ('short_baseline', 'kps_pcm'):
            curve = pd.read_csv(root / f'probe_{variant}.csv')
            assert list(curve['length']) == [5, 10, 15, 20, 30, 40, 50]
            assert curve['r_at_1'].between(0, 1).all()
        assert (root / 'probe.html').exists()
        assert (root / 'ablation.config.json').exists()

    def test_length_curve_plateau_and_rise(self, suite):
        root, _, _, _ = suite
        gains = {}
        for variant in ('short_baseline', 'kps_pcm'):
            curve = pd.read_csv(root / f'probe_{variant}.csv')
            probe = LengthProbeCurve([int(m) for m in curve['length']], list(curve['r_at_1']), variant)
            gains[variant] = probe.gain(20, 50)
        assert gains['short_baseline'] < 0.05
        assert gains['kps_pcm'] >= 0.10

    def test_kps_pcm_loss_halves(self, suite):
        _, _, _, rows = suite
        row = rows['kps_pcm']
        assert row['final_loss'] <= 0.5 * row['initial_loss']

    def test_kps_pcm_zero_shot_beats_chance(self, suite):
        _, _, _, rows = suite
        chance = 1 / load_config().eval.n_classes
        assert rows['kps_pcm']['zero_shot_acc'] >= 3 * chance
