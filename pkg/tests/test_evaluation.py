import csv

import numpy as np
import pytest
import torch
from PIL import Image

from dida.evaluation import (
    METRIC_COLUMNS,
    ProbeConfig,
    emit_metrics,
    export_features,
    metrics_csv,
    probe_disentanglement,
    render_synth_grid,
    target_accuracy,
)
from dida.loop import IterationRecord, RunReport
from dida.models import ModelBundle
from dida.substrate import parameter_hash


class _Oracle(ModelBundle):
    """Predicts a fixed label per image, read off the first pixel."""

    def forward(self, x):
        return torch.nn.functional.one_hot((x[:, 0, 0, 0] * 10).long().clamp(0, 9), 10).float()


def _labeled(tiny_desk):
    return tiny_desk[1].test


class TestAccuracy:
    def test_all_correct(self, tiny_desk):
        s = _labeled(tiny_desk)
        images = s.images.copy()
        images[:, 0, 0, 0] = (s.labels + 0.5) / 10
        fixed = s.__class__(images, s.ids, s.domain, s.labels)
        assert target_accuracy(_Oracle(seed=0), fixed) == 100.0

    def test_order_invariant(self, tiny_desk, bundle):
        s = _labeled(tiny_desk)
        perm = np.random.default_rng(0).permutation(len(s))
        assert target_accuracy(bundle, s) == target_accuracy(bundle, s.subset(perm))

    def test_random_classifier_near_chance(self):
        rng = np.random.default_rng(0)
        from dida.data import TARGET, SampleSet

        n = 2000
        s = SampleSet(rng.random((n, 3, 16, 16), dtype=np.float32), [str(i) for i in range(n)], TARGET, np.arange(n) % 10)
        assert abs(target_accuracy(_Oracle(seed=0), s) - 10) <= 3

    def test_empty(self, tiny_desk, bundle):
        with pytest.raises(ValueError):
            target_accuracy(bundle, _labeled(tiny_desk).subset(np.arange(0)))

    def test_uses_quarantined_truth(self, tiny_desk, bundle):
        s = _labeled(tiny_desk)
        assert target_accuracy(bundle, s.unlabeled()) == target_accuracy(bundle, s)


class TestProbe:
    def test_one_hot_features_near_perfect(self):
        y = np.arange(500) % 10
        r = probe_disentanglement(np.eye(10)[y], y, 10)
        assert r.accuracy >= 99 and r.chance == 10.0 and r.epochs == 30 and r.kind == "common"

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(0)
        y = np.arange(1000) % 10
        r = probe_disentanglement(np.eye(10)[y], rng.permutation(y), 10)
        assert r.accuracy <= 20

    def test_reproducible(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(300, 8)), rng.integers(0, 3, 300)
        a = probe_disentanglement(x, y, 3, ProbeConfig(seed=4)).accuracy
        b = probe_disentanglement(x, y, 3, ProbeConfig(seed=4)).accuracy
        assert abs(a - b) <= 0.5

    def test_degenerate_split(self):
        with pytest.raises(ValueError):
            probe_disentanglement(np.zeros((1, 3)), np.zeros(1), 2)

    def test_does_not_touch_global_rng(self):
        torch.manual_seed(0)
        expected = torch.rand(1)
        torch.manual_seed(0)
        probe_disentanglement(np.eye(4)[np.arange(40) % 4], np.arange(40) % 4, 4, ProbeConfig(epochs=1))
        assert torch.equal(torch.rand(1), expected)


def test_export_features(tmp_path, tiny_desk, bundle):
    from dida.synthesis import synthesize

    source, target = tiny_desk
    syn = synthesize(bundle, source.train, target.train, 10)
    before = parameter_hash(bundle)
    path = export_features(bundle, [source.test, target.test.unlabeled(), syn.samples], tmp_path / "f.csv")
    rows = list(csv.reader(open(path)))
    assert len(rows) - 1 == len(source.test) + len(target.test) + 10
    assert all(len(r) == 3 + 32 + 16 for r in rows)
    assert {r[1] for r in rows[1:]} == {"source", "target", "synthetic-target"}
    assert parameter_hash(bundle) == before


class TestGrid:
    def test_tiles_and_order(self, tmp_path):
        triples = [tuple(np.full((3, 4, 4), (k + r) / 20, np.float32) for r in range(3)) for k in range(8)]
        img = render_synth_grid(triples, tmp_path / "g.png")
        assert img.shape == (12, 32, 3)
        assert img[0, 4 * 5, 0] == round(5 / 20 * 255)
        assert img[4, 0, 0] == round(1 / 20 * 255)
        assert np.array_equal(np.asarray(Image.open(tmp_path / "g.png")), img)

    def test_quantization_bound(self):
        rng = np.random.default_rng(0)
        t = tuple(rng.random((3, 5, 5), dtype=np.float32) for _ in range(3))
        img = render_synth_grid([t]).astype(np.float32) / 255
        assert np.abs(img[:5, :, :].transpose(2, 0, 1) - t[0]).max() <= 1 / 255

    def test_grayscale_promoted(self):
        assert render_synth_grid([tuple(np.zeros((1, 4, 4)) for _ in range(3))]).shape == (12, 4, 3)

    def test_errors(self):
        with pytest.raises(ValueError):
            render_synth_grid([])
        with pytest.raises(ValueError):
            render_synth_grid([(np.zeros((3, 4, 4)), np.zeros((3, 5, 5)), np.zeros((3, 4, 4)))])


class TestMetrics:
    def _report(self, n):
        recs = [IterationRecord(i, 50.0 + i, 90.0, 80.0, None if i == 0 else 12.5, 0 if i == 0 else 100) for i in range(n)]
        return RunReport("dida", {}, recs)

    def test_rows_and_header(self, tmp_path):
        text = metrics_csv(self._report(5))
        lines = text.strip().split("\n")
        assert lines[0] == ",".join(METRIC_COLUMNS)
        assert len(lines) == 6
        assert lines[1] == "0,50.0000,90.0000,80.0000,,0"

    def test_idempotent(self, tmp_path):
        r = self._report(3)
        a = emit_metrics(r, tmp_path / "m.csv").read_bytes()
        assert emit_metrics(r, tmp_path / "m.csv").read_bytes() == a

    def test_partial(self):
        assert len(metrics_csv(self._report(2)).strip().split("\n")) == 3
