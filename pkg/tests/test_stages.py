import math

import numpy as np
import pytest
import torch

from dida.data import SOURCE, TARGET, SampleSet
from dida.models import BundleConfig, ModelBundle, set_frozen
from dida.stages import (
    DEFAULT_ALPHA,
    StageAborted,
    StageConfig,
    pseudo_label,
    reconstruction_mse,
    train_da_stage,
    train_di_stage,
)
from dida.substrate import parameter_hash

DA_PARTS = ("common_encoder", "classifier", "domain_discriminator")
DI_PARTS = ("specific_encoder", "decoder", "adversarial_classifier")


def hashes(bundle, parts):
    return {p: parameter_hash(bundle.component(p)) for p in parts}


def test_defaults():
    cfg = StageConfig()
    assert cfg.domain_weight == DEFAULT_ALPHA["dann"] == 0.1
    assert StageConfig(backbone="mmd").domain_weight == 1.0
    assert StageConfig(alpha=0.0).domain_weight == 0.0
    assert cfg.beta == 0.05 and cfg.update_ratio == 1


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"backbone": "assoc"}, {"lr": 0}, {"update_ratio": 0}, {"grl_lambda": -1}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        StageConfig(**kw).validate()


@pytest.mark.parametrize("backbone", ["dann", "coral", "mmd"])
def test_da_stage_isolation(tiny_desk, backbone):
    source, target = tiny_desk
    b = ModelBundle(seed=0)
    di_before = hashes(b, DI_PARTS)
    da_before = hashes(b, DA_PARTS)
    m = train_da_stage(b, source.train, target.train, StageConfig(epochs=1, backbone=backbone), seed=0)
    assert hashes(b, DI_PARTS) == di_before
    changed = hashes(b, DA_PARTS)
    assert changed["common_encoder"] != da_before["common_encoder"]
    assert (changed["domain_discriminator"] != da_before["domain_discriminator"]) == (backbone == "dann")
    assert set(m.curves) == {"class", "domain", "total"}
    assert all(math.isfinite(v) for v in m.curves["total"])


def test_da_stage_fits_separable_toy():
    rng = np.random.default_rng(0)
    y = np.arange(40) % 2
    x = np.zeros((40, 3, 8, 8), np.float32)
    x[y == 1, :, :4] = 1.0
    x += 0.05 * rng.random(x.shape, dtype=np.float32)
    pool = SampleSet(x, [f"s{i}" for i in range(40)], SOURCE, y)
    target = SampleSet(x, [f"t{i}" for i in range(40)], TARGET)
    b = ModelBundle(BundleConfig(image_shape=(3, 8, 8), num_classes=2), seed=0)
    m = train_da_stage(b, pool, target, StageConfig(epochs=30, batch_size=8, alpha=0.0), seed=0)
    assert m.source_accuracy == 100.0


def test_da_stage_deterministic(tiny_desk):
    source, target = tiny_desk
    out = []
    for _ in range(2):
        b = ModelBundle(seed=1)
        train_da_stage(b, source.train, target.train, StageConfig(epochs=1), seed=5)
        out.append(parameter_hash(b))
    assert out[0] == out[1]


def test_da_stage_rejects_unlabeled_and_empty(tiny_desk):
    source, target = tiny_desk
    b = ModelBundle(seed=0)
    with pytest.raises(StageAborted):
        train_da_stage(b, [target.train], target.train, StageConfig(epochs=1))
    with pytest.raises(StageAborted):
        train_da_stage(b, source.train, target.train.subset(np.arange(0)), StageConfig(epochs=1))


def test_da_stage_nan_aborts(tiny_desk):
    source, target = tiny_desk
    b = ModelBundle(seed=0)
    with torch.no_grad():
        b.classifier.net[0].weight.fill_(float("nan"))
    with pytest.raises(StageAborted) as info:
        train_da_stage(b, source.train, target.train, StageConfig(epochs=1))
    assert info.value.diagnostics["stage"] == "domain adaptation"


def test_synthetic_counts_as_target_for_discriminator(tiny_desk):
    from dida.stages import _stack_labeled
    from dida.data import SYNTHETIC

    source, _ = tiny_desk
    syn = SampleSet(source.train.images[:5], [f"y{i}" for i in range(5)], SYNTHETIC, source.train.labels[:5])
    _, _, is_source = _stack_labeled([source.train, syn])
    assert is_source[: len(source.train)].all() and not is_source[len(source.train):].any()


class TestPseudoLabel:
    def test_argmax_ties_and_size(self, tiny_desk):
        _, target = tiny_desk
        b = ModelBundle(BundleConfig(num_classes=2), seed=0)
        with torch.no_grad():
            last = b.classifier.net[-1]
            last.weight.zero_()
            last.bias.copy_(torch.tensor([0.0, 0.0]))
        out = pseudo_label(b, target.train)
        assert len(out) == len(target.train) and (out.labels == 0).all()
        with torch.no_grad():
            last.bias.copy_(torch.tensor([0.1, 0.9]).log())
        assert (pseudo_label(b, target.train).labels == 1).all()

    def test_truth_stays_quarantined(self, tiny_desk):
        _, target = tiny_desk
        out = pseudo_label(ModelBundle(seed=0), target.train)
        assert out.domain == TARGET
        assert np.array_equal(out.truth, target.train.truth)

    def test_empty(self, tiny_desk):
        with pytest.raises(ValueError):
            pseudo_label(ModelBundle(seed=0), tiny_desk[1].train.subset(np.arange(0)))


class TestDiStage:
    def _pools(self, bundle, tiny_desk):
        source, target = tiny_desk
        return [source.train, pseudo_label(bundle, target.train)]

    def test_requires_frozen_encoder(self, tiny_desk, bundle):
        with pytest.raises(StageAborted):
            train_di_stage(bundle, self._pools(bundle, tiny_desk), StageConfig(epochs=1))

    def test_isolation(self, tiny_desk, bundle):
        pools = self._pools(bundle, tiny_desk)
        set_frozen(bundle, DA_PARTS, True)
        before_da, before_di = hashes(bundle, DA_PARTS), hashes(bundle, DI_PARTS)
        x = torch.from_numpy(tiny_desk[0].train.images[:16])
        fc_before = bundle.common_encoder(x)
        train_di_stage(bundle, pools, StageConfig(epochs=1), seed=0)
        assert hashes(bundle, DA_PARTS) == before_da
        after_di = hashes(bundle, DI_PARTS)
        assert all(after_di[k] != before_di[k] for k in DI_PARTS)
        assert torch.equal(bundle.common_encoder(x), fc_before)

    def test_pure_autoencoding_reduces_reconstruction(self, tiny_desk, bundle):
        pools = self._pools(bundle, tiny_desk)
        set_frozen(bundle, DA_PARTS, True)
        m = train_di_stage(bundle, pools, StageConfig(epochs=4, beta=0.0), seed=0)
        rec = m.curves["rec"]
        assert rec[-1] < rec[0]
        assert m.curves["total"] == pytest.approx(rec)

    def test_reconstruction_mse_helper(self, tiny_desk, bundle):
        x = tiny_desk[0].test.images
        assert 0 < reconstruction_mse(bundle, x) < 1
