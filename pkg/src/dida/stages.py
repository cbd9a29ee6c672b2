"""Domain adaptation stage, disentanglement stage and pseudo-labeling."""
from __future__ import annotations

import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import losses
from .data import SOURCE, TARGET, SampleSet, batch_iter
from .models import ModelBundle, is_frozen, predict_labels
from .substrate import make_optimizer, optimizer_step

log = logging.getLogger(__name__)

BACKBONES = ("dann", "coral", "mmd")
DEFAULT_ALPHA = {"dann": 0.1, "coral": 0.1, "mmd": 1.0}


class StageAborted(RuntimeError):
    """A stage hit a non-finite loss or a violated precondition."""

    def __init__(self, message, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class StageConfig:
    epochs: int = 10
    batch_size: int = 64
    backbone: str = "dann"
    alpha: float | None = None
    beta: float = 0.05
    grl_lambda: float = 1.0
    update_ratio: int = 1
    optimizer: str = "adam"
    lr: float = 1e-3
    adversary_optimizer: str = "adam"
    adversary_lr: float = 1e-3

    def validate(self) -> "StageConfig":
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.lr <= 0 or self.adversary_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.update_ratio < 1:
            raise ValueError(f"update_ratio must be >= 1, got {self.update_ratio}")
        if self.grl_lambda < 0:
            raise ValueError("grl_lambda must be >= 0")
        return self

    @property
    def domain_weight(self) -> float:
        return DEFAULT_ALPHA[self.backbone] if self.alpha is None else self.alpha


@dataclass
class StageMetrics:
    curves: dict[str, list[float]] = field(default_factory=dict)
    source_accuracy: float | None = None
    target_accuracy: float | None = None
    wall_time: float = 0.0

    @property
    def epochs(self) -> int:
        return len(next(iter(self.curves.values()), []))

    def last(self, name: str) -> float:
        return self.curves[name][-1]


def _as_sets(pool) -> list[SampleSet]:
    return [pool] if isinstance(pool, SampleSet) else [s for s in pool if len(s)]


def _stack_labeled(sets: Sequence[SampleSet]):
    if not sets:
        raise StageAborted("labeled pool is empty")
    for s in sets:
        if s.labels is None:
            raise StageAborted(f"labeled pool contains unlabeled {s.domain} samples")
    shapes = {s.image_shape for s in sets}
    if len(shapes) != 1:
        raise StageAborted(f"inconsistent image shapes in pool: {shapes}")
    x = torch.from_numpy(np.concatenate([s.images for s in sets]))
    y = torch.from_numpy(np.concatenate([s.labels for s in sets]))
    # the discriminator sees only real source as "source"; synthetic counts as target side
    is_source = torch.from_numpy(np.concatenate([np.full(len(s), s.domain == SOURCE) for s in sets]))
    return x, y, is_source


def _check_finite(loss: losses.LossValue, stage: str, epoch: int, step: int):
    if not math.isfinite(float(loss)):
        raise StageAborted(
            f"{stage} stage produced a non-finite loss at epoch {epoch}, step {step}",
            {"stage": stage, "epoch": epoch, "step": step, "terms": loss.terms},
        )


def predict_proba(bundle: ModelBundle, images, batch_size: int = 512) -> torch.Tensor:
    x = images if isinstance(images, torch.Tensor) else torch.from_numpy(np.asarray(images, dtype=np.float32))
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(bundle(x[start : start + batch_size]))
    return torch.cat(out) if out else torch.zeros(0, bundle.config.num_classes)


def features(bundle: ModelBundle, images, kind: str = "common", batch_size: int = 512) -> torch.Tensor:
    enc = bundle.common_encoder if kind == "common" else bundle.specific_encoder
    x = images if isinstance(images, torch.Tensor) else torch.from_numpy(np.asarray(images, dtype=np.float32))
    with torch.no_grad():
        return torch.cat([enc(x[s : s + batch_size]) for s in range(0, len(x), batch_size)])


def accuracy(bundle: ModelBundle, images, labels) -> float:
    pred = predict_labels(predict_proba(bundle, images)).numpy()
    return 100.0 * float(np.mean(pred == np.asarray(labels)))


def train_da_stage(bundle: ModelBundle, labeled_pool, target_pool: SampleSet, cfg: StageConfig, seed: int = 0) -> StageMetrics:
    """Train E_c and C (plus D for ``dann``) on ``L_class + alpha * L_domain``.

    ``labeled_pool`` is a sample set or a list of them (source plus synthetic).
    Each step pairs a labeled batch with an equal-sized random target batch.
    """
    cfg.validate()
    t0 = time.perf_counter()
    x, y, is_source = _stack_labeled(_as_sets(labeled_pool))
    if len(target_pool) == 0:
        raise StageAborted("target pool is empty")
    xt_all = target_pool.tensor()
    bundle.check_images(x[:1])
    alpha = cfg.domain_weight
    dann = cfg.backbone == "dann"
    bundle.domain_discriminator.reverse.lambd = float(cfg.grl_lambda)

    names = ["common_encoder", "classifier"] + (["domain_discriminator"] if dann else [])
    opt = make_optimizer(cfg.optimizer, [p for p in bundle.parameters_of(names) if p.requires_grad], cfg.lr)
    rng = np.random.default_rng([seed, 1])
    curves = defaultdict(list)
    for epoch in range(cfg.epochs):
        sums = defaultdict(float)
        steps = 0
        for step, idx in enumerate(batch_iter(len(x), cfg.batch_size, seed, epoch)):
            tidx = torch.from_numpy(rng.integers(0, len(xt_all), len(idx)))
            idx = torch.from_numpy(idx)
            xs, ys, xt = x[idx], y[idx], xt_all[tidx]
            f = bundle.common_encoder(torch.cat([xs, xt]))
            fs, ft = f[: len(xs)], f[len(xs):]
            l_class = losses.class_nll(bundle.classifier.log_probs(fs), ys, log_space=True)
            if dann:
                dom_labels = torch.cat([is_source[idx].float(), torch.zeros(len(xt))])
                l_domain = losses.dann_domain_loss(bundle.domain_discriminator.logits(f), dom_labels, logits=True)
            elif cfg.backbone == "coral":
                l_domain = losses.coral_loss(fs, ft) if len(xs) > 1 else losses.LossValue(fs.sum() * 0)
            else:
                l_domain = losses.mmd_loss(fs, ft)
            total = losses.da_total(l_class, l_domain, alpha)
            _check_finite(total, "domain adaptation", epoch, step)
            total.backward()
            optimizer_step(opt)
            for k, v in total.terms.items():
                sums[k] += v
            sums["total"] += float(total)
            steps += 1
        for k, v in sums.items():
            curves[k].append(v / steps)
        log.debug("DA epoch %d: %s", epoch, {k: round(v[-1], 4) for k, v in curves.items()})
    src = is_source.numpy()
    metrics = StageMetrics(dict(curves), wall_time=time.perf_counter() - t0)
    metrics.source_accuracy = accuracy(bundle, x[src], y[src]) if src.any() else None
    return metrics


def pseudo_label(bundle: ModelBundle, target_pool: SampleSet) -> SampleSet:
    """Label every target sample with ``argmax C(E_c(x))`` (ties go to the lowest class)."""
    if len(target_pool) == 0:
        raise ValueError("target pool is empty")
    labels = predict_labels(predict_proba(bundle, target_pool.images)).numpy()
    return target_pool.with_labels(labels, TARGET)


def train_di_stage(bundle: ModelBundle, all_samples, cfg: StageConfig, seed: int = 0) -> StageMetrics:
    """Train E_s, G and the adversarial classifier A with E_c frozen.

    Each step first updates A (``update_ratio`` times) on the specific
    features, then updates E_s and G on ``L_rec - beta * L_AClass``.
    """
    cfg.validate()
    if not is_frozen(bundle, "common_encoder"):
        raise StageAborted("common encoder must be frozen before the disentanglement stage")
    t0 = time.perf_counter()
    x, y, _ = _stack_labeled(_as_sets(all_samples))
    bundle.check_images(x[:1])
    E_s, G, A = bundle.specific_encoder, bundle.decoder, bundle.adversarial_classifier
    opt_gen = make_optimizer(cfg.optimizer, list(E_s.parameters()) + list(G.parameters()), cfg.lr)
    opt_adv = make_optimizer(cfg.adversary_optimizer, A.parameters(), cfg.adversary_lr)

    curves = defaultdict(list)
    for epoch in range(cfg.epochs):
        sums = defaultdict(float)
        steps = 0
        for step, idx in enumerate(batch_iter(len(x), cfg.batch_size, seed, epoch)):
            idx = torch.from_numpy(idx)
            xb, yb = x[idx], y[idx]
            with torch.no_grad():
                fc = bundle.common_encoder(xb)
            fs = E_s(xb)

            for _ in range(cfg.update_ratio):
                l_adv = losses.class_nll(A.log_probs(fs.detach()), yb, log_space=True)
                _check_finite(l_adv, "disentanglement", epoch, step)
                l_adv.backward()
                optimizer_step(opt_adv)

            l_rec = losses.recon_mse(xb, G(fc, fs))
            l_aclass = losses.class_nll(A.log_probs(fs), yb, log_space=True)
            total = losses.di_total(l_rec, l_aclass, cfg.beta)
            _check_finite(total, "disentanglement", epoch, step)
            total.backward()
            optimizer_step(opt_gen)
            opt_adv.zero_grad(set_to_none=True)

            sums["rec"] += total.terms["rec"]
            sums["aclass"] += float(l_adv)
            sums["total"] += float(total)
            steps += 1
        for k, v in sums.items():
            curves[k].append(v / steps)
        log.debug("Di epoch %d: %s", epoch, {k: round(v[-1], 4) for k, v in curves.items()})
    return StageMetrics(dict(curves), wall_time=time.perf_counter() - t0)


def reconstruction_mse(bundle: ModelBundle, images, batch_size: int = 512) -> float:
    """Mean squared error of ``G(E_c(x), E_s(x))`` against ``x``."""
    x = torch.from_numpy(np.asarray(images, dtype=np.float32))
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(x), batch_size):
            xb = x[s : s + batch_size]
            rec = bundle.decoder(bundle.common_encoder(xb), bundle.specific_encoder(xb))
            total += float((rec - xb).double().pow(2).sum())
    return total / x.numel()
