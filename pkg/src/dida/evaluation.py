"""Measurement protocols: accuracy, feature probes, feature export, image grids, metrics CSV."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
import torch
from PIL import Image
from torch import nn

from .data import SampleSet, batch_iter
from .models import ModelBundle, predict_labels
from .stages import features, predict_proba

if TYPE_CHECKING:
    from .loop import RunReport

METRIC_COLUMNS = ("i", "target_acc", "source_acc", "probe_common", "probe_specific", "pool_size")


def eval_labels(samples: SampleSet) -> np.ndarray:
    """Ground truth for evaluation: real labels, else the quarantined ``truth``."""
    labels = samples.labels if samples.labels is not None else samples.truth
    if labels is None:
        raise ValueError(f"{samples.domain} set carries no ground truth for evaluation")
    return labels


def target_accuracy(bundle: ModelBundle, labeled_test: SampleSet) -> float:
    if len(labeled_test) == 0:
        raise ValueError("cannot evaluate on an empty set")
    pred = predict_labels(predict_proba(bundle, labeled_test.images)).numpy()
    return 100.0 * float(np.mean(pred == eval_labels(labeled_test)))


@dataclass
class ProbeConfig:
    hidden: int = 64
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    train_fraction: float = 0.8
    seed: int = 0


@dataclass
class ProbeResult:
    kind: str
    accuracy: float
    chance: float
    epochs: int


def probe_disentanglement(features_, labels, num_classes: int, cfg: ProbeConfig | None = None, kind: str = "common") -> ProbeResult:
    """Fit a fresh one-hidden-layer probe on 80% of the rows; report held-out accuracy."""
    cfg = cfg or ProbeConfig()
    x = torch.as_tensor(np.asarray(features_, dtype=np.float32))
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if x.dim() != 2 or len(x) != len(y):
        raise ValueError(f"features {tuple(x.shape)} and labels {tuple(y.shape)} disagree")
    n_train = int(round(cfg.train_fraction * len(x)))
    if n_train < 1 or n_train >= len(x):
        raise ValueError(f"degenerate split: {n_train} train rows out of {len(x)}")
    order = torch.from_numpy(np.random.default_rng(cfg.seed).permutation(len(x)))
    tr, te = order[:n_train], order[n_train:]
    mean, std = x[tr].mean(0), x[tr].std(0) + 1e-6
    x = (x - mean) / std

    # the probe's init must not consume the global RNG that training relies on
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        probe = nn.Sequential(nn.Linear(x.shape[1], cfg.hidden), nn.ReLU(), nn.Linear(cfg.hidden, num_classes))
    opt = torch.optim.Adam(probe.parameters(), lr=cfg.lr)
    for epoch in range(cfg.epochs):
        for idx in batch_iter(n_train, cfg.batch_size, cfg.seed, epoch):
            b = tr[torch.from_numpy(idx)]
            loss = nn.functional.cross_entropy(probe(x[b]), y[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        acc = 100.0 * float((probe(x[te]).argmax(-1) == y[te]).float().mean())
    return ProbeResult(kind, acc, 100.0 / num_classes, cfg.epochs)


def probe_bundle(bundle: ModelBundle, sets: Sequence[SampleSet], cfg: ProbeConfig | None = None) -> dict[str, ProbeResult]:
    """Probe common and specific features of ``sets`` against their ground truth."""
    images = np.concatenate([s.images for s in sets])
    labels = np.concatenate([eval_labels(s) for s in sets])
    k = bundle.config.num_classes
    return {
        kind: probe_disentanglement(features(bundle, images, kind).numpy(), labels, k, cfg, kind)
        for kind in ("common", "specific")
    }


def export_features(bundle: ModelBundle, sets: Sequence[SampleSet], path) -> Path:
    """CSV rows ``id, domain, label, c0.., s0..``; unlabeled rows get the classifier's pseudo-label."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dc, ds = bundle.config.d_common, bundle.config.d_specific
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "domain", "label"] + [f"c{j}" for j in range(dc)] + [f"s{j}" for j in range(ds)])
        for s in sets:
            fc = features(bundle, s.images, "common").numpy()
            fs = features(bundle, s.images, "specific").numpy()
            labels = s.labels if s.labels is not None else predict_labels(predict_proba(bundle, s.images)).numpy()
            for k in range(len(s)):
                w.writerow([s.ids[k], s.domain, int(labels[k])] + [f"{v:.6g}" for v in fc[k]] + [f"{v:.6g}" for v in fs[k]])
    return path


def render_synth_grid(triples, path=None) -> np.ndarray:
    """Three-row tile grid (source / synthetic / target) as uint8 ``(H, W, 3)``, optionally saved as PNG."""
    triples = list(triples)
    if not triples:
        raise ValueError("no triples to render")
    shape = np.asarray(triples[0][0]).shape
    for t in triples:
        if any(np.asarray(im).shape != shape for im in t):
            raise ValueError(f"all images must share shape {shape}")
    rows = [np.concatenate([np.asarray(t[r]) for t in triples], axis=2) for r in range(3)]
    grid = np.concatenate(rows, axis=1)
    if grid.shape[0] == 1:
        grid = np.repeat(grid, 3, axis=0)
    img = np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(path, format="PNG")
    return img


def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v)


def metrics_csv(report: "RunReport") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in report.records:
        w.writerow([_fmt(r.i), _fmt(r.target_accuracy), _fmt(r.source_accuracy),
                    _fmt(r.probe_common), _fmt(r.probe_specific), _fmt(r.pool_size)])
    return buf.getvalue()


def emit_metrics(report: "RunReport", path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(metrics_csv(report))
    return path
