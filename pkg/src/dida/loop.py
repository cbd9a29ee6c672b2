"""Outer orchestration: adaptation, disentanglement, synthesis, repeat.

Run directory layout (``<output_dir>/<run_id>/``)::

    config.yaml            effective configuration
    metrics.csv            one row per iteration
    report.json            full per-iteration records
    checkpoints/iter_<i>.npz
    synth/<run_id>_iter<i>_grid.png, synth/<run_id>_iter<i>_provenance.csv
    features/<run_id>_iter<i>.csv
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .config import ConfigError, RunConfig
from .evaluation import emit_metrics, export_features, probe_bundle, render_synth_grid, target_accuracy
from .models import DA_COMPONENTS, BundleConfig, ModelBundle, save_checkpoint, set_frozen
from .stages import StageAborted, pseudo_label, train_da_stage, train_di_stage
from .substrate import seed_everything
from .synthesis import SyntheticSet, refresh_pool, synthesize

log = logging.getLogger(__name__)


@dataclass
class IterationRecord:
    i: int
    target_accuracy: float | None
    source_accuracy: float | None
    probe_common: float | None = None
    probe_specific: float | None = None
    pool_size: int = 0
    pseudo_label_accuracy: float | None = None
    da_losses: dict = field(default_factory=dict)
    di_losses: dict = field(default_factory=dict)
    checkpoint: str | None = None


@dataclass
class RunReport:
    mode: str
    config: dict
    records: list[IterationRecord] = field(default_factory=list)
    da_epochs_total: int = 0
    wall_time: float = 0.0
    run_dir: str | None = None

    def accuracies(self) -> list[float | None]:
        return [r.target_accuracy for r in self.records]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class RunFailed(RuntimeError):
    def __init__(self, message, report: RunReport, last_checkpoint: str | None):
        super().__init__(message)
        self.report = report
        self.last_checkpoint = last_checkpoint


def build_dataset(spec) -> tuple[D.DatasetSplit, D.DatasetSplit]:
    """Construct (or load from ``spec.cache_dir``) the source and target splits."""
    if spec.cache_dir and (Path(spec.cache_dir) / "meta.json").exists():
        return D.load_dataset(spec.cache_dir)
    n_source, n_target, n_test = spec.sizes
    if spec.name == "desk":
        desk = D.DeskConfig(spec.num_classes, n_source, n_target, n_test, spec.image_size,
                            spec.texture_amplitude, spec.texture_contrast)
        if spec.texture_dir:
            raise ConfigError("dataset.texture_dir applies to mnist-mnistm only")
        return D.make_desk_benchmark(desk, spec.seed)
    if spec.name in ("mnist-mnistm", "mnist-usps"):
        return _real_digits(spec, n_source, n_target, n_test)
    raise ConfigError(f"unknown dataset {spec.name!r}; expected desk, mnist-mnistm or mnist-usps")


def _idx_pair(directory, prefix):
    d = Path(directory)
    for suffix in ("", ".gz"):
        imgs, labs = d / f"{prefix}-images-idx3-ubyte{suffix}", d / f"{prefix}-labels-idx1-ubyte{suffix}"
        if imgs.exists() and labs.exists():
            return imgs, labs
    raise ConfigError(f"no {prefix} IDX files in {d}")


def _real_digits(spec, n_source, n_target, n_test):
    if not spec.mnist_dir:
        raise ConfigError("dataset.mnist_dir is required for real digit datasets")
    rng = np.random.default_rng(spec.seed)
    mnist_train = D.load_idx(*_idx_pair(spec.mnist_dir, "train"), id_prefix="mnist-train-")
    mnist_test = D.load_idx(*_idx_pair(spec.mnist_dir, "t10k"), id_prefix="mnist-test-")
    if spec.name == "mnist-mnistm":
        patches = (D.TextureCorpus.from_directory(spec.texture_dir, size=64) if spec.texture_dir
                   else D.procedural_textures(512, 64, spec.seed, contrast=spec.texture_contrast))
        pick = lambda s, n: s.subset(np.sort(rng.choice(len(s), min(n, len(s)), replace=False)))
        src_tr, tgt_tr = pick(mnist_train, n_source), pick(mnist_train, n_target)
        src_te, tgt_te = pick(mnist_test, n_test), pick(mnist_test, n_test)
        rgb = lambda s: D.resize_to(D.to_rgb(s), spec.image_size, spec.image_size)
        tgt_tr = D.make_mnistm(rgb(tgt_tr), patches, spec.seed + 1, spec.texture_amplitude)
        tgt_te = D.make_mnistm(rgb(tgt_te), patches, spec.seed + 2, spec.texture_amplitude)
        tgt_tr = D.SampleSet(tgt_tr.images, ["m-" + i for i in tgt_tr.ids], D.SOURCE, tgt_tr.labels)
        tgt_te = D.SampleSet(tgt_te.images, ["m-" + i for i in tgt_te.ids], D.SOURCE, tgt_te.labels)
        source = D.DatasetSplit(rgb(src_tr), rgb(src_te), 10)
        target = D.DatasetSplit(tgt_tr.unlabeled(), tgt_te.with_labels(tgt_te.labels, D.TARGET), 10)
        return source, target
    if not spec.usps_dir:
        raise ConfigError("dataset.usps_dir is required for mnist-usps")
    usps_train = D.load_idx(*_idx_pair(spec.usps_dir, "train"), id_prefix="usps-train-")
    usps_test = D.load_idx(*_idx_pair(spec.usps_dir, "t10k"), id_prefix="usps-test-")
    src, tgt = D.sample_protocol_usps(mnist_train, usps_train, spec.seed, n_source, min(n_target, len(usps_train)))
    size = spec.image_size
    prep = lambda s: D.resize_to(D.to_rgb(s), size, size)
    src_te = mnist_test.subset(np.arange(min(n_test, len(mnist_test))))
    tgt_te = usps_test.subset(np.arange(min(n_test, len(usps_test))))
    source = D.DatasetSplit(prep(src), prep(src_te), 10)
    target = D.DatasetSplit(prep(tgt), prep(tgt_te).with_labels(tgt_te.labels, D.TARGET), 10)
    return source, target


def _stage_seed(cfg: RunConfig, i: int, stage: int) -> int:
    return cfg.seeds.data * 1000 + 10 * i + stage


def default_run_id(cfg: RunConfig, mode: str) -> str:
    return f"{mode}-{cfg.da.backbone}-seed{cfg.seeds.init}"


def run_dida(cfg: RunConfig, source: D.DatasetSplit | None = None, target: D.DatasetSplit | None = None,
             keep_bundle: bool = False) -> RunReport:
    """Iteration 0 trains the backbone on source only; each later iteration runs
    disentanglement, synthesizes a fresh pool, and retrains adaptation on source plus pool.

    Splits are built from ``cfg.dataset`` unless given. Empty test splits skip
    evaluation. ``keep_bundle`` attaches the final bundle as ``report.bundle``.
    """
    return _run(cfg, "dida", source, target, keep_bundle)


def run_control(cfg: RunConfig, source: D.DatasetSplit | None = None, target: D.DatasetSplit | None = None,
                keep_bundle: bool = False) -> RunReport:
    """Same adaptation budget as :func:`run_dida`, but the pool from iteration 1 is never refreshed.

    With ``control_pool="none"`` no synthetic data is used at all.
    """
    return _run(cfg, "control", source, target, keep_bundle)


def _run(cfg: RunConfig, mode: str, source, target, keep_bundle: bool = False) -> RunReport:
    cfg.validate()
    t0 = time.perf_counter()
    seed_everything(cfg.seeds.init, cfg.deterministic)
    if source is None or target is None:
        source, target = build_dataset(cfg.dataset)
    run_id = cfg.run_id or default_run_id(cfg, mode)
    run_dir = Path(cfg.output_dir) / run_id if cfg.output_dir else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.yaml").write_text(cfg.dump())

    bundle = ModelBundle(
        BundleConfig(source.image_shape, source.num_classes, cfg.d_common, cfg.d_specific, cfg.da.grl_lambda),
        seed=cfg.seeds.init,
    )
    report = RunReport(mode, cfg.to_dict(), run_dir=str(run_dir) if run_dir else None)
    pool: SyntheticSet | None = None
    last_ckpt = None
    probes: dict = {}
    pool_size = cfg.synthesis.pool_size or len(source.train)
    eval_sets = [source.test, target.test]
    evaluate = all(len(s) for s in eval_sets)

    def finish():
        report.wall_time = time.perf_counter() - t0
        if run_dir is not None:
            emit_metrics(report, run_dir / "metrics.csv")
            (run_dir / "report.json").write_text(report.to_json())

    try:
        for i in range(cfg.dida_iterations + 1):
            di_losses, pseudo_acc = {}, None
            refresh = i >= 1 and (mode == "dida" or (i == 1 and cfg.control_pool == "stale"))
            if refresh:
                set_frozen(bundle, DA_COMPONENTS, True)
                pseudo = pseudo_label(bundle, target.train)
                if pseudo.truth is not None:
                    pseudo_acc = 100.0 * float(np.mean(pseudo.labels == pseudo.truth))
                di = train_di_stage(bundle, [source.train, pseudo], cfg.di, seed=_stage_seed(cfg, i, 1))
                di_losses = {k: v[-1] for k, v in di.curves.items()}
                if evaluate:
                    probes = {k: r.accuracy for k, r in probe_bundle(bundle, eval_sets, cfg.probe).items()}
                set_frozen(bundle, DA_COMPONENTS, False)
                new = synthesize(bundle, source.train, target.train, pool_size, cfg.synthesis.pairing,
                                 seed=cfg.seeds.pairing * 1000 + i, iteration=i)
                pool = refresh_pool(pool, new, cfg.synthesis.policy)
                if run_dir is not None:
                    _write_synth(run_dir, run_id, i, new, source.train, target.train, cfg.synthesis.grid_size)
            if i >= 1:
                # fresh heads each round; the common encoder is warm-started unless configured otherwise
                heads = ["classifier", "domain_discriminator"] + ([] if cfg.warm_start else ["common_encoder"])
                bundle.reset(heads, seed=cfg.seeds.init * 1000 + i)
            labeled = [source.train] + ([pool.samples] if pool is not None else [])
            da = train_da_stage(bundle, labeled, target.train, cfg.da, seed=_stage_seed(cfg, i, 0))
            report.da_epochs_total += cfg.da.epochs
            if i == 0 and evaluate:
                probes = {"common": probe_bundle(bundle, eval_sets, cfg.probe)["common"].accuracy}
            rec = IterationRecord(
                i=i,
                target_accuracy=target_accuracy(bundle, target.test) if evaluate else None,
                source_accuracy=target_accuracy(bundle, source.test) if evaluate else None,
                probe_common=probes.get("common"),
                probe_specific=probes.get("specific"),
                pool_size=len(pool) if pool is not None else 0,
                pseudo_label_accuracy=pseudo_acc,
                da_losses={k: v[-1] for k, v in da.curves.items()},
                di_losses=di_losses,
            )
            if run_dir is not None:
                last_ckpt = str(save_checkpoint(bundle, run_dir / "checkpoints" / f"iter_{i}.npz",
                                                {"run_id": run_id, "iteration": i, "mode": mode}))
                rec.checkpoint = last_ckpt
                if cfg.export_features and evaluate:
                    sets = [source.test, target.test.unlabeled()] + ([pool.samples] if pool is not None else [])
                    export_features(bundle, sets, run_dir / "features" / f"{run_id}_iter{i}.csv")
            report.records.append(rec)
            log.info("%s i=%d target=%s source=%s pool=%d", mode, i, rec.target_accuracy, rec.source_accuracy, rec.pool_size)
    except StageAborted as e:
        finish()
        raise RunFailed(f"{mode} run aborted: {e}", report, last_ckpt) from e
    finish()
    if keep_bundle:
        report.bundle = bundle
    return report


def _write_synth(run_dir: Path, run_id: str, i: int, new: SyntheticSet, source: D.SampleSet, target: D.SampleSet, n: int):
    src_pos = {k: j for j, k in enumerate(source.ids)}
    tgt_pos = {k: j for j, k in enumerate(target.ids)}
    n = min(n, len(new))
    triples = [(source.images[src_pos[new.source_ids[k]]], new.samples.images[k], target.images[tgt_pos[new.target_ids[k]]])
               for k in range(n)]
    render_synth_grid(triples, run_dir / "synth" / f"{run_id}_iter{i}_grid.png")
    new.write_provenance(run_dir / "synth" / f"{run_id}_iter{i}_provenance.csv")
