"""Command-line entry points.

Every subcommand reads an optional config file (``--config``) and applies
dotted ``--set key=value`` overrides on top. Exit codes: 0 ok, 1 config
error, 2 runtime failure.

    dida gen-data [--config C] [--set k=v ...] [--force]
    dida run      [--config C] [--set k=v ...] [--seed S] [--out DIR]
    dida control  [--config C] [--set k=v ...] [--seed S] [--out DIR]
    dida eval     RUN_DIR [--iteration I]
    dida probe    RUN_DIR [--iteration I]
    dida grid     RUN_DIR [--iteration I] [-n N]

The dataset cache lives under ``$DIDA_CACHE`` (default ``~/.cache/dida``).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import data as D
from .config import ConfigError, RunConfig, from_dict, load_config
from .evaluation import probe_bundle, render_synth_grid, target_accuracy
from .loop import RunFailed, build_dataset, run_control, run_dida
from .models import CheckpointError, load_checkpoint, read_checkpoint_header
from .synthesis import synthesize

log = logging.getLogger("dida")


class CommandError(RuntimeError):
    """Runtime failure reported with exit status 2."""


def _dataset_cache(cfg: RunConfig) -> Path:
    if cfg.dataset.cache_dir:
        return Path(cfg.dataset.cache_dir)
    return D.cache_root() / f"{cfg.dataset.name}-seed{cfg.dataset.seed}"


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"seeds.init={args.seed}", f"seeds.data={args.seed}", f"seeds.pairing={args.seed}"]
    if getattr(args, "out", None) is not None:
        overrides.append(f"output_dir={args.out}")
    cfg = load_config(args.config, overrides)
    if cfg.dataset.num_classes < 2:
        raise ConfigError(f"dataset.num_classes must be >= 2, got {cfg.dataset.num_classes}")
    if cfg.dataset.image_size < 8 or cfg.dataset.image_size % 4:
        raise ConfigError(f"dataset.image_size must be a multiple of 4 and >= 8, got {cfg.dataset.image_size}")
    return cfg


def _print_seeds(cfg: RunConfig) -> None:
    s = cfg.seeds
    print(f"seeds: init={s.init} data={s.data} pairing={s.pairing}")


def _summarize(name: str, split: D.DatasetSplit) -> None:
    for part, s in (("train", split.train), ("test", split.test)):
        labels = s.labels if s.labels is not None else s.truth
        hist = np.bincount(labels, minlength=split.num_classes).tolist() if labels is not None else []
        print(f"{name}/{part}: n={len(s)} shape={s.image_shape} domain={s.domain} classes={hist}")


def _spec_meta(cfg: RunConfig) -> dict:
    spec = dataclasses.asdict(cfg.dataset)
    spec.pop("cache_dir")
    return {"dataset": spec}


def _build_and_cache(cfg: RunConfig, cache: Path):
    spec = dataclasses.replace(cfg.dataset, cache_dir=None)
    source, target = build_dataset(spec)
    D.save_dataset(cache, source, target, _spec_meta(cfg))
    return source, target


def _load_or_build(cfg: RunConfig):
    """Load the cache for ``cfg.dataset``, building it first if absent."""
    cache = _dataset_cache(cfg)
    if not (cache / "meta.json").exists():
        return _build_and_cache(cfg, cache)
    stored = json.loads((cache / "meta.json").read_text()).get("dataset")
    if stored is not None and stored != _spec_meta(cfg)["dataset"]:
        raise ConfigError(f"cache {cache} was built from a different dataset spec; rerun gen-data --force")
    log.info("loading dataset cache %s", cache)
    return D.load_dataset(cache)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    _print_seeds(cfg)
    cache = _dataset_cache(cfg)
    if (cache / "meta.json").exists() and not args.force:
        print(f"cache {cache} exists; nothing to do (use --force to rebuild)")
        source, target = D.load_dataset(cache)
    else:
        source, target = _build_and_cache(cfg, cache)
        print(f"wrote {cache}")
    _summarize("source", source)
    _summarize("target", target)
    return 0


def _cmd_loop(args, mode: str) -> int:
    cfg = _config(args)
    _print_seeds(cfg)
    source, target = _load_or_build(cfg)
    runner = run_dida if mode == "dida" else run_control
    try:
        report = runner(cfg, source, target)
    except RunFailed as e:
        print(f"error: {e}; last checkpoint: {e.last_checkpoint}", file=sys.stderr)
        return 2
    for r in report.records:
        fmt = lambda v: "-" if v is None else f"{v:.2f}"
        print(f"i={r.i} target_acc={fmt(r.target_accuracy)} source_acc={fmt(r.source_accuracy)} "
              f"probe_common={fmt(r.probe_common)} probe_specific={fmt(r.probe_specific)} pool={r.pool_size}")
    print(f"epoch budget: {report.da_epochs_total} DA epochs ({cfg.dida_iterations + 1} x {cfg.da.epochs})")
    print(f"run dir: {report.run_dir}")
    return 0


def cmd_run(args) -> int:
    return _cmd_loop(args, "dida")


def cmd_control(args) -> int:
    return _cmd_loop(args, "control")


def _open_run(args):
    run_dir = Path(args.run_dir)
    cfg_path = run_dir / "config.yaml"
    if not cfg_path.exists():
        raise CommandError(f"{run_dir} is not a run directory (no config.yaml)")
    cfg = from_dict(yaml.safe_load(cfg_path.read_text()))
    ckpts = sorted((run_dir / "checkpoints").glob("iter_*.npz"), key=lambda p: int(p.stem.split("_")[1]))
    if args.iteration is not None:
        path = run_dir / "checkpoints" / f"iter_{args.iteration}.npz"
    elif ckpts:
        path = ckpts[-1]
    else:
        raise CommandError(f"no checkpoints in {run_dir}")
    if not path.exists():
        raise CommandError(f"missing checkpoint {path}")
    bundle = load_checkpoint(path)
    i = int(read_checkpoint_header(path)["extra"].get("iteration", -1))
    return run_dir, cfg, bundle, i, path


def _append_csv(path: Path, header, row) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(header)
        w.writerow(row)


def cmd_eval(args) -> int:
    run_dir, cfg, bundle, i, path = _open_run(args)
    source, target = _load_or_build(cfg)
    t_acc, s_acc = target_accuracy(bundle, target.test), target_accuracy(bundle, source.test)
    print(f"{path.name}: target_acc={t_acc:.2f} source_acc={s_acc:.2f}")
    _append_csv(run_dir / "eval.csv", ["checkpoint", "i", "target_acc", "source_acc"],
                [path.name, i, f"{t_acc:.4f}", f"{s_acc:.4f}"])
    return 0


def cmd_probe(args) -> int:
    run_dir, cfg, bundle, i, path = _open_run(args)
    source, target = _load_or_build(cfg)
    results = probe_bundle(bundle, [source.test, target.test], cfg.probe)
    out = run_dir / "probe.csv"
    for r in results.values():
        print(f"{path.name}: probe_{r.kind}={r.accuracy:.2f} (chance {r.chance:.1f})")
        _append_csv(out, ["checkpoint", "i", "kind", "accuracy", "chance", "epochs"],
                    [path.name, i, r.kind, f"{r.accuracy:.4f}", f"{r.chance:.4f}", r.epochs])
    return 0


def cmd_grid(args) -> int:
    run_dir, cfg, bundle, i, path = _open_run(args)
    source, target = _load_or_build(cfg)
    syn = synthesize(bundle, source.train, target.train, args.n, cfg.synthesis.pairing,
                     seed=cfg.seeds.pairing * 1000 + max(i, 0), iteration=max(i, 0))
    src_pos = {k: j for j, k in enumerate(source.train.ids)}
    tgt_pos = {k: j for j, k in enumerate(target.train.ids)}
    triples = [(source.train.images[src_pos[syn.source_ids[k]]], syn.samples.images[k],
                target.train.images[tgt_pos[syn.target_ids[k]]]) for k in range(len(syn))]
    run_id = cfg.run_id or run_dir.name
    out = run_dir / "synth" / f"{run_id}_iter{i}_grid{args.n}.png"
    img = render_synth_grid(triples, out)
    print(f"wrote {out} ({img.shape[1]}x{img.shape[0]} px, 3x{args.n} tiles)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dida", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML/JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override (repeatable)")
        return sp

    g = with_config(sub.add_parser("gen-data", help="materialize the dataset cache"))
    g.add_argument("--force", action="store_true", help="rebuild an existing cache")
    g.set_defaults(func=cmd_gen_data)
    for name, func in (("run", cmd_run), ("control", cmd_control)):
        sp = with_config(sub.add_parser(name, help=f"{'DiDA' if name == 'run' else 'no-refresh control'} run"))
        sp.add_argument("--seed", type=int, help="set all three seeds (init, data, pairing)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.set_defaults(func=func)
    for name, func, helptext in (("eval", cmd_eval, "accuracy of a checkpoint; appends eval.csv"),
                                 ("probe", cmd_probe, "common/specific feature probes; appends probe.csv"),
                                 ("grid", cmd_grid, "source/synthetic/target image grid")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("run_dir")
        sp.add_argument("--iteration", type=int, help="checkpoint iteration (default: latest)")
        if name == "grid":
            sp.add_argument("-n", type=int, default=8, help="number of columns")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (CommandError, CheckpointError, D.IDXFormatError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
