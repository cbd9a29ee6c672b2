"""Disentangled synthesis: source content and labels rendered in target style."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import SYNTHETIC, SampleSet, concat
from .models import ModelBundle

PAIRINGS = ("random", "cyclic")
POLICIES = ("replace", "append")


@dataclass
class SyntheticSet:
    samples: SampleSet
    source_ids: np.ndarray
    target_ids: np.ndarray
    iterations: np.ndarray

    def __len__(self):
        return len(self.samples)

    @classmethod
    def empty(cls, image_shape) -> "SyntheticSet":
        none = np.zeros(0, dtype=str)
        return cls(SampleSet(np.zeros((0, *image_shape), np.float32), none, SYNTHETIC, np.zeros(0, np.int64)),
                   none, none, np.zeros(0, np.int64))

    def write_provenance(self, path) -> Path:
        """CSV index: ``synth_id, source_id, target_id, label, iteration``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["synth_id", "source_id", "target_id", "label", "iteration"])
            for row in zip(self.samples.ids, self.source_ids, self.target_ids, self.samples.labels, self.iterations):
                w.writerow(row)
        return path


def pair_indices(n_source: int, n_target: int, n: int, pairing: str, seed: int):
    """Source indices walk a seeded permutation; target partners are drawn per ``pairing``."""
    if pairing not in PAIRINGS:
        raise ValueError(f"pairing must be one of {PAIRINGS}, got {pairing!r}")
    rng = np.random.default_rng(seed)
    src = rng.permutation(n_source)[np.arange(n) % n_source]
    if pairing == "random":
        tgt = rng.integers(0, n_target, n)
    else:
        tgt = rng.permutation(n_target)[np.arange(n) % n_target]
    return src, tgt


def synthesize(
    bundle: ModelBundle,
    source: SampleSet,
    target: SampleSet,
    n: int,
    pairing: str = "random",
    seed: int = 0,
    iteration: int = 0,
    batch_size: int = 512,
) -> SyntheticSet:
    """Decode ``(E_c(x_s), E_s(x_t))`` for ``n`` pairs, each labeled with ``y_s``."""
    if len(source) == 0 or len(target) == 0:
        raise ValueError("synthesis needs non-empty source and target pools")
    if source.labels is None:
        raise ValueError("source samples must be labeled")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    si, ti = pair_indices(len(source), len(target), n, pairing, seed)
    xs, xt = torch.from_numpy(source.images), torch.from_numpy(target.images)
    out = []
    with torch.no_grad():
        for s in range(0, n, batch_size):
            a = torch.from_numpy(si[s : s + batch_size])
            b = torch.from_numpy(ti[s : s + batch_size])
            out.append(bundle.decoder(bundle.common_encoder(xs[a]), bundle.specific_encoder(xt[b])))
    images = torch.cat(out).numpy()
    ids = np.array([f"syn{iteration}-{k}" for k in range(n)])
    samples = SampleSet(images, ids, SYNTHETIC, source.labels[si])
    return SyntheticSet(samples, source.ids[si], target.ids[ti], np.full(n, iteration, dtype=np.int64))


def refresh_pool(old: SyntheticSet | None, new: SyntheticSet, policy: str = "replace") -> SyntheticSet:
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
    if policy == "replace" or old is None or len(old) == 0:
        return new
    return SyntheticSet(
        concat([old.samples, new.samples], SYNTHETIC),
        np.concatenate([old.source_ids, new.source_ids]),
        np.concatenate([old.target_ids, new.target_ids]),
        np.concatenate([old.iterations, new.iterations]),
    )
