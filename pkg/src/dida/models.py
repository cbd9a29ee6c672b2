"""The six networks of the framework, bundled with their forward paths."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .substrate import GradientReversal, ShapeError, Upsample2x, conv2d, init_parameters

CHECKPOINT_VERSION = 1

COMPONENTS = (
    "common_encoder",
    "classifier",
    "domain_discriminator",
    "specific_encoder",
    "decoder",
    "adversarial_classifier",
)
ALIASES = {
    "E_c": "common_encoder",
    "C": "classifier",
    "D": "domain_discriminator",
    "E_s": "specific_encoder",
    "G": "decoder",
    "A": "adversarial_classifier",
}
DA_COMPONENTS = ("common_encoder", "classifier", "domain_discriminator")
DI_COMPONENTS = ("specific_encoder", "decoder", "adversarial_classifier")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class BundleConfig:
    image_shape: tuple[int, int, int] = (3, 16, 16)
    num_classes: int = 10
    d_common: int = 32
    d_specific: int = 16
    grl_lambda: float = 1.0
    hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        c, h, w = self.image_shape
        if h % 4 or w % 4:
            raise ValueError(f"image height and width must be multiples of 4, got {h}x{w}")
        if self.num_classes < 1 or self.d_common < 1 or self.d_specific < 0:
            raise ValueError(f"invalid dimensions in {self}")


class FeaturePair(NamedTuple):
    common: torch.Tensor
    specific: torch.Tensor


class Encoder(nn.Module):
    """Two stride-2 conv blocks (C -> 32 -> 64), a dense projection and tanh.

    The tanh keeps features bounded; with a linear output the encoder wins the
    gradient-reversal game by scaling features until the discriminator saturates.
    """

    def __init__(self, image_shape, out_dim: int):
        super().__init__()
        c, h, w = image_shape
        self.features = nn.Sequential(conv2d(c, 32), nn.ReLU(), conv2d(32, 64), nn.ReLU(), nn.Flatten())
        self.project = nn.Linear(64 * ((h + 3) // 4) * ((w + 3) // 4), out_dim)

    def forward(self, x):
        return torch.tanh(self.project(self.features(x)))


class Head(nn.Module):
    """dense -> relu -> dense -> softmax (or sigmoid for a single output)."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, reverse: float | None = None):
        super().__init__()
        self.reverse = GradientReversal(reverse) if reverse is not None else None
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def logits(self, x):
        if self.reverse is not None:
            x = self.reverse(x)
        z = self.net(x)
        return z.squeeze(-1) if z.shape[-1] == 1 else z

    def log_probs(self, x):
        return torch.log_softmax(self.logits(x), -1)

    def forward(self, x):
        z = self.logits(x)
        return torch.sigmoid(z) if z.dim() == 1 or self.net[-1].out_features == 1 else torch.softmax(z, -1)


class Decoder(nn.Module):
    def __init__(self, image_shape, in_dim: int):
        super().__init__()
        c, h, w = image_shape
        self.seed_shape = (64, h // 4, w // 4)
        self.seed = nn.Linear(in_dim, int(np.prod(self.seed_shape)))
        self.up = nn.Sequential(nn.ReLU(), Upsample2x(64, 32), nn.ReLU(), Upsample2x(32, c))

    def forward(self, common, specific):
        z = self.seed(torch.cat([common, specific], -1)).view(-1, *self.seed_shape)
        return torch.sigmoid(self.up(z))


class ModelBundle(nn.Module):
    def __init__(self, config: BundleConfig | None = None, seed: int | None = None):
        super().__init__()
        self.config = cfg = config or BundleConfig()
        if seed is not None:
            torch.manual_seed(seed)
        self.common_encoder = Encoder(cfg.image_shape, cfg.d_common)
        self.classifier = Head(cfg.d_common, cfg.hidden, cfg.num_classes)
        self.domain_discriminator = Head(cfg.d_common, cfg.hidden, 1, reverse=cfg.grl_lambda)
        self.specific_encoder = Encoder(cfg.image_shape, cfg.d_specific)
        self.decoder = Decoder(cfg.image_shape, cfg.d_common + cfg.d_specific)
        self.adversarial_classifier = Head(cfg.d_specific, cfg.hidden, cfg.num_classes)
        init_parameters(self)

    def component(self, name: str) -> nn.Module:
        name = ALIASES.get(name, name)
        if name not in COMPONENTS:
            raise KeyError(f"unknown component {name!r}; expected one of {COMPONENTS}")
        return getattr(self, name)

    def parameters_of(self, names) -> list[nn.Parameter]:
        return [p for n in names for p in self.component(n).parameters()]

    def reset(self, names, seed: int | None = None) -> None:
        """Re-initialize the named components in place."""
        if seed is not None:
            torch.manual_seed(seed)
        for n in names:
            init_parameters(self.component(n))

    def check_images(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.config.image_shape:
            raise ShapeError(f"expected images (N, {', '.join(map(str, self.config.image_shape))}), got {tuple(x.shape)}")

    def forward(self, x):
        return self.classifier(self.common_encoder(x))


def _dim_check(f: torch.Tensor, dim: int, what: str) -> None:
    if f.shape[-1] != dim:
        raise ShapeError(f"{what} features must have dim {dim}, got {tuple(f.shape)}")


def encode(bundle: ModelBundle, x: torch.Tensor) -> FeaturePair:
    bundle.check_images(x)
    with torch.no_grad():
        return FeaturePair(bundle.common_encoder(x), bundle.specific_encoder(x))


def classify(bundle: ModelBundle, common: torch.Tensor) -> torch.Tensor:
    """Class distribution from common features; ``argmax`` ties resolve to the lowest index."""
    _dim_check(common, bundle.config.d_common, "common")
    return bundle.classifier(common)


def decode(bundle: ModelBundle, common: torch.Tensor, specific: torch.Tensor) -> torch.Tensor:
    _dim_check(common, bundle.config.d_common, "common")
    _dim_check(specific, bundle.config.d_specific, "specific")
    return bundle.decoder(common, specific)


def predict_labels(probs: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, which is the documented tie rule
    return probs.argmax(-1)


def set_frozen(bundle: ModelBundle, components, flag: bool = True) -> None:
    mods = [bundle.component(c) for c in components]
    for m in mods:
        for p in m.parameters():
            p.requires_grad_(not flag)
            if flag:
                p.grad = None


def is_frozen(bundle: ModelBundle, component: str) -> bool:
    return all(not p.requires_grad for p in bundle.component(component).parameters())


def save_checkpoint(bundle: ModelBundle, path, extra: dict | None = None) -> Path:
    """Write an ``.npz`` container: a JSON header plus one float32 blob per parameter.

    Blob keys are ``"<component>/<parameter name>"``; shapes are stored by numpy.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(bundle.config),
        "extra": extra or {},
    }
    blobs = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    blobs["__rng__"] = torch.get_rng_state().numpy()
    for comp in COMPONENTS:
        for name, p in bundle.component(comp).named_parameters():
            blobs[f"{comp}/{name}"] = p.detach().cpu().numpy().astype(np.float32)
    with open(path, "wb") as fh:
        np.savez(fh, **blobs)
    return path


def read_checkpoint_header(path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z["__header__"]).decode())


def load_checkpoint(path, config: BundleConfig | None = None, restore_rng: bool = False) -> ModelBundle:
    """Rebuild a bundle from ``path``; rejects a checkpoint whose config differs from ``config``."""
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
        stored = BundleConfig(**header["config"])
        if config is not None and config != stored:
            raise CheckpointError(f"checkpoint config {stored} does not match requested {config}")
        bundle = ModelBundle(stored)
        with torch.no_grad():
            for comp in COMPONENTS:
                for name, p in bundle.component(comp).named_parameters():
                    key = f"{comp}/{name}"
                    if key not in z:
                        raise CheckpointError(f"missing parameter {key}")
                    blob = torch.from_numpy(z[key])
                    if blob.shape != p.shape:
                        raise CheckpointError(f"{key}: stored shape {tuple(blob.shape)} vs {tuple(p.shape)}")
                    p.copy_(blob)
        if restore_rng:
            torch.set_rng_state(torch.from_numpy(z["__rng__"]))
    return bundle
