"""Differentiable building blocks shared by every network in the package.

Tensors, layers, reverse-mode gradients and the optimizers come from torch.
What lives here is the part torch does not give us directly: the gradient
reversal layer, a frozen-aware optimizer step, deterministic seeding, and an
independent central-difference gradient checker used as a test oracle.
"""
from __future__ import annotations

import hashlib
import random
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

DTYPE = torch.float32


class ShapeError(ValueError):
    """Input tensor does not match a layer's input contract."""


class GradientError(RuntimeError):
    """Raised when gradients are missing or a loss is non-finite."""


class _ReverseGradient(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambd, None


def gradient_reversal(x: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
    """Identity on the forward pass, multiplies the upstream gradient by ``-lambd``."""
    if lambd < 0:
        raise ValueError(f"gradient reversal weight must be >= 0, got {lambd}")
    return _ReverseGradient.apply(x, float(lambd))


class GradientReversal(nn.Module):
    def __init__(self, lambd: float = 1.0):
        super().__init__()
        if lambd < 0:
            raise ValueError(f"gradient reversal weight must be >= 0, got {lambd}")
        self.lambd = float(lambd)

    def forward(self, x):
        return gradient_reversal(x, self.lambd)

    def extra_repr(self):
        return f"lambd={self.lambd}"


class Upsample2x(nn.Module):
    """Nearest-neighbour 2x upsampling followed by a same-padded convolution."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        check_kernel(kernel_size, 1)
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


def check_kernel(kernel_size: int, stride: int) -> None:
    if kernel_size not in (3, 5):
        raise ValueError(f"only square kernels of size 3 or 5 are supported, got {kernel_size}")
    if stride not in (1, 2):
        raise ValueError(f"only stride 1 or 2 is supported, got {stride}")


def conv2d(in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 2) -> nn.Conv2d:
    check_kernel(kernel_size, stride)
    return nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2)


def _expected_trailing_shape(layer: nn.Module) -> tuple[int, ...] | None:
    if isinstance(layer, nn.Linear):
        return (layer.in_features,)
    if isinstance(layer, (nn.Conv2d, Upsample2x)):
        conv = layer.conv if isinstance(layer, Upsample2x) else layer
        return (conv.in_channels, None, None)
    return None


def layer_forward(layer: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Apply ``layer`` to ``x`` after checking the layer's input contract.

    Mismatches raise :class:`ShapeError` carrying both the expected and the
    received shape instead of torch's matmul/conv message.
    """
    expected = _expected_trailing_shape(layer)
    if expected is not None:
        got = tuple(x.shape[-len(expected):]) if x.dim() >= len(expected) else tuple(x.shape)
        if isinstance(layer, nn.Linear):
            ok = x.dim() >= 1 and got == expected
        else:
            ok = x.dim() == 4 and got[0] == expected[0]
        if not ok:
            raise ShapeError(
                f"{type(layer).__name__} expects input (..., {', '.join('*' if d is None else str(d) for d in expected)}), "
                f"got {tuple(x.shape)}"
            )
    return layer(x)


def init_parameters(module: nn.Module, std: float | None = None) -> None:
    """Truncated-normal weights clipped at two std, zero biases.

    ``std=None`` scales each weight tensor by its fan-in (``sqrt(2 / fan_in)``);
    a fixed std such as 0.02 leaves these small ReLU stacks stuck at chance for
    several epochs.
    """
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(p)
            continue
        fan_in = p[0].numel() if p.dim() > 1 else p.numel()
        s = std if std is not None else (2.0 / max(fan_in, 1)) ** 0.5
        nn.init.trunc_normal_(p, std=s, a=-2 * s, b=2 * s)


def make_optimizer(kind: str, params: Iterable[nn.Parameter], lr: float) -> torch.optim.Optimizer:
    params = list(params)
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=0.9)
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)
    raise ValueError(f"unknown optimizer kind {kind!r}; expected 'sgd' or 'adam'")


def optimizer_step(optimizer: torch.optim.Optimizer) -> None:
    """Apply one update and clear gradients.

    Every trainable parameter owned by ``optimizer`` must carry a gradient.
    Frozen parameters (``requires_grad=False``) are skipped entirely, which
    also keeps Adam's moment buffers from drifting them.
    """
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.requires_grad and p.grad is None:
                raise GradientError(f"trainable parameter of shape {tuple(p.shape)} has no gradient")
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-3,
    max_coords: int | None = 64,
    seed: int = 0,
    gradient_scale: float = 1.0,
) -> float:
    """Largest relative disagreement between autograd and central differences.

    ``loss_fn`` is called without arguments and must read ``params``. The
    relative error per coordinate is ``|a - c| / (|a| + |c| + 1e-8)``; at most
    ``max_coords`` coordinates per tensor are sampled (all when ``None``).
    ``gradient_scale`` multiplies the numerical gradient before comparing:
    pass ``-lambd`` for parameters upstream of a gradient reversal.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        raise GradientError(f"loss is not finite: {loss.item()}")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            n = flat.numel()
            idx = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = loss_fn().item()
                flat[i] = orig - epsilon
                down = loss_fn().item()
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise GradientError("loss became non-finite under perturbation")
                central = gradient_scale * (up - down) / (2 * epsilon)
                a = g.view(-1)[i].item()
                worst = max(worst, abs(a - central) / (abs(a) + abs(central) + 1e-8))
    return worst


def seed_everything(seed: int, deterministic: bool = True) -> torch.Generator:
    """Seed python, numpy and torch; return a torch generator for explicit use."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over the raw bytes of every parameter, in registration order."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
