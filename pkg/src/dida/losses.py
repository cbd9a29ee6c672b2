"""Scalar objectives for the adaptation and disentanglement stages."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

PROB_FLOOR = 1e-12
MMD_BANDWIDTH_SCALES = (0.5, 1.0, 2.0, 4.0)


@dataclass
class LossValue:
    """A differentiable scalar plus a named breakdown.

    ``terms`` holds the (already weighted) contributions, so they sum back to
    ``value``.
    """

    value: torch.Tensor
    terms: dict[str, float] = field(default_factory=dict)

    def __float__(self):
        return float(self.value.detach())

    def item(self) -> float:
        return float(self)

    def backward(self) -> None:
        self.value.backward()


def _scalar(value: torch.Tensor, name: str) -> LossValue:
    return LossValue(value, {name: float(value.detach())})


def _mean64(x: torch.Tensor) -> torch.Tensor:
    return x.double().mean().to(x.dtype)


def class_nll(predictions: torch.Tensor, labels: torch.Tensor, log_space: bool = False) -> LossValue:
    """Mean ``-log p[label]`` over the batch.

    ``predictions`` are probability rows, or log-probabilities when
    ``log_space`` is set. The log-space path needs no clamp and keeps
    gradients alive when a softmax saturates.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if predictions.dim() != 2 or labels.shape != predictions.shape[:1]:
        raise ValueError(f"predictions {tuple(predictions.shape)} and labels {tuple(labels.shape)} disagree")
    k = predictions.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    picked = predictions.gather(1, labels[:, None]).squeeze(1)
    logp = picked if log_space else torch.log(picked.clamp_min(PROB_FLOOR))
    return _scalar(_mean64(-logp), "class")


def dann_domain_loss(domain_probs: torch.Tensor, domain_labels: torch.Tensor, logits: bool = False) -> LossValue:
    """Binary cross-entropy of the discriminator; label 1 is the source domain.

    With ``logits=True`` the first argument holds pre-sigmoid scores.
    """
    if logits:
        z = domain_probs.reshape(-1)
        y = torch.as_tensor(domain_labels, dtype=z.dtype).reshape(-1)
        if z.shape != y.shape:
            raise ValueError(f"{z.numel()} scores vs {y.numel()} domain labels")
        bce = torch.nn.functional.binary_cross_entropy_with_logits(z.double(), y.double(), reduction="mean")
        return _scalar(bce.to(z.dtype), "domain")
    # float64 so that the upper clamp 1 - 1e-12 is representable
    p = domain_probs.reshape(-1).double().clamp(PROB_FLOOR, 1 - PROB_FLOOR)
    y = torch.as_tensor(domain_labels, dtype=p.dtype).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"{p.numel()} probabilities vs {y.numel()} domain labels")
    bce = -(y * torch.log(p) + (1 - y) * torch.log1p(-p))
    return _scalar(bce.mean().to(domain_probs.dtype), "domain")


def _covariance(f: torch.Tensor) -> torch.Tensor:
    centered = f - f.mean(0, keepdim=True)
    return centered.T @ centered / (f.shape[0] - 1)


def coral_loss(source: torch.Tensor, target: torch.Tensor) -> LossValue:
    """Squared Frobenius distance of feature covariances, scaled by 1/(4 d^2)."""
    if source.shape[0] < 2 or target.shape[0] < 2:
        raise ValueError("CORAL needs at least 2 rows per domain")
    if source.shape[1] != target.shape[1]:
        raise ValueError(f"feature dims differ: {source.shape[1]} vs {target.shape[1]}")
    d = source.shape[1]
    diff = _covariance(source) - _covariance(target)
    return _scalar((diff * diff).sum() / (4 * d * d), "domain")


def median_bandwidth(source: torch.Tensor, target: torch.Tensor) -> float:
    """Median pairwise Euclidean distance over the pooled rows (1.0 if degenerate)."""
    pooled = torch.cat([source, target]).detach()
    dist = torch.cdist(pooled, pooled)
    off = dist[~torch.eye(len(pooled), dtype=torch.bool)]
    med = float(off.median()) if off.numel() else 0.0
    return med if med > 0 else 1.0


def mmd_loss(source: torch.Tensor, target: torch.Tensor, bandwidths=None) -> LossValue:
    """Biased squared MMD with RBF kernels ``exp(-|x-y|^2 / (2 s^2))`` summed over bandwidths.

    With ``bandwidths=None`` the set is ``{0.5, 1, 2, 4}`` times the median
    pairwise distance of the pooled batch.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("MMD needs at least one row per domain")
    if bandwidths is None:
        med = median_bandwidth(source, target)
        bandwidths = [s * med for s in MMD_BANDWIDTH_SCALES]
    bandwidths = [float(b) for b in bandwidths]
    if any(b <= 0 for b in bandwidths):
        raise ValueError(f"bandwidths must be positive, got {bandwidths}")

    def kernel_mean(a, b):
        sq = (a[:, None, :] - b[None, :, :]).pow(2).sum(-1)
        return sum(torch.exp(-sq / (2 * s * s)) for s in bandwidths).mean()

    value = kernel_mean(source, source) + kernel_mean(target, target) - 2 * kernel_mean(source, target)
    return _scalar(value, "domain")


def recon_mse(x: torch.Tensor, x_hat: torch.Tensor) -> LossValue:
    if x.shape != x_hat.shape:
        raise ValueError(f"reconstruction shape {tuple(x_hat.shape)} does not match input {tuple(x.shape)}")
    return _scalar(_mean64((x - x_hat).pow(2)), "rec")


def da_total(l_class: LossValue, l_domain: LossValue, alpha: float) -> LossValue:
    """Adaptation objective: classification plus ``alpha`` times the domain term."""
    domain = alpha * l_domain.value
    return LossValue(l_class.value + domain, {"class": float(l_class), "domain": float(domain.detach())})


def di_total(l_rec: LossValue, l_aclass: LossValue, beta: float) -> LossValue:
    """Disentanglement objective: reconstruction minus ``beta`` times the adversary's loss."""
    adv = -beta * l_aclass.value
    return LossValue(l_rec.value + adv, {"rec": float(l_rec), "aclass": float(adv.detach())})
