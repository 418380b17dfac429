"""The five scalar training objectives.

All binary cross-entropy terms are computed from logits with the stable
softplus form, never sigmoid-then-log, so the confident-prediction limits
hold to machine precision. Background (invalid) pixels are excluded from
every term via the validity mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    edge: float = 1.0
    depth: float = 1.0
    normal: float = 10.0

    def validate(self):
        vals = (self.edge, self.depth, self.normal)
        if any(v < 0 or v != v for v in vals):
            raise ValueError("loss weights must be finite and nonnegative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")

    def as_dict(self):
        return {"edge": self.edge, "depth": self.depth, "normal": self.normal}


def _check_finite(name, t):
    if torch.isnan(t).any() or torch.isinf(t).any():
        raise ValueError(f"{name} contains NaN/Inf")


def _squeeze_map(x):
    if x.ndim == 4 and x.shape[1] == 1:
        return x[:, 0]
    if x.ndim == 3:
        return x
    raise ValueError(f"expected B x H x W or B x 1 x H x W, got {tuple(x.shape)}")


def edge_loss(logits: torch.Tensor, contour: torch.Tensor, beta: torch.Tensor,
              valid: torch.Tensor, batch_mean: bool = True) -> torch.Tensor:
    """Class-balanced sigmoid cross entropy over valid pixels.

    Edge pixels are weighted by beta (the non-edge fraction, so the rare edge
    class is upweighted) and valid background pixels by 1-beta; summed per
    item and divided by batch size unless ``batch_mean`` is off.
    """
    logits = _squeeze_map(logits)
    _check_finite("edge logits", logits)
    contour = _squeeze_map(contour).to(logits.dtype)
    beta = torch.as_tensor(beta, dtype=logits.dtype)
    if ((beta < 0) | (beta > 1)).any():
        raise ValueError("beta must lie in [0, 1]")
    valid = _squeeze_map(valid).bool()

    # -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
    pos = F.softplus(-logits)
    neg = F.softplus(logits)
    is_edge = contour > 0.5
    per_px = torch.where(is_edge, beta.view(-1, 1, 1) * pos,
                         (1.0 - beta).view(-1, 1, 1) * neg)
    total = (per_px * valid.to(logits.dtype)).sum()
    return total / logits.shape[0] if batch_mean else total


def depth_loss(pred_log_depth: torch.Tensor, target_log_depth: torch.Tensor,
               valid: torch.Tensor) -> torch.Tensor:
    """Scale-invariant log-depth loss, averaged over the batch.

    Per item, with d the masked log-depth residual over the n valid pixels:
    mean(d^2) - (sum(d))^2 / (2 n^2).
    """
    pred = _squeeze_map(pred_log_depth)
    _check_finite("predicted log-depth", pred)
    target = _squeeze_map(target_log_depth).to(pred.dtype)
    valid = _squeeze_map(valid).bool()
    n = valid.sum(dim=(1, 2))
    if (n == 0).any():
        raise ValueError("depth loss: item with zero valid pixels")
    d = (pred - target) * valid.to(pred.dtype)
    n = n.to(pred.dtype)
    sq = (d * d).sum(dim=(1, 2)) / n
    coupling = d.sum(dim=(1, 2)).pow(2) / (2.0 * n * n)
    return (sq - coupling).mean()


def normal_loss(pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor,
                unit_tol: float = 1e-3) -> torch.Tensor:
    """Negative mean dot product between predicted and target unit normals."""
    if pred.ndim != 4 or pred.shape[1] != 3:
        raise ValueError(f"expected B x 3 x H x W normals, got {tuple(pred.shape)}")
    _check_finite("predicted normals", pred)
    target = target.to(pred.dtype)
    valid = _squeeze_map(valid).bool()
    vmask = valid.unsqueeze(1)
    for name, t in (("predicted", pred), ("target", target)):
        norms = t.norm(dim=1, keepdim=True)
        bad = ((norms - 1.0).abs() > unit_tol) & vmask
        if bad.any():
            raise ValueError(f"{name} normals deviate from unit norm beyond {unit_tol}")
    dot = (pred * target).sum(dim=1)
    n = valid.sum(dim=(1, 2)).to(pred.dtype)
    if (n == 0).any():
        raise ValueError("normal loss: item with zero valid pixels")
    per_item = -(dot * valid.to(pred.dtype)).sum(dim=(1, 2)) / n
    return per_item.mean()


def discriminator_loss(d_syn: torch.Tensor, d_real: torch.Tensor) -> torch.Tensor:
    """Stable BCE over patch logits: synthetic labeled 1, real labeled 0.

    Mean over all patch locations and batch items of both domains together.
    """
    _check_finite("synthetic patch logits", d_syn)
    _check_finite("real patch logits", d_real)
    total = F.softplus(-d_syn).sum() + F.softplus(d_real).sum()
    return total / (d_syn.numel() + d_real.numel())


def generator_adversarial_loss(d_syn: torch.Tensor,
                               d_real: torch.Tensor | None = None) -> torch.Tensor:
    """Generator-side term pushing synthetic features toward the real label.

    -log(1 - D(z_syn)), patch-mean; with ``d_real`` (bi-fool) additionally
    -log(D(z_real)), pushing real features toward the synthetic label.
    """
    _check_finite("synthetic patch logits", d_syn)
    adv = F.softplus(d_syn).mean()
    if d_real is not None:
        _check_finite("real patch logits", d_real)
        adv = adv + F.softplus(-d_real).mean()
    return adv


def generator_task_loss(d_syn: torch.Tensor | None,
                        predictions: dict[str, torch.Tensor],
                        contour: torch.Tensor, beta: torch.Tensor,
                        log_depth: torch.Tensor, normal: torch.Tensor,
                        valid: torch.Tensor, weights: LossWeights,
                        bifool: bool = False,
                        d_real: torch.Tensor | None = None,
                        adv_weight: float = 1.0):
    """Full generator/heads objective: adversarial term plus weighted tasks.

    Returns (total, breakdown) where the breakdown holds the raw unweighted
    values of each term for logging. ``d_syn=None`` drops the adversarial
    term (no-adaptation ablation).
    """
    if bifool and d_real is None:
        raise ValueError("bifool requires real-domain patch logits")
    terms = {}
    total = torch.zeros((), dtype=predictions["depth"].dtype)
    if d_syn is not None:
        adv = generator_adversarial_loss(d_syn, d_real if bifool else None)
        terms["adv"] = adv
        total = total + adv_weight * adv
    le = edge_loss(predictions["contour"], contour, beta, valid)
    ld = depth_loss(predictions["depth"], log_depth, valid)
    ls = normal_loss(predictions["normal"], normal, valid)
    terms.update(edge=le, depth=ld, normal=ls)
    total = total + weights.edge * le + weights.depth * ld + weights.normal * ls
    return total, terms
