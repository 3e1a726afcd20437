"""Masked pose losses, the part cross-entropy, and the weighted CDCL objective.

Every loss accepts either a single sample (``[C, h, w]`` maps with a
``[h, w]`` mask) or a batch (``[N, C, h, w]`` with ``[N, h, w]``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import math

import torch
import torch.nn.functional as F

SUM = "sum"
MEAN = "mean"

TERMS = ("kpts_r", "paf_r", "kpts_s", "paf_s", "part_s", "part_r")


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    reduction: str = SUM

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {v}")
            setattr(self, name, v)
        if self.reduction not in (SUM, MEAN):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_mask(pred: torch.Tensor, mask: torch.Tensor, name: str) -> torch.Tensor:
    if pred.dim() not in (3, 4):
        raise ValueError(f"{name}: expected [C,h,w] or [N,C,h,w] predictions, got {tuple(pred.shape)}")
    if mask.shape != pred.shape[:-3] + pred.shape[-2:]:
        raise ValueError(f"{name}: mask shape {tuple(mask.shape)} does not match maps {tuple(pred.shape)}")
    return mask.to(pred.dtype)


def _reduce(total: torch.Tensor, mask: torch.Tensor, channels: int, reduction: str) -> torch.Tensor:
    if reduction == SUM:
        return total
    n = mask.sum() * channels
    if n.item() == 0:
        return total * 0.0
    return total / n


def loss_kpts(K: torch.Tensor, K_hat: torch.Tensor, M: torch.Tensor, reduction: str = SUM) -> torch.Tensor:
    if K.shape != K_hat.shape:
        raise ValueError(f"loss_kpts: target {tuple(K.shape)} vs prediction {tuple(K_hat.shape)}")
    M = _check_mask(K_hat, M, "loss_kpts")
    total = (M.unsqueeze(-3) * (K - K_hat) ** 2).sum()
    return _reduce(total, M, K.shape[-3], reduction)


def loss_paf(P: torch.Tensor, P_hat: torch.Tensor, M: torch.Tensor, reduction: str = SUM) -> torch.Tensor:
    if P.shape != P_hat.shape:
        raise ValueError(f"loss_paf: target {tuple(P.shape)} vs prediction {tuple(P_hat.shape)}")
    if P.shape[-3] % 2:
        raise ValueError("loss_paf: channel count must be even (x/y per limb)")
    M = _check_mask(P_hat, M, "loss_paf")
    # each limb's squared vector norm is the sum of its two channel terms
    total = (M.unsqueeze(-3) * (P - P_hat) ** 2).sum()
    return _reduce(total, M, P.shape[-3] // 2, reduction)


def loss_part(B: torch.Tensor, B_logits: torch.Tensor, M: torch.Tensor, reduction: str = SUM) -> torch.Tensor:
    M = _check_mask(B_logits, M, "loss_part")
    if B.shape != M.shape:
        raise ValueError(f"loss_part: labels {tuple(B.shape)} vs mask {tuple(M.shape)}")
    n_cls = B_logits.shape[-3]
    B = B.long()
    if B.numel() and (B.min() < 0 or B.max() >= n_cls):
        raise ValueError(f"loss_part: label outside [0, {n_cls - 1}]")
    logp = F.log_softmax(B_logits, dim=-3)
    picked = torch.gather(logp, -3, B.unsqueeze(-3)).squeeze(-3)
    total = -(M * picked).sum()
    return _reduce(total, M, 1, reduction)


def loss_pose(K, K_hat, P, P_hat, M, reduction: str = SUM):
    return loss_kpts(K, K_hat, M, reduction), loss_paf(P, P_hat, M, reduction)


def loss_total(real_out, real_targets, syn_out, syn_targets, w: LossWeights,
               allow_real_parts: bool = False) -> tuple[torch.Tensor, dict]:
    """Weighted five-term objective; returns the total and each weighted term.

    ``*_out`` are objects exposing ``K_hat``, ``P_hat``, ``B_hat``;
    ``*_targets`` expose ``K``, ``P``, ``B`` (may be None) and ``M``. Either
    domain may be ``None`` (empty in this batch). Terms whose weight is zero
    are not evaluated, so their heads receive no gradient. With
    ``allow_real_parts`` a sixth term ``gamma * part_r`` supervises parts on
    real images.
    """
    terms: dict[str, torch.Tensor] = {}
    red = w.reduction
    if real_targets is not None and real_targets.B is not None and not allow_real_parts:
        raise ValueError("real-domain part labels supplied outside the CDCL_REAL configuration")

    if real_out is not None and w.alpha > 0:
        k, p = loss_pose(real_targets.K, real_out.K_hat, real_targets.P, real_out.P_hat, real_targets.M, red)
        terms["kpts_r"] = w.alpha * k
        terms["paf_r"] = w.alpha * p
    if syn_out is not None and w.beta > 0:
        k, p = loss_pose(syn_targets.K, syn_out.K_hat, syn_targets.P, syn_out.P_hat, syn_targets.M, red)
        terms["kpts_s"] = w.beta * k
        terms["paf_s"] = w.beta * p
    if syn_out is not None and w.gamma > 0:
        if syn_targets.B is None:
            raise ValueError("synthetic targets carry no part labels")
        terms["part_s"] = w.gamma * loss_part(syn_targets.B, syn_out.B_hat, syn_targets.M, red)
    if allow_real_parts and real_out is not None and real_targets.B is not None and w.gamma > 0:
        terms["part_r"] = w.gamma * loss_part(real_targets.B, real_out.B_hat, real_targets.M, red)

    if terms:
        total = torch.stack([terms[k] for k in TERMS if k in terms]).sum()
    else:
        ref = syn_out if syn_out is not None else real_out
        total = ref.K_hat.sum() * 0.0 if ref is not None else torch.zeros(())
    return total, terms


def extra_pose_loss(out, targets, weight: float, reduction: str = SUM) -> Optional[torch.Tensor]:
    """Pose loss for the optional novel-keypoint heads (synthetic only)."""
    if out is None or out.K2_hat is None or targets.K2 is None or weight <= 0:
        return None
    k, p = loss_pose(targets.K2, out.K2_hat, targets.P2, out.P2_hat, targets.M, reduction)
    return weight * (k + p)
