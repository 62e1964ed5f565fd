"""Classification, supervised contrastive and adversarial contrastive objectives.

Labels are 1-based class indices everywhere. Embeddings are expected to be unit
vectors, so the similarity is a plain dot product.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch


class DegenerateBatchError(ValueError):
    """No anchor in the batch has both a positive and a negative."""


@dataclass
class LossConfig:
    tau: float = 0.1
    lambda1: float = 0.1
    lambda2: Optional[float] = None  # tied to lambda1 when None
    prob_floor: float = 1e-12
    supcon_denominator: str = "negatives"  # or "all"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lambda2 is None:
            self.lambda2 = self.lambda1
        if self.supcon_denominator not in ("negatives", "all"):
            raise ValueError(f"unknown supcon_denominator {self.supcon_denominator!r}")


def cross_entropy(probs: torch.Tensor, labels: torch.Tensor, prob_floor: float = 1e-12) -> torch.Tensor:
    """Mean of ``-log p_i[y_i]`` with ``p`` clamped from below at ``prob_floor``."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_classes = probs.shape[1]
    if labels.numel() and (labels.min() < 1 or labels.max() > n_classes):
        raise ValueError(f"labels must lie in [1, {n_classes}]")
    picked = probs.gather(1, (labels - 1)[:, None])[:, 0]
    return -torch.log(picked.clamp_min(prob_floor)).mean()


def domain_ce_losses(preds_sd, preds_ed, preds_id, labels, prob_floor: float = 1e-12):
    """Cross-entropy of the source, extended and intermediate predictions against shared labels."""
    if not (preds_sd.shape == preds_ed.shape == preds_id.shape):
        raise ValueError("prediction sets are misaligned")
    return tuple(cross_entropy(p, labels, prob_floor) for p in (preds_sd, preds_ed, preds_id))


def _contrastive(
    sim: torch.Tensor,
    pos: torch.Tensor,
    neg: torch.Tensor,
    denom_mask: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, int]:
    """Sum over anchors of ``-(1/|P|) sum_p [s_ip - logsumexp_{a in A} s_ia]``.

    ``sim`` is anchors x candidates (already divided by tau). ``denom_mask``
    overrides the set summed in the denominator (defaults to ``neg``).
    """
    if denom_mask is None:
        denom_mask = neg
    n_pos = pos.sum(dim=1)
    valid = (n_pos > 0) & (neg.sum(dim=1) > 0)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return sim.new_zeros(()), 0
    sim = sim[valid]
    pos = pos[valid]
    log_denom = torch.logsumexp(sim.masked_fill(~denom_mask[valid], float("-inf")), dim=1)
    pos_mean = (sim * pos).sum(dim=1) / n_pos[valid]
    return -(pos_mean - log_denom).sum(), n_valid


def supcon_loss(
    z: torch.Tensor,
    labels: torch.Tensor,
    tau: float = 0.1,
    denominator: str = "negatives",
) -> torch.Tensor:
    """Supervised contrastive loss over a pooled batch of unit embeddings.

    Positives of anchor ``i`` are all other samples with its label, negatives
    all samples with another label. Anchors lacking either are skipped; the sum
    is divided by the number of contributing anchors.
    """
    labels = torch.as_tensor(labels)
    n = z.shape[0]
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool)
    pos = same & ~eye
    neg = ~same
    denom = neg if denominator == "negatives" else ~eye
    total, count = _contrastive(z @ z.T / tau, pos, neg, denom)
    if count == 0:
        raise DegenerateBatchError(
            f"degenerate batch: no anchor has both a positive and a negative "
            f"(n={n}, classes={sorted(set(labels.tolist()))})"
        )
    return total / count


def adv_loss(
    sd_z: torch.Tensor,
    sd_labels: torch.Tensor,
    neg_z: torch.Tensor,
    neg_labels: torch.Tensor,
    tau: float = 0.1,
) -> torch.Tensor:
    """Adversarial contrastive loss: same-class source samples are positives,
    same-class extended/intermediate samples are negatives.

    Only anchors of classes with at least two source samples and at least one
    negative-domain sample contribute.
    """
    sd_labels = torch.as_tensor(sd_labels)
    neg_labels = torch.as_tensor(neg_labels)
    n = sd_z.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    pos = (sd_labels[:, None] == sd_labels[None, :]) & ~eye
    neg = sd_labels[:, None] == neg_labels[None, :]
    sim = torch.cat([sd_z @ sd_z.T, sd_z @ neg_z.T], dim=1) / tau
    pos_full = torch.cat([pos, torch.zeros_like(neg)], dim=1)
    neg_full = torch.cat([torch.zeros_like(pos), neg], dim=1)
    total, count = _contrastive(sim, pos_full, neg_full)
    if count == 0:
        raise DegenerateBatchError(
            "degenerate batch: no class has >= 2 source samples and a same-class negative"
        )
    return total / count


def d_objective(l_sd, l_ed, l_id, l_supcon, lambda1: float = 0.1):
    return l_sd + l_ed + l_id + lambda1 * l_supcon


def g_objective(l_ed, l_adv, lambda2: float = 0.1):
    return l_ed + lambda2 * l_adv


__all__ = [
    "DegenerateBatchError",
    "LossConfig",
    "cross_entropy",
    "domain_ce_losses",
    "supcon_loss",
    "adv_loss",
    "d_objective",
    "g_objective",
]
