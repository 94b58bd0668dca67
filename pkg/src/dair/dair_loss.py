"""Attention-overlap regulariser and its combination with the SAC objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass
class DairConfig:
    """Weight and routing of the attention-overlap penalty.

    ``detach_partner`` stops gradients flowing into the other agents'
    attention when agent ``i``'s penalty is formed.
    """

    lam: float = 0.05
    apply_to_policy: bool = True
    apply_to_q: bool = True
    detach_partner: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"dair lambda must be >= 0, got {self.lam}")


def attn_overlap_loss(alphas, agent_index, detach_partner=False):
    """Sum over other agents ``j`` of ``<alpha_i, alpha_j>^2``.

    Each alpha is a tensor of shape ``(E,)`` or ``(B, E)``; batched inputs are
    averaged over the batch.
    """
    if not 0 <= agent_index < len(alphas):
        raise IndexError(f"agent_index {agent_index} out of range for {len(alphas)} agents")
    alphas = [a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64)) for a in alphas]
    shapes = {a.shape for a in alphas}
    if len(shapes) != 1:
        raise ValueError(f"attention vectors differ in shape: {sorted(shapes)}")
    a_i = alphas[agent_index]
    total = None
    for j, a_j in enumerate(alphas):
        if j == agent_index:
            continue
        if detach_partner:
            a_j = a_j.detach()
        term = (a_i * a_j).sum(axis=-1).square()
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total.mean() if total.ndim else total


def joint_policy_loss(sac_loss, overlap, cfg: DairConfig):
    if cfg.apply_to_policy and cfg.lam != 0.0:
        return sac_loss + overlap.scale(cfg.lam)
    return sac_loss


def joint_q_loss(sac_loss, overlap, cfg: DairConfig):
    if cfg.apply_to_q and cfg.lam != 0.0:
        return sac_loss + overlap.scale(cfg.lam)
    return sac_loss


def batch_overlap_metric(alphas_agent1, alphas_agent2):
    """Mean ``<alpha_1, alpha_2>`` over a batch of states (no gradient)."""
    a1 = np.asarray([getattr(a, "data", a) for a in alphas_agent1], dtype=np.float64)
    a2 = np.asarray([getattr(a, "data", a) for a in alphas_agent2], dtype=np.float64)
    if a1.size == 0 or a2.size == 0:
        raise ValueError("batch_overlap_metric needs at least one pair of attention vectors")
    if a1.shape != a2.shape:
        raise ValueError(f"attention batches differ in shape: {a1.shape} vs {a2.shape}")
    return float(np.mean(np.sum(a1 * a2, axis=-1)))
