"""Distillation objectives and the gate gradient probe."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    concat,
    cosine_similarity,
    cross_entropy,
    div,
    kl_divergence,
    mean,
    scale,
    sum_,
)

DEFAULT_LAMBDA = 0.3


@dataclass
class LossBundle:
    l_ntp: Tensor
    l_concept: Tensor
    l_traj: Tensor
    l_total: Tensor
    lam: float

    def values(self):
        return {
            "l_ntp": self.l_ntp.item(),
            "l_concept": self.l_concept.item(),
            "l_traj": self.l_traj.item(),
            "l_total": self.l_total.item(),
        }


def concept_loss(concept_vecs, v_sem_targets):
    """1 - mean cosine between projected latent anchors and fixed teacher anchors.

    Targets are constants (no gradient). Zero-norm targets are dropped with a
    warning and the batch mean is taken over the remaining samples.
    """
    targets = np.asarray(v_sem_targets.data if isinstance(v_sem_targets, Tensor) else v_sem_targets, dtype=np.float64)
    if targets.shape != concept_vecs.shape:
        raise ValueError(f"concept_loss: {concept_vecs.shape} vs targets {targets.shape}")
    keep = np.linalg.norm(targets, axis=-1) > 0
    if not keep.all():
        warnings.warn(f"concept_loss: dropping {int((~keep).sum())} zero-norm targets", RuntimeWarning)
        if not keep.any():
            raise ValueError("concept_loss: every target has zero norm")
        idx = np.flatnonzero(keep)
        concept_vecs, targets = concept_vecs[idx], targets[idx]
    cos = cosine_similarity(concept_vecs, Tensor(targets))
    return scale(mean(cos), -1.0) + 1.0


def student_image_distribution(latent_image_attn):
    """Average latent->image rows over layers and heads, renormalised per latent.

    ``latent_image_attn`` is a list over layers of Tensor (B, H, K, P);
    returns Tensor (B, K, P) whose rows sum to one.
    """
    n_layers = len(latent_image_attn)
    stacked = latent_image_attn[0] if n_layers == 1 else concat(latent_image_attn, axis=1)
    avg = mean(stacked, axis=1)
    return div(avg, sum_(avg, axis=-1, keepdims=True))


def trajectory_loss(targets, student_dist):
    """(1/B) * sum_i sum_j KL(target_ij || student_ij), target in the first slot.

    ``targets`` is (B, P) (one target shared by every latent) or (B, K, P).
    """
    t = np.asarray(targets, dtype=np.float64)
    b, k, p = student_dist.shape
    if t.shape == (b, p):
        t = np.broadcast_to(t[:, None, :], (b, k, p))
    if t.shape != (b, k, p):
        raise ValueError(f"trajectory_loss: targets {t.shape} vs student {student_dist.shape}")
    kl = kl_divergence(np.ascontiguousarray(t), student_dist)  # (B, K)
    return scale(sum_(kl), 1.0 / b)


def ntp_loss(logits, targets, ignore_index=-1):
    """Mean next-token cross-entropy over scored answer positions."""
    v = logits.shape[-1]
    return cross_entropy(logits.reshape(-1, v), np.asarray(targets).reshape(-1), ignore_index)


def total_loss(l_ntp, l_concept, l_traj, lam=DEFAULT_LAMBDA, use_concept=True, use_traj=True):
    """l_ntp + lam * (l_concept + l_traj); a disabled term is logged but left out."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    zero = Tensor(np.array(0.0))
    l_concept = zero if l_concept is None else l_concept
    l_traj = zero if l_traj is None else l_traj
    aux = zero
    if use_concept:
        aux = aux + l_concept
    if use_traj:
        aux = aux + l_traj
    return LossBundle(l_ntp, l_concept, l_traj, l_ntp + scale(aux, lam), lam)


def gradient_transition_probe(model, batch, gamma_list):
    """Rows ``(gamma, ||dL_ntp/dI||_F, L_ntp, ||dL_ntp/dI||_F over all paths)``.

    ``I`` is the image patch embedding fed to the decoder. The first norm
    counts only gradient reaching ``I`` through the answer rows' attention to
    image keys, the path the gate scales; the last one also includes the
    ungated routes through question and latent rows. Model parameters are
    left untouched.
    """
    gammas = list(gamma_list)
    if not gammas:
        raise ValueError("gamma_list must not be empty")
    rows = []
    saved = {k: t.requires_grad for k, t in model.params.items()}

    def image_grad_norm(g, path):
        out = model.forward(batch, g, track_image_grad=path)
        loss = ntp_loss(out.logits, batch.answer_tgt)
        loss.backward()
        grad = out.image_embed.grad
        return (0.0 if grad is None else float(np.sqrt((grad * grad).sum()))), loss.item()

    try:
        for t in model.params.values():
            t.requires_grad = False
        for g in gammas:
            direct, loss = image_grad_norm(g, "direct")
            total, _ = image_grad_norm(g, True)
            rows.append((float(g), direct, loss, total))
    finally:
        for k, t in model.params.items():
            t.requires_grad = saved[k]
    return rows
