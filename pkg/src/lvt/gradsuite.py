"""Finite-difference checks of composed pathways through a tiny model.

The kernel-level cases live in ``lvt.tensor.gradcheck``; the cases here push
gradients through the concept head, the latent attention rows and the gated
answer attention, each into its loss.
"""
from __future__ import annotations

import time

import numpy as np

from .losses import concept_loss, ntp_loss, student_image_distribution, trajectory_loss
from .model import Batch, Model, ModelConfig
from .tensor import GRADCHECK_CASES, Tensor, grad_check
from .tensor.gradcheck import check_function


def tiny_model(seed, k_latent=2):
    cfg = ModelConfig(d_model=8, n_layers=2, n_heads=2, vocab_size=7, patch_grid=(2, 2), patch_dim=3,
                      k_latent=k_latent, d_teacher=5, max_seq_len=16, eoa_id=1, init_seed=seed)
    return Model(cfg)


def tiny_batch(rng, b=2):
    return Batch(
        pixels=rng.standard_normal((b, 4, 3)),
        question=rng.integers(0, 7, size=(b, 3)),
        answer_in=rng.integers(0, 7, size=(b, 2)),
        answer_tgt=np.array([[3, 1], [5, -1]])[:b],
    )


def _concept_case(seed):
    rng = np.random.default_rng(seed)
    m = tiny_model(seed)
    h = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
    targets = rng.standard_normal((3, 5))
    inputs = [h] + [m.params[k] for k in ("concept_w1", "concept_b1", "concept_w2", "concept_b2")]
    return inputs, lambda: concept_loss(m.project_concept(h), targets)


def _trajectory_case(seed):
    rng = np.random.default_rng(seed)
    m = tiny_model(seed)
    batch = tiny_batch(rng)
    targets = rng.dirichlet(np.ones(4), size=2)
    targets[0, 1] = 0.0
    targets[0] /= targets[0].sum()
    inputs = [m.params[k] for k in ("l1.wk", "latent_start", "row_emb")]

    def fn():
        out = m.forward(batch, 0.5)
        return trajectory_loss(targets, student_image_distribution(out.latent_image_attention()))

    return inputs, fn


def _gated_ntp_case(seed):
    rng = np.random.default_rng(seed)
    m = tiny_model(seed, k_latent=1)
    batch = tiny_batch(rng)
    inputs = [m.params[k] for k in ("l0.wk", "patch_w", "lm_head")]
    return inputs, lambda: ntp_loss(m.forward(batch, 0.3).logits, batch.answer_tgt)


COMPOSED_CASES = {
    "concept_head->concept_loss": _concept_case,
    "latent_attention->trajectory_loss": _trajectory_case,
    "gated_softmax->ntp_loss": _gated_ntp_case,
}


def composed_check(name, seed=0, step=1e-5):
    inputs, fn = COMPOSED_CASES[name](seed)
    return check_function(fn, inputs, step)


def run_suite(seeds=range(10), step=1e-5):
    """``{case: worst relative error over seeds}`` for kernels and composed paths, plus runtime."""
    t0 = time.perf_counter()
    worst = {}
    for seed in seeds:
        for op in GRADCHECK_CASES:
            worst[op] = max(worst.get(op, 0.0), grad_check(op, seed=seed, step=step))
        for name in COMPOSED_CASES:
            worst[name] = max(worst.get(name, 0.0), composed_check(name, seed, step))
    return worst, time.perf_counter() - t0
