"""Training and evaluation loops for the teacher, text-only baseline and students."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import data as D
from .gate import GateSchedule, constant_schedule
from .losses import (
    DEFAULT_LAMBDA,
    concept_loss,
    ntp_loss,
    student_image_distribution,
    total_loss,
    trajectory_loss,
)
from .model import Model
from .optim import Adam, linear_schedule

log = logging.getLogger(__name__)


class TeacherTrainingError(RuntimeError):
    pass


def predict(model, samples, *, mask_latents=False, batch_size=250):
    """Greedy answers (token lists) and truncation flags for ``samples``."""
    answers, truncated = [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        batch = D.make_batch(chunk)
        toks, trunc, _, _ = model.generate(batch.pixels, batch.question, boa_id=D.BOA, mask_latents=mask_latents)
        answers.extend(toks)
        truncated.extend(trunc.tolist())
    return answers, truncated


def accuracy(model, samples, *, mask_latents=False):
    answers, _ = predict(model, samples, mask_latents=mask_latents)
    correct = np.array([a == s.answer for a, s in zip(answers, samples)])
    return float(correct.mean()) if len(correct) else float("nan"), correct


def _batches(n, batch_size, rng):
    """Endless stream of index batches from fresh permutations."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[i:i + batch_size]


def train_ntp(model, samples, *, steps, lr, batch_size, seed, gamma=1.0, callback=None):
    """Plain next-token training (teacher and text-only baseline)."""
    rng = np.random.default_rng(seed)
    opt = Adam(model.trainable(), lr=lr)
    stream = _batches(len(samples), min(batch_size, len(samples)), rng)
    history = []
    for step in range(steps):
        batch = D.make_batch([samples[i] for i in next(stream)])
        out = model.forward(batch, gamma)
        loss = ntp_loss(out.logits, batch.answer_tgt)
        opt.zero_grad()
        loss.backward()
        opt.step(linear_schedule(step, steps, lr))
        history.append(loss.item())
        if callback is not None and callback(step, model) is False:
            break
    return history


def train_teacher(config, train, val, *, max_steps=5000, lr=2e-3, batch_size=16, seed=0,
                  target=0.95, eval_every=250):
    """Train the plain-VQA teacher until validation accuracy reaches ``target``.

    Raises ``TeacherTrainingError`` with the final accuracy when the step
    budget runs out first.
    """
    model = Model(config)
    state = {"acc": 0.0, "step": 0, "evals": []}
    eval_set = val[:250]

    def check(step, m):
        if (step + 1) % eval_every and step + 1 != max_steps:
            return True
        acc, _ = accuracy(m, eval_set)
        state.update(acc=acc, step=step + 1)
        state["evals"].append((step + 1, acc))
        log.info("teacher step %d val-acc %.3f", step + 1, acc)
        return acc < target

    train_ntp(model, train, steps=max_steps, lr=lr, batch_size=batch_size, seed=seed, callback=check)
    if state["acc"] >= target:
        state["acc"], _ = accuracy(model, val)
    if state["acc"] < target:
        raise TeacherTrainingError(
            f"teacher reached only {state['acc']:.3f} validation accuracy after {state['step']} steps "
            f"(target {target:.2f})"
        )
    return model, state


@dataclass
class StudentOptions:
    total_steps: int = 1000
    warmup_steps: int = 400
    gate_epsilon: float = 1e-6
    lam: float = DEFAULT_LAMBDA
    lr: float = 1e-3
    batch_size: int = 16
    single_stage: bool = False
    use_concept: bool = True
    use_traj: bool = True
    seed: int = 0


def train_student(model, samples, opts: StudentOptions):
    """Joint training under the gate curriculum.

    Returns one log row per step: step, l_ntp, l_concept, l_traj, l_total, gamma.
    Models without latent tokens train on next-token loss only.
    """
    schedule = constant_schedule() if opts.single_stage else GateSchedule(opts.warmup_steps, opts.gate_epsilon)
    rng = np.random.default_rng(opts.seed)
    opt = Adam(model.trainable(), lr=opts.lr)
    stream = _batches(len(samples), min(opts.batch_size, len(samples)), rng)
    has_latents = model.config.k_latent > 0
    rows = []
    for step in range(opts.total_steps):
        chosen = [samples[i] for i in next(stream)]
        batch = D.make_batch(chosen)
        gamma = schedule.gamma(step)
        out = model.forward(batch, gamma)
        l_ntp = ntp_loss(out.logits, batch.answer_tgt)
        l_concept = l_traj = None
        if has_latents:
            v_sem = np.stack([s.supervision.v_sem for s in chosen])
            targets = np.stack([s.supervision.sparse_target for s in chosen])
            l_concept = concept_loss(out.concept_vec, v_sem)
            l_traj = trajectory_loss(targets, student_image_distribution(out.latent_image_attention()))
        bundle = total_loss(l_ntp, l_concept, l_traj, opts.lam, opts.use_concept, opts.use_traj)
        opt.zero_grad()
        bundle.l_total.backward()
        opt.step(linear_schedule(step, opts.total_steps, opts.lr))
        rows.append({"step": step, **bundle.values(), "gamma": gamma})
    return rows
