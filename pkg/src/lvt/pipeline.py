"""Teacher supervision extraction and the three-stage data filter."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .tensor import no_grad
from .trace import aggregate_gaze, build_trace
from .training import predict

DEFAULT_FOCUS_THRESHOLD = 0.20


def default_topk(n_patches, k=8):
    return max(1, min(k, n_patches // 2))


def answer_positions(batch, layout):
    """Per sample, absolute positions of the scored answer queries."""
    start = layout.answer.start
    return [start + np.flatnonzero(row >= 0) for row in batch.answer_tgt]


def generated_positions(batch, layout):
    """Latent queries followed by scored answer queries, per sample."""
    lat = np.arange(layout.latent.start, layout.latent.stop)
    return [np.concatenate([lat, pos]) for pos in answer_positions(batch, layout)]


def model_gaze(model, samples, *, positions="answer", mask_latents=False, batch_size=250):
    """Aggregated image gaze (N, P) from a teacher-forced pass on the reference answers.

    ``positions`` picks the text queries: ``"answer"`` or ``"generated"``
    (latent plus answer queries).
    """
    pick = answer_positions if positions == "answer" else generated_positions
    out = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            batch = D.make_batch(samples[i:i + batch_size])
            fwd = model.forward(batch, 1.0, mask_latents=mask_latents)
            attn = fwd.attn.stack()
            image = range(fwd.layout.n_image)
            for b, pos in enumerate(pick(batch, fwd.layout)):
                out.append(aggregate_gaze(attn[:, b], pos, image))
    return np.array(out)


def extract_supervision(teacher, samples, *, k=None, eps_norm=1e-8, batch_size=250):
    """Fill ``sample.supervision`` from the teacher's teacher-forced pass.

    The trace comes from answer queries over all layers and heads; the
    semantic anchor is the trace-weighted mean of the teacher's final-layer
    states at image positions.
    """
    grid = teacher.config.patch_grid
    k = default_topk(teacher.config.n_patches) if k is None else k
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            batch = D.make_batch(chunk)
            fwd = teacher.forward(batch, 1.0)
            attn = fwd.attn.stack()
            hidden = fwd.hidden_states()[:, fwd.layout.image]
            image = range(fwd.layout.n_image)
            for b, (s, pos) in enumerate(zip(chunk, answer_positions(batch, fwd.layout))):
                gaze = aggregate_gaze(attn[:, b], pos, image)
                tr = build_trace(gaze, grid, s.bbox, k, eps_norm, exempt=s.exempt_from_focus)
                mass = tr.a_traj.sum()
                degenerate = tr.degenerate or not mass > 0
                weights = tr.a_traj / mass if mass > 0 else np.full(len(gaze), 1.0 / len(gaze))
                s.supervision = D.Supervision(
                    gaze=tr.gaze,
                    a_traj=tr.a_traj,
                    sparse_target=tr.sparse_target,
                    v_sem=weights @ hidden[b],
                    focus=tr.focus_score,
                    degenerate=bool(degenerate),
                )
    return samples


@dataclass
class FilterReport:
    wrong_answer: list = field(default_factory=list)
    too_easy: list = field(default_factory=list)
    misaligned: list = field(default_factory=list)
    retained: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def counts(self):
        return {
            "wrong_answer": len(self.wrong_answer),
            "too_easy": len(self.too_easy),
            "misaligned": len(self.misaligned),
            "retained": len(self.retained),
        }


def filter_dataset(samples, teacher_answers, text_only_answers, focus_threshold=DEFAULT_FOCUS_THRESHOLD):
    """Correctness, difficulty, then alignment, applied in that order.

    ``teacher_answers`` / ``text_only_answers`` map sample id to decoded token
    lists. Returns ``(report, retained_samples)``; id buckets are sorted so
    the result does not depend on input order.
    """
    report = FilterReport()
    kept = []
    for s in samples:
        sid = s.sample_id
        t_ans = teacher_answers.get(sid)
        if t_ans is None:
            report.wrong_answer.append(sid)
            report.flags[sid] = "missing-teacher-decode"
            continue
        if list(t_ans) != s.answer:
            report.wrong_answer.append(sid)
            continue
        if list(text_only_answers.get(sid) or []) == s.answer:
            report.too_easy.append(sid)
            continue
        if not s.exempt_from_focus:
            sup = s.supervision
            if sup is None or sup.degenerate or sup.focus is None:
                report.misaligned.append(sid)
                report.flags[sid] = "degenerate-trace"
                continue
            if sup.focus < focus_threshold:
                report.misaligned.append(sid)
                continue
        report.retained.append(sid)
        kept.append(s)
    for bucket in (report.wrong_answer, report.too_easy, report.misaligned, report.retained):
        bucket.sort()
    kept.sort(key=lambda s: s.sample_id)
    return report, kept


def run_filter(samples, teacher, text_only, focus_threshold=DEFAULT_FOCUS_THRESHOLD):
    """Decode with both models, then ``filter_dataset``."""
    t_ans, _ = predict(teacher, samples)
    x_ans, _ = predict(text_only, samples)
    ids = [s.sample_id for s in samples]
    return filter_dataset(samples, dict(zip(ids, t_ans)), dict(zip(ids, x_ans)), focus_threshold)
