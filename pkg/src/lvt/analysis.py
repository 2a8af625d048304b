"""Diagnostics: attention entropy, salient-region CV, the perception-gap report
and the accuracy-vs-focus curve."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .io import svg_histogram, svg_line, write_csv
from .tensor import DegenerateError, no_grad
from .trace import aggregate_gaze, focusing_score, minmax_normalize
from .training import predict

_TOL = 1e-9


def _as_distribution(p, tol=_TOL, what="distribution"):
    p = np.asarray(p, dtype=np.float64)
    if (p < 0).any():
        raise ValueError(f"{what} has negative entries")
    if abs(p.sum(axis=-1) - 1.0).max() > tol:
        raise ValueError(f"{what} does not sum to 1 (tolerance {tol})")
    return p


def renormalize(maps):
    """Scale non-negative maps so each row sums to one."""
    m = np.asarray(maps, dtype=np.float64)
    total = m.sum(axis=-1, keepdims=True)
    if (total <= 0).any():
        raise DegenerateError("cannot renormalise a map with zero mass")
    return m / total


def attention_entropy(a_map, tol=_TOL):
    """Shannon entropy (nats) of a patch distribution, with 0 ln 0 = 0.

    Accepts one map (N,) or a stack (..., N) and returns a float or array.
    """
    p = _as_distribution(a_map, tol, "attention map")
    safe = np.where(p > 0, p, 1.0)
    h = -(p * np.log(safe)).sum(axis=-1)
    h = np.maximum(h, 0.0)
    return float(h) if np.ndim(h) == 0 else h


def kl(p, q, tol=_TOL):
    """KL(p || q) along the last axis for numpy distributions."""
    p = _as_distribution(p, tol, "p")
    q = _as_distribution(q, tol, "q")
    if ((p > 0) & (q <= 0)).any():
        raise ValueError("KL undefined: q is zero where p is positive")
    ratio = np.where(p > 0, p / np.where(q > 0, q, 1.0), 1.0)
    out = (p * np.log(ratio)).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def topk_mass(maps, k_salient):
    """Summed mass of each map's ``k_salient`` largest entries."""
    m = np.asarray(maps, dtype=np.float64)
    if not 1 <= k_salient <= m.shape[-1]:
        raise ValueError(f"k_salient must lie in [1, {m.shape[-1]}]")
    return np.sort(m, axis=-1)[..., ::-1][..., :k_salient].sum(axis=-1)


def salient_cv(maps, k_salient):
    """Coefficient of variation (population std / mean) of top-k mass across samples."""
    m = np.asarray(maps, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2:
        raise ValueError("salient_cv needs at least two maps")
    mass = topk_mass(m, k_salient)
    mu = mass.mean()
    if mu == 0:
        raise DegenerateError("salient_cv: mean top-k mass is zero")
    return float(mass.std() / mu)


# ---------------------------------------------------------------------------
# Perception gap
# ---------------------------------------------------------------------------
@dataclass
class CategoryGap:
    n_tokens: int
    attention_kl: float | None
    cosine_distance: float | None


@dataclass
class GapReport:
    categories: dict  # category -> CategoryGap
    entropy: dict  # "teacher"/"student" -> mean entropy
    salient_cv: dict  # "teacher"/"student" -> CV
    hidden_map: str = "identity"
    per_token: list = field(default_factory=list)

    def rows(self):
        out = []
        for cat in D.CATEGORIES:
            g = self.categories[cat]
            out.append({"category": cat, "n_tokens": g.n_tokens, "attention_kl": g.attention_kl,
                        "cosine_distance": g.cosine_distance})
        return out


def _row_gaze(attn, row, n_image):
    """(L,H,S,S) attention -> renormalised distribution of one query row over image keys."""
    g = attn[:, :, row, :n_image].mean(axis=(0, 1))
    return g / g.sum()


def _forced_pass(model, samples, answers, batch_size):
    """Per-token records from a teacher-forced pass on ``answers``.

    Returns a list of ``(sample_index, category, gaze (P,), hidden (d,))`` for
    every query row that produces a scored token, plus the per-sample mean gaze
    over those rows.
    """
    tokens, sample_maps = [], []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            batch = D.make_batch(chunk, answers[i:i + batch_size], answer_len=None)
            fwd = model.forward(batch, 1.0)
            attn = fwd.attn.stack()
            hidden = fwd.hidden_states()
            lay = fwd.layout
            for b in range(len(chunk)):
                maps = []
                for j in np.flatnonzero(batch.answer_tgt[b] >= 0):
                    row = lay.answer.start + j
                    g = _row_gaze(attn[:, b], row, lay.n_image)
                    maps.append(g)
                    tokens.append((i + b, D.token_category(int(batch.answer_tgt[b, j])), g, hidden[b, row]))
                sample_maps.append(np.mean(maps, axis=0))
    return tokens, np.array(sample_maps)


def fit_hidden_map(src, dst):
    """Least-squares affine map from ``src`` (n, d_s) to ``dst`` (n, d_t)."""
    x = np.hstack([src, np.ones((src.shape[0], 1))])
    w, *_ = np.linalg.lstsq(x, dst, rcond=None)
    return lambda h: np.hstack([h, np.ones((h.shape[0], 1))]) @ w


def _cosine_distance(a, b):
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    cos = (a * b).sum(axis=-1) / np.maximum(na * nb, 1e-300)
    return np.clip(1.0 - cos, 0.0, 2.0)


def perception_gap_report(teacher, student, samples, *, k_salient=8, batch_size=250, answers=None):
    """Per-category attention KL(teacher || student) and hidden-state cosine distance.

    Both models are teacher-forced on the teacher's greedy answers (pass
    ``answers`` to reuse decodes). When hidden widths differ, student states
    are mapped into the teacher space by a least-squares affine fit over all
    compared tokens.
    """
    if answers is None:
        answers, _ = predict(teacher, samples, batch_size=batch_size)
    t_tok, t_maps = _forced_pass(teacher, samples, answers, batch_size)
    s_tok, s_maps = _forced_pass(student, samples, answers, batch_size)
    t_hidden = np.array([t[3] for t in t_tok])
    s_hidden = np.array([s[3] for s in s_tok])
    mapping = "identity"
    if s_hidden.shape[1] != t_hidden.shape[1]:
        s_hidden = fit_hidden_map(s_hidden, t_hidden)(s_hidden)
        mapping = "least-squares"
    kls = np.array([kl(t[2], s[2]) for t, s in zip(t_tok, s_tok)])
    cos = _cosine_distance(t_hidden, s_hidden)
    cats = np.array([t[1] for t in t_tok])
    per_cat = {}
    for cat in D.CATEGORIES:
        sel = cats == cat
        n = int(sel.sum())
        per_cat[cat] = CategoryGap(n, float(kls[sel].mean()) if n else None, float(cos[sel].mean()) if n else None)
    k = min(k_salient, t_maps.shape[1])
    per_token = [{"sample": int(t[0]), "category": t[1], "attention_kl": float(a), "cosine_distance": float(c)}
                 for t, a, c in zip(t_tok, kls, cos)]
    multi = len(samples) >= 2
    return GapReport(
        categories=per_cat,
        entropy={"teacher": float(attention_entropy(t_maps).mean()), "student": float(attention_entropy(s_maps).mean())},
        salient_cv={"teacher": salient_cv(t_maps, k) if multi else None, "student": salient_cv(s_maps, k) if multi else None},
        hidden_map=mapping,
        per_token=per_token,
    )


# ---------------------------------------------------------------------------
# Accuracy vs focus
# ---------------------------------------------------------------------------
def focus_curve_rows(focus, correct, thresholds):
    """Rows ``{threshold, n_retained, accuracy}`` for precomputed focus scores."""
    f = np.asarray(focus, dtype=np.float64)
    ok = np.asarray(correct, dtype=bool)
    taus = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(taus, taus[1:])) or any(not 0.0 <= t <= 1.0 for t in taus):
        raise ValueError("thresholds must be ascending within [0, 1]")
    rows = []
    for tau in taus:
        keep = f >= tau
        n = int(keep.sum())
        rows.append({"threshold": tau, "n_retained": n, "accuracy": float(ok[keep].mean()) if n else None})
    return rows


def focus_split(focus, correct):
    """Mean focusing score over correct and over incorrect samples (None when empty)."""
    f = np.asarray(focus, dtype=np.float64)
    ok = np.asarray(correct, dtype=bool)
    return {
        "mean_focus_correct": float(f[ok].mean()) if ok.any() else None,
        "mean_focus_incorrect": float(f[~ok].mean()) if (~ok).any() else None,
    }


def sample_focus(model, samples, *, eps_norm=1e-8, batch_size=250):
    """Focusing score of the model's own answer-query gaze on each sample's bbox."""
    out = []
    grid = model.config.patch_grid
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            batch = D.make_batch(chunk)
            fwd = model.forward(batch, 1.0)
            attn = fwd.attn.stack()
            for b, s in enumerate(chunk):
                rows = fwd.layout.answer.start + np.flatnonzero(batch.answer_tgt[b] >= 0)
                g = aggregate_gaze(attn[:, b], rows, range(fwd.layout.n_image))
                out.append(focusing_score(minmax_normalize(g, eps_norm).reshape(grid), s.bbox))
    return np.array(out)


def accuracy_vs_focus_curve(model, samples, thresholds, *, batch_size=250):
    """Accuracy restricted to samples whose focusing score reaches each threshold.

    Returns ``(rows, summary)``; ``summary`` holds the mean focus of correct
    and incorrect samples.
    """
    answers, _ = predict(model, samples, batch_size=batch_size)
    correct = np.array([a == s.answer for a, s in zip(answers, samples)])
    focus = sample_focus(model, samples, batch_size=batch_size)
    return focus_curve_rows(focus, correct, thresholds), focus_split(focus, correct)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------
def write_gap_report(run_dir, report: GapReport):
    write_csv(os.path.join(run_dir, "perception_gap.csv"), report.rows(),
              ["category", "n_tokens", "attention_kl", "cosine_distance"])
    write_csv(os.path.join(run_dir, "perception_gap_tokens.csv"), report.per_token,
              ["sample", "category", "attention_kl", "cosine_distance"])
    rows = [{"model": m, "entropy": report.entropy[m], "salient_cv": report.salient_cv[m]} for m in ("teacher", "student")]
    write_csv(os.path.join(run_dir, "model_stats.csv"), rows, ["model", "entropy", "salient_cv"])


def write_entropy_histogram(path, entropies: dict, n_patches):
    svg_histogram(path, entropies, bins=20, title=f"attention entropy (max ln {n_patches} = {math.log(n_patches):.3f})",
                  xlabel="entropy (nats)")


def write_focus_curve(run_dir, rows, summary):
    write_csv(os.path.join(run_dir, "accuracy_vs_focus.csv"), rows, ["threshold", "n_retained", "accuracy"])
    write_csv(os.path.join(run_dir, "focus_split.csv"), [summary], ["mean_focus_correct", "mean_focus_incorrect"])
    svg_line(os.path.join(run_dir, "accuracy_vs_focus.svg"), [r["threshold"] for r in rows],
             [r["accuracy"] for r in rows], title="accuracy vs focusing threshold", xlabel="threshold",
             ylabel="accuracy")
