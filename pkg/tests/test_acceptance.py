"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line.

The lines are repeated in an "acceptance criteria" section of the pytest
terminal summary; ``-s`` also shows them as each test finishes.
"""
import os
import time

import numpy as np
import pytest

from lvt import data as D
from lvt.analysis import attention_entropy, kl
from lvt.cli import ABLATIONS, LOSS_COLUMNS, METRIC_COLUMNS, main
from lvt.config import RunConfig
from lvt.experiment import run_directional_experiment
from lvt.gate import GateSchedule, gate_bias
from lvt.gradsuite import run_suite
from lvt.io import read_csv
from lvt.losses import gradient_transition_probe
from lvt.model import Model
from lvt.pipeline import filter_dataset
from lvt.tensor import no_grad
from lvt.trace import BBox, aggregate_gaze, focusing_score, minmax_normalize, topk_sparsify

from helpers import VERDICTS, filter_fixture
from test_model import small_batch, small_config
from test_trace import naive_focus, naive_gaze, naive_minmax, naive_topk, random_attention
from test_cli import TINY

PROBE_GAMMAS = (1e-6, 1e-3, 0.1, 0.5, 1.0)


def verdict(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    VERDICTS.append(line)
    print("\n" + line)
    assert ok, detail


def test_criterion_1_gradient_suite():
    worst, seconds = run_suite(range(10))
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-5 and seconds < 60
    verdict(1, ok, f"{len(worst)} cases x 10 seeds, worst {name} rel err {err:.2e} < 1e-5, {seconds:.1f}s < 60s")


def test_criterion_2_schedule_identities():
    eps, tw = 1e-6, 400
    s = GateSchedule(tw, eps)
    errs = {
        "gamma(0)": abs(s.gamma(0) - eps),
        "gamma(Tw/2)": abs(s.gamma(tw // 2) - (1 + eps) / 2),
    }
    after = all(s.gamma(t) == 1.0 for t in range(tw, 3 * tw))
    grid = [s.gamma(t) for t in np.linspace(0, tw, 1000)]
    monotone = all(b >= a for a, b in zip(grid, grid[1:]))
    zero_bias = gate_bias(1.0) == 0.0
    ok = max(errs.values()) <= 1e-12 and after and monotone and zero_bias
    verdict(2, ok, f"max identity err {max(errs.values()):.1e}, open after warmup {after}, "
                   f"monotone {monotone}, bias(1)==0 {zero_bias}")


def test_criterion_3_gating_identities():
    rng = np.random.default_rng(1)
    m = Model(small_config())
    batch = small_batch(rng)
    with no_grad():
        a = m.forward(batch, 1.0).logits.data
        b = m.forward(batch, 1.0, gated=False).logits.data
    logit_err = float(np.max(np.abs(a - b)))
    ta, *_ = m.generate(batch.pixels, batch.question, boa_id=2)
    tb, *_ = m.generate(batch.pixels, batch.question, boa_id=2, gated=False)
    mass_err = 0.0
    for g in (1e-6, 0.01, 0.3, 0.9):
        with no_grad():
            out = m.forward(batch, g, record_scores=True)
        lay = out.layout
        for layer in range(m.config.n_layers):
            att, sc = out.attn.matrix(layer), out.attn.score_matrix(layer)
            for row in range(lay.answer.start, lay.answer.stop):
                visible = sc[:, :, row, : row + 1]
                e = np.exp(visible - visible.max(axis=-1, keepdims=True))
                e_img, e_other = e[..., : lay.n_image].sum(-1), e[..., lay.n_image:].sum(-1)
                expected = g * e_img / (g * e_img + e_other)
                mass_err = max(mass_err, float(np.max(np.abs(att[:, :, row, : lay.n_image].sum(-1) - expected))))
    ok = logit_err <= 1e-12 and ta == tb and mass_err <= 1e-10
    verdict(3, ok, f"open-gate logit err {logit_err:.1e} <= 1e-12, greedy tokens equal {ta == tb}, "
                   f"answer->image mass err {mass_err:.1e} <= 1e-10")


def test_criterion_4_trace_oracles():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        attn = random_attention(rng)
        text, image = [6, 8, 9], range(4)
        g = aggregate_gaze(attn, text, image)
        a = minmax_normalize(g)
        grid = rng.random((3, 4))
        box = BBox(0, 1, 2, 3)
        worst = max(
            worst,
            np.max(np.abs(g - naive_gaze(attn, text, image))),
            np.max(np.abs(a - naive_minmax(list(g), 1e-8))),
            np.max(np.abs(topk_sparsify(a, 2) - naive_topk(list(a), 2))),
            abs(focusing_score(grid, box) - naive_focus(grid, box)),
        )
    closed = [
        abs(attention_entropy(np.full(16, 1 / 16)) - np.log(16)),
        abs(attention_entropy(np.array([0.5, 0.5, 0, 0])) - np.log(2)),
        abs(attention_entropy(np.eye(4)[1])),
        abs(kl(np.eye(10)[0], np.full(10, 0.1)) - np.log(10)),
        abs(kl(np.array([0.5, 0.5]), np.array([0.5, 0.5]))),
    ]
    ok = worst <= 1e-10 and max(closed) <= 1e-12
    verdict(4, ok, f"100 instances, worst oracle diff {worst:.1e} <= 1e-10, closed-form err {max(closed):.1e} <= 1e-12")


def test_criterion_6_filter_fixture():
    samples, teacher, text_only = filter_fixture()
    report, kept = filter_dataset(samples, teacher, text_only, 0.20)
    counts = report.counts()
    ok = (
        [s.sample_id for s in kept] == ["f2", "f5", "f6"]
        and report.wrong_answer == ["f0", "f1"]
        and report.too_easy == ["f3"]
        and report.misaligned == ["f4"]
    )
    verdict(6, ok, f"buckets {counts}")


def test_criterion_8_ablation_harness(tmp_path, monkeypatch):
    cfg = tmp_path / "tiny.txt"
    cfg.write_text(TINY)
    root = str(tmp_path / "run")
    for cmd in ("gen-data", "train-teacher", "extract", "filter", "ablate"):
        assert main([cmd, "--config", str(cfg), "--run-dir", root]) == 0, cmd
    problems = []
    summary = read_csv(os.path.join(root, "ablate", "summary.csv"))
    if [r["variant"] for r in summary] != list(ABLATIONS):
        problems.append("summary variants")
    tables = {}
    for v in ABLATIONS:
        losses = read_csv(os.path.join(root, "ablate", v, "losses.csv"))
        metrics = read_csv(os.path.join(root, "ablate", v, "metrics.csv"))
        if not losses or list(losses[0]) != LOSS_COLUMNS or any("" in (r["l_ntp"], r["gamma"]) for r in losses):
            problems.append(f"{v} losses")
        if len(metrics) != 1 or list(metrics[0]) != METRIC_COLUMNS:
            problems.append(f"{v} metrics")
        tables[v] = losses
    full, single = tables["full"], tables["single_stage"]
    if not (float(full[0]["gamma"]) < 1.0 and all(float(r["gamma"]) == 1.0 for r in single)):
        problems.append("gate column")
    if [r["step"] for r in full] != [r["step"] for r in single]:
        problems.append("step column")
    if len({tuple(tuple(r.values()) for r in tables[v]) for v in ("k4", "k6", "k8")}) != 3:
        problems.append("K sweep runs are not distinct")
    # With the gate forced open, the full run must reproduce single-stage exactly.
    single_cfg = os.path.join(root, "ablate", "single_stage", "config.txt")
    monkeypatch.setattr(GateSchedule, "gamma", lambda self, t: 1.0)
    assert main(["train-student", "--config", single_cfg, "--run-dir", root, "--single-stage", "false",
                 "--name", "forced"]) == 0
    forced = read_csv(os.path.join(root, "students", "forced", "losses.csv"))
    if forced != single:
        problems.append("full run with open gate differs from single-stage")
    ok = not problems
    verdict(8, ok, f"{len(ABLATIONS)} variant runs with complete CSVs; single-stage differs only through the gate"
            if ok else "; ".join(problems))


# ---------------------------------------------------------------------------
# slow: the end-to-end experiment, its probe and its repetition
# ---------------------------------------------------------------------------
E2E_SEEDS = (0, 1, 2)
E2E_BUDGET = 15 * 60


@pytest.fixture(scope="module")
def experiment():
    t0 = time.perf_counter()
    result = run_directional_experiment(RunConfig(), seeds=E2E_SEEDS)
    return result, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_5_gradient_probe(experiment):
    result, _ = experiment
    student = result.models["seed0"]["distilled"]
    test = [s for s in result.models["test"] if not s.exempt_from_focus][:16]
    t0 = time.perf_counter()
    rows = gradient_transition_probe(student, D.make_batch(test), PROBE_GAMMAS)
    seconds = time.perf_counter() - t0
    norms = [r[1] for r in rows]
    totals = [r[3] for r in rows]
    monotone = all(b >= a for a, b in zip(norms, norms[1:]))
    ratio = norms[0] / norms[-1]
    print("\n  all-path norms " + ", ".join(f"{g:g}:{n:.3e}" for g, n in zip(PROBE_GAMMAS, totals)))
    ok = monotone and ratio < 0.01 and seconds < 60
    verdict(5, ok, "direct-path norms " + ", ".join(f"{g:g}:{n:.3e}" for g, n in zip(PROBE_GAMMAS, norms))
            + f"; non-decreasing {monotone}; ratio(1e-6 / 1) {ratio:.2e} < 0.01; {seconds:.1f}s < 60s")


@pytest.mark.slow
def test_criterion_7_directional_experiment(experiment):
    result, seconds = experiment
    passed = result.passed(need=2)
    teacher_acc = result.teacher["val_accuracy"]
    for row in result.seeds:
        lv, nv = row["distilled"], row["naive"]
        print(f"\n  seed {row['seed']}: KL {lv['trajectory_kl']:.4f} vs {nv['trajectory_kl']:.4f}, "
              f"mask drop {lv['mask_drop']:+.3f} vs {nv['mask_drop']:+.3f}, "
              f"entropy {lv['entropy']:.4f} vs {nv['entropy']:.4f}, "
              f"accuracy {lv['accuracy']:.3f} vs {nv['accuracy']:.3f}")
    ok = teacher_acc >= 0.95 and all(passed.values()) and seconds <= E2E_BUDGET
    verdict(7, ok, f"teacher val acc {teacher_acc:.3f} >= 0.95, filter {result.filter_counts}, "
                   f"2-of-3 checks {passed}, {seconds:.0f}s <= {E2E_BUDGET}s")


@pytest.mark.slow
def test_criterion_9_determinism(experiment):
    first, _ = experiment
    again = run_directional_experiment(RunConfig(), seeds=E2E_SEEDS)
    a, b = first.metrics(), again.metrics()
    diff = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not diff
    verdict(9, ok, f"{len(a)} reported metrics bit-identical on repeat" if ok else f"differing: {diff[:5]}")
