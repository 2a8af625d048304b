import random

import numpy as np
import pytest

from lvt import data as D
from lvt.model import Model, teacher_config
from lvt.pipeline import default_topk, extract_supervision, filter_dataset
from lvt.tensor import no_grad
from lvt.trace import minmax_normalize

from helpers import filter_fixture, make_sample


def test_filter_fixture_buckets():
    samples, teacher, text_only = filter_fixture()
    report, kept = filter_dataset(samples, teacher, text_only, 0.20)
    assert report.wrong_answer == ["f0", "f1"]
    assert report.too_easy == ["f3"]
    assert report.misaligned == ["f4"]
    assert report.retained == ["f2", "f5", "f6"]
    assert [s.sample_id for s in kept] == ["f2", "f5", "f6"]
    assert report.counts() == {"wrong_answer": 2, "too_easy": 1, "misaligned": 1, "retained": 3}


def test_filter_is_order_independent():
    samples, teacher, text_only = filter_fixture()
    shuffled = samples[:]
    random.Random(0).shuffle(shuffled)
    a, _ = filter_dataset(samples, teacher, text_only)
    b, _ = filter_dataset(shuffled, teacher, text_only)
    assert a == b


def test_filter_threshold_zero_keeps_misaligned():
    samples, teacher, text_only = filter_fixture()
    report, _ = filter_dataset(samples, teacher, text_only, 0.0)
    assert report.misaligned == [] and "f4" in report.retained


def test_filter_missing_decode_is_flagged():
    samples, teacher, text_only = filter_fixture()
    del teacher["f6"]
    report, _ = filter_dataset(samples, teacher, text_only)
    assert "f6" in report.wrong_answer and report.flags["f6"] == "missing-teacher-decode"


def test_filter_degenerate_trace_is_misaligned():
    s = make_sample("d0", degenerate=True)
    report, _ = filter_dataset([s], {"d0": s.answer}, {"d0": []})
    assert report.misaligned == ["d0"] and report.flags["d0"] == "degenerate-trace"


def test_every_id_in_exactly_one_bucket():
    samples, teacher, text_only = filter_fixture()
    report, _ = filter_dataset(samples, teacher, text_only)
    ids = report.wrong_answer + report.too_easy + report.misaligned + report.retained
    assert sorted(ids) == sorted(s.sample_id for s in samples)


def test_all_clean_corpus_is_retained():
    samples = [make_sample(f"c{i}") for i in range(4)]
    ans = {s.sample_id: s.answer for s in samples}
    report, kept = filter_dataset(samples, ans, {k: [] for k in ans})
    assert len(kept) == 4 and report.wrong_answer == report.too_easy == report.misaligned == []


def test_default_topk_clamp():
    assert default_topk(25) == 8
    assert default_topk(9) == 4
    assert default_topk(1) == 1


@pytest.fixture(scope="module")
def tiny_teacher_and_samples():
    grid = D.GridConfig(3, 3, 2, 4)
    samples = D.generate_corpus(5, 6, grid)
    cfg = teacher_config(d_model=16, n_layers=2, n_heads=2, d_teacher=16, vocab_size=len(D.VOCAB),
                         patch_grid=(3, 3), eoa_id=D.EOA)
    return Model(cfg), samples


def test_extract_v_sem_matches_bruteforce(tiny_teacher_and_samples):
    teacher, samples = tiny_teacher_and_samples
    extract_supervision(teacher, samples, k=4)
    batch = D.make_batch(samples)
    with no_grad():
        out = teacher.forward(batch, 1.0)
    hidden = out.hidden_states()
    attn = out.attn.stack()
    for b, s in enumerate(samples):
        rows = [out.layout.answer.start + j for j in range(3) if batch.answer_tgt[b, j] >= 0]
        gaze = np.zeros(9)
        for l in range(attn.shape[0]):
            for h in range(attn.shape[2]):
                for r in rows:
                    gaze += attn[l, b, h, r, :9]
        gaze /= attn.shape[0] * attn.shape[2] * len(rows)
        a = minmax_normalize(gaze)
        v = sum(a[j] * hidden[b, j] for j in range(9)) / a.sum()
        np.testing.assert_allclose(s.supervision.v_sem, v, atol=1e-10)
        np.testing.assert_allclose(s.supervision.a_traj, a, atol=1e-12)
        assert s.supervision.sparse_target.sum() == pytest.approx(1.0)
        assert (s.supervision.sparse_target > 0).sum() <= 4


def test_identical_samples_give_identical_payloads(tiny_teacher_and_samples):
    teacher, samples = tiny_teacher_and_samples
    twins = [samples[0], D.Sample(**{**samples[0].__dict__, "sample_id": "twin", "supervision": None})]
    extract_supervision(teacher, twins, k=4)
    for name in ("gaze", "a_traj", "sparse_target", "v_sem"):
        np.testing.assert_array_equal(getattr(twins[0].supervision, name), getattr(twins[1].supervision, name))
