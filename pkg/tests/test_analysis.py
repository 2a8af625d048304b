import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lvt import data as D
from lvt.analysis import (
    attention_entropy,
    focus_curve_rows,
    focus_split,
    kl,
    perception_gap_report,
    salient_cv,
    topk_mass,
)
from lvt.model import Model, ModelConfig
from lvt.tensor import DegenerateError


def test_entropy_closed_forms():
    assert attention_entropy(np.full(16, 1 / 16)) == pytest.approx(np.log(16), abs=1e-12)
    assert attention_entropy(np.eye(5)[2]) == 0.0
    assert attention_entropy(np.array([0.5, 0.5, 0.0, 0.0])) == pytest.approx(np.log(2), abs=1e-12)


def test_entropy_rejects_bad_input():
    with pytest.raises(ValueError):
        attention_entropy(np.array([1.2, -0.2]))
    with pytest.raises(ValueError):
        attention_entropy(np.array([0.4, 0.4]))


@given(st.integers(2, 40), st.integers(0, 10_000))
def test_entropy_bounds(n, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(n) * 0.3)
    h = attention_entropy(p)
    assert -1e-12 <= h <= np.log(n) + 1e-12


def test_kl_onehot_vs_uniform_is_log_n():
    assert kl(np.eye(12)[0], np.full(12, 1 / 12)) == pytest.approx(np.log(12), abs=1e-12)


def test_salient_cv_examples():
    maps = np.array([[0.4, 0.3, 0.3], [0.6, 0.2, 0.2]])
    assert salient_cv(maps, 1) == pytest.approx(0.2)
    assert salient_cv(np.tile([0.5, 0.25, 0.25], (4, 1)), 2) == 0.0
    assert salient_cv(maps, 3) == pytest.approx(0.0, abs=1e-15)


def test_salient_cv_errors():
    with pytest.raises(ValueError):
        salient_cv(np.array([[1.0, 0.0]]), 1)
    with pytest.raises(DegenerateError):
        salient_cv(np.zeros((2, 3)), 1)


@given(st.floats(0.1, 10.0), st.integers(0, 1000))
def test_salient_cv_scale_invariant(c, seed):
    maps = np.random.default_rng(seed).dirichlet(np.ones(6), size=4)
    assert salient_cv(maps * c, 2) == pytest.approx(salient_cv(maps, 2), rel=1e-9)


def test_topk_mass():
    np.testing.assert_allclose(topk_mass(np.array([[0.1, 0.6, 0.3]]), 2), [0.9])


def test_focus_curve_fixture_is_monotone():
    focus = np.array([0.05, 0.1, 0.3, 0.6, 0.7, 0.15])
    correct = focus >= 0.2  # exactly the low-focus samples are wrong
    rows = focus_curve_rows(focus, correct, [0.0, 0.2, 0.5])
    accs = [r["accuracy"] for r in rows]
    assert accs == sorted(accs)
    assert rows[0]["accuracy"] == pytest.approx(correct.mean())
    assert [r["n_retained"] for r in rows] == [6, 3, 2]


def test_focus_curve_empty_threshold_and_ordering():
    rows = focus_curve_rows([0.1, 0.2], [True, False], [0.0, 0.9])
    assert rows[1] == {"threshold": 0.9, "n_retained": 0, "accuracy": None}
    with pytest.raises(ValueError):
        focus_curve_rows([0.1], [True], [0.5, 0.2])


def test_focus_split():
    s = focus_split([0.4, 0.2, 0.1], [True, True, False])
    assert s["mean_focus_correct"] == pytest.approx(0.3)
    assert s["mean_focus_incorrect"] == pytest.approx(0.1)
    assert focus_split([0.4], [True])["mean_focus_incorrect"] is None


@pytest.fixture(scope="module")
def gap_setup():
    grid = D.GridConfig(3, 3, 2, 4)
    samples = D.generate_corpus(11, 8, grid)
    cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, vocab_size=len(D.VOCAB), patch_grid=(3, 3),
                      k_latent=0, d_teacher=16, eoa_id=D.EOA)
    return Model(cfg), samples


def test_gap_report_self_comparison_is_zero(gap_setup):
    model, samples = gap_setup
    rep = perception_gap_report(model, model, samples, k_salient=3)
    for cat, g in rep.categories.items():
        if g.n_tokens:
            assert g.attention_kl == pytest.approx(0.0, abs=1e-12)
            assert g.cosine_distance == pytest.approx(0.0, abs=1e-12)
        else:
            assert g.attention_kl is None
    assert rep.hidden_map == "identity"


def test_gap_report_handles_width_mismatch(gap_setup):
    teacher, samples = gap_setup
    student = Model(ModelConfig(d_model=8, n_layers=1, n_heads=2, vocab_size=len(D.VOCAB), patch_grid=(3, 3),
                                k_latent=2, d_teacher=16, eoa_id=D.EOA))
    rep = perception_gap_report(teacher, student, samples, k_salient=3)
    assert rep.hidden_map == "least-squares"
    for g in rep.categories.values():
        if g.n_tokens:
            assert g.attention_kl >= 0 and 0 <= g.cosine_distance <= 2
    assert 0 <= rep.entropy["student"] <= np.log(9)
