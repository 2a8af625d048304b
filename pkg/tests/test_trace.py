import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lvt.trace import (
    BBox,
    DegenerateTraceError,
    aggregate_gaze,
    build_trace,
    focusing_score,
    minmax_normalize,
    resize_map_bilinear,
    topk_sparsify,
)


# -- naive reference implementations -------------------------------------
def naive_gaze(attn, text, image):
    L, H = attn.shape[:2]
    out = []
    for j in image:
        s = 0.0
        for l in range(L):
            for h in range(H):
                for i in text:
                    s += attn[l, h, i, j]
        out.append(s / (L * H * len(text)))
    return np.array(out)


def naive_minmax(s, eps):
    lo, hi = min(s), max(s)
    return np.array([(v - lo) / (hi - lo + eps) for v in s])


def naive_topk(a, k):
    idx = sorted(range(len(a)), key=lambda i: (-a[i], i))[:k]
    out = [0.0] * len(a)
    total = sum(a[i] for i in idx)
    if total <= 0:
        return np.array([1.0 / k if i < k else 0.0 for i in range(len(a))])
    for i in idx:
        out[i] = a[i] / total
    return np.array(out)


def naive_focus(grid_map, box):
    inside = total = 0.0
    for r in range(grid_map.shape[0]):
        for c in range(grid_map.shape[1]):
            total += grid_map[r, c]
            if box.row0 <= r < box.row1 and box.col0 <= c < box.col1:
                inside += grid_map[r, c]
    return inside / total


def random_attention(rng, L=2, H=3, S=10):
    logits = rng.standard_normal((L, H, S, S))
    logits += np.triu(np.full((S, S), -np.inf), 1)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_oracles_agree_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        attn = random_attention(rng)
        g = aggregate_gaze(attn, [6, 8, 9], range(4))
        np.testing.assert_allclose(g, naive_gaze(attn, [6, 8, 9], range(4)), atol=1e-10)
        a = minmax_normalize(g)
        np.testing.assert_allclose(a, naive_minmax(list(g), 1e-8), atol=1e-10)
        np.testing.assert_allclose(topk_sparsify(a, 2), naive_topk(list(a), 2), atol=1e-10)
        grid = rng.random((3, 4))
        box = BBox(0, 1, 2, 3)
        assert focusing_score(grid, box) == pytest.approx(naive_focus(grid, box), abs=1e-10)


def test_batched_gaze_matches_per_sample():
    rng = np.random.default_rng(1)
    batch = np.stack([random_attention(rng) for _ in range(3)], axis=1)  # (L, B, H, S, S)
    g = aggregate_gaze(batch, [7, 9], range(5))
    for b in range(3):
        np.testing.assert_allclose(g[b], aggregate_gaze(batch[:, b], [7, 9], range(5)), atol=1e-15)


def test_gaze_rejects_overlap_and_empty_text():
    attn = random_attention(np.random.default_rng(2))
    with pytest.raises(ValueError):
        aggregate_gaze(attn, [2, 3], range(4))
    with pytest.raises(ValueError):
        aggregate_gaze(attn, [], range(4))


def test_topk_ties_go_to_lower_index():
    out = topk_sparsify(np.array([0.5, 1.0, 0.5, 0.5]), 2)
    np.testing.assert_allclose(out, [1 / 3, 2 / 3, 0.0, 0.0])


def test_topk_all_zero_is_degenerate_uniform_prefix():
    out, flag = topk_sparsify(np.zeros(6), 3, return_flag=True)
    assert flag
    np.testing.assert_allclose(out, [1 / 3] * 3 + [0.0] * 3)


@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(0, 1)), st.integers(1, 30))
def test_topk_is_distribution_with_k_support(a, k):
    k = min(k, a.size)
    out = topk_sparsify(a, k)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    assert (out > 0).sum() <= k
    assert (out >= 0).all()


@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-5, 5)))
def test_minmax_range(s):
    a = minmax_normalize(s)
    assert a.min() == 0.0
    assert a.max() <= 1.0


def test_minmax_constant_map_is_zero():
    np.testing.assert_array_equal(minmax_normalize(np.full(5, 0.3)), np.zeros(5))


def test_focus_full_grid_is_one_and_zero_mass_degenerate():
    m = np.random.default_rng(3).random((4, 4))
    assert focusing_score(m, BBox(0, 0, 4, 4)) == pytest.approx(1.0)
    with pytest.raises(DegenerateTraceError):
        focusing_score(np.zeros((2, 2)), BBox(0, 0, 1, 1))


@pytest.mark.parametrize("box", [BBox(0, 0, 0, 1), BBox(1, 1, 3, 2), BBox(-1, 0, 1, 1)])
def test_invalid_bbox(box):
    with pytest.raises(ValueError):
        box.validate(2, 2)


def test_referent_only_attention_gives_focus_one():
    gaze = np.zeros(9)
    gaze[4] = 0.7
    tr = build_trace(gaze, (3, 3), BBox(1, 1, 2, 2), k=4)
    assert tr.focus_score == pytest.approx(1.0)
    np.testing.assert_allclose(tr.sparse_target, np.eye(9)[4])


def test_exempt_trace_has_no_focus():
    tr = build_trace(np.arange(4.0), (2, 2), BBox(0, 0, 2, 2), k=2, exempt=True)
    assert tr.focus_score is None


def test_bilinear_identity_and_corners():
    m = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(resize_map_bilinear(m, (2, 3)), m)
    up = resize_map_bilinear(m, (3, 5))
    assert up[0, 0] == m[0, 0] and up[-1, -1] == m[-1, -1]
    assert up[1, 2] == pytest.approx(m.mean())


def test_bilinear_linear_function_is_reproduced():
    r, c = np.meshgrid(np.arange(4.0), np.arange(5.0), indexing="ij")
    m = 2 * r + 3 * c
    out = resize_map_bilinear(m, (7, 9))
    rr, cc = np.meshgrid(np.linspace(0, 3, 7), np.linspace(0, 4, 9), indexing="ij")
    np.testing.assert_allclose(out, 2 * rr + 3 * cc, atol=1e-12)


def test_bilinear_single_target_samples_centre():
    m = np.arange(9.0).reshape(3, 3)
    assert resize_map_bilinear(m, (1, 1))[0, 0] == pytest.approx(4.0)
