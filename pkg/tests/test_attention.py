import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madiff.attention import (
    SyntheticAttention,
    attention_process,
    average_attention,
    build_pixel_sets,
    load_attention,
    resize_attention,
    save_attention,
)
from madiff.errors import ParameterError


def test_average_single_map():
    a = np.arange(4.0).reshape(2, 2)
    np.testing.assert_array_equal(average_attention([a]), a)


def test_average_two_maps():
    a, b = np.ones((2, 2)), np.arange(4.0).reshape(2, 2)
    np.testing.assert_array_equal(average_attention([a, b]), (a + b) / 2)


def test_average_matches_summation_oracle(rng):
    maps = [rng.uniform(0, 1, (16, 16)) for _ in range(50)]
    total = np.zeros((16, 16))
    for m in maps:
        for i in range(16):
            for j in range(16):
                total[i, j] += m[i, j]
    np.testing.assert_allclose(average_attention(maps), total / 50, atol=1e-12)


def test_average_rejects_empty_and_mixed():
    with pytest.raises(ParameterError):
        average_attention([])
    with pytest.raises(ParameterError):
        average_attention([np.ones((2, 2)), np.ones((3, 3))])


def test_resize_identity_and_constant():
    a = np.random.default_rng(0).uniform(size=(16, 16))
    np.testing.assert_array_equal(resize_attention(a, 16, 16), a)
    np.testing.assert_allclose(resize_attention(np.full((4, 4), 0.3), 16, 8), 0.3, rtol=1e-15)


def test_resize_hand_computed_weights():
    out = resize_attention(np.array([[0.0, 1.0], [0.0, 1.0]]), 2, 4)
    np.testing.assert_allclose(out, [[0, 0.25, 0.75, 1.0]] * 2)
    assert np.all(np.diff(out, axis=1) > 0)


def test_pixel_sets_empty_mask():
    sets = build_pixel_sets(np.ones((3, 3)), np.zeros((3, 3)))
    assert len(sets.g_ed) == 0 and len(sets.g_pr) == 0


def test_pixel_sets_two_by_two():
    A = np.array([[0.9, 0.1], [0.2, 0.7]])
    m = np.array([[1, 1], [0, 0]])
    sets = build_pixel_sets(A, m)
    assert sets.n == 2
    assert sets.g_pr.tolist() == [[0, 0]]
    assert sets.v_min == 0.9


def test_pixel_sets_tie_break_row_major():
    m = np.zeros((3, 3))
    m[1:, 1:] = 1
    sets = build_pixel_sets(np.full((3, 3), 0.5), m)
    assert sets.g_pr.tolist() == [[0, 0], [0, 1]]
    assert sets.g_ed.tolist() == [[1, 1], [1, 2], [2, 1], [2, 2]]


def test_process_empty_mask_unchanged(rng):
    x = rng.standard_normal((3, 4, 4))
    out = attention_process(x, rng.standard_normal((3, 4, 4)), rng.uniform(size=(4, 4)), np.zeros((4, 4)), seed=0)
    assert out.tobytes() == x.tobytes()


def test_process_two_by_two_enumeration():
    A = np.array([[0.9, 0.1], [0.2, 0.7]])
    m = np.array([[1, 1], [0, 0]])
    x_S = np.full((1, 2, 2), -5.0)
    x_no = np.array([[[1.0, 2.0], [3.0, 4.0]]])  # a, b, c, d
    out = attention_process(x_S, x_no, A, m, seed=3)
    np.testing.assert_array_equal(out, [[[1.0, 1.0], [-5.0, -5.0]]])


def test_process_full_mask_uses_top_two():
    A = np.array([[0.1, 0.8], [0.5, 0.3]])
    x_no = np.array([[[10.0, 20.0], [30.0, 40.0]]])
    for seed in range(20):
        out = attention_process(np.zeros((1, 2, 2)), x_no, A, np.ones((2, 2)), seed=seed)
        vals = out.ravel().tolist()
        assert set(vals) <= {20.0, 30.0}
        assert 20.0 in vals and 30.0 in vals


def test_process_copies_whole_channel_vectors(rng):
    A = rng.uniform(size=(8, 8))
    m = (rng.uniform(size=(8, 8)) < 0.4).astype(float)
    x_no = rng.standard_normal((4, 8, 8))
    out, _, src = attention_process(np.zeros((4, 8, 8)), x_no, A, m, seed=1, return_sources=True)
    for (i, j), (r, c) in zip(np.argwhere(m > 0), src):
        np.testing.assert_array_equal(out[:, i, j], x_no[:, r, c])


@given(seed=st.integers(0, 2**20), density=st.floats(0.0, 1.0))
@settings(max_examples=60, deadline=None)
def test_process_invariants(seed, density):
    rng = np.random.default_rng(seed)
    A = rng.uniform(size=(16, 16))
    m = (rng.uniform(size=(16, 16)) < density).astype(float)
    x_S, x_no = rng.standard_normal((2, 4, 16, 16))
    out, sets, src = attention_process(x_S, x_no, A, m, seed=seed, return_sources=True)
    outside = m == 0
    assert out[:, outside].tobytes() == x_S[:, outside].tobytes()
    if sets.n:
        assert all(A[r, c] >= sets.v_min for r, c in src)
        first = [tuple(p) for p in src[: len(sets.g_pr)]]
        assert first == [tuple(p) for p in sets.g_pr]
    again = attention_process(x_S, x_no, A, m, seed=seed)
    assert again.tobytes() == out.tobytes()


def test_process_shape_errors():
    with pytest.raises(ParameterError):
        attention_process(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)), np.zeros((4, 4)), np.zeros((4, 4)), 0)
    with pytest.raises(ParameterError):
        attention_process(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), np.zeros((2, 2)), np.zeros((4, 4)), 0)


def test_process_backends_agree(rng):
    from madiff import kernels

    if kernels.BACKEND != "cython":
        pytest.skip("compiled kernels not built")
    A = rng.uniform(size=(16, 16))
    m = (rng.uniform(size=(16, 16)) < 0.5).astype(float)
    x_S, x_no = rng.standard_normal((2, 3, 16, 16))
    a = attention_process(x_S, x_no, A, m, 5, backend="python")
    b = attention_process(x_S, x_no, A, m, 5, backend="cython")
    assert a.tobytes() == b.tobytes()


def test_synthetic_noiseless_is_indicator():
    region = np.zeros((16, 16))
    region[4:9, 3:12] = 1
    prov = SyntheticAttention(region, 0.0, seed=1)
    np.testing.assert_array_equal(prov.emit(None, 500), region)


def test_synthetic_deterministic():
    region = np.zeros((16, 16))
    region[2:6, 2:6] = 1
    a = [SyntheticAttention(region, 0.3, seed=9).emit(None, t) for t in (980, 960)]
    b = [SyntheticAttention(region, 0.3, seed=9).emit(None, t) for t in (980, 960)]
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_synthetic_in_region_exceeds_out_region():
    region = np.zeros((16, 16))
    region[3:12, 4:12] = 1
    for level in (0.05, 0.1, 0.2):
        hits = 0
        for seed in range(100):
            A = SyntheticAttention(region, level, seed=seed).emit(None, 100)
            hits += A[region > 0].mean() > A[region == 0].mean()
        assert hits == 100


def test_synthetic_downsamples_large_regions():
    region = np.zeros((32, 32))
    region[:16] = 1
    A = SyntheticAttention(region, 0.0).emit()
    assert A.shape == (16, 16) and A[:8].min() == 1 and A[8:].max() == 0


def test_attention_png_round_trip(tmp_path, rng):
    A = rng.uniform(0, 2.0, (16, 16))
    save_attention(A, tmp_path / "a.png")
    meta = json.loads((tmp_path / "a.json").read_text())
    assert meta["shape"] == [16, 16]
    np.testing.assert_allclose(load_attention(tmp_path / "a.png"), A, atol=2.0 / 65535)
