"""Similarity-transform algebra tests.

Expected values are computed against a test-local 2x2 matrix oracle so the
production parameter algebra is never trusted to check itself.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpalign.geometry import (
    SimTransform,
    TransformSet,
    apply_transform,
    compose,
    compose_param_jacobian,
    fit_similarity,
    from_box,
    invert,
    mean_transform,
    param_jacobian,
)


def oracle_matrix(t: SimTransform) -> tuple[np.ndarray, np.ndarray]:
    # independent path: build A = exp(s) R(theta) explicitly
    c, s = math.cos(t.theta), math.sin(t.theta)
    a = math.exp(t.s) * np.array([[c, -s], [s, c]])
    return a, np.array([t.t_u, t.t_v])


def oracle_apply(t: SimTransform, p) -> np.ndarray:
    a, b = oracle_matrix(t)
    return np.asarray(p) @ a.T + b


finite = st.floats(min_value=-50.0, max_value=50.0, allow_nan=False)
logscales = st.floats(min_value=-1.0, max_value=1.0, allow_nan=False)
angles = st.floats(min_value=-math.pi, max_value=math.pi, allow_nan=False)

transforms = st.builds(SimTransform, t_u=finite, t_v=finite, s=logscales, theta=angles)
points = st.lists(
    st.tuples(finite, finite), min_size=1, max_size=5
).map(lambda ps: np.array(ps, dtype=float))


def test_identity_is_noop():
    p = np.array([[3.0, -4.0], [0.5, 2.0]])
    out = apply_transform(SimTransform.identity(), p)
    np.testing.assert_allclose(out, p)


def test_apply_matches_matrix_oracle():
    t = SimTransform(t_u=2.0, t_v=-1.0, s=0.3, theta=0.7)
    p = np.array([[1.0, 2.0], [-3.0, 0.5], [0.0, 0.0]])
    np.testing.assert_allclose(apply_transform(t, p), oracle_apply(t, p), atol=1e-12)


def test_apply_single_point_shape():
    t = SimTransform(1.0, 2.0, 0.0, 0.0)
    out = apply_transform(t, np.array([3.0, 4.0]))
    assert out.shape == (2,)
    np.testing.assert_allclose(out, [4.0, 6.0])


@settings(deadline=None)
@given(a=transforms, b=transforms, p=points)
def test_compose_agrees_with_sequential_apply(a, b, p):
    lhs = apply_transform(compose(a, b), p)
    rhs = apply_transform(a, apply_transform(b, p))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-7)


@settings(deadline=None)
@given(a=transforms, p=points)
def test_invert_roundtrip(a, p):
    back = apply_transform(invert(a), apply_transform(a, p))
    np.testing.assert_allclose(back, p, rtol=1e-9, atol=1e-6)


@settings(deadline=None)
@given(a=transforms)
def test_invert_composes_to_identity_params(a):
    e = compose(a, invert(a))
    np.testing.assert_allclose(
        [e.t_u, e.t_v, e.s, e.theta], [0.0, 0.0, 0.0, 0.0], atol=1e-9
    )


@settings(deadline=None)
@given(a=transforms, b=transforms, c=transforms)
def test_compose_associative(a, b, c):
    lhs = compose(compose(a, b), c)
    rhs = compose(a, compose(b, c))
    np.testing.assert_allclose(lhs.as_array(), rhs.as_array(), rtol=1e-9, atol=1e-7)


def test_compose_parameter_formula():
    # hand-derived: t = exp(s_o) R(theta_o) t_i + t_o, s = s_o + s_i, theta adds
    outer = SimTransform(1.0, -2.0, 0.5, 0.4)
    inner = SimTransform(3.0, 4.0, -0.2, 1.1)
    got = compose(outer, inner)
    a_o, b_o = oracle_matrix(outer)
    t_expect = a_o @ np.array([3.0, 4.0]) + b_o
    np.testing.assert_allclose([got.t_u, got.t_v], t_expect, atol=1e-12)
    assert got.s == pytest.approx(0.3)
    assert got.theta == pytest.approx(1.5)


def test_mean_transform_single_is_identity_operation():
    t = SimTransform(1.0, 2.0, 0.1, -0.4)
    m = mean_transform([t])
    np.testing.assert_allclose(m.as_array(), t.as_array(), atol=1e-15)


def test_mean_transform_averages_parameters():
    a = SimTransform(0.0, 2.0, 0.0, 0.1)
    b = SimTransform(4.0, 0.0, 0.4, 0.3)
    m = mean_transform([a, b])
    np.testing.assert_allclose(m.as_array(), [2.0, 1.0, 0.2, 0.2], atol=1e-12)


def test_mean_transform_circular_angle():
    # angles +3 and -3 rad straddle the pi branch cut; arithmetic mean would
    # give 0, the circular mean is pi
    a = SimTransform(0.0, 0.0, 0.0, 3.0)
    b = SimTransform(0.0, 0.0, 0.0, -3.0)
    m = mean_transform([a, b])
    assert abs(m.theta) == pytest.approx(math.pi, abs=1e-9)


def test_mean_transform_empty_raises():
    with pytest.raises(ValueError, match="empty transform set"):
        mean_transform([])


def test_from_box_identity():
    t = from_box((0.0, 0.0, 60.0, 80.0), (0.0, 0.0, 60.0, 80.0))
    np.testing.assert_allclose(t.as_array(), [0.0, 0.0, 0.0, 0.0], atol=1e-12)


def test_from_box_pure_shift():
    t = from_box((10.0, 5.0, 60.0, 80.0), (0.0, 0.0, 60.0, 80.0))
    np.testing.assert_allclose(t.as_array(), [10.0, 5.0, 0.0, 0.0], atol=1e-12)


def test_from_box_double_size_maps_corners():
    canonical = (0.0, 0.0, 60.0, 80.0)
    box = (-30.0, -40.0, 120.0, 160.0)
    t = from_box(box, canonical)
    assert t.s == pytest.approx(math.log(2.0))
    assert t.theta == 0.0
    corners = np.array([[0.0, 0.0], [60.0, 80.0]])
    np.testing.assert_allclose(
        apply_transform(t, corners), [[-30.0, -40.0], [90.0, 120.0]], atol=1e-9
    )


def test_from_box_anisotropic_uses_geometric_mean_scale():
    # width ratio 2, height ratio 8 -> scale sqrt(16) = 4
    t = from_box((0.0, 0.0, 120.0, 640.0), (0.0, 0.0, 60.0, 80.0))
    assert t.s == pytest.approx(math.log(4.0))


def test_from_box_degenerate_raises():
    with pytest.raises(ValueError, match="degenerate"):
        from_box((0.0, 0.0, 0.0, 80.0), (0.0, 0.0, 60.0, 80.0))


def test_param_jacobian_matches_finite_differences():
    t = SimTransform(1.0, -2.0, 0.25, 0.6)
    p = np.array([[2.0, 3.0], [-1.0, 4.0]])
    jac = param_jacobian(t, p)
    assert jac.shape == (2, 2, 4)
    h = 1e-7
    for k in range(4):
        params = t.as_array()
        plus, minus = params.copy(), params.copy()
        plus[k] += h
        minus[k] -= h
        fd = (
            apply_transform(SimTransform.from_array(plus), p)
            - apply_transform(SimTransform.from_array(minus), p)
        ) / (2 * h)
        np.testing.assert_allclose(jac[:, :, k], fd, rtol=1e-6, atol=1e-6)


def test_compose_param_jacobian_matches_finite_differences():
    outer = SimTransform(1.0, -2.0, 0.5, 0.4)
    inner = SimTransform(3.0, 4.0, -0.2, 1.1)
    jac = compose_param_jacobian(outer)
    h = 1e-7
    base = inner.as_array()
    for k in range(4):
        plus, minus = base.copy(), base.copy()
        plus[k] += h
        minus[k] -= h
        fd = (
            compose(outer, SimTransform.from_array(plus)).as_array()
            - compose(outer, SimTransform.from_array(minus)).as_array()
        ) / (2 * h)
        np.testing.assert_allclose(jac[:, k], fd, rtol=1e-6, atol=1e-6)


def test_transform_set_matrix_roundtrip():
    ts = TransformSet(
        (SimTransform(1.0, 2.0, 0.1, 0.2), SimTransform(-1.0, 0.0, 0.0, -0.5))
    )
    mat = ts.as_matrix()
    assert mat.shape == (4, 2)
    np.testing.assert_allclose(mat[:, 0], [1.0, 2.0, 0.1, 0.2])
    back = TransformSet.from_matrix(mat)
    assert back == ts


def test_transform_set_replaced():
    ts = TransformSet((SimTransform.identity(), SimTransform.identity()))
    t = SimTransform(5.0, 0.0, 0.0, 0.0)
    out = ts.replaced(1, t)
    assert out[0] == SimTransform.identity()
    assert out[1] == t
    assert ts[1] == SimTransform.identity()


def test_fit_similarity_exact_recovery():
    rng = np.random.default_rng(3)
    truth = SimTransform(3.0, -2.0, 0.2, 0.7)
    src = rng.uniform(-10, 10, size=(6, 2))
    got = fit_similarity(src, apply_transform(truth, src))
    np.testing.assert_allclose(got.as_array(), truth.as_array(), atol=1e-10)


def test_fit_similarity_matches_numeric_least_squares():
    from scipy.optimize import minimize

    rng = np.random.default_rng(4)
    src = rng.uniform(-10, 10, size=(5, 2))
    dst = apply_transform(SimTransform(1.0, 2.0, 0.1, 0.3), src)
    dst = dst + rng.normal(scale=0.5, size=dst.shape)

    def sse(params):
        t = SimTransform.from_array(params)
        return float(np.sum((apply_transform(t, src) - dst) ** 2))

    best = minimize(sse, np.array([1.0, 2.0, 0.1, 0.3]), method="Nelder-Mead",
                    options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
    got = fit_similarity(src, dst)
    assert sse(got.as_array()) <= best.fun + 1e-8
    np.testing.assert_allclose(got.as_array(), best.x, atol=1e-4)


def test_fit_similarity_single_point_is_translation():
    got = fit_similarity(np.array([[2.0, 3.0]]), np.array([[5.0, 1.0]]))
    np.testing.assert_allclose(got.as_array(), [3.0, -2.0, 0.0, 0.0])


def test_fit_similarity_coincident_sources_fall_back():
    src = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    dst = np.array([[2.0, 0.0], [2.0, 2.0], [2.0, 4.0]])
    got = fit_similarity(src, dst)
    np.testing.assert_allclose(got.as_array(), [1.0, 1.0, 0.0, 0.0])


def test_fit_similarity_rejects_mismatched_sets():
    with pytest.raises(ValueError, match="match"):
        fit_similarity(np.zeros((3, 2)), np.zeros((2, 2)))
