import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatsim.errors import PlyDataError, PlyFormatError
from splatsim.gs_io import (GaussianCloud, anisotropy_metric, clamp_anisotropy, covariance_from_factors,
                            factors_from_covariance, load_gaussian_ply, matrix_to_quat, quat_to_matrix,
                            save_gaussian_ply)
from synth import random_cloud

HEADER = """ply
format ascii 1.0
element vertex 1
property float x
property float y
property float z
property float f_dc_0
property float f_dc_1
property float f_dc_2
property float opacity
property float scale_0
property float scale_1
property float scale_2
property float rot_0
property float rot_1
property float rot_2
property float rot_3
end_header
"""


def _ascii(tmp_path, row, header=HEADER):
    p = tmp_path / "one.ply"
    p.write_text(header + row + "\n")
    return p


def test_minimal_ascii_kernel(tmp_path):
    c = load_gaussian_ply(_ascii(tmp_path, "1 2 3 0.1 0.2 0.3 0 0 0 0 1 0 0 0"))
    assert len(c) == 1 and c.sh_degree == 0
    np.testing.assert_array_equal(c.scales[0], [1, 1, 1])
    assert c.opacities[0] == 0.5
    np.testing.assert_array_equal(c.centers[0], [1, 2, 3])
    np.testing.assert_allclose(c.sh[0, 0], [0.1, 0.2, 0.3], rtol=1e-7)


def test_quaternion_normalized_on_load(tmp_path):
    c = load_gaussian_ply(_ascii(tmp_path, "0 0 0 0 0 0 0 0 0 0 2 0 0 0"))
    np.testing.assert_array_equal(c.rotations[0], [1, 0, 0, 0])


def test_missing_field_is_named(tmp_path):
    header = HEADER.replace("property float opacity\n", "")
    with pytest.raises(PlyFormatError, match="opacity"):
        load_gaussian_ply(_ascii(tmp_path, "0 0 0 0 0 0 0 0 0 1 0 0 0", header))


def test_non_finite_value_reports_element(tmp_path):
    c = random_cloud(5, np.random.default_rng(0))
    centers = c.centers.copy()
    centers[3, 1] = np.nan
    p = tmp_path / "bad.ply"
    save_gaussian_ply(c.replace(centers=centers), p)
    with pytest.raises(PlyDataError) as exc:
        load_gaussian_ply(p)
    assert exc.value.index == 3


def test_garbage_file(tmp_path):
    p = tmp_path / "x.ply"
    p.write_bytes(b"not a ply at all")
    with pytest.raises(PlyFormatError):
        load_gaussian_ply(p)


def test_unknown_property_warns(tmp_path, caplog):
    header = HEADER.replace("end_header", "property float nx\nend_header")
    with caplog.at_level(logging.WARNING):
        load_gaussian_ply(_ascii(tmp_path, "0 0 0 0 0 0 0 0 0 0 1 0 0 0 7", header))
    assert "nx" in caplog.text


def test_saved_values_are_log_and_logit(tmp_path):
    from plyfile import PlyData
    c = GaussianCloud(np.zeros((1, 3)), np.ones((1, 3)), np.array([[1.0, 0, 0, 0]]), np.array([0.5]),
                      np.zeros((1, 1, 3)))
    p = tmp_path / "o.ply"
    save_gaussian_ply(c, p)
    v = PlyData.read(str(p))["vertex"]
    assert v["opacity"][0] == 0.0
    assert [v[f"scale_{i}"][0] for i in range(3)] == [0.0, 0.0, 0.0]


def test_opacity_extremes_clamped(tmp_path):
    c = random_cloud(2, np.random.default_rng(1)).replace(opacities=np.array([0.0, 1.0]))
    p = tmp_path / "o.ply"
    save_gaussian_ply(c, p, precision="double")
    back = load_gaussian_ply(p)
    np.testing.assert_allclose(back.opacities, [1e-6, 1 - 1e-6], rtol=1e-9)


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_round_trip_double_is_bit_exact_on_stored_fields(tmp_path, degree):
    c = random_cloud(50, np.random.default_rng(degree), degree=degree)
    p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
    save_gaussian_ply(c, p1, precision="double")
    back = load_gaussian_ply(p1)
    save_gaussian_ply(back, p2, precision="double")
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(back.centers, c.centers)
    np.testing.assert_array_equal(back.sh, c.sh)
    np.testing.assert_allclose(back.scales, c.scales, rtol=1e-15)
    np.testing.assert_allclose(back.opacities, c.opacities, rtol=1e-14)


def test_round_trip_float_1000_kernels(tmp_path):
    c = random_cloud(1000, np.random.default_rng(7), degree=3)
    p = tmp_path / "f.ply"
    save_gaussian_ply(c, p)
    back = load_gaussian_ply(p)
    # float32 storage: 1e-6 relative per field
    for a, b in [(back.centers, c.centers), (back.scales, c.scales), (back.rotations, c.rotations),
                 (back.opacities, c.opacities), (back.sh, c.sh)]:
        assert np.all(np.abs(a - b) <= 1e-6 * np.maximum(1.0, np.abs(b)))
    # and a second save of the float file is byte-identical
    p2 = tmp_path / "g.ply"
    save_gaussian_ply(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_ascii_output_readable(tmp_path):
    c = random_cloud(4, np.random.default_rng(3), degree=1)
    p = tmp_path / "a.ply"
    save_gaussian_ply(c, p, ascii=True, precision="double")
    assert p.read_bytes().startswith(b"ply\nformat ascii")
    np.testing.assert_allclose(load_gaussian_ply(p).centers, c.centers, rtol=1e-12)


def test_optional_fields_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    c = random_cloud(6, rng)
    R = quat_to_matrix(rng.normal(size=(6, 4)))
    c = c.replace(sh_rotation=R, is_fill=np.array([0, 1, 0, 1, 1, 0], bool))
    p = tmp_path / "x.ply"
    save_gaussian_ply(c, p, precision="double")
    back = load_gaussian_ply(p)
    np.testing.assert_array_equal(back.sh_rotation, R)
    np.testing.assert_array_equal(back.is_fill, c.is_fill)


def test_covariance_examples():
    ident = np.array([1.0, 0, 0, 0])
    np.testing.assert_allclose(covariance_from_factors(np.array([1.0, 2, 3]), ident), np.diag([1.0, 4, 9]))
    q = np.random.default_rng(0).normal(size=4)
    np.testing.assert_allclose(covariance_from_factors(np.ones(3), q), np.eye(3), atol=1e-15)
    qz = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    np.testing.assert_allclose(covariance_from_factors(np.array([2.0, 1, 1]), qz), np.diag([1.0, 4, 1]),
                               atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-4, 2), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_covariance_spd_with_squared_scale_eigenvalues(logs, q):
    s = np.exp(np.array(logs))
    A = covariance_from_factors(s, np.array(q))
    np.testing.assert_array_equal(A, A.T)
    ev = np.linalg.eigvalsh(A)
    assert ev.min() > 0
    np.testing.assert_allclose(ev, np.sort(s ** 2), rtol=1e-9)


def test_factors_from_covariance_inverts():
    c = random_cloud(100, np.random.default_rng(5))
    A = c.covariances()
    s, q = factors_from_covariance(A)
    np.testing.assert_allclose(covariance_from_factors(s, q), A, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(np.abs(np.linalg.norm(q, axis=1)), 1.0, rtol=1e-14)


def test_quat_matrix_round_trip():
    q = np.random.default_rng(6).normal(size=(500, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    np.testing.assert_allclose(matrix_to_quat(quat_to_matrix(q)), q, atol=1e-12)


def _scales_cloud(scales):
    n = len(scales)
    return GaussianCloud(np.zeros((n, 3)), np.asarray(scales, float), np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.full(n, 0.5), np.zeros((n, 1, 3)))


def test_anisotropy_metric_examples():
    assert anisotropy_metric(_scales_cloud([[3, 1, 1]]), 2) == 1.0
    assert anisotropy_metric(_scales_cloud([[2, 2, 2], [0.1, 0.1, 0.1]]), 1.0) == 0.0
    assert anisotropy_metric(_scales_cloud([[1.5, 1, 1], [4, 1, 2]]), 2) == 1.0
    with pytest.raises(ValueError):
        anisotropy_metric(_scales_cloud([[1, 1, 1]]), 0.5)


def test_anisotropy_metric_invariances():
    rng = np.random.default_rng(8)
    c = random_cloud(200, rng)
    m = anisotropy_metric(c, 1.5)
    q = rng.normal(size=(200, 4))
    assert anisotropy_metric(c.replace(rotations=q / np.linalg.norm(q, axis=1, keepdims=True)), 1.5) == m
    np.testing.assert_allclose(anisotropy_metric(c.replace(scales=c.scales * 3.7), 1.5), m, rtol=1e-12)


def test_clamp_examples():
    out = clamp_anisotropy(_scales_cloud([[4, 1, 1]]), 2)
    np.testing.assert_array_equal(out.scales, [[2, 1, 1]])
    c = _scales_cloud([[1.2, 1, 1.5]])
    assert clamp_anisotropy(c, 2).scales.tolist() == c.scales.tolist()


def test_clamp_random_cloud():
    rng = np.random.default_rng(9)
    c = random_cloud(2000, rng)
    for r in (1.0, 1.3, 2.0, 5.0):
        out = clamp_anisotropy(c, r)
        assert anisotropy_metric(out, r) == 0.0
        assert np.all(out.scales / out.scales.min(axis=1, keepdims=True) <= r)
        np.testing.assert_array_equal(out.scales.min(axis=1), c.scales.min(axis=1))
        assert out.centers is c.centers and out.sh is c.sh and out.opacities is c.opacities
        again = clamp_anisotropy(out, r)
        np.testing.assert_array_equal(again.scales, out.scales)
