import numpy as np
import pytest
from hypothesis import given, strategies as st

from occlkit.errors import DomainError, ResampleSignal
from occlkit.occlevel import bucket, image_occlusion_level, occlusion_rate


def _mask(n_true, total=100):
    m = np.zeros(total, dtype=bool)
    m[:n_true] = True
    return m


def test_rate_identity():
    assert occlusion_rate(_mask(50), _mask(50)) == 0.0


def test_rate_direct_arithmetic():
    assert occlusion_rate(_mask(100), _mask(40)) == pytest.approx(0.6)


def test_rate_single_pixel():
    assert occlusion_rate(_mask(200, 200), _mask(199, 200)) == pytest.approx(0.005)


def test_rate_empty_full_mask():
    with pytest.raises(DomainError):
        occlusion_rate(_mask(0), _mask(0))


def test_rate_visible_not_subset():
    full = _mask(10)
    visible = np.zeros(100, dtype=bool)
    visible[50] = True
    with pytest.raises(DomainError):
        occlusion_rate(full, visible)


@pytest.mark.parametrize("rate,level", [
    (0.0, "low"),
    (0.5, "mid"),
    (0.5 + 1e-9, "high"),
    (0.2, "mid"),
    (1.0, "high"),
])
def test_bucket_boundaries(rate, level):
    assert bucket(rate) == level


@pytest.mark.parametrize("rate", [-0.1, 1.1])
def test_bucket_domain(rate):
    with pytest.raises(DomainError):
        bucket(rate)


@given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
def test_bucket_total_on_domain(rate):
    assert bucket(rate) in ("low", "mid", "high")


def test_image_level_all_zero():
    assert image_occlusion_level([0.0, 0.0]) == ("low", 0.0)


def test_image_level_max_selection():
    assert image_occlusion_level([0.1, 0.6, 0.3]) == ("high", 0.6)


def test_image_level_boundary():
    level, max_rate = image_occlusion_level([0.2, 0.5])
    assert (level, max_rate) == ("mid", 0.5)
    assert bucket(max_rate) == level


def test_image_level_empty_resamples():
    with pytest.raises(ResampleSignal):
        image_occlusion_level([])
