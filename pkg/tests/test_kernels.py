import subprocess
import sys

import numpy as np

from occlkit import _kernels
from occlkit._kernels import _pair_counts_np, pair_counts


def reference_counts(a, b, na, nb):
    out = np.zeros((na, nb), dtype=np.int64)
    for x, y in zip(a.ravel(), b.ravel()):
        out[x, y] += 1
    return out


def test_pair_counts_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(20):
        na, nb = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        shape = (int(rng.integers(1, 20)), int(rng.integers(1, 20)))
        a = rng.integers(0, na, size=shape)
        b = rng.integers(0, nb, size=shape)
        expected = reference_counts(a, b, na, nb)
        assert np.array_equal(pair_counts(a, b, na, nb), expected)
        assert np.array_equal(_pair_counts_np(a.ravel(), b.ravel(), na, nb),
                              expected)


def test_numpy_and_compiled_paths_agree():
    if not _kernels.USE_NUMBA:
        import pytest
        pytest.skip("compiled path disabled in this environment")
    rng = np.random.default_rng(1)
    a = rng.integers(0, 11, size=(64, 64))
    b = rng.integers(0, 7, size=(64, 64))
    nb_out = _kernels._pair_counts_nb(a.ravel(), b.ravel(), 11, 7)
    np_out = _kernels._pair_counts_np(a.ravel(), b.ravel(), 11, 7)
    assert np.array_equal(nb_out, np_out)


def test_disable_flag_selects_numpy_path():
    code = (
        "import occlkit._kernels as k\n"
        "assert not k.USE_NUMBA\n"
        "import numpy as np\n"
        "out = k.pair_counts(np.array([0, 1]), np.array([1, 1]), 2, 2)\n"
        "assert out.tolist() == [[0, 1], [0, 1]]\n"
    )
    proc = subprocess.run(
        [sys.executable, "-c", code],
        env={"PATH": "/usr/bin:/bin", "OCCLKIT_DISABLE_NUMBA": "1"},
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
