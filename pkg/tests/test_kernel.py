import numpy as np
import pytest

from cmesyn.errors import InputError, NumericsError
from cmesyn.kernel import (
    FiniteMeasure,
    KernelParams,
    dirac,
    gram,
    kernel_eval,
    mmd,
    mmd_squared,
)


def test_eval_at_identical_points_is_sigma_f_squared():
    k = KernelParams(1.0, 1.0)
    assert kernel_eval(k, 0.0, 0.0) == 1.0
    # output scale from the temperature benchmark settings
    k10 = KernelParams(10.0, 1.0)
    assert kernel_eval(k10, 0.0, 0.0) == 100.0


def test_eval_matches_closed_form():
    k = KernelParams(1.0, 1.0)
    assert kernel_eval(k, 0.0, 1.0) == pytest.approx(0.6065306597126334, abs=1e-12)
    assert kernel_eval(k, np.array([0.0, 0.0]), np.array([1.0, 0.0])) == pytest.approx(
        np.exp(-0.5), abs=1e-12
    )


def test_eval_symmetry_and_range():
    k = KernelParams(2.0, 0.7)
    rng = np.random.default_rng(3)
    for _ in range(50):
        x, y = rng.normal(size=3), rng.normal(size=3)
        v = kernel_eval(k, x, y)
        assert v == pytest.approx(kernel_eval(k, y, x), abs=0.0)
        assert 0.0 < v <= k.sigma_f**2 + 1e-15


def test_eval_dimension_mismatch():
    k = KernelParams(1.0, 1.0)
    with pytest.raises(InputError):
        kernel_eval(k, np.zeros(2), np.zeros(3))


def test_params_validation():
    with pytest.raises(InputError):
        KernelParams(0.0, 1.0)
    with pytest.raises(InputError):
        KernelParams(1.0, -2.0)
    with pytest.raises(InputError):
        KernelParams(1.0, 1.0, family="matern")


def test_gram_single_point():
    k = KernelParams(3.0, 1.0)
    g = gram(k, [0.0])
    assert g.entries.shape == (1, 1)
    assert g.entries[0, 0] == 9.0


def test_gram_matches_elementwise_eval():
    k = KernelParams(1.0, 1.0)
    g = gram(k, [0.0, 1.0])
    e = 0.6065306597126334
    np.testing.assert_allclose(g.entries, [[1.0, e], [e, 1.0]], atol=1e-12)

    rect = gram(k, [0.0], [0.0, 1.0, 2.0])
    np.testing.assert_allclose(
        rect.entries, [[1.0, e, 0.1353352832366127]], atol=1e-12
    )


def test_gram_symmetric_psd_on_random_points():
    k = KernelParams(1.5, 0.8)
    rng = np.random.default_rng(11)
    pts = rng.uniform(-2, 2, size=(40, 2))
    g = gram(k, pts).entries
    np.testing.assert_allclose(g, g.T, atol=0.0)
    eigs = np.linalg.eigvalsh(g)
    assert eigs.min() >= -1e-8 * k.sigma_f**2


def test_gram_rejects_empty():
    k = KernelParams(1.0, 1.0)
    with pytest.raises(InputError):
        gram(k, np.zeros((0, 1)))


def test_mmd_identical_measures_is_zero():
    k = KernelParams(1.0, 1.0)
    p = FiniteMeasure(np.array([[0.0], [1.0]]), np.array([0.3, 0.7]))
    assert mmd(k, p, p) == 0.0
    # same measure written with split atoms
    q = FiniteMeasure(np.array([[0.0], [0.0]]), np.array([0.5, 0.5]))
    assert mmd(k, dirac(0.0), q) == pytest.approx(0.0, abs=1e-9)


def test_mmd_between_diracs():
    k = KernelParams(1.0, 1.0)
    assert mmd(k, dirac(0.0), dirac(1.0)) == pytest.approx(
        0.887095643419994, abs=1e-12
    )


def test_mmd_symmetry_and_identity_of_indiscernibles():
    k = KernelParams(1.0, 0.6)
    rng = np.random.default_rng(7)
    for _ in range(100):
        x, y = rng.normal(size=2), rng.normal(size=2)
        dxy = mmd(k, dirac(x), dirac(y))
        assert dxy == mmd(k, dirac(y), dirac(x))
        if np.any(x != y):
            assert dxy > 0.0


def _random_measure(rng, n_atoms, dim):
    return FiniteMeasure(
        rng.uniform(-1.5, 1.5, size=(n_atoms, dim)),
        rng.uniform(0.0, 1.0, size=n_atoms),
    )


def test_mmd_triangle_inequality_on_random_triples():
    k = KernelParams(1.0, 1.0)
    rng = np.random.default_rng(17)
    for _ in range(200):
        p = _random_measure(rng, rng.integers(1, 5), 2)
        q = _random_measure(rng, rng.integers(1, 5), 2)
        r = _random_measure(rng, rng.integers(1, 5), 2)
        assert mmd(k, p, r) <= mmd(k, p, q) + mmd(k, q, r) + 1e-9


def test_mmd_dimension_mismatch():
    k = KernelParams(1.0, 1.0)
    with pytest.raises(InputError):
        mmd(k, dirac(np.zeros(2)), dirac(np.zeros(3)))


def test_mmd_raises_on_inconsistent_radicand(monkeypatch):
    import cmesyn.kernel as kernel_mod

    k = KernelParams(1.0, 1.0)
    monkeypatch.setattr(kernel_mod, "mmd_squared", lambda *a: -1e-6)
    with pytest.raises(NumericsError):
        kernel_mod.mmd(k, dirac(0.0), dirac(1.0))


def test_finite_measure_validation():
    with pytest.raises(InputError):
        FiniteMeasure(np.zeros((2, 1)), np.zeros(3))
    with pytest.raises(InputError):
        FiniteMeasure(np.zeros((0, 1)), np.zeros(0))
