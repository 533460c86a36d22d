import numpy as np
import pytest

from pcqed.tcspc import (
    BinGrid,
    DecayModel,
    InstrumentResponse,
    TransientHistogram,
    expected_curve,
    sample_histogram,
)

IRF = InstrumentResponse(fwhm=150.0, t0=600.0)


def grid(n_bins=4096, width=12.0):
    return BinGrid(bin_width=width, n_bins=n_bins)


# ---------------------------------------------------------------------------
# Expected curve
# ---------------------------------------------------------------------------

def test_delta_irf_limit_recovers_pure_exponential():
    g = grid(2048)
    t = g.centers()
    narrow = InstrumentResponse(fwhm=1e-6, t0=600.0)
    curve = expected_curve(DecayModel([(1.0, 800.0)]), narrow, g)
    mask = t > 610.0
    pure = np.exp(-(t[mask] - 600.0) / 800.0)
    np.testing.assert_allclose(curve[mask], pure, rtol=1e-6)


def test_area_conservation_under_convolution():
    # grid spanning +-8 sigma around t0 and 10 lifetimes
    g = BinGrid(bin_width=2.0, n_bins=5000, t_start=0.0)
    curve = expected_curve(DecayModel([(2.5, 800.0)]), IRF, g)
    integral = curve.sum() * g.bin_width
    assert integral == pytest.approx(2.5 * 800.0, rel=1e-3)


def _convolution_by_quadrature(amplitude, lifetime, irf, t_values, step=0.1):
    """Brute-force 0.1 ps Riemann convolution (midpoint sampling) of the
    exponential with the Gaussian. The cell grid is aligned so each requested
    t falls on a cell boundary, keeping the integrand's cut at s = t exact."""
    sigma = irf.sigma
    start = np.floor((irf.t0 - 10.0 * sigma) / step) * step
    n_steps = int(np.ceil((t_values.max() - start) / step)) + 1
    s_grid = start + (np.arange(n_steps) + 0.5) * step
    gauss = np.exp(-0.5 * ((s_grid - irf.t0) / sigma) ** 2) / (
        sigma * np.sqrt(2.0 * np.pi)
    )
    out = np.empty_like(t_values)
    for i, t in enumerate(t_values):
        lag = t - s_grid
        decay = np.where(lag >= 0.0, np.exp(-np.clip(lag, 0.0, None) / lifetime), 0.0)
        out[i] = amplitude * np.sum(gauss * decay) * step
    return out


def test_expected_curve_matches_quadrature_oracle():
    g = BinGrid(bin_width=12.0, n_bins=600)
    t = g.centers()
    curve = expected_curve(DecayModel([(1.0, 800.0)]), IRF, g)
    oracle = _convolution_by_quadrature(1.0, 800.0, IRF, t)
    mask = oracle > 1e-9 * oracle.max()
    rel = np.abs(curve[mask] - oracle[mask]) / oracle[mask]
    assert rel.max() < 1e-4


def test_curve_never_below_background():
    g = grid(1024)
    model = DecayModel([(1.0, 300.0)], background=0.7)
    curve = expected_curve(model, IRF, g)
    assert np.all(curve >= 0.7)


def test_biexponential_tail_slope():
    g = grid(4096)
    t = g.centers()
    model = DecayModel([(1.0, 150.0), (1.0 / 18.0, 1800.0)])
    curve = expected_curve(model, IRF, g)
    mask = (t > 600.0 + 8.0 * 150.0) & (curve > 1e-12)
    slope, _ = np.polyfit(t[mask], np.log(curve[mask]), 1)
    assert -1.0 / slope == pytest.approx(1800.0, rel=0.01)


def test_decay_model_validation():
    with pytest.raises(ValueError):
        DecayModel([])
    with pytest.raises(ValueError):
        DecayModel([(0.0, 100.0)])
    with pytest.raises(ValueError):
        DecayModel([(1.0, 100.0), (1.0, 100.0)])
    with pytest.raises(ValueError):
        DecayModel([(1.0, -5.0)])
    with pytest.raises(ValueError):
        DecayModel([(1.0, 100.0)], background=-1.0)
    with pytest.raises(ValueError):
        InstrumentResponse(fwhm=0.0)
    with pytest.raises(ValueError):
        BinGrid(bin_width=0.0, n_bins=10)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def test_sampling_deterministic_for_fixed_seed():
    g = grid(512)
    curve = expected_curve(DecayModel([(1.0, 500.0)]), IRF, g)
    h1 = sample_histogram(curve, 50_000, 42, grid=g, irf=IRF)
    h2 = sample_histogram(curve, 50_000, 42, grid=g, irf=IRF)
    np.testing.assert_array_equal(h1.counts, h2.counts)
    h3 = sample_histogram(curve, 50_000, 43, grid=g, irf=IRF)
    assert np.any(h3.counts != h1.counts)


def test_multinomial_conserves_total():
    g = grid(512)
    curve = expected_curve(DecayModel([(1.0, 500.0)]), IRF, g)
    h = sample_histogram(curve, 31_415, 7, grid=g, irf=IRF)
    assert h.total_counts == 31_415


def test_poisson_background_added():
    g = grid(256)
    curve = expected_curve(DecayModel([(1.0, 500.0)]), IRF, g)
    h = sample_histogram(curve, 10_000, 7, grid=g, irf=IRF, background_rate=5.0)
    assert h.total_counts > 10_000


def test_sampling_input_validation():
    g = grid(64)
    with pytest.raises(ValueError):
        sample_histogram(np.zeros(64), 100, 1, grid=g, irf=IRF)
    with pytest.raises(ValueError):
        sample_histogram(-np.ones(64), 100, 1, grid=g, irf=IRF)
    with pytest.raises(ValueError):
        sample_histogram(np.ones(64), 0, 1, grid=g, irf=IRF)
    with pytest.raises(ValueError):
        sample_histogram(np.ones(32), 100, 1, grid=g, irf=IRF)


def test_flat_curve_law_of_large_numbers():
    # 10^6 photons over 8 bins: each bin within 1% of uniform in almost
    # every run (1% is ~3.5 sigma per bin).
    g = BinGrid(bin_width=10.0, n_bins=8)
    flat = np.ones(8)
    good = 0
    n_runs = 200
    for s in range(n_runs):
        h = sample_histogram(flat, 1_000_000, 9000 + s, grid=g, irf=IRF)
        dev = np.abs(h.counts / 125_000.0 - 1.0).max()
        good += dev < 0.01
    assert good >= 190


def test_sampling_preserves_expectation():
    g = grid(256, width=50.0)
    curve = expected_curve(DecayModel([(1.0, 2000.0)]), IRF, g)
    total = 20_000
    p = curve / curve.sum()
    n_seeds = 100
    acc = np.zeros(256)
    for s in range(n_seeds):
        acc += sample_histogram(curve, total, 40_000 + s, grid=g, irf=IRF).counts
    mean = acc / n_seeds
    expected = total * p
    se = np.sqrt(expected * (1.0 - p) / n_seeds)
    ok = np.abs(mean - expected) <= 3.0 * np.maximum(se, 1e-9)
    assert ok.mean() >= 0.95


def test_histogram_invariants():
    g = grid(128)
    curve = expected_curve(DecayModel([(1.0, 500.0)]), IRF, g)
    h = sample_histogram(curve, 5000, 3, grid=g, irf=IRF)
    assert h.total_counts == int(h.counts.sum())
    assert np.all(h.counts >= 0)
    assert h.bin_centers()[0] == pytest.approx(g.bin_width / 2.0)
    with pytest.raises(ValueError):
        TransientHistogram(bin_width=1.0, t_start=0.0, counts=np.array([-1, 2]), irf=IRF)
