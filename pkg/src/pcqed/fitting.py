"""Reconvolution decay fits and the spectral detuning-model fit.

Histogram fits maximize the Poisson likelihood (equivalently minimize the
deviance) of the model from `tcspc.expected_curve` — the fit model and the
generator share one definition. Minimization is a damped least-squares
(Levenberg-Marquardt) loop with Fisher scoring; amplitudes, lifetimes and the
background are parameterized by their logarithms so positivity needs no
constrained solver, and the IRF shift t0 is clipped to +-2 FWHM. Parameter
uncertainties come from the inverse curvature at the optimum.

The spectral fit estimates the per-mode enhancement factors and the residual
decay fraction alpha from a lifetime-vs-wavelength scan, using the same
Lorentzian response as `cavity.lifetime_ratio_multimode`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tcspc
from .cavity import CavityMode, lifetime_ratio_multimode
from .tcspc import DecayModel, TransientHistogram

__all__ = [
    "FitResult",
    "FitConvergenceError",
    "ModelSelection",
    "SpectralScan",
    "fit_monoexponential",
    "fit_biexponential",
    "select_model",
    "fit_spectral_model",
    "synthesize_spectral_scan",
    "scan_lifetime",
    "poisson_deviance",
]

MAX_ITERATIONS = 200
STEP_TOLERANCE = 1e-8
GRADIENT_TOLERANCE = 1e-10
LOG_PARAM_FLOOR = -25.0  # exp(-25) ~ 1e-11: parameter effectively zero
LOG_PARAM_CEIL = 30.0  # exp(30) ~ 1e13: keeps runaway trial steps finite
SELECTION_THRESHOLD = 9.0  # deviance improvement required to prefer two components
DEGENERATE_LIFETIME_RATIO = 1.2
LOW_STATISTICS_COUNTS = 1000


@dataclass(frozen=True, eq=False)
class FitResult:
    """Estimates, uncertainties and diagnostics of one fit."""

    model: str
    parameters: dict
    std_errors: dict
    parameter_order: tuple
    covariance: np.ndarray
    statistic: float
    goodness: float
    goodness_kind: str
    n_points: int
    iterations: int
    converged: bool
    warnings: tuple = ()
    extras: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return self.parameters[name]


class FitConvergenceError(RuntimeError):
    """Fit did not converge within the iteration budget.

    Carries the last iterate as `result` (with converged=False) for diagnosis.
    """

    def __init__(self, message: str, result: FitResult):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class ModelSelection:
    """Outcome of the mono-vs-biexponential likelihood-ratio decision."""

    choice: str  # "mono" | "bi"
    delta_deviance: float
    threshold: float
    mono: FitResult
    bi: FitResult

    @property
    def best(self) -> FitResult:
        return self.mono if self.choice == "mono" else self.bi


@dataclass(frozen=True, eq=False)
class SpectralScan:
    """Lifetime vs wavelength points with a free-space lifetime reference.

    `reference_tau0` may be a constant (ps), a callable tau0(lambda_nm), or a
    table of (wavelength_nm, tau0_ps) rows interpolated linearly.
    """

    wavelengths: np.ndarray
    lifetimes: np.ndarray
    errors: np.ndarray | None = None
    reference_tau0: object = None

    def __post_init__(self):
        w = np.asarray(self.wavelengths, dtype=float)
        t = np.asarray(self.lifetimes, dtype=float)
        if w.ndim != 1 or w.shape != t.shape:
            raise ValueError("wavelengths and lifetimes must be 1D and congruent")
        if np.any(np.diff(w) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        if np.any(t <= 0):
            raise ValueError("lifetimes must be positive")
        object.__setattr__(self, "wavelengths", w)
        object.__setattr__(self, "lifetimes", t)
        if self.errors is not None:
            e = np.asarray(self.errors, dtype=float)
            if e.shape != w.shape or np.any(e <= 0):
                raise ValueError("errors must be positive and congruent")
            object.__setattr__(self, "errors", e)

    def tau0_function(self) -> Callable[[np.ndarray], np.ndarray]:
        return _as_tau0_function(self.reference_tau0)


def _as_tau0_function(ref) -> Callable[[np.ndarray], np.ndarray]:
    if ref is None:
        raise ValueError("a tau0 reference is required")
    if callable(ref):
        return lambda lam: np.asarray(ref(lam), dtype=float)
    if np.isscalar(ref):
        value = float(ref)
        return lambda lam: np.full_like(np.asarray(lam, dtype=float), value)
    table = np.asarray(ref, dtype=float)
    if table.ndim != 2 or table.shape[1] != 2:
        raise ValueError("tau0 table must have rows (wavelength_nm, tau0_ps)")
    return lambda lam: np.interp(np.asarray(lam, dtype=float), table[:, 0], table[:, 1])


def poisson_deviance(counts: np.ndarray, mu: np.ndarray) -> float:
    """2 * sum[mu - y + y*ln(y/mu)], the Poisson likelihood-ratio statistic."""
    mu = np.maximum(mu, 1e-300)
    y = counts
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0) / mu) - (y - mu), mu)
    return 2.0 * float(term.sum())


def _forward_jacobian(model, theta, mu):
    J = np.empty((len(mu), len(theta)))
    for j in range(len(theta)):
        h = 1e-6 * (1.0 + abs(theta[j]))
        tp = theta.copy()
        tp[j] += h
        J[:, j] = (model(tp) - mu) / h
    return J


def _levenberg_marquardt(
    theta0: np.ndarray,
    model: Callable[[np.ndarray], np.ndarray],
    y: np.ndarray,
    objective: str,
    weights: np.ndarray | None = None,
    max_iterations: int = MAX_ITERATIONS,
    clamp: Callable[[np.ndarray], np.ndarray] | None = None,
):
    """Damped least-squares minimization of the Poisson deviance or weighted chi2.

    Returns (theta, covariance, statistic, iterations, converged). The step
    equation uses the Fisher-scoring normal matrix with multiplicative
    damping; accepted steps update the damping through the gain ratio of
    actual to predicted reduction, rejected ones escalate it geometrically.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    if clamp is not None:
        theta = clamp(theta)

    def statistic(mu):
        if objective == "poisson":
            return poisson_deviance(y, mu)
        return float((weights * (y - mu) ** 2).sum())

    mu = np.maximum(model(theta), 1e-12)
    stat = statistic(mu)
    damping = 1e-3
    growth = 2.0
    iterations = 0
    converged = False
    for iterations in range(1, max_iterations + 1):
        J = _forward_jacobian(model, theta, mu)
        if objective == "poisson":
            grad = 2.0 * ((1.0 - y / mu) @ J)
            normal = 2.0 * ((J.T * (1.0 / mu)) @ J)
        else:
            grad = -2.0 * ((weights * (y - mu)) @ J)
            normal = 2.0 * ((J.T * weights) @ J)
        diag_scale = np.diag(np.maximum(np.diag(normal), 1e-30))
        accepted = False
        stalled_change = np.inf
        for _ in range(60):
            try:
                delta = np.linalg.solve(normal + damping * diag_scale, -grad)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                candidate = theta + delta
                if clamp is not None:
                    candidate = clamp(candidate)
                step = candidate - theta
                mu_new = np.maximum(model(candidate), 1e-12)
                stat_new = statistic(mu_new)
                if np.isfinite(stat_new) and stat_new < stat:
                    # Gain ratio, actual over predicted reduction
                    # (Madsen-Nielsen damping update).
                    predicted = 0.5 * float(
                        step @ (damping * (diag_scale @ step) - grad)
                    )
                    if predicted > 0:
                        rho = (stat - stat_new) / predicted
                        damping *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                    else:
                        damping /= 3.0
                    damping = max(damping, 1e-14)
                    growth = 2.0
                    accepted = True
                    break
                if np.isfinite(stat_new):
                    stalled_change = min(stalled_change, abs(stat_new - stat))
            if damping > 1e13:
                break
            damping *= growth
            growth = min(growth * 2.0, 1e4)
        if not accepted:
            # No direction reduces the objective beyond floating-point noise:
            # the iterate is numerically stationary.
            if stalled_change <= 1e-9 * max(stat, 1.0):
                converged = True
            break
        theta, mu, stat = candidate, mu_new, stat_new
        if np.all(np.abs(step) <= STEP_TOLERANCE * (np.abs(theta) + 1.0)):
            converged = True
            break
        if np.abs(grad).max() < GRADIENT_TOLERANCE:
            converged = True
            break
    J = _forward_jacobian(model, theta, mu)
    w = (1.0 / mu) if objective == "poisson" else weights
    fisher = (J.T * w) @ J
    try:
        covariance = np.linalg.inv(fisher)
    except np.linalg.LinAlgError:
        covariance = np.linalg.pinv(fisher)
    return theta, covariance, stat, iterations, converged


def _tail_lifetime_guess(t: np.ndarray, y: np.ndarray) -> float:
    """Log-linear regression on the decay tail; robust fallback on failure."""
    peak = int(np.argmax(y))
    mask = np.zeros(len(y), dtype=bool)
    mask[peak + 5 :] = True
    mask &= y >= 5
    if mask.sum() >= 4:
        slope, _ = np.polyfit(t[mask], np.log(y[mask]), 1, w=np.sqrt(y[mask]))
        if slope < 0:
            return -1.0 / slope
    return max((t[-1] - t[peak]) / 5.0, t[1] - t[0])


def _background_guess(y: np.ndarray) -> float:
    peak = int(np.argmax(y))
    head = y[: max(3, peak // 2)]
    return max(float(np.median(head)), 0.1)


def _natural_covariance(theta, cov_theta, log_mask):
    scale = np.where(log_mask, np.exp(theta), 1.0)
    return cov_theta * np.outer(scale, scale)


def _histogram_fit(hist: TransientHistogram, two_components: bool, max_iterations: int):
    y = hist.counts.astype(float)
    t = hist.bin_centers()
    grid = hist.grid
    irf = hist.irf
    t0_bound = 2.0 * irf.fwhm
    warnings = []
    if hist.total_counts < LOW_STATISTICS_COUNTS:
        warnings.append(
            f"low statistics: total counts {hist.total_counts} < {LOW_STATISTICS_COUNTS}"
        )

    tau_slow0 = _tail_lifetime_guess(t, y)
    bg0 = _background_guess(y)
    peak_height = max(float(y.max()), 1.0)

    if not two_components:
        names = ("amplitude", "lifetime_ps", "t0_shift_ps", "background")
        log_mask = np.array([True, True, False, True])
        theta0 = np.array([np.log(peak_height), np.log(tau_slow0), 0.0, np.log(bg0)])

        def model(theta):
            decay = DecayModel(
                [(np.exp(theta[0]), np.exp(theta[1]))], background=np.exp(theta[3])
            )
            return tcspc.expected_curve(decay, irf.shifted(theta[2]), grid)

    else:
        # Two-segment tail analysis: the early segment ends where the
        # cumulative counts reach 30%. When it shows no lifetime clearly
        # separated from the tail, the data look monoexponential: start the
        # fast component at negligible amplitude so it can collapse to zero
        # instead of wandering the flat amplitude/lifetime ridge.
        cumulative = np.cumsum(y)
        split = int(np.searchsorted(cumulative, 0.3 * cumulative[-1]))
        peak = int(np.argmax(y))
        early = np.zeros(len(y), dtype=bool)
        early[peak + 2 : max(split, peak + 8)] = True
        early &= y >= 5
        tau_fast0 = tau_slow0 / 4.0
        fast_amp0 = 1e-3 * peak_height
        if early.sum() >= 4:
            slope, _ = np.polyfit(t[early], np.log(y[early]), 1, w=np.sqrt(y[early]))
            if slope < 0 and 0.0 < -1.0 / slope < 0.8 * tau_slow0:
                tau_fast0 = -1.0 / slope
                fast_amp0 = 0.5 * peak_height
        names = (
            "amplitude_fast",
            "lifetime_fast_ps",
            "amplitude_slow",
            "lifetime_slow_ps",
            "t0_shift_ps",
            "background",
        )
        log_mask = np.array([True, True, True, True, False, True])
        theta0 = np.array(
            [
                np.log(fast_amp0),
                np.log(tau_fast0),
                np.log(max(0.1 * peak_height, 1e-3)),
                np.log(tau_slow0),
                0.0,
                np.log(bg0),
            ]
        )

        def model(theta):
            decay = DecayModel(
                [
                    (np.exp(theta[0]), np.exp(theta[1])),
                    (np.exp(theta[2]), np.exp(theta[3])),
                ],
                background=np.exp(theta[5]),
            )
            return tcspc.expected_curve(decay, irf.shifted(theta[4]), grid)

    t0_index = names.index("t0_shift_ps")
    # A component whose expected counts sit below the Poisson noise of the
    # whole record is statistically absent; parking its amplitude at the
    # floor lets collapsing fits converge instead of drifting for hundreds
    # of iterations. Never applied to both components at once.
    negligible = 0.25 * np.sqrt(max(hist.total_counts, 1.0))

    def clamp(theta):
        theta = np.where(
            log_mask, np.clip(theta, LOG_PARAM_FLOOR, LOG_PARAM_CEIL), theta
        )
        theta = np.where(log_mask & (theta < LOG_PARAM_FLOOR + 5.0),
                         LOG_PARAM_FLOOR, theta)
        if two_components:
            counts_a = np.exp(theta[0] + theta[1]) / hist.bin_width
            counts_b = np.exp(theta[2] + theta[3]) / hist.bin_width
            if counts_a < negligible <= counts_b:
                theta[0] = LOG_PARAM_FLOOR
            elif counts_b < negligible <= counts_a:
                theta[2] = LOG_PARAM_FLOOR
        theta[t0_index] = np.clip(theta[t0_index], -t0_bound, t0_bound)
        return theta

    theta, cov_theta, deviance, iterations, converged = _levenberg_marquardt(
        theta0, model, y, objective="poisson", clamp=clamp,
        max_iterations=max_iterations,
    )
    params = np.where(log_mask, np.exp(theta), theta)
    covariance = _natural_covariance(theta, cov_theta, log_mask)

    degenerate = False
    if two_components and params[1] > params[3]:
        perm = [2, 3, 0, 1, 4, 5]
        params = params[perm]
        covariance = covariance[np.ix_(perm, perm)]
    if two_components:
        ratio = params[3] / params[1]
        if ratio < DEGENERATE_LIFETIME_RATIO:
            degenerate = True
            warnings.append(
                f"unidentifiable: lifetime ratio {ratio:.3f} < {DEGENERATE_LIFETIME_RATIO}"
            )

    diag = np.diag(covariance)
    if np.any(diag < 0):
        warnings.append("curvature not positive definite; errors unreliable")
    std = np.sqrt(np.maximum(diag, 0.0))
    n_params = len(names)
    result = FitResult(
        model="biexponential" if two_components else "monoexponential",
        parameters=dict(zip(names, map(float, params))),
        std_errors=dict(zip(names, map(float, std))),
        parameter_order=names,
        covariance=covariance,
        statistic=deviance,
        goodness=deviance / max(len(y) - n_params, 1),
        goodness_kind="poisson-deviance",
        n_points=len(y),
        iterations=iterations,
        converged=converged,
        warnings=tuple(warnings),
    )
    if not converged and not degenerate:
        raise FitConvergenceError(
            f"{result.model} fit did not converge in {iterations} iterations",
            result,
        )
    # A degenerate (unidentifiable) two-component solution wanders a flat
    # likelihood valley and cannot meet the step criterion; it is returned
    # flagged rather than raised, since the flag explains the stall.
    return result


def fit_monoexponential(
    hist: TransientHistogram, max_iterations: int = MAX_ITERATIONS
) -> FitResult:
    """Poisson reconvolution fit of one decay component plus background.

    Free parameters: amplitude, lifetime, IRF shift (bounded to +-2 FWHM) and
    a constant background, the positive ones on log scale. Raises
    FitConvergenceError (carrying the last iterate) if the iteration budget
    is exhausted.
    """
    return _histogram_fit(hist, two_components=False, max_iterations=max_iterations)


def fit_biexponential(
    hist: TransientHistogram, max_iterations: int = MAX_ITERATIONS
) -> FitResult:
    """Poisson reconvolution fit of two decay components plus background.

    Components are reported with lifetime_fast_ps < lifetime_slow_ps. A
    lifetime ratio below 1.2 is flagged as unidentifiable in `warnings`.
    """
    return _histogram_fit(hist, two_components=True, max_iterations=max_iterations)


def select_model(
    hist: TransientHistogram, threshold: float = SELECTION_THRESHOLD
) -> ModelSelection:
    """Likelihood-ratio choice between one and two decay components.

    Prefers the biexponential only when it improves the deviance by more than
    `threshold`; ties go to the monoexponential.
    """
    mono = fit_monoexponential(hist)
    bi = fit_biexponential(hist)
    delta = mono.statistic - bi.statistic
    choice = "bi" if delta > threshold else "mono"
    return ModelSelection(
        choice=choice, delta_deviance=delta, threshold=threshold, mono=mono, bi=bi
    )


def scan_lifetime(hist: TransientHistogram, reduction: str = "fast"):
    """Representative lifetime of one histogram for a spectral scan.

    reduction="fast": the fast constant of the biexponential fit;
    reduction="selected": run model selection and take the fast constant when
    the biexponential wins, the single constant otherwise. Returns
    (lifetime_ps, std_error_ps).
    """
    if reduction == "fast":
        res = fit_biexponential(hist)
        return res["lifetime_fast_ps"], res.std_errors["lifetime_fast_ps"]
    if reduction == "selected":
        sel = select_model(hist)
        name = "lifetime_fast_ps" if sel.choice == "bi" else "lifetime_ps"
        return sel.best[name], sel.best.std_errors[name]
    raise ValueError(f"unknown reduction {reduction!r}")


def fit_spectral_model(
    scan: SpectralScan,
    modes: Sequence[CavityMode],
    tau0_ref=None,
    max_iterations: int = MAX_ITERATIONS,
) -> FitResult:
    """Weighted fit of the detuning model to a lifetime-vs-wavelength scan.

    Model: tau(lambda) = tau0(lambda) / (sum_m (F_m/3) L_m(lambda) + alpha)
    with L_m the unit-peak Lorentzian of mode m (position and linewidth fixed,
    not fitted). Free parameters are the per-mode enhancements F_m and alpha,
    kept non-negative through log parameterization. Weights are 1/sigma^2 when
    the scan carries uncertainties, else 1.

    The result's extras report, per mode, the on-resonance lifetime
    tau0(lambda_m) / (F_m/3 + alpha) and the maximal lifetime ratio.
    """
    if not modes:
        raise ValueError("at least one cavity mode is required")
    modes = list(modes)
    tau0 = _as_tau0_function(tau0_ref if tau0_ref is not None else scan.reference_tau0)
    lam = scan.wavelengths
    y = scan.lifetimes
    for mode in modes:
        span_lo = lam[0] <= mode.lambda_c - 1.5 * mode.linewidth
        span_hi = lam[-1] >= mode.lambda_c + 1.5 * mode.linewidth
        if not (span_lo and span_hi):
            raise ValueError(
                f"scan must span at least 3 linewidths around the mode at "
                f"{mode.lambda_c} nm"
            )
    weights = (
        1.0 / scan.errors**2 if scan.errors is not None else np.ones_like(y)
    )
    tau0_vals = tau0(lam)

    # Initial guesses: alpha from points detuned from every mode, F from the
    # deepest point attributed to its nearest mode.
    detached = np.ones_like(lam, dtype=bool)
    for mode in modes:
        detached &= np.abs(lam - mode.lambda_c) > 1.5 * mode.linewidth
    if detached.any():
        alpha0 = float(np.median(tau0_vals[detached] / y[detached]))
    else:
        alpha0 = 0.5
    alpha0 = max(alpha0, 1e-3)
    f0 = []
    for mode in modes:
        near = np.abs(lam - mode.lambda_c) < 2.0 * mode.linewidth
        tau_min = float(y[near].min()) if near.any() else float(y.min())
        f0.append(max(3.0 * (tau0(mode.lambda_c) / tau_min - alpha0), 1.0))
    theta0 = np.log(np.array(f0 + [alpha0]))

    def model(theta):
        fps = np.exp(theta[:-1])
        alpha = np.exp(theta[-1])
        ratio = lifetime_ratio_multimode(lam, modes, fps, alpha)
        return tau0_vals / ratio

    def clamp(theta):
        theta = np.clip(theta, LOG_PARAM_FLOOR, LOG_PARAM_CEIL)
        return np.where(theta < LOG_PARAM_FLOOR + 5.0, LOG_PARAM_FLOOR, theta)

    theta, cov_theta, chi2, iterations, converged = _levenberg_marquardt(
        theta0, model, y, objective="wls", weights=weights, clamp=clamp,
        max_iterations=max_iterations,
    )
    log_mask = np.ones(len(theta), dtype=bool)
    params = np.exp(theta)
    covariance = _natural_covariance(theta, cov_theta, log_mask)
    std = np.sqrt(np.maximum(np.diag(covariance), 0.0))

    if len(modes) == 1:
        names = ("purcell_factor", "alpha")
    else:
        names = tuple(f"purcell_factor_{i + 1}" for i in range(len(modes))) + ("alpha",)
    alpha = float(params[-1])
    fps = [float(v) for v in params[:-1]]
    ratios = [fp / 3.0 + alpha for fp in fps]
    tau_res = [float(tau0(m.lambda_c)) / r for m, r in zip(modes, ratios)]
    result = FitResult(
        model="spectral-detuning",
        parameters=dict(zip(names, list(map(float, params)))),
        std_errors=dict(zip(names, list(map(float, std)))),
        parameter_order=names,
        covariance=covariance,
        statistic=chi2,
        goodness=chi2 / max(len(y) - len(names), 1),
        goodness_kind="weighted-chi-square",
        n_points=len(y),
        iterations=iterations,
        converged=converged,
        extras={
            "modes_used": [(m.lambda_c, m.q_factor) for m in modes],
            "tau_on_resonance_ps": tau_res,
            "lifetime_ratio_per_mode": ratios,
            "lifetime_ratio_max": max(ratios),
        },
    )
    if not converged:
        raise FitConvergenceError(
            f"spectral fit did not converge in {iterations} iterations", result
        )
    return result


def synthesize_spectral_scan(
    modes: Sequence[CavityMode],
    fps: Sequence[float],
    alpha: float,
    tau0_ref,
    wavelengths: np.ndarray,
    noise_fraction: float,
    seed: int,
) -> SpectralScan:
    """Sample a noisy lifetime scan from the detuning model.

    The true tau(lambda) from `lifetime_ratio_multimode` gets multiplicative
    Gaussian noise of relative size `noise_fraction`; reported uncertainties
    are noise_fraction * tau_true. Deterministic for a fixed seed.
    """
    lam = np.asarray(wavelengths, dtype=float)
    tau0 = _as_tau0_function(tau0_ref)
    ratio = lifetime_ratio_multimode(lam, list(modes), list(fps), alpha)
    tau_true = tau0(lam) / ratio
    rng = np.random.default_rng(seed)
    tau = tau_true * (1.0 + noise_fraction * rng.standard_normal(lam.shape))
    tau = np.maximum(tau, 1e-9)
    return SpectralScan(
        wavelengths=lam,
        lifetimes=tau,
        errors=noise_fraction * tau_true if noise_fraction > 0 else None,
        reference_tau0=tau0_ref,
    )
