"""Closed-form link budget for the gated fiber QKD system.

The model propagates a weak laser pulse through an attenuating, dispersive
fiber and into a pair of gated single-photon detectors.  It produces the
per-gate click probabilities, the detected-event ("raw") rate including
dead-time thinning, and the decomposition of the quantum bit error rate
into its four physical contributions::

    e = e_opt + e_afterpulse + e_dark + e_interclock

The arrival-time profile at the receiver is a weighted mixture of Gaussian
components (main spectral line plus an optional displaced side mode), each
convolved with the detector jitter.  Gate acceptance and inter-clock
leakage both follow from integrating that profile over the periodic gate
windows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import (
    ChannelParams,
    DetectorParams,
    ParameterError,
    ReceiverParams,
    SourceParams,
)

__all__ = [
    "ClickProbabilities",
    "QberBreakdown",
    "transmittance",
    "broadened_width",
    "temporal_components",
    "gate_acceptance",
    "interclock_error",
    "link_timing",
    "click_probabilities",
    "nominal_blocked_gates",
    "effective_blocked_gates",
    "raw_rate",
    "qber_breakdown",
]

_SQRT2 = math.sqrt(2.0)
# Gaussian mass beyond 8 sigma is ~1e-15; windows further out are ignored.
_TAIL_SIGMAS = 8.0


@dataclass(frozen=True)
class ClickProbabilities:
    """Per-gate click probabilities at one operating point."""

    p_signal: float
    p_dark: float
    p_total: float

    def __post_init__(self) -> None:
        for name in ("p_signal", "p_dark", "p_total"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {value}")
        if self.p_total + 1e-12 < max(self.p_signal, self.p_dark):
            raise ParameterError("p_total cannot be below its components")


@dataclass(frozen=True)
class QberBreakdown:
    """Additive error-rate contributions and their sum."""

    e_opt: float
    e_afterpulse: float
    e_dark: float
    e_interclock: float
    total: float

    def __post_init__(self) -> None:
        parts = (self.e_opt, self.e_afterpulse, self.e_dark, self.e_interclock)
        for name, value in zip(("e_opt", "e_afterpulse", "e_dark", "e_interclock"), parts):
            if not 0.0 <= value <= 0.5:
                raise ParameterError(f"{name} must lie in [0, 0.5], got {value}")
        if abs(self.total - sum(parts)) > 1e-12:
            raise ParameterError("total must equal the sum of the components")


def transmittance(length: float, attenuation: float) -> float:
    """Fraction of light surviving ``length`` km of fiber at ``attenuation`` dB/km."""
    if length < 0.0:
        raise ParameterError("length must be non-negative")
    if attenuation < 0.0:
        raise ParameterError("attenuation must be non-negative")
    return 10.0 ** (-attenuation * length / 10.0)


def broadened_width(source: SourceParams, channel: ChannelParams) -> float:
    """RMS temporal width of the main pulse component after the fiber, ps.

    Chromatic dispersion stretches the pulse by ``D * L * delta_lambda``;
    the intrinsic width adds in quadrature.  A dispersion-compensated span
    restores the launch width exactly (the pre-compensator is assumed to be
    matched to the fiber).
    """
    if channel.compensated:
        return source.pulse_sigma0
    spread = channel.dispersion * channel.length * source.spectral_width
    return math.hypot(source.pulse_sigma0, spread)


def temporal_components(
    source: SourceParams, channel: ChannelParams
) -> tuple[tuple[float, float, float], ...]:
    """Weighted Gaussian components of the arrival-time profile.

    Returns a tuple of ``(weight, mean_ps, sigma_ps)`` triples, relative to
    the pulse's own clock center and before detector jitter.  The main line
    broadens with dispersion; the spectral side mode is quasi-monochromatic,
    so it keeps the launch width but walks away from the gate at
    ``D * L * side_mode_offset``.  Compensation cancels the accumulated
    dispersion for all wavelengths, collapsing the profile back to a single
    centered component.
    """
    if channel.compensated:
        return ((1.0, 0.0, source.pulse_sigma0),)
    walkoff = channel.dispersion * channel.length  # ps per nm of detuning
    main_sigma = math.hypot(source.pulse_sigma0, walkoff * source.spectral_width)
    weight = source.side_mode_weight
    if weight == 0.0:
        return ((1.0, 0.0, main_sigma),)
    return (
        (1.0 - weight, 0.0, main_sigma),
        (weight, walkoff * source.side_mode_offset, source.pulse_sigma0),
    )


def _window_masses(
    mean: float, sigma: float, period: float, window: float
) -> list[tuple[int, float]]:
    """Mass of a Gaussian in each clock-period gate window that matters.

    Window ``k`` spans ``[k*period - window/2, k*period + window/2]``.
    """
    half = 0.5 * window
    reach = _TAIL_SIGMAS * sigma + half
    k_lo = int(math.floor((mean - reach) / period))
    k_hi = int(math.ceil((mean + reach) / period))
    z = sigma * _SQRT2
    out = []
    for k in range(k_lo, k_hi + 1):
        center = k * period
        mass = 0.5 * (
            math.erf((center + half - mean) / z) - math.erf((center - half - mean) / z)
        )
        if mass > 0.0:
            out.append((k, mass))
    return out


def _profile_timing(
    components: tuple[tuple[float, float, float], ...], det: DetectorParams
) -> tuple[float, float]:
    """Accepted fraction and neighbor-window fraction of a mixture profile."""
    jitter = det.jitter_sigma
    accepted = 0.0
    neighbors = 0.0
    for weight, mean, sigma in components:
        eff_sigma = math.hypot(sigma, jitter)
        for k, mass in _window_masses(mean, eff_sigma, det.gate_period, det.gate_window):
            accepted += weight * mass
            if k != 0:
                neighbors += weight * mass
    return accepted, neighbors


def gate_acceptance(width: float, det: DetectorParams) -> float:
    """Fraction of a centered Gaussian pulse that lands inside a gate window.

    ``width`` is the RMS pulse width in ps before jitter.  Leakage into
    neighboring periods' windows still counts as accepted (the detector
    clicks; the photon is merely attributed to the wrong clock cycle), so
    for very wide pulses the acceptance approaches the gating duty cycle
    ``gate_window / gate_period``.
    """
    if width <= 0.0:
        raise ParameterError("width must be positive")
    accepted, _ = _profile_timing(((1.0, 0.0, width),), det)
    return accepted


def interclock_error(width: float, det: DetectorParams) -> float:
    """Error contribution from pulse mass leaking into neighboring gates.

    A photon detected one clock period away from its own is uncorrelated
    with the locally encoded bit and is wrong half the time, so the error
    contribution is half the leaked fraction of the accepted mass.
    """
    if width <= 0.0:
        raise ParameterError("width must be positive")
    accepted, neighbors = _profile_timing(((1.0, 0.0, width),), det)
    if accepted == 0.0:
        return 0.0
    return 0.5 * neighbors / accepted


def link_timing(
    source: SourceParams, channel: ChannelParams, receiver: ReceiverParams
) -> tuple[float, float]:
    """Gate acceptance and inter-clock error of the full arrival profile.

    Returns ``(acceptance, e_interclock)`` averaged over the two detectors
    (the interferometer routes photons to either one with equal long-run
    frequency).  A compensated span has no leakage by construction.
    """
    components = temporal_components(source, channel)
    acc_sum = 0.0
    err_sum = 0.0
    for det in (receiver.detector_a, receiver.detector_b):
        accepted, neighbors = _profile_timing(components, det)
        acc_sum += accepted
        if not channel.compensated and accepted > 0.0:
            err_sum += 0.5 * neighbors / accepted
    return 0.5 * acc_sum, 0.5 * err_sum


def click_probabilities(
    source: SourceParams, channel: ChannelParams, receiver: ReceiverParams
) -> ClickProbabilities:
    """Per-gate click probabilities for signal, dark counts, and either."""
    acceptance, _ = link_timing(source, channel, receiver)
    mean_detected = (
        source.mu
        * transmittance(channel.length, channel.attenuation)
        * receiver.eta_bob
        * acceptance
    )
    p_signal = -math.expm1(-mean_detected)
    d_a = receiver.detector_a.dark_prob
    d_b = receiver.detector_b.dark_prob
    p_dark = 1.0 - (1.0 - d_a) * (1.0 - d_b)
    p_total = 1.0 - (1.0 - p_signal) * (1.0 - p_dark)
    return ClickProbabilities(p_signal=p_signal, p_dark=p_dark, p_total=p_total)


def _blocked_gate_split(det: DetectorParams) -> tuple[int, list[int]]:
    """Gates fully and partially covered by the hold-off after a click.

    A candidate in gate ``k`` after a click is separated from it by
    ``k * period + (u2 - u1)`` where the in-window offsets ``u`` differ by
    at most the window width.  Gates with ``k * period + window <= dead``
    are always blocked; gates with ``|dead - k * period| < window`` are
    blocked only for part of the offset combinations.
    """
    dead = det.dead_time_ps
    period = det.gate_period
    window = det.gate_window
    k_always = max(0, int(math.floor((dead - window) / period)))
    partial = []
    k = k_always + 1
    while k * period < dead + window:
        partial.append(k)
        k += 1
    return k_always, partial


def nominal_blocked_gates(det: DetectorParams) -> float:
    """Hold-off expressed in whole gates, with boundary gates counted half.

    Used when no arrival-time profile is available to weight the partially
    blocked boundary gate; :func:`effective_blocked_gates` refines this.
    """
    k_always, partial = _blocked_gate_split(det)
    return k_always + 0.5 * len(partial)


def effective_blocked_gates(
    source: SourceParams, channel: ChannelParams, receiver: ReceiverParams
) -> float:
    """Expected number of gates lost to the hold-off after each click.

    The boundary gate (the first one whose separation from the previous
    click straddles the dead time) is blocked only when the new candidate
    arrives early in its window relative to the previous click's position.
    The probability of that is computed from the stationary distribution of
    in-window click offsets: the accepted signal profile plus the uniform
    dark-count background, weighted by their click shares.
    """
    det = receiver.detector_a
    k_always, partial = _blocked_gate_split(det)
    if not partial:
        return float(k_always)

    window = det.gate_window
    period = det.gate_period
    half = 0.5 * window
    grid = np.linspace(-half, half, 2049)
    density = np.zeros_like(grid)

    clicks = click_probabilities(source, channel, receiver)
    components = temporal_components(source, channel)
    jitter = det.jitter_sigma
    # Signal photons: profile restricted to the windows, folded onto the
    # in-window offset coordinate.
    for weight, mean, sigma in components:
        eff_sigma = math.hypot(sigma, jitter)
        for k, _ in _window_masses(mean, eff_sigma, period, window):
            center = k * period
            density += (
                weight
                * clicks.p_signal
                * np.exp(-0.5 * ((grid + center - mean) / eff_sigma) ** 2)
                / (eff_sigma * math.sqrt(2.0 * math.pi))
            )
    # Dark counts: uniform across the window.
    density += clicks.p_dark / window

    total = np.trapezoid(density, grid)
    if total <= 0.0:
        return float(k_always) + 0.5 * len(partial)
    density = density / total
    du = grid[1] - grid[0]
    weights = density * du
    cdf = np.cumsum(weights)

    blocked = float(k_always)
    dead = det.dead_time_ps
    for k in partial:
        # Candidate blocked when u2 - u1 < dead - k*period, i.e. when the
        # previous click sat later in its window than u2 - threshold.
        threshold = dead - k * period
        position = np.clip(
            np.searchsorted(grid, grid - threshold, side="right") - 1, -1, len(grid) - 1
        )
        accept = np.where(position >= 0, cdf[np.maximum(position, 0)], 0.0)
        blocked += float(np.sum(weights * (1.0 - accept)))
    return blocked


def raw_rate(
    clicks: ClickProbabilities,
    source: SourceParams,
    receiver: ReceiverParams,
    blocked_gates: float | None = None,
) -> float:
    """Detected-event rate in Hz, before basis sifting.

    Each detector runs its own hold-off: a click suppresses that detector's
    candidates for ``blocked_gates`` subsequent gates on average, thinning
    the per-detector stream from ``q`` to ``q / (1 + q * blocked)`` per gate
    (renewal process over Bernoulli gates).  Simultaneous clicks on both
    detectors are recorded as a single event.
    """
    p = clicks.p_total
    if p <= 0.0:
        return 0.0
    # Symmetric split of the combined no-click probability between the two
    # detectors; exact for identical detectors under balanced routing.
    q = 1.0 - math.sqrt(1.0 - p)
    accepted = []
    for det in (receiver.detector_a, receiver.detector_b):
        blocked = nominal_blocked_gates(det) if blocked_gates is None else blocked_gates
        accepted.append(q / (1.0 + q * blocked))
    a, b = accepted
    return source.clock_rate * (a + b - a * b)


def qber_breakdown(
    source: SourceParams, channel: ChannelParams, receiver: ReceiverParams
) -> QberBreakdown:
    """Additive decomposition of the quantum bit error rate.

    * ``e_opt``: interferometer contrast plus encoder mis-modulation.
    * ``e_afterpulse``: afterpulses carry no phase information and are wrong
      half the time, contributing half the afterpulse probability.
    * ``e_dark``: dark counts are likewise uninformative; their share of all
      clicks errs half the time.
    * ``e_interclock``: photons detected in a neighboring clock period are
      compared against an unrelated bit.
    """
    e_opt = receiver.optical_error
    pa = 0.5 * (
        receiver.detector_a.afterpulse_total + receiver.detector_b.afterpulse_total
    )
    e_afterpulse = 0.5 * pa
    clicks = click_probabilities(source, channel, receiver)
    e_dark = 0.5 * clicks.p_dark / clicks.p_total if clicks.p_total > 0.0 else 0.0
    _, e_interclock = link_timing(source, channel, receiver)
    total = e_opt + e_afterpulse + e_dark + e_interclock
    return QberBreakdown(
        e_opt=e_opt,
        e_afterpulse=e_afterpulse,
        e_dark=e_dark,
        e_interclock=e_interclock,
        total=total,
    )
