"""Plain-text system configuration files.

The format is a flat list of ``section.key = value`` lines — no nesting, no
interpolation.  ``#`` starts a comment, blank lines are ignored.  Parsing is
strict: every known key must appear exactly once and unknown keys are
errors, so a config file is always a complete, unambiguous snapshot of the
system.  Units are part of the key name (``_ps``, ``_ns``, ``_km``, ...);
detector gate periods are derived from the source clock rather than stored.
"""

from __future__ import annotations

from importlib import resources

from .params import (
    CalibrationParams,
    ChannelParams,
    DetectorParams,
    ProtocolConstants,
    ReceiverParams,
    SourceParams,
    SystemConfig,
)

__all__ = ["ConfigError", "load_config", "parse_config", "save_config", "default_config"]

_PS_PER_S = 1e12

_FLOAT_KEYS = (
    "source.clock_rate_hz",
    "source.mu",
    "source.wavelength_nm",
    "source.pulse_sigma0_ps",
    "source.spectral_width_nm",
    "source.side_mode_weight",
    "source.side_mode_offset_nm",
    "channel.length_km",
    "channel.attenuation_db_per_km",
    "channel.dispersion_ps_per_nm_km",
    "receiver.eta_bob",
    "receiver.visibility",
    "receiver.mismodulation_error",
    "detector_a.efficiency",
    "detector_a.dark_prob",
    "detector_a.afterpulse_total",
    "detector_a.afterpulse_decay_ns",
    "detector_a.gate_window_ps",
    "detector_a.dead_time_ns",
    "detector_a.jitter_fwhm_ps",
    "detector_b.efficiency",
    "detector_b.dark_prob",
    "detector_b.afterpulse_total",
    "detector_b.afterpulse_decay_ns",
    "detector_b.gate_window_ps",
    "detector_b.dead_time_ns",
    "detector_b.jitter_fwhm_ps",
    "protocol.f_ec",
    "protocol.sift_factor",
    "calibration.pa_ref",
    "calibration.pa_ref_eta",
    "calibration.gamma",
    "calibration.dark_floor",
    "calibration.dark_floor_eta",
    "calibration.dark_slope",
)
_BOOL_KEYS = ("channel.compensated",)
_ALL_KEYS = frozenset(_FLOAT_KEYS) | frozenset(_BOOL_KEYS)


class ConfigError(ValueError):
    """Raised for malformed, incomplete, or contradictory config input."""


def parse_config(text: str, origin: str = "<config>") -> SystemConfig:
    """Parse config text into a validated :class:`SystemConfig`."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        if key in _BOOL_KEYS:
            lowered = value.lower()
            if lowered not in ("true", "false"):
                raise ConfigError(
                    f"{origin}:{lineno}: {key} must be 'true' or 'false', got {value!r}"
                )
            values[key] = lowered == "true"
        else:
            try:
                values[key] = float(value)
            except ValueError:
                raise ConfigError(
                    f"{origin}:{lineno}: {key} is not a number: {value!r}"
                ) from None
    missing = sorted(_ALL_KEYS - values.keys())
    if missing:
        raise ConfigError(f"{origin}: missing keys: {', '.join(missing)}")
    return _build(values)


def _detector(values: dict, prefix: str, gate_period: float) -> DetectorParams:
    return DetectorParams(
        efficiency=values[f"{prefix}.efficiency"],
        dark_prob=values[f"{prefix}.dark_prob"],
        afterpulse_total=values[f"{prefix}.afterpulse_total"],
        afterpulse_decay=values[f"{prefix}.afterpulse_decay_ns"],
        gate_period=gate_period,
        gate_window=values[f"{prefix}.gate_window_ps"],
        dead_time=values[f"{prefix}.dead_time_ns"],
        jitter_fwhm=values[f"{prefix}.jitter_fwhm_ps"],
    )


def _section(name: str, builder):
    """Run one section constructor, prefixing validation errors with the key path."""
    try:
        return builder()
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _build(values: dict) -> SystemConfig:
    source = _section(
        "source",
        lambda: SourceParams(
            clock_rate=values["source.clock_rate_hz"],
            mu=values["source.mu"],
            pulse_sigma0=values["source.pulse_sigma0_ps"],
            spectral_width=values["source.spectral_width_nm"],
            side_mode_weight=values["source.side_mode_weight"],
            side_mode_offset=values["source.side_mode_offset_nm"],
            wavelength=values["source.wavelength_nm"],
        ),
    )
    gate_period = _PS_PER_S / source.clock_rate
    channel = _section(
        "channel",
        lambda: ChannelParams(
            length=values["channel.length_km"],
            attenuation=values["channel.attenuation_db_per_km"],
            dispersion=values["channel.dispersion_ps_per_nm_km"],
            compensated=values["channel.compensated"],
        ),
    )
    receiver = _section(
        "receiver",
        lambda: ReceiverParams(
            eta_bob=values["receiver.eta_bob"],
            visibility=values["receiver.visibility"],
            mismodulation_error=values["receiver.mismodulation_error"],
            detector_a=_section(
                "detector_a", lambda: _detector(values, "detector_a", gate_period)
            ),
            detector_b=_section(
                "detector_b", lambda: _detector(values, "detector_b", gate_period)
            ),
        ),
    )
    protocol = _section(
        "protocol",
        lambda: ProtocolConstants(
            f_ec=values["protocol.f_ec"],
            sift_factor=values["protocol.sift_factor"],
        ),
    )
    calibration = _section(
        "calibration",
        lambda: CalibrationParams(
            pa_ref=values["calibration.pa_ref"],
            pa_ref_eta=values["calibration.pa_ref_eta"],
            gamma=values["calibration.gamma"],
            dark_floor=values["calibration.dark_floor"],
            dark_floor_eta=values["calibration.dark_floor_eta"],
            dark_slope=values["calibration.dark_slope"],
        ),
    )
    return _section(
        "config",
        lambda: SystemConfig(
            source=source,
            channel=channel,
            receiver=receiver,
            protocol=protocol,
            calibration=calibration,
        ),
    )


def load_config(path) -> SystemConfig:
    """Read and parse a config file."""
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    return parse_config(text, origin=str(path))


def _dump_detector(det: DetectorParams, prefix: str) -> list[str]:
    return [
        f"{prefix}.efficiency = {det.efficiency!r}",
        f"{prefix}.dark_prob = {det.dark_prob!r}",
        f"{prefix}.afterpulse_total = {det.afterpulse_total!r}",
        f"{prefix}.afterpulse_decay_ns = {det.afterpulse_decay!r}",
        f"{prefix}.gate_window_ps = {det.gate_window!r}",
        f"{prefix}.dead_time_ns = {det.dead_time!r}",
        f"{prefix}.jitter_fwhm_ps = {det.jitter_fwhm!r}",
    ]


def dumps_config(config: SystemConfig) -> str:
    """Render a config as text that :func:`parse_config` reads back exactly."""
    s, c, r, p, k = (
        config.source,
        config.channel,
        config.receiver,
        config.protocol,
        config.calibration,
    )
    lines = [
        f"source.clock_rate_hz = {s.clock_rate!r}",
        f"source.mu = {s.mu!r}",
        f"source.wavelength_nm = {s.wavelength!r}",
        f"source.pulse_sigma0_ps = {s.pulse_sigma0!r}",
        f"source.spectral_width_nm = {s.spectral_width!r}",
        f"source.side_mode_weight = {s.side_mode_weight!r}",
        f"source.side_mode_offset_nm = {s.side_mode_offset!r}",
        "",
        f"channel.length_km = {c.length!r}",
        f"channel.attenuation_db_per_km = {c.attenuation!r}",
        f"channel.dispersion_ps_per_nm_km = {c.dispersion!r}",
        f"channel.compensated = {'true' if c.compensated else 'false'}",
        "",
        f"receiver.eta_bob = {r.eta_bob!r}",
        f"receiver.visibility = {r.visibility!r}",
        f"receiver.mismodulation_error = {r.mismodulation_error!r}",
        "",
        *_dump_detector(r.detector_a, "detector_a"),
        "",
        *_dump_detector(r.detector_b, "detector_b"),
        "",
        f"protocol.f_ec = {p.f_ec!r}",
        f"protocol.sift_factor = {p.sift_factor!r}",
        "",
        f"calibration.pa_ref = {k.pa_ref!r}",
        f"calibration.pa_ref_eta = {k.pa_ref_eta!r}",
        f"calibration.gamma = {k.gamma!r}",
        f"calibration.dark_floor = {k.dark_floor!r}",
        f"calibration.dark_floor_eta = {k.dark_floor_eta!r}",
        f"calibration.dark_slope = {k.dark_slope!r}",
    ]
    return "\n".join(lines) + "\n"


def save_config(config: SystemConfig, path) -> None:
    """Write a config file that round-trips through :func:`load_config`."""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(dumps_config(config))


def default_config() -> SystemConfig:
    """The calibrated link configuration shipped with the package."""
    text = resources.files("qkdlink.data").joinpath("default.cfg").read_text("utf-8")
    return parse_config(text, origin="qkdlink/data/default.cfg")
