"""Four-state phase-encoding protocol logic.

Alice encodes a random bit in one of two conjugate phase bases; Bob's
interferometer routes each photon to one of two detectors according to the
phase difference.  Matched-basis detections form the sifted key, from which
the error rate is estimated and the distillable key length computed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .keyrate import binary_entropy
from .params import ParameterError, ProtocolConstants

__all__ = [
    "ProtocolError",
    "SiftedKey",
    "encode",
    "decode_click",
    "sift",
    "estimate_qber",
    "secure_key_length",
    "write_sifted_key",
]

HALF_PI = 0.5 * math.pi

DETECTOR_A = 0
DETECTOR_B = 1


class ProtocolError(ValueError):
    """Raised for malformed protocol inputs (bad bits, unknown clock indices)."""


def encode(bit: int, basis: int) -> float:
    """Phase applied by Alice's modulator for (bit, basis).

    bit 0/1 selects 0 or pi; basis 0/1 adds a quarter-wave offset:
    (0,0) -> 0, (1,0) -> pi, (0,1) -> pi/2, (1,1) -> 3*pi/2.
    """
    if bit not in (0, 1) or basis not in (0, 1):
        raise ProtocolError(f"bit and basis must be 0 or 1, got ({bit}, {basis})")
    return bit * math.pi + basis * HALF_PI


def decode_click(phase_a: float, phase_b: float, visibility: float) -> float:
    """Probability that the interferometer routes the photon to detector A.

    ``phase_b`` is Bob's analysis phase (0 or pi/2 in normal operation,
    though any value is accepted).  With matched phases and unit visibility
    the photon exits deterministically; a quarter-wave mismatch splits it
    evenly.
    """
    if not 0.0 <= visibility <= 1.0:
        raise ParameterError("visibility must lie in [0, 1]")
    return 0.5 * (1.0 + visibility * math.cos(phase_a - phase_b))


@dataclass(frozen=True)
class SiftedKey:
    """Basis-matched bit pairs in clock order."""

    clock_index: np.ndarray
    alice_bits: np.ndarray
    bob_bits: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.clock_index)
        if len(self.alice_bits) != n or len(self.bob_bits) != n:
            raise ProtocolError("sifted-key columns must have equal length")

    @property
    def n_sifted(self) -> int:
        return int(len(self.clock_index))

    @property
    def qber_estimate(self) -> float:
        """Mismatch fraction; NaN for an empty key (no detections to compare)."""
        if self.n_sifted == 0:
            return math.nan
        return float(np.count_nonzero(self.alice_bits != self.bob_bits)) / self.n_sifted

    @property
    def qber_defined(self) -> bool:
        return self.n_sifted > 0


def sift(alice, tags, bob_bases) -> SiftedKey:
    """Keep detections whose preparation and analysis bases agree.

    Parameters
    ----------
    alice:
        Per-clock preparation record (see ``montecarlo.AliceLog``).
    tags:
        Detection record stream carrying ``clock_index`` and ``detector_id``
        columns.
    bob_bases:
        Bob's per-clock basis choices, aligned with ``alice.clock_index``.

    Bob's bit is the identity of the detector that fired.  Bit values are
    never inspected here; only bases and detector identities decide what
    survives.
    """
    bob_bases = np.asarray(bob_bases)
    if len(bob_bases) != len(alice.clock_index):
        raise ProtocolError("bob_bases must align with Alice's clock record")
    tag_clocks = np.asarray(tags.clock_index, dtype=np.uint64)
    positions = np.searchsorted(alice.clock_index, tag_clocks)
    bad = (positions >= len(alice.clock_index)) | (
        alice.clock_index[np.minimum(positions, len(alice.clock_index) - 1)] != tag_clocks
    )
    if np.any(bad):
        missing = tag_clocks[bad][0]
        raise ProtocolError(f"tag references unknown clock index {missing}")
    matched = alice.basis[positions] == bob_bases[positions]
    keep = np.flatnonzero(matched)
    return SiftedKey(
        clock_index=tag_clocks[keep],
        alice_bits=np.asarray(alice.bit)[positions[keep]].astype(np.uint8),
        bob_bits=np.asarray(tags.detector_id)[keep].astype(np.uint8),
    )


def estimate_qber(key: SiftedKey) -> float:
    """Observed error rate of a sifted key."""
    if key.n_sifted < 1:
        raise ProtocolError("cannot estimate an error rate from an empty key")
    return key.qber_estimate


def secure_key_length(n_sifted: int, qber: float, consts: ProtocolConstants) -> int:
    """Distillable bits from ``n_sifted`` sifted bits at error rate ``qber``.

    The sifted count already reflects the basis-matching loss, so only the
    error-correction and privacy-amplification terms are applied here.
    """
    if n_sifted < 0:
        raise ParameterError("n_sifted must be non-negative")
    if not 0.0 <= qber <= 0.5:
        raise ParameterError(f"qber must lie in [0, 0.5], got {qber}")
    yield_fraction = 1.0 - (1.0 + consts.f_ec) * binary_entropy(qber)
    return max(0, math.floor(n_sifted * yield_fraction))


def write_sifted_key(key: SiftedKey, path, consts: ProtocolConstants) -> None:
    """Write one ``clock_index,alice_bit,bob_bit`` record per line.

    A commented summary block (record count, error rate, distillable bits)
    follows the records so the file remains trivially machine-parsable.
    """
    lines = [
        f"{int(c)},{int(a)},{int(b)}"
        for c, a, b in zip(key.clock_index, key.alice_bits, key.bob_bits)
    ]
    if key.qber_defined:
        qber = key.qber_estimate
        secure_bits = secure_key_length(key.n_sifted, min(qber, 0.5), consts)
        qber_text = repr(qber)
    else:
        secure_bits = 0
        qber_text = "undefined"
    lines.append(f"# n_sifted = {key.n_sifted}")
    lines.append(f"# qber = {qber_text}")
    lines.append(f"# secure_bits = {secure_bits}")
    with open(path, "w", encoding="ascii") as handle:
        handle.write("\n".join(lines) + "\n")
