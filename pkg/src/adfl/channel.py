"""Wireless link model: log-distance path loss, Rayleigh fading, rates and airtimes.

Every function here is pure; randomness enters only through an explicit
numpy Generator, so concurrent callers just need their own streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT_M_S = 299_792_458.0


@dataclass(frozen=True)
class ChannelParams:
    """Link-budget constants shared by every device in a deployment.

    ``sample_energy`` is the per-sample transmit energy budget in joules;
    when built from a power budget it equals tx_power_watts / bandwidth_hz
    (Nyquist-rate signaling). ``noise_density`` is the receiver noise PSD
    in W/Hz; zero is allowed so noiseless limits can be simulated.
    """

    bandwidth_hz: float
    noise_density: float
    sample_energy: float
    carrier_freq_hz: float
    pathloss_exponent: float
    ref_distance_m: float = 1.0

    def __post_init__(self):
        for name in ("bandwidth_hz", "sample_energy", "carrier_freq_hz",
                     "pathloss_exponent", "ref_distance_m"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value!r}")
        if self.noise_density < 0:
            raise ValueError(f"noise_density must be nonnegative, got {self.noise_density!r}")

    @classmethod
    def from_power_budget(cls, tx_power_watts: float, bandwidth_hz: float,
                          noise_density: float, carrier_freq_hz: float,
                          pathloss_exponent: float, ref_distance_m: float = 1.0) -> "ChannelParams":
        """Derive the sample energy from a transmit power budget (E_s = P / B)."""
        if not tx_power_watts > 0:
            raise ValueError(f"tx_power_watts must be positive, got {tx_power_watts!r}")
        return cls(
            bandwidth_hz=bandwidth_hz,
            noise_density=noise_density,
            sample_energy=tx_power_watts / bandwidth_hz,
            carrier_freq_hz=carrier_freq_hz,
            pathloss_exponent=pathloss_exponent,
            ref_distance_m=ref_distance_m,
        )

    @classmethod
    def from_dbm(cls, tx_power_dbm: float, noise_density_dbm_hz: float,
                 bandwidth_hz: float, carrier_freq_hz: float,
                 pathloss_exponent: float, ref_distance_m: float = 1.0) -> "ChannelParams":
        """Same as :meth:`from_power_budget` but with dBm / dBm-per-Hz inputs."""
        return cls.from_power_budget(
            tx_power_watts=10.0 ** (tx_power_dbm / 10.0) * 1e-3,
            bandwidth_hz=bandwidth_hz,
            noise_density=10.0 ** (noise_density_dbm_hz / 10.0) * 1e-3,
            carrier_freq_hz=carrier_freq_hz,
            pathloss_exponent=pathloss_exponent,
            ref_distance_m=ref_distance_m,
        )


@dataclass(frozen=True)
class ChannelRealization:
    """One device's channel draw for a round: complex gain plus its statistics."""

    gain: complex
    avg_path_loss: float
    distance_m: float

    def __post_init__(self):
        if not self.avg_path_loss > 0:
            raise ValueError("avg_path_loss must be positive")
        if self.gain == 0 or not (math.isfinite(self.gain.real) and math.isfinite(self.gain.imag)):
            raise ValueError("gain must be finite and nonzero")


def path_loss(distance_m: float, params: ChannelParams) -> float:
    """Average power gain at ``distance_m`` under the log-distance model.

    The intercept is the free-space gain at the reference distance,
    (c / (4 pi f_c d_ref))^2, and the roll-off follows
    (d_ref / d) ** pathloss_exponent.
    """
    if distance_m < params.ref_distance_m:
        raise ValueError(
            f"distance {distance_m} m is below the reference distance "
            f"{params.ref_distance_m} m")
    ref_gain = (SPEED_OF_LIGHT_M_S
                / (4.0 * math.pi * params.carrier_freq_hz * params.ref_distance_m)) ** 2
    return ref_gain * (params.ref_distance_m / distance_m) ** params.pathloss_exponent


def draw_fading(avg_path_loss: float, rng: np.random.Generator) -> complex:
    """Draw a circularly symmetric complex Gaussian gain with E|h|^2 = avg_path_loss.

    An exactly-zero draw is rejected and redrawn: downstream pre-scaling
    divides by the gain.
    """
    if not avg_path_loss > 0:
        raise ValueError(f"avg_path_loss must be positive, got {avg_path_loss!r}")
    scale = math.sqrt(avg_path_loss / 2.0)
    while True:
        h = complex(rng.normal(0.0, scale), rng.normal(0.0, scale))
        if h != 0:
            return h


def snr(gain: complex, params: ChannelParams) -> float:
    """Receive SNR of one device: sample_energy * |gain|^2 / noise_density."""
    power = abs(gain) ** 2
    if params.noise_density == 0:
        return math.inf if power > 0 else 0.0
    return params.sample_energy * power / params.noise_density


def digital_tx_time(payload_bits: float, snr_value: float, bandwidth_hz: float) -> float:
    """Airtime of an error-free digital upload at Shannon rate B*log2(1+SNR)."""
    if not snr_value > 0:
        raise ValueError("digital transmission requires a positive SNR")
    rate = bandwidth_hz * math.log2(1.0 + snr_value)
    return payload_bits / rate


def ota_tx_time(gradient_dim: int, bandwidth_hz: float) -> float:
    """Airtime of one simultaneous analog upload: d / B, regardless of device count."""
    return gradient_dim / bandwidth_hz
