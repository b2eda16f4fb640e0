"""Per-round device scheduling and digital bit allocation.

Each round, every device is assigned either to the analog superposition
path (all such devices transmit simultaneously and the receiver obtains a
noisy sum) or to its own orthogonal digital slot carrying a quantized
gradient. The assignment and the per-device bit widths minimize an upper
bound on the squared error of the aggregated gradient subject to a round
delay budget.

The digital sub-problem relaxes the integer bit constraint, drops one bit
per device into the linearized objective, and maximizes the concave
Lagrangian dual of the relaxation. The dual is piecewise smooth between
per-device multiplier thresholds; within the bracketing interval the
maximizer has a closed form, with a bisection fallback for numerical
corner cases. The device assignment itself reduces to a linear search
over prefixes of the devices sorted by scheduling metric, which
:func:`brute_force_schedule` cross-checks by exhaustive enumeration.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .channel import ChannelParams, digital_tx_time, ota_tx_time
from .quant import NORM_HEADER_BITS, payload_bits, quant_mse_term

LN2 = math.log(2.0)

# Absolute slack, in seconds, tolerated when deciding delay feasibility.
FEASIBILITY_TOL_S = 1e-12
# Relative tolerance for locating the dual maximizer.
DUAL_REL_TOL = 1e-9
# Widest transmittable quantizer. Level indices are int64, so wider grids are
# not representable, and 62 bits already exceeds float64 resolution.
MAX_BITS = 62


@dataclass(frozen=True)
class DeviceSnapshot:
    """What the parameter server knows about one device when scheduling a round."""

    id: int
    gain: complex
    snr: float
    grad_inf_norm: float
    sm: float

    @classmethod
    def from_measurements(cls, id: int, gain: complex, snr: float,
                          grad_inf_norm: float) -> "DeviceSnapshot":
        """Build a snapshot, mapping a zero gradient norm to an infinite metric.

        A device with nothing to send never constrains the analog pre-scaler,
        so it sorts last and stays on the analog path.
        """
        if grad_inf_norm > 0:
            sm = scheduling_metric(gain, grad_inf_norm)
        else:
            sm = math.inf
        return cls(id=id, gain=gain, snr=snr, grad_inf_norm=grad_inf_norm, sm=sm)


@dataclass(frozen=True)
class ScheduleDecision:
    """Result of one scheduling solve.

    ``digital_flags`` aligns with the device sequence handed to the solver.
    ``bits`` maps device id to its integer bit width, for digital devices
    only. ``gamma`` is 0 when no device uses the analog path.
    """

    digital_flags: tuple[int, ...]
    ota_flag: int
    gamma: float
    bits: dict[int, int]
    mse_bound: float
    latency_s: float


class BitAllocation(NamedTuple):
    r_prime: np.ndarray
    lambda_star: float
    feasible: bool


def scheduling_metric(gain: complex, grad_inf_norm: float) -> float:
    """Channel amplitude per unit of gradient peak magnitude, |h| / norm."""
    if not grad_inf_norm > 0:
        raise ValueError("grad_inf_norm must be positive")
    return abs(gain) / grad_inf_norm


def ota_prescaler(ota_sms: Sequence[float], sample_energy: float) -> float:
    """Common analog pre-scaler: sqrt(E_s) times the worst scheduling metric.

    The minimum guarantees the per-sample energy constraint for every
    analog device; the argmin device transmits at exactly its budget.
    """
    if len(ota_sms) == 0:
        raise ValueError("at least one analog device is required")
    return math.sqrt(sample_energy) * min(ota_sms)


def mse_bound(inf_norms: Sequence[float], bits: Sequence[int], ota_flag: int,
              gamma: float, noise_density: float, gradient_dim: int) -> float:
    """Upper bound on the squared error of the aggregated gradient sum.

    d * (sum of per-device quantization terms + ota_flag * N0 / gamma^2).
    The bound covers the error of the sum of participants' gradients, not
    of their average; divide by the participant count squared for the
    averaged form.
    """
    if len(inf_norms) != len(bits):
        raise ValueError("inf_norms and bits must align")
    quant_sum = sum(quant_mse_term(n, r) for n, r in zip(inf_norms, bits))
    if ota_flag:
        if not gamma > 0:
            raise ValueError("gamma must be positive when the analog path is active")
        noise = noise_density / (gamma * gamma)
    else:
        noise = 0.0
    return gradient_dim * (quant_sum + noise)


def round_latency(payloads: Sequence[int], snrs: Sequence[float], ota_flag: int,
                  gradient_dim: int, bandwidth_hz: float) -> float:
    """Uplink time of one round: analog airtime plus every digital slot."""
    if len(payloads) != len(snrs):
        raise ValueError("payloads and snrs must align")
    total = ota_flag * ota_tx_time(gradient_dim, bandwidth_hz)
    for payload, s in zip(payloads, snrs):
        total += digital_tx_time(payload, s, bandwidth_hz)
    return total


def lambda_threshold(grad_inf_norm: float, snr: float, bandwidth_hz: float) -> float:
    """Multiplier value below which a device receives extra bits.

    4 ln(2) * norm^2 * B log2(1 + snr); a device with zero rate or zero
    norm has threshold 0 and never receives bits beyond the mandatory one.
    """
    return 4.0 * LN2 * grad_inf_norm ** 2 * bandwidth_hz * math.log2(1.0 + snr)


def _relaxed_costs(digital: Sequence[DeviceSnapshot], gradient_dim: int,
                   bandwidth_hz: float):
    """Per-device rate, seconds-per-extra-bit, and mandatory airtime arrays."""
    snrs = np.array([dev.snr for dev in digital], dtype=float)
    rates = bandwidth_hz * np.log2(1.0 + snrs)
    with np.errstate(divide="ignore"):
        per_bit = np.where(rates > 0, gradient_dim / rates, np.inf)
        base = np.where(rates > 0, (NORM_HEADER_BITS + gradient_dim) / rates, np.inf)
    return rates, per_bit, base


def allocate_bits(digital: Sequence[DeviceSnapshot], ota_flag: int, t_max_s: float,
                  gradient_dim: int, bandwidth_hz: float) -> BitAllocation:
    """Optimal continuous extra-bit allocation for a fixed digital set.

    Feasibility is checked first with every extra-bit count at zero; an
    infeasible set returns ``feasible=False``. Otherwise the concave dual
    is maximized exactly: thresholds are sorted, the interval where the
    budget residual changes sign is bracketed, and the stationary
    multiplier inside it follows in closed form. Whenever any extra bits
    are granted, the relaxed delay constraint is tight.
    """
    if len(digital) == 0:
        raise ValueError("digital set is empty")
    K = len(digital)
    norms = np.array([dev.grad_inf_norm for dev in digital], dtype=float)
    snrs = np.array([dev.snr for dev in digital], dtype=float)
    failed = BitAllocation(np.zeros(K), 0.0, False)
    if np.any(snrs <= 0):
        return failed
    rates, per_bit, base = _relaxed_costs(digital, gradient_dim, bandwidth_hz)

    budget = t_max_s - (ota_tx_time(gradient_dim, bandwidth_hz) if ota_flag else 0.0)
    # Devices with infinite rate cost no airtime; they take unbounded precision
    # and drop out of the budget math.
    free = ~np.isfinite(per_bit * 0 + rates)
    free = ~np.isfinite(rates)
    slack = budget - float(base[~free].sum())
    if slack < -FEASIBILITY_TOL_S:
        return failed
    slack = max(slack, 0.0)

    r_prime = np.zeros(K)
    r_prime[free] = np.inf
    lam = 4.0 * LN2 * norms ** 2 * rates  # threshold per device; inf rate -> inf
    lam_fin = lam[~free]
    t_fin = per_bit[~free]

    if slack == 0.0 or not np.any(lam_fin > 0):
        # No room or no demand for extra bits. With room to spare and nothing
        # to gain, the constraint may stay slack, so the multiplier is zero;
        # with a exhausted budget it sits at the largest threshold.
        if slack == 0.0 and lam_fin.size:
            lam_star = float(np.max(lam_fin))
        else:
            lam_star = 0.0
        return BitAllocation(r_prime, lam_star, True)

    def residual(lmbda: float) -> float:
        # Extra airtime demanded at multiplier lmbda minus the available slack.
        a = (np.cbrt(lam_fin / lmbda) - 1.0) / (2.0 * LN2)
        return float(np.sum(t_fin * np.maximum(a, 0.0))) - slack

    breakpoints = np.unique(lam_fin[lam_fin > 0])
    lo = 0.0
    hi = breakpoints[-1]
    for bp in breakpoints:
        if residual(bp) <= 0.0:
            hi = bp
            break
        lo = bp
    # Within (lo, hi] the active set is fixed: every device whose threshold
    # is at least hi. Stationarity of the dual then gives the multiplier in
    # closed form.
    active = lam_fin >= hi
    t_act = t_fin[active]
    lam_act = lam_fin[active]
    numer = float(np.sum(t_act * np.cbrt(lam_act)))
    denom = 2.0 * LN2 * slack + float(np.sum(t_act))
    lam_star = (numer / denom) ** 3
    if not (lo * (1.0 - DUAL_REL_TOL) <= lam_star <= hi * (1.0 + DUAL_REL_TOL)):
        # Closed form fell outside its interval (severe breakpoint clustering);
        # fall back to bisection on the monotone residual.
        left = lo if lo > 0 else hi * 1e-18
        right = hi
        for _ in range(200):
            mid = 0.5 * (left + right)
            if residual(mid) > 0.0:
                left = mid
            else:
                right = mid
        lam_star = right
    a = (np.cbrt(lam_fin / lam_star) - 1.0) / (2.0 * LN2)
    r_prime[~free] = np.maximum(a, 0.0)
    return BitAllocation(r_prime, float(lam_star), True)


def dual_objective(digital: Sequence[DeviceSnapshot], ota_flag: int, t_max_s: float,
                   gradient_dim: int, bandwidth_hz: float, lmbda: float) -> float:
    """Dual function of the relaxed bit-allocation problem at multiplier ``lmbda``."""
    norms = np.array([dev.grad_inf_norm for dev in digital], dtype=float)
    rates, per_bit, base = _relaxed_costs(digital, gradient_dim, bandwidth_hz)
    lam = 4.0 * LN2 * norms ** 2 * rates
    if lmbda > 0:
        r = np.maximum((np.cbrt(lam / lmbda) - 1.0) / (2.0 * LN2), 0.0)
    else:
        r = np.where(lam > 0, np.inf, 0.0)
    obj = float(np.sum(gradient_dim * norms ** 2 / (1.0 + 2.0 * LN2 * r) ** 2))
    used = float(np.sum(base + per_bit * r))
    if ota_flag:
        used += ota_tx_time(gradient_dim, bandwidth_hz)
    return obj + lmbda * (used - t_max_s)


def relaxed_objective(digital: Sequence[DeviceSnapshot], r_prime: np.ndarray,
                      gradient_dim: int) -> float:
    """Linearized quantization objective at a given extra-bit vector."""
    norms = np.array([dev.grad_inf_norm for dev in digital], dtype=float)
    return float(np.sum(gradient_dim * norms ** 2 / (1.0 + 2.0 * LN2 * np.asarray(r_prime)) ** 2))


def integer_bits(r_prime: float) -> int:
    """Integer bit width actually transmitted: floor(r') + 1, at least one bit."""
    if r_prime < 0:
        raise ValueError("r_prime must be nonnegative")
    return int(math.floor(r_prime)) + 1


def _integer_allocation(r_prime: np.ndarray) -> list[int]:
    """Floor-plus-one widths, clipped to the widest representable quantizer."""
    out = []
    for r in np.asarray(r_prime, dtype=float):
        if math.isinf(r):
            out.append(MAX_BITS)
        else:
            out.append(min(integer_bits(r), MAX_BITS))
    return out


def _evaluate_assignment(devices: Sequence[DeviceSnapshot], digital_pos: Sequence[int],
                         bits: Sequence[int], t_max_s: float, gradient_dim: int,
                         params: ChannelParams):
    """Bound, latency, and gamma of one concrete assignment with given bits.

    Returns None when the assignment misses the delay budget or the analog
    path would need a nonpositive pre-scaler.
    """
    digital_set = set(digital_pos)
    ota_sms = [dev.sm for i, dev in enumerate(devices) if i not in digital_set]
    c = 1 if ota_sms else 0
    if c:
        gamma = ota_prescaler(ota_sms, params.sample_energy)
        if not gamma > 0:
            return None
    else:
        gamma = 0.0
    norms = [devices[i].grad_inf_norm for i in digital_pos]
    snrs = [devices[i].snr for i in digital_pos]
    payloads = [payload_bits(r, gradient_dim) for r in bits]
    latency = round_latency(payloads, snrs, c, gradient_dim, params.bandwidth_hz)
    if latency > t_max_s + FEASIBILITY_TOL_S:
        return None
    bound = mse_bound(norms, bits, c, gamma, params.noise_density, gradient_dim)
    return bound, latency, c, gamma


def _decision_from(devices, digital_pos, bits, evaluation) -> ScheduleDecision:
    bound, latency, c, gamma = evaluation
    flags = [0] * len(devices)
    for i in digital_pos:
        flags[i] = 1
    return ScheduleDecision(
        digital_flags=tuple(flags),
        ota_flag=c,
        gamma=gamma,
        bits={devices[i].id: r for i, r in zip(digital_pos, bits)},
        mse_bound=bound,
        latency_s=latency,
    )


def optimize_schedule(devices: Sequence[DeviceSnapshot], t_max_s: float,
                      gradient_dim: int, params: ChannelParams) -> ScheduleDecision:
    """Best feasible assignment found by the prefix linear search.

    Devices are sorted by nondecreasing scheduling metric; for each K the
    K lowest-metric devices go digital, the relaxation allocates their
    bits, and the floored integer widths give the bound and latency that
    are compared. Infeasible prefixes are skipped. Ties break toward
    lower latency, then fewer digital devices. Requires
    t_max_s >= d / B so the all-analog assignment always fits.
    """
    n = len(devices)
    if n < 1:
        raise ValueError("at least one device is required")
    tau = ota_tx_time(gradient_dim, params.bandwidth_hz)
    if t_max_s + FEASIBILITY_TOL_S < tau:
        raise ValueError(f"t_max_s must be at least d/B = {tau} s")
    order = sorted(range(n), key=lambda i: (devices[i].sm, devices[i].id))
    best_key = None
    best = None
    for K in range(n + 1):
        digital_pos = order[:K]
        if K == 0:
            bits: list[int] = []
        else:
            alloc = allocate_bits([devices[i] for i in digital_pos],
                                  1 if K < n else 0, t_max_s,
                                  gradient_dim, params.bandwidth_hz)
            if not alloc.feasible:
                continue
            bits = _integer_allocation(alloc.r_prime)
        evaluation = _evaluate_assignment(devices, digital_pos, bits, t_max_s,
                                          gradient_dim, params)
        if evaluation is None:
            continue
        key = (evaluation[0], evaluation[1], K)
        if best_key is None or key < best_key:
            best_key = key
            best = _decision_from(devices, digital_pos, bits, evaluation)
    if best is None:
        raise RuntimeError("no feasible assignment; t_max below the analog airtime?")
    return best


def brute_force_schedule(devices: Sequence[DeviceSnapshot], t_max_s: float,
                         gradient_dim: int, params: ChannelParams,
                         max_bits: int = MAX_BITS,
                         refine_bits: bool = False) -> ScheduleDecision:
    """Exhaustive scheduling oracle over all 2^N digital/analog assignments.

    Every subset is evaluated with the same relaxation-plus-floor bit rule
    as :func:`optimize_schedule`, so the two must agree whenever the prefix
    reduction is valid. With ``refine_bits`` the oracle additionally probes
    integer widths near the floored point (full enumeration over
    {1..max_bits}^K when K <= 3, both roundings per device otherwise),
    which lower-bounds how much the floor rule gives away.
    """
    n = len(devices)
    if n > 12:
        raise ValueError("exhaustive search is limited to 12 devices")
    tau = ota_tx_time(gradient_dim, params.bandwidth_hz)
    if t_max_s + FEASIBILITY_TOL_S < tau:
        raise ValueError(f"t_max_s must be at least d/B = {tau} s")
    best_key = None
    best = None
    for mask in range(2 ** n):
        digital_pos = [i for i in range(n) if mask >> i & 1]
        K = len(digital_pos)
        if K == 0:
            candidates: list[list[int]] = [[]]
        else:
            alloc = allocate_bits([devices[i] for i in digital_pos],
                                  1 if K < n else 0, t_max_s,
                                  gradient_dim, params.bandwidth_hz)
            if not alloc.feasible:
                continue
            floored = _integer_allocation(alloc.r_prime)
            candidates = [floored]
            if refine_bits:
                if K <= 3:
                    candidates = [list(combo) for combo in
                                  itertools.product(range(1, max_bits + 1), repeat=K)]
                else:
                    options = [sorted({r, min(r + 1, max_bits)}) for r in floored]
                    candidates = [list(combo) for combo in itertools.product(*options)]
        for bits in candidates:
            evaluation = _evaluate_assignment(devices, digital_pos, bits, t_max_s,
                                              gradient_dim, params)
            if evaluation is None:
                continue
            key = (evaluation[0], evaluation[1], K)
            if best_key is None or key < best_key:
                best_key = key
                best = _decision_from(devices, digital_pos, bits, evaluation)
    if best is None:
        raise RuntimeError("no feasible assignment; t_max below the analog airtime?")
    return best
