"""Backend-neutral probing, measurement policies and threshold calibration.

Every attack talks to a :class:`Prober`. The simulator backend wraps a
:class:`~aslrlab.sim.MicroarchState`; the optional native backend (see
:mod:`aslrlab.native`) times real instructions on the host CPU.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CapabilityError, ConfigError, UsageError
from .sim import LOAD, STORE, MicroarchState, OpKind, parse_kind
from .space import AddressSpace, ScenarioSpec, build_address_space

BACKEND_ENV = "ASLRLAB_BACKEND"
NATIVE_OPT_IN_ENV = "ASLRLAB_ALLOW_NATIVE"


class Backend(enum.Enum):
    Simulator = "sim"
    NativeHardware = "native"


def parse_backend(value: str | Backend | None) -> Backend:
    if isinstance(value, Backend):
        return value
    if value is None:
        value = os.environ.get(BACKEND_ENV, "sim")
    v = value.strip().lower()
    for b in Backend:
        if v in (b.value, b.name.lower()):
            return b
    raise ConfigError(f"unknown backend {value!r}")


class Prober:
    """What attacks may do: time a zero-mask probe, evict the TLB, get own pages."""

    backend: Backend

    def probe(self, addr: int, kind: OpKind = LOAD) -> int:
        raise NotImplementedError

    def probe_many(
        self, addrs: Sequence[int], kind: OpKind = LOAD, repeats: int = 1, evict_each: bool = False
    ) -> np.ndarray:
        """Latencies of shape ``(len(addrs), repeats)``, probed address by address."""
        out = np.empty((len(addrs), repeats), dtype=np.int64)
        for i, a in enumerate(addrs):
            if evict_each:
                self.evict_tlb()
            for r in range(repeats):
                out[i, r] = self.probe(a, kind)
        return out

    def evict_tlb(self) -> None:
        raise NotImplementedError

    def alloc_calibration_page(self, perms: str = "rw-", touched: bool = False) -> int:
        raise NotImplementedError

    @property
    def probes_issued(self) -> int:
        raise NotImplementedError


class SimProber(Prober):
    backend = Backend.Simulator

    def __init__(self, state: MicroarchState):
        self.state = state

    @classmethod
    def for_space(cls, space: AddressSpace, profile=None, seed: int = 0, **kwargs) -> "SimProber":
        return cls(MicroarchState(space, profile, seed, **kwargs))

    @property
    def space(self) -> AddressSpace:
        return self.state.space

    @property
    def profile(self):
        return self.state.profile

    def probe(self, addr: int, kind: OpKind = LOAD) -> int:
        return self.state.masked_probe(addr, kind, 0).latency

    def probe_many(self, addrs, kind=LOAD, repeats=1, evict_each=False):
        return self.state.probe_batch(addrs, kind, repeats, evict_each)

    def evict_tlb(self) -> None:
        self.state.evict_tlb()

    def alloc_calibration_page(self, perms: str = "rw-", touched: bool = False) -> int:
        return self.state.alloc_user_page(perms, dirty=touched and "w" in perms)

    @property
    def probes_issued(self) -> int:
        return self.state.probes_issued


# ---------------------------------------------------------------- policies


class PolicyMode(enum.Enum):
    SecondOfTwo = "second-of-two"
    MedianOfK = "median"


@dataclass(frozen=True)
class MeasurePolicy:
    """How many probes one measurement costs and how they are combined.

    Back-to-back probes of one address are not alike: the first walks the
    page tables and fills the TLB, the rest hit. SecondOfTwo keeps only the
    second probe; MedianOfK discards one warm-up probe and takes the median
    of the next ``k``. For probes that are independent of one another (each
    after an eviction) there is no warm-up to drop, see ``reduce_independent``.
    """

    mode: PolicyMode = PolicyMode.MedianOfK
    k: int = 7

    def __post_init__(self):
        if self.mode is PolicyMode.MedianOfK and (self.k < 3 or self.k % 2 == 0):
            raise ConfigError("MedianOfK needs an odd k >= 3")

    @property
    def multiplier(self) -> int:
        """Probes issued per address for a back-to-back measurement."""
        return 2 if self.mode is PolicyMode.SecondOfTwo else self.k + 1

    @property
    def independent_count(self) -> int:
        """Samples per address when every sample is taken from the same cold state."""
        return 2 if self.mode is PolicyMode.SecondOfTwo else self.k

    def reduce(self, samples: np.ndarray) -> np.ndarray:
        if self.mode is PolicyMode.SecondOfTwo:
            return samples[:, 1]
        return _median(samples[:, 1:])

    def reduce_independent(self, samples: np.ndarray) -> np.ndarray:
        if self.mode is PolicyMode.SecondOfTwo:
            return samples[:, 1]
        return _median(samples)

    def __str__(self):
        if self.mode is PolicyMode.SecondOfTwo:
            return "second-of-two"
        return f"median-of-{self.k}"


def _median(samples: np.ndarray) -> np.ndarray:
    mid = samples.shape[1] // 2
    return np.partition(samples, mid, axis=1)[:, mid]


SECOND_OF_TWO = MeasurePolicy(PolicyMode.SecondOfTwo, 2)
MEDIAN_OF_7 = MeasurePolicy(PolicyMode.MedianOfK, 7)
# With a 1 % interrupt-spike rate, taking the second of two probes misreads
# about one slot in a hundred per scan, which is too many for a 512-slot
# sweep to come out clean 99 % of the time; a median of seven needs four
# spikes on the same address to go wrong.
DEFAULT_POLICY = MEDIAN_OF_7


def parse_policy(text: str | MeasurePolicy | None) -> MeasurePolicy:
    if text is None:
        return DEFAULT_POLICY
    if isinstance(text, MeasurePolicy):
        return text
    t = text.strip().lower().replace("_", "-")
    if t in ("second-of-two", "secondoftwo", "second"):
        return SECOND_OF_TWO
    for prefix in ("median-of-", "median:", "median"):
        if t.startswith(prefix):
            rest = t[len(prefix):]
            return MeasurePolicy(PolicyMode.MedianOfK, int(rest) if rest else 7)
    raise ConfigError(f"unknown measurement policy {text!r}")


def measure(prober: Prober, addr: int, kind: OpKind = LOAD, policy: MeasurePolicy = DEFAULT_POLICY) -> int:
    return int(measure_many(prober, [addr], kind, policy)[0])


def measure_many(
    prober: Prober,
    addrs: Sequence[int],
    kind: OpKind = LOAD,
    policy: MeasurePolicy = DEFAULT_POLICY,
    evict_each: bool = False,
) -> np.ndarray:
    """One aggregated latency per address; each address is probed back to back."""
    kind = parse_kind(kind)
    if len(addrs) == 0:
        return np.zeros(0, dtype=np.int64)
    samples = prober.probe_many(addrs, kind, policy.multiplier, evict_each)
    return policy.reduce(samples)


# ---------------------------------------------------------------- threshold


class ThresholdSource(enum.Enum):
    StoreOnUserMapped = "store-on-user-mapped"
    Manual = "manual"


@dataclass(frozen=True)
class Threshold:
    value: float
    source: ThresholdSource = ThresholdSource.Manual
    sample_count: int = 0

    def __post_init__(self):
        if not self.value > 0:
            raise ConfigError("threshold must be positive")

    def mapped(self, latency) -> bool | np.ndarray:
        """Strictly below the threshold means mapped; a tie counts as unmapped."""
        return latency < self.value


def calibrate_threshold(prober: Prober, n: int = 10000) -> Threshold:
    """Mean zero-mask store latency on a fresh, clean, writable user page."""
    if n < 100:
        raise UsageError("calibration needs at least 100 samples")
    page = prober.alloc_calibration_page("rw-", touched=False)
    prober.probe(page, STORE)
    lat = prober.probe_many([page], STORE, repeats=n)[0]
    return Threshold(float(lat.mean()), ThresholdSource.StoreOnUserMapped, n)


# ---------------------------------------------------------------- factory


def native_probe_available() -> bool:
    from . import native

    return native.available()


def make_prober(
    space: AddressSpace | ScenarioSpec | None = None,
    *,
    backend: str | Backend | None = None,
    seed: int = 0,
    profile=None,
    noise: bool = True,
    allow_native: bool | None = None,
    **sim_kwargs,
) -> Prober:
    """Build a prober. ``backend`` falls back to ``$ASLRLAB_BACKEND``, then the simulator.

    The native backend probes the host's real address space; it must be
    enabled explicitly, either with ``allow_native=True`` or by setting
    ``$ASLRLAB_ALLOW_NATIVE=1``.
    """
    b = parse_backend(backend)
    if b is Backend.NativeHardware:
        if allow_native is None:
            allow_native = os.environ.get(NATIVE_OPT_IN_ENV, "") == "1"
        if not allow_native:
            raise CapabilityError(
                f"native backend disabled; pass the opt-in flag or set {NATIVE_OPT_IN_ENV}=1"
            )
        from .native import NativeProber

        return NativeProber()
    if space is None:
        raise UsageError("the simulator backend needs a scenario")
    if isinstance(space, ScenarioSpec):
        space = build_address_space(space)
    return SimProber(MicroarchState(space, profile, seed, noise=noise, **sim_kwargs))


def require_sim(prober: Prober) -> SimProber:
    if not isinstance(prober, SimProber):
        raise CapabilityError("this operation needs the simulator backend")
    return prober
