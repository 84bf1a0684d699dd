"""Page-table, walk-level, TLB and permission attacks.

Each attack exists in two shapes: a ``*_scan`` function that works on numpy
arrays (used by the campaigns, which probe tens of thousands of addresses)
and the list-of-verdicts form for interactive use and CSV export.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import UsageError
from .prober import (
    DEFAULT_POLICY,
    MeasurePolicy,
    Prober,
    Threshold,
    ThresholdSource,
    measure_many,
)
from .sim import LOAD, STORE, OpKind


class Mapping(enum.Enum):
    Mapped = "mapped"
    Unmapped = "unmapped"


class WalkLevel(enum.Enum):
    PT = "PT"
    PD = "PD"
    PDPT = "PDPT"
    PML4 = "PML4"
    NonPresent = "non-present"


class TlbState(enum.Enum):
    Hit = "hit"
    Miss = "miss"


class Permission(enum.Enum):
    NoAccess = "no-access"
    ReadNoWrite = "read"
    ReadWrite = "read-write"
    Unmapped = "unmapped"


@dataclass(frozen=True)
class MappingVerdict:
    addr: int
    verdict: Mapping
    latency: int


@dataclass(frozen=True)
class WalkLevelVerdict:
    addr: int
    level: WalkLevel
    latency: int


@dataclass(frozen=True)
class TlbVerdict:
    addr: int
    state: TlbState
    latency: int


@dataclass(frozen=True)
class PermissionVerdict:
    addr: int
    perm: Permission
    load_latency: int
    store_latency: int

    @property
    def latency(self) -> int:
        return self.load_latency


def write_verdicts_csv(verdicts: Iterable, fh) -> None:
    """Rows of ``addr, verdict, latency``."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["addr", "verdict", "latency"])
    for v in verdicts:
        label = getattr(v, "verdict", None) or getattr(v, "level", None)
        label = label or getattr(v, "state", None) or getattr(v, "perm")
        w.writerow([f"{v.addr:#x}", label.value, int(v.latency)])


# ------------------------------------------------------------ page table


def page_table_scan(
    prober: Prober,
    addrs: Sequence[int],
    threshold: Threshold,
    policy: MeasurePolicy = DEFAULT_POLICY,
) -> tuple[np.ndarray, np.ndarray]:
    """``(latencies, mapped)`` for each address."""
    lat = measure_many(prober, addrs, LOAD, policy)
    return lat, lat < threshold.value


def page_table_attack(
    prober: Prober,
    addrs: Sequence[int],
    threshold: Threshold,
    policy: MeasurePolicy = DEFAULT_POLICY,
) -> list[MappingVerdict]:
    lat, mapped = page_table_scan(prober, addrs, threshold, policy)
    return [
        MappingVerdict(int(a), Mapping.Mapped if m else Mapping.Unmapped, int(l))
        for a, l, m in zip(addrs, lat, mapped)
    ]


# ------------------------------------------------------------ walk level


@dataclass(frozen=True)
class LevelBands:
    """Reference latencies per walk level; an address takes the nearest one.

    Nearest-mean is the same as cutting at the midpoints between adjacent
    calibrated means. A level may appear more than once (e.g. failed walks
    ending at different depths all mean NonPresent).
    """

    means: tuple = ()  # ((mean, WalkLevel), ...) sorted by mean

    def __post_init__(self):
        if not self.means:
            raise UsageError("level bands are not calibrated")
        object.__setattr__(self, "means", tuple(sorted(self.means, key=lambda m: m[0])))

    @property
    def cutoffs(self) -> list[float]:
        m = [x for x, _ in self.means]
        return [(a + b) / 2 for a, b in zip(m, m[1:])]

    def classify(self, lat: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(np.array(self.cutoffs), np.asarray(lat, dtype=float), side="left")
        labels = np.array([lvl for _, lvl in self.means], dtype=object)
        return labels[idx]


def measure_cold(
    prober: Prober, addrs: Sequence[int], kind: OpKind, policy: MeasurePolicy
) -> np.ndarray:
    """Aggregate ``policy.independent_count`` probes per address, each right after an eviction."""
    k = policy.independent_count
    if len(addrs) == 0:
        return np.zeros(0, dtype=np.int64)
    rep = [int(a) for a in addrs for _ in range(k)]
    samples = prober.probe_many(rep, kind, 1, evict_each=True).reshape(len(addrs), k)
    return policy.reduce_independent(samples)


def calibrate_level_bands(
    prober: Prober,
    fixtures: dict,
    policy: MeasurePolicy = DEFAULT_POLICY,
    rounds: int = 9,
) -> LevelBands:
    """Bands from known addresses: ``fixtures`` maps WalkLevel -> list of addresses."""
    means = []
    for level, addrs in fixtures.items():
        for a in addrs:
            lat = measure_cold(prober, [a] * rounds, LOAD, policy)
            means.append((float(lat.mean()), WalkLevel(level)))
    if not means:
        raise UsageError("no fixtures given for level calibration")
    return LevelBands(tuple(means))


def walk_level_scan(
    prober: Prober,
    addrs: Sequence[int],
    bands: LevelBands | None,
    policy: MeasurePolicy = DEFAULT_POLICY,
) -> tuple[np.ndarray, np.ndarray]:
    if bands is None:
        raise UsageError("walk_level_attack needs calibrated level bands")
    lat = measure_cold(prober, addrs, LOAD, policy)
    return lat, bands.classify(lat)


def walk_level_attack(
    prober: Prober,
    addrs: Sequence[int],
    level_bands: LevelBands | None,
    policy: MeasurePolicy = DEFAULT_POLICY,
) -> list[WalkLevelVerdict]:
    lat, levels = walk_level_scan(prober, addrs, level_bands, policy)
    return [WalkLevelVerdict(int(a), lv, int(l)) for a, lv, l in zip(addrs, levels, lat)]


# ------------------------------------------------------------ TLB


@dataclass(frozen=True)
class TlbSeparator:
    value: float
    hit_mean: float = 0.0
    miss_mean: float = 0.0


def calibrate_tlb_separator(
    prober: Prober,
    ref_addr: int | None = None,
    n: int = 200,
    prime: Callable[[], None] | None = None,
) -> TlbSeparator:
    """Midpoint between post-eviction and warm latencies of a known mapped page.

    Each side is summarized by its median, so a few interrupt spikes in the
    calibration run cannot drag the separator into the miss band.

    ``prime`` runs after every eviction, before the miss is measured; use it
    to reproduce background activity that keeps upper-level walk caches warm
    during the real scan.
    """
    if ref_addr is None:
        ref_addr = prober.alloc_calibration_page("r--", touched=True)
    if prime is None:
        lat = prober.probe_many([ref_addr] * n, LOAD, repeats=2, evict_each=True)
    else:
        lat = np.empty((n, 2), dtype=np.int64)
        for i in range(n):
            prober.evict_tlb()
            prime()
            lat[i] = prober.probe_many([ref_addr], LOAD, repeats=2)[0]
    prober.evict_tlb()
    miss, hit = float(np.median(lat[:, 0])), float(np.median(lat[:, 1]))
    return TlbSeparator((hit + miss) / 2, hit, miss)


def tlb_chunk_size(prober: Prober) -> int:
    cap = getattr(getattr(prober, "state", None), "tlb", None)
    cap = cap.capacity if cap is not None else 1536
    return max(1, cap // 4)


def tlb_scan(
    prober: Prober,
    addrs: Sequence[int],
    separator: TlbSeparator,
    rebaseline: Callable[[], None] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One probe per address in ascending order; ``hit`` where below the separator.

    The caller decides what state the TLB is in when the scan starts.
    Batches larger than a quarter of the TLB are split, and ``rebaseline``
    runs before every chunk after the first so each chunk starts from that
    same state instead of the pollution left by the previous chunk.
    """
    order = np.argsort(np.asarray([int(a) for a in addrs], dtype=np.uint64), kind="stable")
    sorted_addrs = [int(addrs[i]) for i in order]
    chunk = tlb_chunk_size(prober)
    lat_sorted = np.empty(len(sorted_addrs), dtype=np.int64)
    for start in range(0, len(sorted_addrs), chunk):
        if rebaseline is not None and start > 0:
            rebaseline()
        part = sorted_addrs[start : start + chunk]
        lat_sorted[start : start + len(part)] = prober.probe_many(part, LOAD, 1)[:, 0]
    lat = np.empty_like(lat_sorted)
    lat[order] = lat_sorted
    return lat, lat < separator.value


def tlb_attack(
    prober: Prober,
    addrs: Sequence[int],
    separator: TlbSeparator,
    rebaseline: Callable[[], None] | None = None,
) -> list[TlbVerdict]:
    lat, hit = tlb_scan(prober, addrs, separator, rebaseline)
    return [
        TlbVerdict(int(a), TlbState.Hit if h else TlbState.Miss, int(l))
        for a, l, h in zip(addrs, lat, hit)
    ]


# ------------------------------------------------------------ permissions


def calibrate_store_separator(
    prober: Prober, n: int = 200, policy: MeasurePolicy = DEFAULT_POLICY
) -> Threshold:
    """Midpoint of store latency on a written rw- page and on an r-- page."""
    rw = prober.alloc_calibration_page("rw-", touched=True)
    ro = prober.alloc_calibration_page("r--", touched=True)
    lat_rw = measure_many(prober, [rw] * n, STORE, policy)
    lat_ro = measure_many(prober, [ro] * n, STORE, policy)
    value = (float(lat_rw.mean()) + float(lat_ro.mean())) / 2
    return Threshold(value, ThresholdSource.Manual, 2 * n)


def permission_scan(
    prober: Prober,
    addrs: Sequence[int],
    threshold: Threshold,
    store_threshold: Threshold | None = None,
    policy: MeasurePolicy = DEFAULT_POLICY,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """``(load_lat, store_lat, accessible, writable)`` for every address."""
    if store_threshold is None:
        store_threshold = calibrate_store_separator(prober, policy=policy)
    load_lat = measure_many(prober, addrs, LOAD, policy)
    store_lat = measure_many(prober, addrs, STORE, policy)
    accessible = load_lat < threshold.value
    writable = accessible & (store_lat < store_threshold.value)
    return load_lat, store_lat, accessible, writable


def permission_attack(
    prober: Prober,
    addrs: Sequence[int],
    threshold: Threshold,
    store_threshold: Threshold | None = None,
    policy: MeasurePolicy = DEFAULT_POLICY,
    none_possible: bool = True,
) -> list[PermissionVerdict]:
    """Load pass for accessibility, store pass for writability.

    A slow load means either a PROT_NONE page or nothing at all; the two are
    reported as NoAccess unless the caller knows no PROT_NONE page can be
    there (``none_possible=False``), in which case they read Unmapped.
    """
    load_lat, store_lat, acc, wr = permission_scan(prober, addrs, threshold, store_threshold, policy)
    closed = Permission.NoAccess if none_possible else Permission.Unmapped
    out = []
    for a, ll, sl, x, w in zip(addrs, load_lat, store_lat, acc, wr):
        perm = Permission.ReadWrite if w else Permission.ReadNoWrite if x else closed
        out.append(PermissionVerdict(int(a), perm, int(ll), int(sl)))
    return out
