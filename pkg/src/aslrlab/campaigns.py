"""End-to-end derandomization campaigns built from the attack primitives."""
from __future__ import annotations

import enum
import json
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CapabilityError, UsageError
from .primitives import (
    LevelBands,
    TlbSeparator,
    WalkLevel,
    calibrate_level_bands,
    calibrate_store_separator,
    calibrate_tlb_separator,
    page_table_scan,
    tlb_scan,
    walk_level_scan,
)
from .prober import (
    DEFAULT_POLICY,
    MeasurePolicy,
    Prober,
    SimProber,
    Threshold,
    calibrate_threshold,
    measure_many,
    require_sim,
)
from .rng import derive_seed
from .sim import STORE, MicroarchState
from .space import (
    AMD_4K_OFFSETS,
    DEFAULT_KVAS_OFFSET,
    DEFAULT_TRAMPOLINE_OFFSET,
    KERNEL_SLOTS,
    KERNEL_TEXT_END,
    KERNEL_TEXT_START,
    KERNEL_TEXT_4K,
    KERNEL_TEXT_2M,
    MODULE_SLOTS,
    MODULES_START,
    PAGE_2M,
    PAGE_4K,
    USER_CODE_BASE,
    USER_LIB_BASE,
    WINDOWS_KERNEL_PAGES,
    WINDOWS_SLOTS,
    WINDOWS_START,
    KVAS_PAGES,
    Region,
    ScenarioKind,
    ScenarioSpec,
    build_address_space,
    default_library_catalog,
    default_module_catalog,
)

CALIBRATION_SAMPLES = 2000
SCAN_CHUNK = 8192


class Status(enum.Enum):
    Found = "Found"
    NotFound = "NotFound"
    Degraded = "Degraded"


@dataclass
class DetectedRegion:
    base: int
    size: int
    candidates: tuple = ()
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "base": f"{self.base:#x}",
            "size": self.size,
            "candidates": list(self.candidates),
            "label": self.label,
        }


@dataclass
class ScanReport:
    campaign: str
    status: Status
    detected_base: int | None = None
    regions: list = field(default_factory=list)
    per_trial_accuracy: float | None = None
    probes_issued: int = 0
    elapsed: float = 0.0
    details: dict = field(default_factory=dict)
    # (kind, addresses, latencies) chunks of the scan probes, for histograms
    samples: list = field(default_factory=list, repr=False)

    @property
    def found(self) -> bool:
        return self.status is Status.Found

    def iter_samples(self):
        """``(addr, kind, latency)`` for every recorded probe measurement."""
        for kind, addrs, lat in self.samples:
            for a, l in zip(addrs.tolist(), lat.tolist()):
                yield a, kind, l

    def to_dict(self, include_elapsed: bool = False) -> dict:
        d = {
            "campaign": self.campaign,
            "status": self.status.value,
            "detected_base": None if self.detected_base is None else f"{self.detected_base:#x}",
            "regions": [r.to_dict() for r in self.regions],
            "per_trial_accuracy": self.per_trial_accuracy,
            "probes_issued": self.probes_issued,
            "details": self.details,
        }
        if include_elapsed:
            d["elapsed"] = self.elapsed
        return d

    def to_json(self, include_elapsed: bool = False) -> str:
        return json.dumps(self.to_dict(include_elapsed), indent=2, sort_keys=True)

    def regions_csv(self) -> str:
        lines = ["base,size,label,candidates"]
        for r in self.regions:
            lines.append(f"{r.base:#x},{r.size},{r.label},{'|'.join(r.candidates)}")
        return "\n".join(lines) + "\n"


class _Meter:
    """Counts scan probes (calibration excluded) and wall time."""

    def __init__(self, prober: Prober):
        self.prober = prober
        self.t0 = time.perf_counter()
        self.start = prober.probes_issued

    def restart(self):
        self.start = self.prober.probes_issued

    def finish(self, report: ScanReport) -> ScanReport:
        report.probes_issued = self.prober.probes_issued - self.start
        report.elapsed = time.perf_counter() - self.t0
        return report


def _threshold(prober: Prober, threshold: Threshold | None) -> Threshold:
    return threshold if threshold is not None else calibrate_threshold(prober, CALIBRATION_SAMPLES)


def _samples(addrs, lat, kind="load") -> list:
    return [(kind, np.asarray(addrs, dtype=np.uint64), np.asarray(lat))]


def address_range(start: int, count: int, stride: int, offset: int = 0) -> np.ndarray:
    idx = np.arange(offset, offset + count, dtype=np.uint64)
    return np.uint64(start) + idx * np.uint64(stride)


def mapped_runs(mapped: np.ndarray) -> list[tuple[int, int]]:
    """``(start index, length)`` of every run of True values."""
    m = np.concatenate(([False], np.asarray(mapped, dtype=bool), [False]))
    edges = np.flatnonzero(m[1:] != m[:-1])
    return [(int(s), int(e - s)) for s, e in zip(edges[::2], edges[1::2])]


def first_run(mapped: np.ndarray, min_len: int, accept_tail: bool = False) -> int | None:
    """Start of the first run of at least ``min_len`` Trues.

    With ``accept_tail`` a shorter run that reaches the end of the array
    also counts (an image clipped by the top of the range).
    """
    n = len(mapped)
    for start, length in mapped_runs(mapped):
        if length >= min_len or (accept_tail and start + length == n):
            return start
    return None


# ------------------------------------------------------------ fixtures


FIX_PD = KERNEL_TEXT_START + 8 * PAGE_2M
FIX_PT = KERNEL_TEXT_START + 16 * PAGE_2M
FIX_NP_PD = KERNEL_TEXT_START + 4 * PAGE_2M
FIX_NP_PT = FIX_PT + 16 * PAGE_4K


def fixture_prober(prober: Prober, salt: int = 1) -> SimProber:
    """A prober on a small known kernel layout with the same CPU and mitigations.

    Used to learn latency bands for pages the attacker cannot otherwise
    point at (kernel 2-MiB and 4-KiB pages, unmapped kernel slots).
    """
    sim = require_sim(prober)
    st = sim.state
    regions = (
        Region(FIX_PD, PAGE_2M, KERNEL_TEXT_2M, "fixture-pd"),
        Region(FIX_PT, 4 * PAGE_4K, KERNEL_TEXT_4K, "fixture-pt"),
    )
    spec = ScenarioSpec(
        kind=ScenarioKind.Custom,
        mitigations=st.mitigations,
        profile=st.profile.name,
        custom_regions=regions,
    )
    state = MicroarchState(
        build_address_space(spec),
        st.profile,
        derive_seed(st.seed, 0x5EED + salt),
        mitigations=st.mitigations,
        tlb_capacity=st.tlb.capacity,
        psc_capacity=st.psc.capacity,
    )
    return SimProber(state)


def kernel_level_bands(prober: Prober, policy: MeasurePolicy = DEFAULT_POLICY) -> LevelBands:
    fx = fixture_prober(prober, salt=2)
    fixtures = {
        WalkLevel.PD: [FIX_PD],
        WalkLevel.PT: [FIX_PT],
        WalkLevel.NonPresent: [FIX_NP_PD, FIX_NP_PT],
    }
    return calibrate_level_bands(fx, fixtures, policy)


def kernel_tlb_separator(prober: Prober, warm_walk_caches: bool = False) -> TlbSeparator:
    """Hit/miss separator for a kernel 2-MiB page, learned on the fixture layout.

    With ``warm_walk_caches`` a neighbouring kernel page is walked after each
    eviction, as happens when the kernel keeps running in the background,
    so misses are measured with warm upper-level paging-structure caches.
    That is the fastest a miss gets, which puts the separator on the safe
    side of both warm and cold misses.
    """
    fx = fixture_prober(prober, salt=3)
    prime = None
    if warm_walk_caches:
        def prime():
            # forget the neighbour so the kernel really walks it again
            fx.state.flush_all()
            fx.state.touch_kernel_pages([FIX_PT])
    return calibrate_tlb_separator(fx, FIX_PD, prime=prime)


def _profile(prober: Prober):
    return getattr(prober, "profile", None)


def _spec(prober: Prober) -> ScenarioSpec | None:
    space = getattr(prober, "space", None)
    return space.spec if space is not None else None


# ------------------------------------------------------------ kernel base


def kernel_slots() -> list[int]:
    return [KERNEL_TEXT_START + i * PAGE_2M for i in range(KERNEL_SLOTS)]


def scan_kernel_base(
    prober: Prober, policy: MeasurePolicy = DEFAULT_POLICY, threshold: Threshold | None = None
) -> ScanReport:
    """Probe the 512 kernel-text slots; the base is the lowest mapped run."""
    meter = _Meter(prober)
    thr = _threshold(prober, threshold)
    meter.restart()
    slots = kernel_slots()
    lat, mapped = page_table_scan(prober, slots, thr, policy)
    report = ScanReport("scan-base", Status.NotFound, samples=_samples(slots, lat))
    report.details = {"threshold": round(thr.value, 3), "mapped_slots": int(mapped.sum())}
    start = first_run(mapped, 2, accept_tail=True)
    if start is not None:
        length = next(l for s, l in mapped_runs(mapped) if s == start)
        report.status = Status.Found
        report.detected_base = slots[start]
        report.regions = [DetectedRegion(slots[start], length * PAGE_2M, ("kernel-text",), "kernel")]
    return meter.finish(report)


# ------------------------------------------------------------ modules


def catalog_index(catalog) -> dict[int, tuple]:
    by_size: dict[int, list] = {}
    for name, size in catalog:
        by_size.setdefault(int(size), []).append(name)
    return {s: tuple(sorted(n)) for s, n in by_size.items()}


def scan_modules(
    prober: Prober,
    policy: MeasurePolicy = DEFAULT_POLICY,
    catalog=None,
    threshold: Threshold | None = None,
) -> ScanReport:
    """4-KiB sweep of the module area; each mapped run is labeled by size."""
    if catalog is None:
        spec = _spec(prober)
        catalog = spec.module_catalog if spec and spec.module_catalog else default_module_catalog()
    by_size = catalog_index(catalog)
    meter = _Meter(prober)
    thr = _threshold(prober, threshold)
    meter.restart()
    addrs = address_range(MODULES_START, MODULE_SLOTS, PAGE_4K)
    lat, mapped = page_table_scan(prober, addrs, thr, policy)
    report = ScanReport("scan-modules", Status.NotFound, samples=_samples(addrs, lat))
    for start, length in mapped_runs(mapped):
        size = length * PAGE_4K
        cands = by_size.get(size, ())
        label = "identified" if len(cands) == 1 else "ambiguous" if cands else "unknown"
        report.regions.append(DetectedRegion(int(addrs[start]), size, cands, label))
    if report.regions:
        report.status = Status.Found
        report.detected_base = report.regions[0].base
    report.details = {
        "threshold": round(thr.value, 3),
        "modules": len(report.regions),
        "identified": sum(1 for r in report.regions if len(r.candidates) == 1),
    }
    return meter.finish(report)


# ------------------------------------------------------------ KPTI


def scan_kpti(
    prober: Prober,
    policy: MeasurePolicy = DEFAULT_POLICY,
    trampoline_offset: int | None = None,
    threshold: Threshold | None = None,
) -> ScanReport:
    """Find the trampoline left mapped under KPTI and subtract its known offset."""
    if trampoline_offset is None:
        spec = _spec(prober)
        trampoline_offset = spec.trampoline_offset if spec else DEFAULT_TRAMPOLINE_OFFSET
    meter = _Meter(prober)
    thr = _threshold(prober, threshold)
    meter.restart()
    phase = trampoline_offset % PAGE_2M
    addrs = [s + phase for s in kernel_slots()]
    lat, mapped = page_table_scan(prober, addrs, thr, policy)
    report = ScanReport("scan-kpti", Status.NotFound, samples=_samples(addrs, lat))
    report.details = {"threshold": round(thr.value, 3), "trampoline_offset": hex(trampoline_offset)}
    for i in np.flatnonzero(mapped):
        base = addrs[i] - trampoline_offset
        if base >= KERNEL_TEXT_START:
            report.status = Status.Found
            report.detected_base = base
            report.regions = [DetectedRegion(addrs[i], PAGE_4K, ("kpti-trampoline",), "trampoline")]
            report.details["trampoline"] = hex(addrs[i])
            break
    return meter.finish(report)


# ------------------------------------------------------------ AMD


def scan_amd_kernel(
    prober: Prober,
    policy: MeasurePolicy = DEFAULT_POLICY,
    bands: LevelBands | None = None,
    offsets: Sequence[int] = AMD_4K_OFFSETS,
) -> ScanReport:
    """Locate the kernel by the handful of 4-KiB pages inside its 2-MiB mapping.

    Phase 1 classifies the walk level of every 2-MiB slot. Phase 2 sweeps,
    at 4 KiB, every slot of the mapped extent (plus one either side) that
    did not read as a 2-MiB page. Each PT-level page votes for the bases
    that the known offsets would put it at.
    """
    profile = _profile(prober)
    if profile is None or not profile.amd_mode:
        raise UsageError("scan_amd_kernel needs an amd_mode profile")
    meter = _Meter(prober)
    if bands is None:
        bands = kernel_level_bands(prober, policy)
    meter.restart()
    slots = kernel_slots()
    lat1, lv1 = walk_level_scan(prober, slots, bands, policy)
    samples = _samples(slots, lat1)
    present = np.flatnonzero(lv1 != WalkLevel.NonPresent)
    report = ScanReport("scan-amd", Status.NotFound, samples=samples)
    if len(present) == 0:
        return meter.finish(report)
    lo, hi = int(present[0]), int(present[-1])
    phase2 = [
        s for s in range(max(0, lo - 1), min(KERNEL_SLOTS - 1, hi + 1) + 1) if lv1[s] != WalkLevel.PD
    ]
    addrs = [slots[s] + j * PAGE_4K for s in phase2 for j in range(PAGE_2M // PAGE_4K)]
    lat2, lv2 = walk_level_scan(prober, addrs, bands, policy)
    samples.extend(_samples(addrs, lat2))
    pt_pages = [addrs[i] for i in np.flatnonzero(lv2 == WalkLevel.PT)]
    votes: Counter = Counter()
    for p in pt_pages:
        for off in offsets:
            b = p - off
            if b % PAGE_2M == 0 and KERNEL_TEXT_START <= b < KERNEL_TEXT_END:
                votes[b] += 1
    if votes:
        best = max(votes.values())
        report.detected_base = min(b for b, v in votes.items() if v == best)
    else:
        report.detected_base = slots[lo]
    report.regions = [DetectedRegion(p, PAGE_4K, (), "PT") for p in pt_pages]
    report.status = Status.Found if len(pt_pages) >= len(offsets) else Status.Degraded
    report.details = {
        "pt_pages": len(pt_pages),
        "extent_slots": [lo, hi],
        "phase2_slots": len(phase2),
        "votes": votes.get(report.detected_base, 0),
        "bands": [[round(m, 3), lvl.value] for m, lvl in bands.means],
    }
    return meter.finish(report)


# ------------------------------------------------------------ Windows


def _chunked_first(
    prober: Prober,
    first: int,
    stride: int,
    count: int,
    thr: Threshold,
    policy: MeasurePolicy,
    accept: Callable[[np.ndarray, int], int | None],
    samples: list,
    chunk: int = SCAN_CHUNK,
) -> tuple[np.ndarray, int | None, int]:
    """Scan slots ``0..count`` in chunks and stop once ``accept`` returns an index.

    ``accept(mapped_so_far, scanned)`` sees the verdicts of all scanned slots.
    Returns (mapped verdicts so far, accepted index, slots scanned).
    """
    mapped = np.zeros(count, dtype=bool)
    scanned = 0
    while scanned < count:
        n = min(chunk, count - scanned)
        addrs = address_range(first, n, stride, scanned)
        lat, m = page_table_scan(prober, addrs, thr, policy)
        samples.extend(_samples(addrs, lat))
        mapped[scanned : scanned + n] = m
        scanned += n
        hit = accept(mapped[:scanned], scanned)
        if hit is not None:
            return mapped[:scanned], hit, scanned
    return mapped, None, scanned


def scan_windows(
    prober: Prober,
    policy: MeasurePolicy = DEFAULT_POLICY,
    threshold: Threshold | None = None,
    refine: Callable[[Prober, int], int] | None = None,
) -> ScanReport:
    """First run of at least five mapped 2-MiB slots in the kernel region.

    Slots are scanned in ascending chunks and scanning stops once a run is
    complete (followed by an unmapped slot, or cut by the end of the range).

    ``refine(prober, region_base)`` may narrow the base further (e.g. with a
    TLB attack on the image's own pages); no such procedure ships here.
    """
    meter = _Meter(prober)
    thr = _threshold(prober, threshold)
    meter.restart()
    need = WINDOWS_KERNEL_PAGES
    count = WINDOWS_SLOTS + need - 1

    def accept(mapped, scanned):
        for start, length in mapped_runs(mapped):
            if length >= need and (start + length < scanned or scanned == count):
                return start
        return None

    samples: list = []
    mapped, start, scanned = _chunked_first(
        prober, WINDOWS_START, PAGE_2M, count, thr, policy, accept, samples
    )
    report = ScanReport("scan-windows", Status.NotFound, samples=samples)
    report.details = {"threshold": round(thr.value, 3), "slots_scanned": scanned}
    if start is not None:
        length = next(l for s, l in mapped_runs(mapped) if s == start)
        report.status = Status.Found
        report.detected_base = WINDOWS_START + start * PAGE_2M
        report.regions = [DetectedRegion(report.detected_base, length * PAGE_2M, ("ntoskrnl",), "kernel")]
        report.details["run_slots"] = length
        if refine is not None:
            report.detected_base = int(refine(prober, report.detected_base))
            report.details["refined"] = True
    return meter.finish(report)


def scan_kvas(
    prober: Prober,
    policy: MeasurePolicy = DEFAULT_POLICY,
    kvas_offset: int | None = None,
    threshold: Threshold | None = None,
    window: tuple[int, int] | None = None,
) -> ScanReport:
    """Find the three shadow pages KVAS leaves mapped and subtract their offset.

    Without ``window`` the search probes one address per 2-MiB slot (at the
    shadow's offset within a slot) and confirms each hit with a 4-KiB sweep
    around it. With ``window=(start, end)`` every 4-KiB page in it is probed.
    """
    if kvas_offset is None:
        spec = _spec(prober)
        kvas_offset = spec.kvas_offset if spec else DEFAULT_KVAS_OFFSET
    meter = _Meter(prober)
    thr = _threshold(prober, threshold)
    meter.restart()
    samples: list = []
    report = ScanReport("scan-kvas", Status.NotFound, samples=samples)
    report.details = {"threshold": round(thr.value, 3), "kvas_offset": hex(kvas_offset)}

    def run_ok(start_addr: int, length: int) -> bool:
        return length == KVAS_PAGES and (start_addr - kvas_offset) % PAGE_2M == 0

    def finish(run_start: int):
        report.status = Status.Found
        report.detected_base = run_start - kvas_offset
        report.regions = [DetectedRegion(run_start, KVAS_PAGES * PAGE_4K, ("kvas-shadow",), "shadow")]
        report.details["shadow"] = hex(run_start)

    if window is not None:
        start, end = window
        first = start & ~(PAGE_4K - 1)
        addrs = address_range(first, max(0, -(-(end - first) // PAGE_4K)), PAGE_4K)
        lat, mapped = page_table_scan(prober, addrs, thr, policy)
        samples.extend(_samples(addrs, lat))
        for s, l in mapped_runs(mapped):
            if run_ok(int(addrs[s]), l):
                finish(int(addrs[s]))
                break
        return meter.finish(report)

    phase = kvas_offset % PAGE_2M
    first = WINDOWS_START + phase
    count = WINDOWS_SLOTS + -(-kvas_offset // PAGE_2M)
    tried: set[int] = set()
    span = 2 * KVAS_PAGES + 2

    def accept(mapped, scanned):
        for i in np.flatnonzero(mapped):
            i = int(i)
            if i in tried:
                continue
            tried.add(i)
            c = first + i * PAGE_2M
            addrs = [c + (j - span) * PAGE_4K for j in range(2 * span + 1)]
            lat, m = page_table_scan(prober, addrs, thr, policy)
            samples.extend(_samples(addrs, lat))
            for s, l in mapped_runs(m):
                if addrs[s] <= c < addrs[s] + l * PAGE_4K and run_ok(addrs[s], l):
                    if 0 < s and s + l < len(addrs):
                        finish(addrs[s])
                        return i
        return None

    _, hit, scanned = _chunked_first(
        prober, first, PAGE_2M, count, thr, policy, accept, samples
    )
    report.details["slots_scanned"] = scanned
    return meter.finish(report)


# ------------------------------------------------------------ user space


def default_user_windows(spec: ScenarioSpec | None) -> list[tuple[int, int]]:
    bits = spec.userspace_window_bits if spec else 20
    libs = spec.library_catalog if spec and spec.library_catalog else default_library_catalog()
    lib_span = sum(sum(s) for _, s in libs)
    pad = 16 * PAGE_4K
    return [
        (USER_CODE_BASE, USER_CODE_BASE + (1 << bits) * PAGE_4K + pad),
        (USER_LIB_BASE, USER_LIB_BASE + (1 << bits) * PAGE_4K + lib_span + pad),
    ]


def _user_windows(prober, window) -> list[tuple[int, int]]:
    if window is None:
        return default_user_windows(_spec(prober))
    if isinstance(window[0], (tuple, list)):
        return [tuple(w) for w in window]
    return [tuple(window)]


def _sweep(prober, windows, thr, policy, samples, chunk=1 << 16):
    """Yield (page addresses, mapped verdicts) per window."""
    out = []
    for start, end in windows:
        first = start & ~(PAGE_4K - 1)
        n = max(0, -(-(end - first) // PAGE_4K))
        mapped = np.zeros(n, dtype=bool)
        for off in range(0, n, chunk):
            k = min(chunk, n - off)
            addrs = address_range(first, k, PAGE_4K, off)
            lat, m = page_table_scan(prober, addrs, thr, policy)
            mapped[off : off + k] = m
            samples.extend(_samples(addrs, lat))
        out.append((first, mapped))
    return out


def sweep_userspace(
    prober: Prober,
    policy: MeasurePolicy = DEFAULT_POLICY,
    window=None,
    threshold: Threshold | None = None,
) -> ScanReport:
    """Every mapped run (present, readable pages) inside the window(s)."""
    meter = _Meter(prober)
    thr = _threshold(prober, threshold)
    meter.restart()
    samples: list = []
    windows = _user_windows(prober, window)
    report = ScanReport("sweep-user", Status.NotFound, samples=samples)
    for first, mapped in _sweep(prober, windows, thr, policy, samples):
        for s, l in mapped_runs(mapped):
            report.regions.append(DetectedRegion(first + s * PAGE_4K, l * PAGE_4K, (), "mapped"))
    if report.regions:
        report.status = Status.Found
        report.detected_base = report.regions[0].base
    report.details = {
        "threshold": round(thr.value, 3),
        "windows": [[hex(a), hex(b)] for a, b in windows],
        "pages_mapped": sum(r.size for r in report.regions) // PAGE_4K,
    }
    return meter.finish(report)


def library_signatures(catalog) -> dict[tuple, tuple]:
    sig: dict[tuple, list] = {}
    for name, sections in catalog:
        sig.setdefault(tuple(int(s) for s in sections), []).append(name)
    return {k: tuple(sorted(v)) for k, v in sig.items()}


def _segments(first: int, mapped: np.ndarray, writable: np.ndarray) -> list[tuple[str, int, int]]:
    """Split a window into ('R' | 'RW' | 'GAP', base, bytes) segments."""
    code = np.where(mapped, np.where(writable, 2, 1), 0)
    segs = []
    if len(code) == 0:
        return segs
    edges = np.flatnonzero(np.diff(code)) + 1
    starts = np.concatenate(([0], edges))
    ends = np.concatenate((edges, [len(code)]))
    names = {0: "GAP", 1: "R", 2: "RW"}
    for s, e in zip(starts, ends):
        segs.append((names[int(code[s])], first + int(s) * PAGE_4K, int(e - s) * PAGE_4K))
    return segs


def fingerprint_libraries(
    prober: Prober,
    policy: MeasurePolicy = DEFAULT_POLICY,
    catalog=None,
    window=None,
    threshold: Threshold | None = None,
    store_threshold: Threshold | None = None,
) -> ScanReport:
    """Sweep, split mapped pages into R/RW with a store pass, match section sizes.

    A library shows up as ``R, gap, R, RW``: code, the inaccessible guard
    section, read-only data and writable data. The four lengths are looked
    up in the catalog; every name with that signature is listed.
    """
    if catalog is None:
        spec = _spec(prober)
        catalog = spec.library_catalog if spec and spec.library_catalog else default_library_catalog()
    sigs = library_signatures(catalog)
    meter = _Meter(prober)
    thr = _threshold(prober, threshold)
    st = store_threshold if store_threshold is not None else calibrate_store_separator(prober, policy=policy)
    meter.restart()
    samples: list = []
    windows = _user_windows(prober, window)
    report = ScanReport("fingerprint-libs", Status.NotFound, samples=samples)
    unmatched = 0
    for first, mapped in _sweep(prober, windows, thr, policy, samples):
        idx = np.flatnonzero(mapped)
        writable = np.zeros(len(mapped), dtype=bool)
        if len(idx):
            addrs = np.uint64(first) + idx.astype(np.uint64) * np.uint64(PAGE_4K)
            slat = measure_many(prober, addrs, STORE, policy)
            samples.extend(_samples(addrs, slat, "store"))
            writable[idx] = slat < st.value
        segs = _segments(first, mapped, writable)
        i = 0
        while i + 3 < len(segs):
            kinds = tuple(s[0] for s in segs[i : i + 4])
            if kinds == ("R", "GAP", "R", "RW"):
                sig = tuple(s[2] for s in segs[i : i + 4])
                cands = sigs.get(sig)
                if cands:
                    report.regions.append(
                        DetectedRegion(segs[i][1], sum(sig), cands, "library")
                    )
                    i += 4
                    continue
            i += 1
        unmatched += sum(1 for s in segs if s[0] != "GAP")
    if report.regions:
        report.status = Status.Found
        report.detected_base = report.regions[0].base
    report.details = {
        "threshold": round(thr.value, 3),
        "store_threshold": round(st.value, 3),
        "libraries": len(report.regions),
        "mapped_segments": unmatched,
    }
    return meter.finish(report)


# ------------------------------------------------------------ behavior


@dataclass(frozen=True)
class TickSample:
    tick: int
    latency: float  # median over the probed pages
    mean_latency: float
    active: bool


@dataclass
class BehaviorTrace:
    ticks: list = field(default_factory=list)
    separator: float = 0.0

    @property
    def verdicts(self) -> list[bool]:
        return [t.active for t in self.ticks]

    def to_csv(self) -> str:
        rows = ["tick,latency,mean_latency,active"]
        rows += [f"{t.tick},{t.latency:.1f},{t.mean_latency:.3f},{int(t.active)}" for t in self.ticks]
        return "\n".join(rows) + "\n"


def square_wave(ticks: int, active: int = 20, idle: int = 20) -> list[bool]:
    return [(t % (active + idle)) < active for t in range(ticks)]


def kernel_event_driver(prober: Prober, pages: Sequence[int], schedule: Sequence[bool]):
    """Simulated victim: on active ticks the kernel runs code on ``pages``."""
    state = require_sim(prober).state

    def drive(tick: int) -> None:
        if schedule[tick]:
            state.touch_kernel_pages(pages)

    return drive


def monitor_behavior(
    prober: Prober,
    module_base: int,
    n_pages: int = 10,
    ticks: int = 100,
    event_driver: Callable[[int], None] | None = None,
    separator: TlbSeparator | None = None,
) -> BehaviorTrace:
    """Once per tick: TLB-probe the module's first pages, then evict.

    The tick's latency is the median over the pages, so one interrupt
    spike cannot flip the verdict; the mean is kept alongside.
    """
    pages = [module_base + i * PAGE_4K for i in range(n_pages)]
    if separator is None:
        separator = calibrate_tlb_separator(prober, module_base)
    prober.evict_tlb()
    trace = BehaviorTrace(separator=separator.value)
    for t in range(ticks):
        if event_driver is not None:
            event_driver(t)
        lat, _ = tlb_scan(prober, pages, separator)
        med = float(np.median(lat))
        trace.ticks.append(TickSample(t, med, float(lat.mean()), med < separator.value))
        prober.evict_tlb()
    return trace


def f1_score(pred: Sequence[bool], truth: Sequence[bool]) -> float:
    tp = sum(1 for p, t in zip(pred, truth) if p and t)
    fp = sum(1 for p, t in zip(pred, truth) if p and not t)
    fn = sum(1 for p, t in zip(pred, truth) if t and not p)
    if tp == 0:
        return 1.0 if fp == 0 and fn == 0 else 0.0
    return 2 * tp / (2 * tp + fp + fn)


# ------------------------------------------------------------ mitigations


def balanced_accuracy(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tpr = float((pred & truth).sum() / truth.sum()) if truth.any() else math.nan
    tnr = float((~pred & ~truth).sum() / (~truth).sum()) if (~truth).any() else math.nan
    rates = [r for r in (tpr, tnr) if not math.isnan(r)]
    return float(np.mean(rates)), tpr, tnr


def evaluate_mitigation(
    prober: Prober,
    primitive: str = "page_table",
    policy: MeasurePolicy = DEFAULT_POLICY,
    threshold: Threshold | None = None,
    background_rate: float = 1.0,
) -> ScanReport:
    """Score a kernel-base scan slot by slot against the genuine kernel text.

    ``page_table`` classifies slots as mapped or not. ``tlb`` instead asks
    whether each slot's translation is already cached, while the simulated
    kernel keeps (a ``background_rate`` share of) its text pages warm. The
    TLB scan is repeated ``policy.independent_count`` times, each from a
    fresh baseline, and the per-slot latencies are aggregated by the policy.
    """
    sim = require_sim(prober)
    truth_space = sim.space
    kb, ksize = truth_space.truth.kernel_base, truth_space.truth.kernel_size
    slots = kernel_slots()
    genuine = np.array(
        [kb is not None and kb <= s < kb + ksize and truth_space.region_at(s) is not None for s in slots]
    )
    meter = _Meter(prober)
    details: dict = {"primitive": primitive}
    if primitive in ("page_table", "page-table", "pt"):
        thr = _threshold(prober, threshold)
        meter.restart()
        lat, pred = page_table_scan(prober, slots, thr, policy)
        details["threshold"] = round(thr.value, 3)
        name = "mitigation-pt"
    elif primitive in ("tlb",):
        sep = kernel_tlb_separator(prober, warm_walk_caches=background_rate > 0)
        text_pages = [s for s, g in zip(slots, genuine) if g]
        warm = text_pages[: int(math.ceil(background_rate * len(text_pages)))]

        def rebaseline():
            prober.evict_tlb()
            sim.state.touch_kernel_pages(warm)

        meter.restart()
        rounds = []
        for _ in range(policy.independent_count):
            rebaseline()
            lat_r, _ = tlb_scan(prober, slots, sep, rebaseline)
            rounds.append(lat_r)
        lat = policy.reduce_independent(np.stack(rounds, axis=1))
        pred = lat < sep.value
        details["separator"] = round(sep.value, 3)
        name = "mitigation-tlb"
    else:
        raise UsageError(f"unknown primitive {primitive!r}")
    ba, tpr, tnr = balanced_accuracy(pred, genuine)
    details.update({"balanced_accuracy": ba, "tpr": tpr, "tnr": tnr})
    report = ScanReport(name, Status.Found, samples=_samples(slots, lat), details=details)
    report.per_trial_accuracy = ba
    start = first_run(pred, 2, accept_tail=True)
    if start is not None:
        report.detected_base = slots[start]
    return meter.finish(report)
