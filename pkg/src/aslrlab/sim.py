"""Cycle-level latency model of masked vector loads and stores.

A probe costs ``base + assist + walk + noise`` cycles:

* ``assist`` is paid when the page is not present, is supervisor-only (all
  probes here run in user mode), or is a store target that is read-only.
  Stores to a writable page whose dirty bit is clear pay ``assist_dirty``
  instead; an all-zero mask never sets the bit, so such a page stays clean.
* ``walk`` is zero on a TLB hit. On a miss it is ``tlb_miss_walk`` plus
  ``walk_per_level`` for every level the paging-structure caches do not
  cover, plus ``pt_extra`` when the walk ends in a page table. A walk that
  fails (non-present) is redone by the assist from the root, so it ignores
  the PSC, fills nothing and adds ``nonpresent_extra``.

Because failed walks neither read nor write cached state, probes of
non-present pages are pure functions of the address. ``probe_batch`` uses
that to price them with numpy while present pages go through the scalar
path, which keeps batch and scalar results identical.
"""
from __future__ import annotations

import enum
import json
from collections import OrderedDict
from dataclasses import dataclass, fields, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, MaskedOpFault
from .space import (
    PAGE_4K,
    AddressSpace,
    Level,
    Mitigation,
    PageAttributes,
    check_canonical,
    is_kernel_address,
)

LANES = 8
LANE_BYTES = 4
DEFAULT_TLB_CAPACITY = 1536
DEFAULT_PSC_CAPACITY = 16
DEFAULT_EVICT_SLACK = 0.25
NOISE_BLOCK = 4096

# walk cost in units of walk_per_level, by terminal level
_UNITS = {Level.PML4: 3, Level.PDPT: 2, Level.PD: 1, Level.PT: 1}
_UNITS_ARR = np.array([0, 3, 2, 1, 1], dtype=np.int64)

# Attacker-owned memory that lives outside the victim AddressSpace: a few
# calibration pages in one page table, and an eviction buffer spread over
# PML4 slots 16..47 so that walking it also flushes every PSC level.
CALIB_BASE = 0x040000000000
CALIB_MAX_PAGES = 512
EVICT_PML4_FIRST = 16
EVICT_PML4_COUNT = 32
EVICT_BASE = EVICT_PML4_FIRST << 39
EVICT_END = (EVICT_PML4_FIRST + EVICT_PML4_COUNT) << 39


def eviction_page(i: int) -> int:
    pml4 = EVICT_PML4_FIRST + i % EVICT_PML4_COUNT
    pdpt = (i // EVICT_PML4_COUNT) % 512
    pd = i // (EVICT_PML4_COUNT * 512)
    return (pml4 << 39) | (pdpt << 30) | (pd << 21)


def eviction_index(addr: int) -> int | None:
    if not EVICT_BASE <= addr < EVICT_END or addr & 0x1FFFFF:
        return None
    pml4, pdpt, pd = addr >> 39, (addr >> 30) & 0x1FF, (addr >> 21) & 0x1FF
    if pd >= 512:
        return None
    return pd * EVICT_PML4_COUNT * 512 + pdpt * EVICT_PML4_COUNT + (pml4 - EVICT_PML4_FIRST)


class OpKind(enum.Enum):
    MaskedLoad = "load"
    MaskedStore = "store"


LOAD = OpKind.MaskedLoad
STORE = OpKind.MaskedStore


def parse_kind(value) -> OpKind:
    if isinstance(value, OpKind):
        return value
    v = str(value).lower()
    for k in OpKind:
        if v in (k.value, k.name.lower()):
            return k
    raise DomainError(f"unknown op kind {value!r}")


@dataclass(frozen=True)
class TimingProfile:
    name: str
    base_load: int
    base_store: int
    assist_load: int
    assist_store: int
    walk_per_level: int
    pt_extra: int
    nonpresent_extra: int
    tlb_hit_load: int
    tlb_miss_walk: int
    noise_sigma: float = 3.0
    outlier_prob: float = 0.01
    outlier_cost: int = 200
    amd_mode: bool = False
    # store to a clean writable page (dirty-bit assist)
    assist_dirty: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("name", "amd_mode"):
                continue
            v = getattr(self, f.name)
            if not v >= 0:
                raise ConfigError(f"profile {self.name}: {f.name} must be >= 0, got {v}")
        if self.outlier_prob > 1:
            raise ConfigError(f"profile {self.name}: outlier_prob must be <= 1")
        if self.assist_load <= 0 or self.assist_store <= 0:
            raise ConfigError(f"profile {self.name}: assists must be positive")
        if not self.base_store < self.base_load + self.assist_load:
            raise ConfigError(f"profile {self.name}: store path indistinguishable from assisted load")

    def base(self, kind: OpKind) -> int:
        return self.base_load if kind is LOAD else self.base_store

    def assist(self, kind: OpKind) -> int:
        return self.assist_load if kind is LOAD else self.assist_store

    def nonpresent_walk(self, level: Level) -> int:
        return (
            self.tlb_miss_walk
            + self.walk_per_level * _UNITS[level]
            + (self.pt_extra if level is Level.PT else 0)
            + self.nonpresent_extra
        )

    def without_noise(self) -> "TimingProfile":
        return replace(self, noise_sigma=0.0, outlier_prob=0.0)


def _profile_from_dict(d: dict) -> TimingProfile:
    known = {f.name for f in fields(TimingProfile)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown profile fields: {sorted(extra)}")
    try:
        return TimingProfile(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_profiles(path: str | Path | None = None) -> dict[str, TimingProfile]:
    if path is None:
        text = resources.files("aslrlab").joinpath("data", "profiles.json").read_text()
    else:
        text = Path(path).read_text()
    return {p.name: p for p in map(_profile_from_dict, json.loads(text))}


_PROFILES: dict[str, TimingProfile] | None = None


def get_profile(name: str) -> TimingProfile:
    global _PROFILES
    if _PROFILES is None:
        _PROFILES = load_profiles()
    try:
        return _PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown timing profile {name!r}") from None


@dataclass(frozen=True)
class ProbeSample:
    addr: int
    kind: OpKind
    mask_nonzero_on_invalid: bool
    latency: int
    tlb_hit: bool = False
    terminal_level: Level | None = None

    def csv_row(self) -> list:
        lvl = self.terminal_level.name if self.terminal_level is not None else ""
        return [f"{self.addr:#x}", self.kind.value, self.latency, int(self.tlb_hit), lvl]


TRACE_HEADER = ["addr", "kind", "latency", "tlb_hit", "terminal_level"]


class _Lru:
    """LRU map with an optional count of anonymous entries older than all keys.

    ``filler`` stands for eviction-buffer pages that were touched last but
    are never looked up by attacks; tracking them as a count keeps
    ``evict_tlb`` O(1).
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.entries: OrderedDict = OrderedDict()
        self.filler = 0
        self.filler_keys: Sequence = ()

    def __len__(self):
        return len(self.entries) + self.filler

    def __contains__(self, key):
        return key in self.entries

    def get(self, key):
        if key in self.entries:
            self.entries.move_to_end(key)
            return True
        return False

    def insert(self, key, value=True):
        if key in self.entries:
            self.entries.move_to_end(key)
            self.entries[key] = value
            return
        if self.capacity <= 0:
            return
        if len(self) >= self.capacity:
            if self.filler:
                self.filler -= 1
            else:
                self.entries.popitem(last=False)
        self.entries[key] = value

    def materialize(self):
        """Turn the anonymous filler count into explicit keys."""
        if not self.filler:
            return
        keys = list(self.filler_keys)[-self.filler :]
        old = self.entries
        self.entries = OrderedDict((k, True) for k in keys)
        self.entries.update(old)
        self.filler = 0

    def reset_to_filler(self, keys: Sequence):
        self.entries.clear()
        self.filler_keys = keys
        self.filler = min(self.capacity, len(keys))

    def keys(self):
        self.materialize()
        return list(self.entries)

    def clear(self):
        self.entries.clear()
        self.filler = 0


class TlbModel:
    """Fully associative LRU TLB, optionally split into user/kernel halves."""

    def __init__(self, capacity: int = DEFAULT_TLB_CAPACITY, partitioned: bool = False):
        if capacity < 1:
            raise ConfigError("TLB capacity must be positive")
        self.capacity = capacity
        self.partitioned = partitioned
        if partitioned:
            half = capacity // 2
            self.parts = {"user": _Lru(half), "kernel": _Lru(capacity - half)}
        else:
            shared = _Lru(capacity)
            self.parts = {"user": shared, "kernel": shared}

    def part(self, user_mode: bool) -> _Lru:
        return self.parts["user" if user_mode else "kernel"]

    def __len__(self):
        if self.partitioned:
            return len(self.parts["user"]) + len(self.parts["kernel"])
        return len(self.parts["user"])

    def resident(self) -> list[int]:
        seen = []
        for p in dict.fromkeys(self.parts.values()):
            seen.extend(p.keys())
        return seen

    def holds(self, page: int) -> bool:
        return any(page in p for p in self.parts.values())


class PagingStructureCache:
    """Per-level LRU caches of PML4E/PDPTE/PDE lookups. PT entries never enter."""

    SHIFTS = {Level.PML4: 39, Level.PDPT: 30, Level.PD: 21}

    def __init__(self, capacity: int = DEFAULT_PSC_CAPACITY):
        self.capacity = capacity
        self.levels = {lvl: _Lru(capacity) for lvl in self.SHIFTS}

    def covered(self, addr: int, terminal: Level) -> int:
        """Depth of the deepest cached entry above the terminal level."""
        depth = 0
        for lvl in (Level.PD, Level.PDPT, Level.PML4):
            if lvl >= terminal:
                continue
            if self.levels[lvl].get(addr >> self.SHIFTS[lvl]):
                depth = int(lvl)
                break
        return depth

    def fill(self, addr: int, terminal: Level) -> None:
        for lvl in (Level.PML4, Level.PDPT, Level.PD):
            if lvl < terminal:
                self.levels[lvl].insert(addr >> self.SHIFTS[lvl])

    def set_contents(self, contents: dict) -> None:
        for lvl, keys in contents.items():
            lru = self.levels[lvl]
            lru.clear()
            lru.entries.update((k, True) for k in keys)

    def contents(self) -> dict:
        return {lvl: tuple(lru.entries) for lvl, lru in self.levels.items()}

    def clear(self) -> None:
        for lru in self.levels.values():
            lru.clear()


class NoiseSource:
    """Per-probe additive noise, drawn in fixed-size blocks.

    Values are consumed strictly in order, so taking them one at a time or
    many at once yields the same sequence.
    """

    def __init__(self, seed: int, sigma: float, outlier_prob: float, outlier_cost: int):
        self.sigma = float(sigma)
        self.outlier_prob = float(outlier_prob)
        self.outlier_cost = int(outlier_cost)
        self.enabled = self.sigma > 0 or (self.outlier_prob > 0 and self.outlier_cost > 0)
        self._gen = np.random.Generator(np.random.PCG64(seed & ((1 << 64) - 1)))
        self._buf = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def _refill(self):
        g = self._gen
        gauss = np.rint(g.standard_normal(NOISE_BLOCK) * self.sigma)
        noise = np.maximum(gauss, 0).astype(np.int64)
        noise += (g.random(NOISE_BLOCK) < self.outlier_prob) * self.outlier_cost
        self._buf = noise
        self._pos = 0

    def take(self, n: int) -> np.ndarray:
        if not self.enabled:
            return np.zeros(n, dtype=np.int64)
        out = np.empty(n, dtype=np.int64)
        filled = 0
        while filled < n:
            if self._pos >= len(self._buf):
                self._refill()
            k = min(n - filled, len(self._buf) - self._pos)
            out[filled : filled + k] = self._buf[self._pos : self._pos + k]
            self._pos += k
            filled += k
        return out

    def one(self) -> int:
        if not self.enabled:
            return 0
        if self._pos >= len(self._buf):
            self._refill()
        v = int(self._buf[self._pos])
        self._pos += 1
        return v


def _normalize_mask(mask) -> int:
    if isinstance(mask, (bool, np.bool_)):
        return (1 << LANES) - 1 if mask else 0
    if isinstance(mask, (int, np.integer)):
        return int(mask) & ((1 << LANES) - 1)
    bits = 0
    for i, m in enumerate(mask):
        if m:
            bits |= 1 << i
    return bits


def as_address_array(addrs) -> np.ndarray:
    """Addresses as a uint64 array, rejecting non-canonical ones."""
    if isinstance(addrs, np.ndarray) and addrs.dtype == np.uint64:
        a = addrs
    else:
        try:
            a = np.asarray([int(x) for x in addrs] if not isinstance(addrs, np.ndarray) else addrs,
                           dtype=np.uint64)
        except (OverflowError, ValueError):
            raise DomainError("address outside the 64-bit range") from None
    a = a.reshape(-1)
    top = a >> np.uint64(47)
    bad = (top != 0) & (top != 0x1FFFF)
    if bad.any():
        raise DomainError(f"non-canonical address {int(a[np.argmax(bad)]):#x}")
    return a


@lru_cache(maxsize=8)
def _overlay_tables(evict_pages: int) -> tuple[frozenset, frozenset, frozenset]:
    """Paging-structure prefixes owned by the attacker (calibration + eviction pages)."""
    pages = [CALIB_BASE] + [eviction_page(i) for i in range(evict_pages)]
    return (
        frozenset(p >> 39 for p in pages),
        frozenset(p >> 30 for p in pages),
        frozenset(p >> 21 for p in pages),
    )


@lru_cache(maxsize=8)
def _overlay_arrays(evict_pages: int) -> tuple:
    return tuple(np.array(sorted(t), dtype=np.uint64) for t in _overlay_tables(evict_pages))


@lru_cache(maxsize=8)
def _eviction_plan(evict_pages: int, psc_capacity) -> tuple[list, object]:
    """Eviction pages and the paging-structure cache contents they leave behind."""
    seq = [eviction_page(i) for i in range(evict_pages)]
    psc = PagingStructureCache(psc_capacity)
    for page in seq:
        psc.fill(page, Level.PT)
    return tuple(seq), psc.contents()


def _member(x: np.ndarray, table: np.ndarray) -> np.ndarray:
    """``np.isin`` for a sorted, duplicate-free ``table``."""
    if len(table) == 0:
        return np.zeros(len(x), dtype=bool)
    idx = np.minimum(np.searchsorted(table, x), len(table) - 1)
    return table[idx] == x


class MicroarchState:
    """TLB, paging-structure caches, noise stream and the attacker's own pages."""

    def __init__(
        self,
        space: AddressSpace,
        profile: TimingProfile | str | None = None,
        seed: int = 0,
        *,
        noise: bool = True,
        mitigations: Iterable[Mitigation] | None = None,
        tlb_capacity: int = DEFAULT_TLB_CAPACITY,
        psc_capacity: int = DEFAULT_PSC_CAPACITY,
        evict_slack: float = DEFAULT_EVICT_SLACK,
        trace: bool = False,
    ):
        if profile is None:
            profile = space.spec.profile
        if isinstance(profile, str):
            profile = get_profile(profile)
        if not noise:
            profile = profile.without_noise()
        self.space = space
        self.profile = profile
        self.seed = seed
        self.mitigations = frozenset(
            space.spec.mitigations if mitigations is None else mitigations
        )
        self.tlb = TlbModel(tlb_capacity, Mitigation.TlbPartition in self.mitigations)
        self.psc = PagingStructureCache(psc_capacity)
        self.noise = NoiseSource(seed, profile.noise_sigma, profile.outlier_prob, profile.outlier_cost)
        if evict_slack < 0:
            raise ConfigError("evict_slack must be >= 0")
        self.evict_pages = tlb_capacity + int(round(evict_slack * tlb_capacity))
        self.probes_issued = 0
        self.trace: list[ProbeSample] | None = [] if trace else None
        self._calib: dict[int, PageAttributes] = {}
        self._dirty: set[int] = set()
        self._evict_seq: list[int] | None = None
        self._evict_psc: dict | None = None
        self._arrays = None

    # ---------------------------------------------------------------- pages

    def alloc_user_page(self, perms: str = "rw-", dirty: bool = False) -> int:
        """Map a fresh 4-KiB page in the attacker's own address space."""
        n = len(self._calib)
        if n >= CALIB_MAX_PAGES:
            raise ConfigError("out of calibration pages")
        addr = CALIB_BASE + n * PAGE_4K
        if self.space.region_at(addr) is not None:
            raise ConfigError("scenario overlaps the attacker's calibration area")
        self._calib[addr] = PageAttributes.user(perms, dirty)
        if dirty:
            self._dirty.add(addr)
        return addr

    def page_info(self, addr: int) -> tuple[PageAttributes | None, Level, int]:
        """(attributes, terminal level, page base) as seen by the hardware."""
        page4k = addr & ~(PAGE_4K - 1)
        attrs = self._calib.get(page4k)
        if attrs is not None:
            return attrs, Level.PT, page4k
        if EVICT_BASE <= addr < EVICT_END:
            base = addr & ~(PAGE_4K - 1)
            idx = eviction_index(base)
            if idx is not None and idx < self.evict_pages:
                return PageAttributes.user("rw-", True), Level.PT, base
        region = self.space.region_at(addr)
        if region is None:
            return None, self._np_level(addr), page4k
        size = region.page_size
        return region.attrs, region.attrs.size_class.level, addr & ~(size - 1)

    def _np_level(self, addr: int) -> Level:
        tables = self.space.page_tables
        pml4, pdpt, pde = _overlay_tables(self.evict_pages)
        if (addr >> 39) not in tables.pml4e and (addr >> 39) not in pml4:
            return Level.PML4
        if (addr >> 30) not in tables.pdpte_tables and (addr >> 30) not in pdpt:
            return Level.PDPT
        if (addr >> 21) not in tables.pde_tables and (addr >> 21) not in pde:
            return Level.PD
        return Level.PT

    def _is_dirty(self, attrs: PageAttributes, page: int) -> bool:
        return attrs.dirty or page in self._dirty

    # ---------------------------------------------------------------- probing

    def masked_probe(self, addr: int, kind: OpKind = LOAD, mask=0) -> ProbeSample:
        check_canonical(addr)
        kind = parse_kind(kind)
        bits = _normalize_mask(mask)
        attrs, level, page = self.page_info(addr)
        written = self._check_lanes(addr, kind, bits) if bits else ()
        det, hit = self._deterministic(addr, kind, bits, attrs, level, page)
        self._dirty.update(written)
        latency = det + self.noise.one()
        self.probes_issued += 1
        sample = ProbeSample(addr, kind, False, latency, hit, level)
        if self.trace is not None:
            self.trace.append(sample)
        return sample

    def _check_lanes(self, addr: int, kind: OpKind, bits: int) -> set[int]:
        """Fault on any enabled lane that may not be accessed; return pages a store writes."""
        written = set()
        for lane in range(LANES):
            if not bits >> lane & 1:
                continue
            a = addr + lane * LANE_BYTES
            if a >= 1 << 64:
                raise DomainError("vector operand wraps the address space")
            check_canonical(a)
            attrs, _, page = self.page_info(a)
            if attrs is None or not attrs.present:
                raise MaskedOpFault(a, "page not present")
            if not attrs.user_accessible:
                raise MaskedOpFault(a, "supervisor page")
            if kind is STORE:
                if not attrs.writable:
                    raise MaskedOpFault(a, "page not writable")
                written.add(page)
        return written

    def _deterministic(self, addr, kind, bits, attrs, level, page) -> tuple[int, bool]:
        p = self.profile
        base = p.base(kind)
        if Mitigation.MaskedOpNop in self.mitigations and not bits:
            return base, False
        present = attrs is not None and attrs.present
        if not present:
            return base + p.assist(kind) + p.nonpresent_walk(level), False
        if not attrs.user_accessible or (kind is STORE and not attrs.writable):
            assist = p.assist(kind)
        elif kind is STORE and not self._is_dirty(attrs, page):
            assist = p.assist_dirty
        else:
            assist = 0
        kernel = is_kernel_address(addr)
        tlb = self.tlb.part(user_mode=True)
        if EVICT_BASE <= page < EVICT_END:
            tlb.materialize()
        if tlb.get(page):
            return base + assist + p.tlb_hit_load, True
        stateless = p.amd_mode and kernel
        covered = 0 if stateless else self.psc.covered(addr, level)
        walk = p.tlb_miss_walk + p.walk_per_level * max(0, _UNITS[level] - covered)
        if level is Level.PT:
            walk += p.pt_extra
        if not stateless:
            tlb.insert(page, level)
            self.psc.fill(addr, level)
        return base + assist + walk, False

    # ------------------------------------------------------------ batch path

    def _space_arrays(self):
        if self._arrays is None:
            regions = self.space.regions
            starts = np.array([r.base for r in regions], dtype=np.uint64)
            ends = np.array([r.end for r in regions], dtype=np.uint64)
            present = np.array([r.attrs.present for r in regions], dtype=bool)
            level = np.array([int(r.attrs.size_class.level) for r in regions], dtype=np.int64)
            t = self.space.page_tables
            # the attacker's own eviction buffer adds paging structures too
            tables = [
                np.union1d(np.array(sorted(x), dtype=np.uint64), mine)
                for x, mine in zip(
                    (t.pml4e, t.pdpte_tables, t.pde_tables), _overlay_arrays(self.evict_pages)
                )
            ]
            self._arrays = (starts, ends, present, level, *tables)
        return self._arrays

    def _classify(self, a: np.ndarray):
        """Split addresses into stateless (non-present) and stateful ones.

        Returns ``(stateless_mask, level)`` where ``level`` is the terminal
        level for every stateless address.
        """
        starts, ends, present, region_level, pml4, pdpt, pde = self._space_arrays()
        n = len(a)
        level = np.full(n, int(Level.PT), dtype=np.int64)
        if len(starts):
            idx = np.searchsorted(starts, a, side="right").astype(np.int64) - 1
            safe = np.maximum(idx, 0)
            inside = (idx >= 0) & (a < ends[safe])
        else:
            safe = np.zeros(n, dtype=np.int64)
            inside = np.zeros(n, dtype=bool)
        stateless = ~inside
        if len(starts):
            stateless |= inside & ~present[safe]
            level = np.where(inside, region_level[safe], level)
        known = [
            _member(a >> np.uint64(shift), table)
            for shift, table in zip((39, 30, 21), (pml4, pdpt, pde))
        ]
        lv = np.select(
            [~known[0], ~known[1], ~known[2]],
            [int(Level.PML4), int(Level.PDPT), int(Level.PD)],
            int(Level.PT),
        )
        level = np.where(inside, level, lv)
        # attacker-owned pages are handled by the scalar path
        own = (a >= np.uint64(EVICT_BASE)) & (a < np.uint64(EVICT_END))
        if self._calib:
            own |= _member(a & ~np.uint64(PAGE_4K - 1), np.array(sorted(self._calib), dtype=np.uint64))
        stateless &= ~own
        return stateless, level

    def probe_batch(
        self,
        addrs,
        kind: OpKind = LOAD,
        repeats: int = 1,
        evict_each: bool = False,
    ) -> np.ndarray:
        """Zero-mask probes, ``repeats`` back-to-back per address, in order.

        Equivalent to looping ``masked_probe`` (with ``evict_tlb`` before each
        address when ``evict_each``) and returns latencies of shape
        ``(len(addrs), repeats)``.
        """
        kind = parse_kind(kind)
        if repeats < 1:
            raise DomainError("repeats must be >= 1")
        a = as_address_array(addrs)
        n = len(a)
        noise = self.noise.take(n * repeats).reshape(n, repeats)
        self.probes_issued += n * repeats
        p = self.profile
        base = p.base(kind)
        if n == 0:
            return noise
        det = np.empty((n, repeats), dtype=np.int64)
        hits = np.zeros((n, repeats), dtype=bool)
        stateless, level = self._classify(a)

        if Mitigation.MaskedOpNop in self.mitigations:
            det[:] = base
            if evict_each:
                self.evict_tlb()
        else:
            lv = level[stateless]
            np_lat = (
                base
                + p.assist(kind)
                + p.tlb_miss_walk
                + p.walk_per_level * _UNITS_ARR[lv]
                + p.pt_extra * (lv == int(Level.PT))
                + p.nonpresent_extra
            )
            det[stateless] = np_lat[:, None]
            for i in np.flatnonzero(~stateless):
                if evict_each:
                    self.evict_tlb()
                addr = int(a[i])
                attrs, lvl, page = self.page_info(addr)
                for r in range(min(repeats, 2)):
                    det[i, r], hits[i, r] = self._deterministic(addr, kind, 0, attrs, lvl, page)
                if repeats > 2:
                    det[i, 2:] = det[i, 1]
                    hits[i, 2:] = hits[i, 1]
            if evict_each and stateless[-1]:
                self.evict_tlb()
        out = det + noise
        if self.trace is not None:
            for i, addr in enumerate(a.tolist()):
                lvl = Level(int(level[i])) if stateless[i] else self.page_info(addr)[1]
                for r in range(repeats):
                    self.trace.append(
                        ProbeSample(addr, kind, False, int(out[i, r]), bool(hits[i, r]), lvl)
                    )
        return out

    # ------------------------------------------------------------- TLB control

    def _eviction_sequence(self) -> list[int]:
        if self._evict_seq is None:
            self._evict_seq, self._evict_psc = _eviction_plan(self.evict_pages, self.psc.capacity)
        return self._evict_seq

    def evict_tlb(self, replay: bool = False) -> None:
        """Evict by touching ``capacity + slack`` attacker pages.

        The default path jumps straight to the state that replay produces;
        ``replay=True`` performs the touches one by one.
        """
        seq = self._eviction_sequence()
        user = self.tlb.part(user_mode=True)
        if replay:
            user.materialize()
            for page in seq:
                if not user.get(page):
                    user.insert(page, Level.PT)
                    self.psc.fill(page, Level.PT)
            return
        user.reset_to_filler(seq)
        self.psc.set_contents(self._evict_psc)

    def flush_all(self) -> None:
        """Drop every TLB and PSC entry (test helper, not reachable from user mode)."""
        for part in dict.fromkeys(self.tlb.parts.values()):
            part.clear()
        self.psc.clear()

    def touch_kernel_pages(self, addrs: Iterable[int]) -> None:
        """Insert translations as if the kernel itself ran on these pages."""
        kernel_tlb = self.tlb.part(user_mode=False)
        for addr in addrs:
            check_canonical(addr)
            region = self.space.region_at(addr)
            if region is None or not region.attrs.present or not is_kernel_address(addr):
                raise DomainError(f"{addr:#x} is not a present kernel page")
            level = region.attrs.size_class.level
            page = addr & ~(region.page_size - 1)
            if not kernel_tlb.get(page):
                kernel_tlb.insert(page, level)
                self.psc.fill(addr, level)

    def tlb_holds(self, addr: int) -> bool:
        _, _, page = self.page_info(addr)
        if EVICT_BASE <= page < EVICT_END:
            self.tlb.part(user_mode=True).materialize()
        return self.tlb.holds(page)



def masked_probe(state: MicroarchState, addr: int, kind=LOAD, mask=0) -> ProbeSample:
    return state.masked_probe(addr, kind, mask)


def evict_tlb(state: MicroarchState) -> None:
    state.evict_tlb()


def touch_kernel_pages(state: MicroarchState, addrs: Iterable[int]) -> None:
    state.touch_kernel_pages(addrs)
