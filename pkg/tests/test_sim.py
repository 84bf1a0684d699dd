from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aslrlab.errors import ConfigError, DomainError, MaskedOpFault
from aslrlab.sim import (
    LOAD,
    STORE,
    TRACE_HEADER,
    MicroarchState,
    NoiseSource,
    PagingStructureCache,
    evict_tlb,
    get_profile,
    load_profiles,
    masked_probe,
    parse_kind,
    touch_kernel_pages,
)
from aslrlab.space import (
    KERNEL_TEXT_2M,
    KERNEL_TEXT_4K,
    KERNEL_TEXT_START,
    Level,
    Mitigation,
    PAGE_2M,
    PAGE_4K,
    PageAttributes,
    Region,
    ScenarioKind,
    ScenarioSpec,
    build_address_space,
)

from conftest import quiet_state

PROFILES = ("alderlake", "icelake", "coffeelake", "zen3")
USER = 0x400000


def custom_state(profile="alderlake", seed=0, noise=False, mitigations=(), **kw) -> MicroarchState:
    """User pages r-x, ---, r--, rw- (dirty), rw- (clean) at USER; kernel 2M and 4K pages."""
    regions = (
        Region(USER, PAGE_4K, PageAttributes.user("r-x")),
        Region(USER + PAGE_4K, PAGE_4K, PageAttributes.user("---")),
        Region(USER + 2 * PAGE_4K, PAGE_4K, PageAttributes.user("r--")),
        Region(USER + 3 * PAGE_4K, PAGE_4K, PageAttributes.user("rw-", dirty=True)),
        Region(USER + 4 * PAGE_4K, PAGE_4K, PageAttributes.user("rw-")),
        Region(KERNEL_TEXT_START + 8 * PAGE_2M, PAGE_2M, KERNEL_TEXT_2M),
        Region(KERNEL_TEXT_START + 16 * PAGE_2M, 4 * PAGE_4K, KERNEL_TEXT_4K),
    )
    spec = ScenarioSpec(ScenarioKind.Custom, profile=profile, custom_regions=regions,
                        mitigations=frozenset(mitigations))
    return MicroarchState(build_address_space(spec), None, seed, noise=noise, **kw)


R_X, NONE, R__, RW_DIRTY, RW_CLEAN = (USER + i * PAGE_4K for i in range(5))
K2M = KERNEL_TEXT_START + 8 * PAGE_2M
K4K = KERNEL_TEXT_START + 16 * PAGE_2M
K_UNMAPPED = KERNEL_TEXT_START + 4 * PAGE_2M


def warm(state, addr, kind=LOAD):
    state.masked_probe(addr, kind)
    return state.masked_probe(addr, kind).latency


def cold(state, addr, kind=LOAD):
    state.evict_tlb()
    return state.masked_probe(addr, kind).latency


# ------------------------------------------------------------ calibrated means


def test_alderlake_kernel_means():
    s = custom_state("alderlake")
    assert warm(s, K2M) == 93
    assert warm(s, K_UNMAPPED) == 107


def test_icelake_means():
    s = custom_state("icelake")
    assert warm(s, K2M) == 92
    assert warm(s, K2M, STORE) == 76
    assert warm(s, R__) == 13


def test_coffeelake_tlb_miss_and_hit():
    s = custom_state("coffeelake")
    assert cold(s, K2M) == 381
    assert s.masked_probe(K2M).latency == 147


def test_zen3_bands_ordered():
    s = custom_state("zen3")
    pd, pt, np_pd = cold(s, K2M), cold(s, K4K), cold(s, K_UNMAPPED)
    assert pd < pt < np_pd


# ------------------------------------------------------------ faults


@given(st.integers(min_value=0, max_value=2**47 - 1) | st.integers(min_value=2**64 - 2**47, max_value=2**64 - 8))
def test_zero_mask_never_faults(addr):
    s = custom_state()
    for kind in (LOAD, STORE):
        sample = s.masked_probe(addr, kind, 0)
        assert sample.latency >= 12


def test_noncanonical_rejected():
    s = custom_state()
    with pytest.raises(DomainError):
        s.masked_probe(0x0000_8000_0000_0000)


def test_enabled_lane_faults_on_unmapped():
    s = custom_state()
    with pytest.raises(MaskedOpFault):
        s.masked_probe(0x200000, LOAD, 1)


def test_lanes_across_page_boundary():
    s = custom_state()
    addr = RW_CLEAN + PAGE_4K - 8  # lanes 0,1 on the clean page, 2..7 on the next (unmapped)
    s.masked_probe(addr, LOAD, 0b11)
    with pytest.raises(MaskedOpFault):
        s.masked_probe(addr, LOAD, 0b111)
    # lanes given as a list of booleans work too
    s.masked_probe(addr, LOAD, [True, True] + [False] * 6)


def test_supervisor_and_write_faults():
    s = custom_state()
    with pytest.raises(MaskedOpFault):
        s.masked_probe(K2M, LOAD, 1)
    with pytest.raises(MaskedOpFault):
        s.masked_probe(R__, STORE, 1)
    with pytest.raises(MaskedOpFault):
        s.masked_probe(NONE, LOAD, 1)
    s.masked_probe(R__, LOAD, 0xFF)


# ------------------------------------------------------------ latency model


def test_store_on_read_only_costs_an_assist():
    p = get_profile("alderlake")
    s = custom_state()
    assert warm(s, R__, STORE) - warm(s, RW_DIRTY, STORE) == p.assist_store
    assert warm(s, R_X, STORE) == warm(s, R__, STORE)


def test_zero_mask_store_leaves_page_clean():
    p = get_profile("alderlake")
    s = custom_state()
    first = warm(s, RW_CLEAN, STORE)
    assert first == warm(s, RW_CLEAN, STORE)
    assert first - warm(s, RW_DIRTY, STORE) == p.assist_dirty
    # a real write sets the dirty bit; later stores are fast
    s.masked_probe(RW_CLEAN, STORE, 1)
    assert warm(s, RW_CLEAN, STORE) == warm(s, RW_DIRTY, STORE)


def test_second_probe_faster_after_flush():
    s = custom_state()
    s.flush_all()
    a = s.masked_probe(K2M).latency
    b = s.masked_probe(K2M).latency
    assert b < a


def test_amd_kernel_probes_always_walk():
    s = custom_state("zen3")
    s.flush_all()
    a = s.masked_probe(K2M).latency
    b = s.masked_probe(K2M).latency
    assert a == b
    assert not s.tlb_holds(K2M)
    # user pages still use the TLB
    s.masked_probe(R__)
    assert s.tlb_holds(R__)


def test_masked_op_nop_flattens_latency():
    s = custom_state(mitigations=[Mitigation.MaskedOpNop])
    p = s.profile
    for addr in (R__, NONE, K2M, K_UNMAPPED, 0x1234000):
        assert s.masked_probe(addr, LOAD).latency == p.base_load
        assert s.masked_probe(addr, STORE).latency == p.base_store


def test_nonpresent_walk_ignores_psc():
    s = custom_state()
    s.flush_all()
    a = s.masked_probe(K_UNMAPPED).latency
    s.touch_kernel_pages([K2M])  # fills upper-level caches for the same region
    assert s.masked_probe(K_UNMAPPED).latency == a


def test_psc_shortens_walk():
    s = custom_state()
    p = s.profile
    s.flush_all()
    s.touch_kernel_pages([K4K])
    s.tlb.part(user_mode=False).clear()
    full = p.base_load + p.assist_load + p.tlb_miss_walk + p.walk_per_level + p.pt_extra
    # the PD entry pointing at the page table is cached, so the walk is shorter
    assert s.masked_probe(K4K + PAGE_4K).latency == full - p.walk_per_level


def test_walk_level_ordering():
    s = custom_state(tlb_capacity=64)
    pml4 = cold(s, 0x0000_7000_0000_0000)
    pdpt = cold(s, KERNEL_TEXT_START - (1 << 30) * 4)  # PML4 entry exists, PDPT empty
    pd = cold(s, K_UNMAPPED)
    assert pd < pdpt < pml4
    p = s.profile
    assert cold(s, K4K) - cold(s, K2M) == p.pt_extra


def test_tlb_hit_below_miss_by_walk():
    for name in PROFILES:
        s = custom_state(name)
        if s.profile.amd_mode:
            hit_addr, miss = R__, cold(s, R__)
        else:
            hit_addr, miss = K2M, cold(s, K2M)
        hit = s.masked_probe(hit_addr).latency
        assert miss - hit >= s.profile.walk_per_level


def test_store_faster_than_load_icelake():
    s = custom_state("icelake")
    diff = warm(s, K2M, LOAD) - warm(s, K2M, STORE)
    assert 16 <= diff <= 18


# ------------------------------------------------------------ TLB control


def test_touch_then_probe_hits():
    s = custom_state()
    s.evict_tlb()
    touch_kernel_pages(s, [K2M])
    sample = masked_probe(s, K2M)
    assert sample.tlb_hit and sample.latency == 93


def test_evict_makes_page_miss():
    s = custom_state()
    touch_kernel_pages(s, [K2M])
    evict_tlb(s)
    assert not s.tlb_holds(K2M)
    assert not masked_probe(s, K2M).tlb_hit


def test_touch_nothing_changes_nothing():
    s = custom_state()
    s.masked_probe(K2M)
    before = (list(s.tlb.resident()), s.psc.contents())
    s.touch_kernel_pages([])
    assert (list(s.tlb.resident()), s.psc.contents()) == before


def test_touch_more_than_capacity_keeps_most_recent():
    space = build_address_space(ScenarioSpec(seed=1))
    s = MicroarchState(space, None, 0, noise=False, tlb_capacity=8)
    pages = [b for _, b, size in space.truth.module_placements[:12]]
    s.touch_kernel_pages(pages)
    assert [s.tlb_holds(p) for p in pages] == [False] * 4 + [True] * 8


def test_touch_rejects_non_present():
    s = custom_state()
    with pytest.raises(DomainError):
        s.touch_kernel_pages([K_UNMAPPED])
    with pytest.raises(DomainError):
        s.touch_kernel_pages([R__])


def test_evict_twice_same_as_once():
    a, b = custom_state(), custom_state()
    for s in (a, b):
        s.masked_probe(K2M)
        s.masked_probe(K4K)
    a.evict_tlb()
    b.evict_tlb()
    b.evict_tlb()
    assert a.tlb.resident() == b.tlb.resident()
    assert a.psc.contents() == b.psc.contents()
    assert [a.masked_probe(x).latency for x in (K2M, K4K, R__)] == [
        b.masked_probe(x).latency for x in (K2M, K4K, R__)
    ]


@pytest.mark.parametrize("mitigations", [(), (Mitigation.TlbPartition,)])
def test_evict_shortcut_matches_replay(mitigations):
    a = custom_state(mitigations=mitigations, tlb_capacity=32)
    b = custom_state(mitigations=mitigations, tlb_capacity=32)
    seq = [K2M, K4K, R__, RW_DIRTY, K4K + PAGE_4K, 0x1000]
    for s, replay in ((a, False), (b, True)):
        for x in seq:
            s.masked_probe(x)
        s.touch_kernel_pages([K2M])
        s.evict_tlb(replay=replay)
    assert sorted(a.tlb.resident()) == sorted(b.tlb.resident())
    assert a.psc.contents() == {k: tuple(v) for k, v in b.psc.contents().items()}
    assert [a.masked_probe(x).latency for x in seq] == [b.masked_probe(x).latency for x in seq]


def test_partition_keeps_kernel_entries():
    s = custom_state(mitigations=[Mitigation.TlbPartition])
    s.touch_kernel_pages([K2M])
    for _ in range(3):
        s.evict_tlb()
    assert s.tlb_holds(K2M)
    # a user-mode probe cannot see the kernel half
    assert not s.masked_probe(K2M).tlb_hit


def test_psc_never_caches_pt():
    psc = PagingStructureCache(4)
    psc.fill(K4K, Level.PT)
    assert set(psc.levels) == {Level.PML4, Level.PDPT, Level.PD}
    assert psc.covered(K4K, Level.PT) == int(Level.PD)


@given(st.lists(st.sampled_from([K2M, K4K, K4K + PAGE_4K, R__, NONE, K_UNMAPPED, RW_CLEAN, 0x5000]),
                max_size=60))
def test_tlb_bounded_and_present_only(seq):
    s = custom_state(tlb_capacity=4)
    for x in seq:
        s.masked_probe(x)
        assert len(s.tlb) <= 4
    for page in s.tlb.resident():
        attrs, _, _ = s.page_info(page)
        assert attrs is not None and attrs.present


# ------------------------------------------------------------ batch path


addr_pool = st.sampled_from(
    [K2M, K2M + 0x1000, K4K, K4K + PAGE_4K, K4K + 5 * PAGE_4K, K_UNMAPPED, R_X, NONE, R__,
     RW_DIRTY, RW_CLEAN, 0x7000_0000_0000, KERNEL_TEXT_START]
)


@given(
    st.lists(addr_pool, min_size=1, max_size=30),
    st.integers(1, 4),
    st.booleans(),
    st.sampled_from([LOAD, STORE]),
    st.sampled_from(PROFILES),
)
def test_batch_equals_scalar(addrs, repeats, evict_each, kind, profile):
    a = custom_state(profile, seed=5, noise=True, tlb_capacity=16)
    b = custom_state(profile, seed=5, noise=True, tlb_capacity=16)
    batch = a.probe_batch(addrs, kind, repeats, evict_each)
    scalar = []
    for x in addrs:
        if evict_each:
            b.evict_tlb()
        scalar.append([b.masked_probe(x, kind).latency for _ in range(repeats)])
    assert batch.tolist() == scalar
    assert a.probes_issued == b.probes_issued
    assert sorted(a.tlb.resident()) == sorted(b.tlb.resident())


def test_batch_on_real_layouts():
    for kind in (ScenarioKind.LinuxDefault, ScenarioKind.AmdLinux, ScenarioKind.Userspace):
        space = build_address_space(ScenarioSpec(kind, seed=3, profile="zen3" if kind is ScenarioKind.AmdLinux else "alderlake"))
        addrs = [r.base for r in space.regions[:40]] + [r.end for r in space.regions[:40]]
        a = MicroarchState(space, None, 1)
        b = MicroarchState(space, None, 1)
        batch = a.probe_batch(addrs, LOAD, 2)
        scalar = [[b.masked_probe(x).latency for _ in range(2)] for x in addrs]
        assert batch.tolist() == scalar


# ------------------------------------------------------------ noise, determinism, trace


def test_same_seed_same_samples():
    a, b = custom_state(seed=9, noise=True), custom_state(seed=9, noise=True)
    seq = [K2M, R__, K_UNMAPPED] * 50
    assert [a.masked_probe(x).latency for x in seq] == [b.masked_probe(x).latency for x in seq]


def test_noise_shape():
    src = NoiseSource(1, 3.0, 0.01, 200)
    x = src.take(200_000)
    assert x.min() == 0
    spikes = (x >= 200).mean()
    assert 0.008 < spikes < 0.012
    body = x[x < 200]
    assert 1.0 < body.mean() < 1.4  # E[max(0, N(0, 3))] is about 1.2


def test_noise_chunking_is_invisible():
    a, b = NoiseSource(4, 3.0, 0.01, 200), NoiseSource(4, 3.0, 0.01, 200)
    whole = a.take(10_000)
    parts = np.concatenate([b.take(1), b.take(4095), b.take(3), *[np.array([b.one()]) for _ in range(901)], b.take(5000)])
    assert whole.tolist() == parts.tolist()


def test_trace_rows():
    s = custom_state(trace=True)
    s.masked_probe(K2M)
    s.probe_batch([K2M, K_UNMAPPED], LOAD)
    assert len(s.trace) == 3
    assert TRACE_HEADER == ["addr", "kind", "latency", "tlb_hit", "terminal_level"]
    row = s.trace[1].csv_row()
    assert row[0] == hex(K2M) and row[1] == "load" and row[3] == 1 and row[4] == "PD"


# ------------------------------------------------------------ profiles


def test_shipped_profiles_valid():
    profiles = load_profiles()
    assert set(PROFILES) <= set(profiles)
    assert profiles["zen3"].amd_mode and not profiles["alderlake"].amd_mode


def test_profile_validation():
    p = get_profile("alderlake")
    with pytest.raises(ConfigError):
        dataclasses.replace(p, walk_per_level=-1)
    with pytest.raises(ConfigError):
        dataclasses.replace(p, base_store=p.base_load + p.assist_load)
    with pytest.raises(ConfigError):
        get_profile("pentium")


def test_parse_kind():
    assert parse_kind("store") is STORE and parse_kind("MaskedLoad") is LOAD
    with pytest.raises(DomainError):
        parse_kind("prefetch")


def test_quiet_state_helper_uses_scenario_profile():
    s = quiet_state(ScenarioSpec(ScenarioKind.AmdLinux, profile="zen3"))
    assert s.profile.amd_mode and s.profile.noise_sigma == 0
