from __future__ import annotations

import json
from collections import Counter

import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from aslrlab.errors import ConfigError, DomainError
from aslrlab.rng import SplitMix64, derive_seed
from aslrlab.space import (
    AMD_4K_OFFSETS,
    KERNEL_SLOTS,
    KERNEL_TEXT_END,
    KERNEL_TEXT_START,
    KVAS_PAGES,
    MODULES_END,
    MODULES_START,
    NOKASLR_BASE,
    PAGE_2M,
    PAGE_4K,
    WINDOWS_END,
    WINDOWS_KERNEL_PAGES,
    WINDOWS_START,
    Level,
    Mitigation,
    PageAttributes,
    Region,
    ScenarioKind,
    ScenarioSpec,
    SizeClass,
    build_address_space,
    check_canonical,
    default_library_catalog,
    default_module_catalog,
    enumerate_truth,
    load_scenario,
    lookup,
    scenario_from_dict,
)

from conftest import SEED_SLOT_271

seeds = st.integers(min_value=0, max_value=2**64 - 1)


def test_nokaslr_base_is_fixed():
    for seed in (0, 1, 12345):
        space = build_address_space(ScenarioSpec(ScenarioKind.LinuxNokaslr, seed=seed))
        assert space.truth.kernel_base == NOKASLR_BASE == 0xFFFFFFFF81000000


def test_slot_271_base(linux_space):
    assert linux_space.truth.kernel_base == 0xFFFFFFFFA1E00000
    assert (linux_space.truth.kernel_base - KERNEL_TEXT_START) // PAGE_2M == 271


def test_same_seed_same_layout():
    a = build_address_space(ScenarioSpec(seed=0))
    b = build_address_space(ScenarioSpec(seed=0))
    assert a.regions == b.regions and a.truth == b.truth


def test_different_seeds_differ():
    bases = {build_address_space(ScenarioSpec(seed=s)).truth.kernel_base for s in range(20)}
    assert len(bases) > 10


@given(seeds)
def test_linux_layout_invariants(seed):
    space = build_address_space(ScenarioSpec(seed=seed))
    truth = space.truth
    kb = truth.kernel_base
    assert kb % PAGE_2M == 0 and KERNEL_TEXT_START <= kb < KERNEL_TEXT_END
    catalog = default_module_catalog()
    assert sorted((n, size) for n, _, size in truth.module_placements) == sorted(catalog)
    prev_end = None
    for name, base, size in truth.module_placements:
        assert base % PAGE_4K == 0
        assert MODULES_START <= base and base + size <= MODULES_END
        # an unmapped page on each side
        assert space.region_at(base - PAGE_4K) is None
        assert space.region_at(base + size) is None
        if prev_end is not None:
            assert base > prev_end
        prev_end = base + size
    for r in space.regions:
        assert r.base % r.page_size == 0 and r.length % r.page_size == 0
    for a, b in zip(space.regions, space.regions[1:]):
        assert a.end <= b.base


@given(seeds, st.sampled_from(list(ScenarioKind)))
def test_truth_entries_are_mapped(seed, kind):
    if kind is ScenarioKind.Custom:
        return
    space = build_address_space(ScenarioSpec(kind, seed=seed))
    t = space.truth
    for _, base, _ in t.module_placements:
        assert space.lookup(base).present
    for _, base, _ in t.library_placements:
        assert space.lookup(base).present
    if t.trampoline_base is not None:
        assert space.lookup(t.trampoline_base).present
    if t.kvas_base is not None:
        assert space.lookup(t.kvas_base).present
    if kind not in (ScenarioKind.LinuxKpti, ScenarioKind.WindowsKvas, ScenarioKind.Userspace):
        assert space.lookup(t.kernel_base).present


def test_kernel_base_offsets_uniform():
    counts = Counter(
        (build_address_space(ScenarioSpec(seed=s)).truth.kernel_base - KERNEL_TEXT_START) // PAGE_2M
        for s in range(10_000)
    )
    observed = [counts.get(i, 0) for i in range(KERNEL_SLOTS)]
    assert chisquare(observed).pvalue > 0.01


def test_lookup_kernel_text_is_supervisor(linux_space):
    attrs = lookup(linux_space, linux_space.truth.kernel_base)
    assert attrs.present and not attrs.user_accessible
    assert attrs.size_class is SizeClass.Page2M


def test_lookup_below_kernel_is_unmapped(linux_space):
    assert lookup(linux_space, linux_space.truth.kernel_base - PAGE_2M) is None


def test_lookup_rejects_noncanonical(linux_space):
    with pytest.raises(DomainError):
        lookup(linux_space, 0x0000_8000_0000_0000)
    with pytest.raises(DomainError):
        check_canonical(1 << 64)


def test_flare_maps_every_kernel_slot():
    for seed in range(5):
        space = build_address_space(ScenarioSpec(ScenarioKind.LinuxFlare, seed=seed))
        for i in range(KERNEL_SLOTS):
            assert space.lookup(KERNEL_TEXT_START + i * PAGE_2M).present


def test_flare_mitigation_flag_adds_dummies():
    spec = ScenarioSpec(seed=3, mitigations=frozenset({Mitigation.FlareDummyMap}))
    space = build_address_space(spec)
    assert all(space.lookup(KERNEL_TEXT_START + i * PAGE_2M) is not None for i in range(KERNEL_SLOTS))


def test_kpti_trampoline_offset():
    space = build_address_space(ScenarioSpec(ScenarioKind.LinuxKpti, seed=9))
    t = enumerate_truth(space)
    assert t.trampoline_base == t.kernel_base + 0xC00000
    # only the trampoline is mapped in the kernel text range
    assert space.lookup(t.kernel_base) is None


def test_kvas_offset():
    space = build_address_space(ScenarioSpec(ScenarioKind.WindowsKvas, seed=4))
    t = space.truth
    assert t.kvas_base == t.kernel_base + 0x298000
    for i in range(KVAS_PAGES):
        assert space.lookup(t.kvas_base + i * PAGE_4K).present
    assert space.lookup(t.kvas_base + KVAS_PAGES * PAGE_4K) is None
    assert space.lookup(t.kvas_base - PAGE_4K) is None


def test_windows_five_2m_pages():
    space = build_address_space(ScenarioSpec(ScenarioKind.Windows, seed=4))
    kb = space.truth.kernel_base
    assert kb % PAGE_2M == 0 and WINDOWS_START <= kb < WINDOWS_END
    assert [space.lookup(kb + i * PAGE_2M) is not None for i in range(6)] == [True] * 5 + [False]
    assert WINDOWS_KERNEL_PAGES == 5


def test_amd_five_4k_pages():
    space = build_address_space(ScenarioSpec(ScenarioKind.AmdLinux, seed=11))
    kb = space.truth.kernel_base
    assert space.truth.amd_4k_pages == tuple(kb + o for o in AMD_4K_OFFSETS)
    pt = [
        r.base
        for r in space.regions
        if KERNEL_TEXT_START <= r.base < KERNEL_TEXT_END and r.attrs.size_class is SizeClass.Page4K
    ]
    assert sorted(pt) == sorted(space.truth.amd_4k_pages)
    for page in space.truth.amd_4k_pages:
        assert space.terminal_level(page) is Level.PT
    assert space.terminal_level(kb + 2 * PAGE_2M) is Level.PD


def test_module_catalog_shape():
    catalog = default_module_catalog()
    sizes = Counter(size for _, size in catalog)
    assert len(catalog) == 125
    unique = [n for n, s in catalog if sizes[s] == 1]
    assert len(unique) == 19
    for name in ("video", "mac_hid", "pinctrl_icelake"):
        assert name in unique
    by_name = dict(catalog)
    assert by_name["autofs4"] == by_name["x_tables"]
    assert sizes[by_name["autofs4"]] == 2


@given(seeds)
def test_userspace_library_layout(seed):
    space = build_address_space(ScenarioSpec(ScenarioKind.Userspace, seed=seed))
    catalog = dict(default_library_catalog())
    assert len(space.truth.library_placements) == len(catalog)
    for name, base, sections in space.truth.library_placements:
        assert tuple(sections) == tuple(catalog[name])
        cursor = base
        for size, perms in zip(sections, ("r-x", "---", "r--", "rw-")):
            r = space.region_at(cursor)
            assert r is not None and r.attrs.perms == perms and r.length == size
            cursor += size


def test_userspace_has_unlisted_page():
    space = build_address_space(ScenarioSpec(ScenarioKind.Userspace, seed=2))
    listed = space.truth.maps_fixture
    hidden = [
        r
        for r in space.regions
        if r.attrs.present and not any(s <= r.base < e for s, e, _, _ in listed)
    ]
    assert hidden


def test_prot_none_page_is_not_present():
    attrs = PageAttributes.user("---")
    assert not attrs.present and attrs.perms == "---"
    with pytest.raises(ConfigError):
        PageAttributes.user("rw")


def test_custom_overlap_rejected():
    a = Region(0x10000, 2 * PAGE_4K, PageAttributes.user("r--"))
    b = Region(0x11000, PAGE_4K, PageAttributes.user("r--"))
    with pytest.raises(ConfigError):
        build_address_space(ScenarioSpec(ScenarioKind.Custom, custom_regions=(a, b)))


def test_misaligned_region_rejected():
    a = Region(0x10800, PAGE_4K, PageAttributes.user("r--"))
    with pytest.raises(ConfigError):
        build_address_space(ScenarioSpec(ScenarioKind.Custom, custom_regions=(a,)))


def test_oversized_catalog_rejected():
    big = (("huge", 70 * 1024 * 1024),)
    with pytest.raises(ConfigError):
        build_address_space(ScenarioSpec(module_catalog=big))


def test_bad_module_size_rejected():
    with pytest.raises(ConfigError):
        build_address_space(ScenarioSpec(module_catalog=(("x", 100),)))


def test_scenario_json_round_trip(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(
        json.dumps(
            {
                "kind": "LinuxKpti",
                "seed": 5,
                "nokaslr": True,
                "trampoline_offset": "0xe00000",
                "module_catalog": [{"name": "a", "size": 8192}, {"name": "b", "size": "0x3000"}],
            }
        )
    )
    spec = load_scenario(path)
    assert spec.kind is ScenarioKind.LinuxKpti and spec.seed == 5
    assert spec.trampoline_offset == 0xE00000
    assert spec.module_catalog == (("a", 8192), ("b", 0x3000))
    space = build_address_space(spec)
    assert space.truth.trampoline_base == NOKASLR_BASE + 0xE00000


def test_scenario_custom_regions_from_json():
    spec = scenario_from_dict(
        {
            "kind": "Custom",
            "custom_regions": [
                {"base": "0x400000", "length": "0x2000", "perms": "rw-"},
                {"base": "0xffffffff80200000", "length": "0x200000", "size_class": "2m", "user": False},
            ],
        }
    )
    space = build_address_space(spec)
    assert space.lookup(0x401000).writable
    assert space.lookup(0xFFFFFFFF80300000).size_class is SizeClass.Page2M


def test_bad_scenario_inputs(tmp_path):
    with pytest.raises(ConfigError):
        scenario_from_dict({"seed": 1})
    with pytest.raises(ConfigError):
        scenario_from_dict({"kind": "Nope"})
    with pytest.raises(ConfigError):
        scenario_from_dict({"kind": "LinuxDefault", "mitigations": ["KPTI"]})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_scenario(bad)
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "missing.json")


def test_bundled_presets_load():
    assert load_scenario("linux_default").kind is ScenarioKind.LinuxDefault
    aws = load_scenario("aws_kpti")
    assert aws.trampoline_offset == 0xE00000 and aws.nokaslr
    assert load_scenario("amd_linux").profile == "zen3"


def test_splitmix_reference_values():
    # first outputs for seed 0, as published with the reference implementation
    rng = SplitMix64(0)
    assert rng.next() == 0xE220A8397B1DCDAF
    assert rng.next() == 0x6E789E6AA1B965F4


@given(seeds, st.integers(min_value=1, max_value=1000))
def test_splitmix_below_in_range(seed, n):
    rng = SplitMix64(seed)
    assert all(0 <= rng.below(n) < n for _ in range(20))


def test_derive_seed_streams_differ():
    assert len({derive_seed(7, i) for i in range(1000)}) == 1000
