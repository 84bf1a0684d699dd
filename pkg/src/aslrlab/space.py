"""Simulated x86-64 address-space layouts with ground truth.

An :class:`AddressSpace` is what the victim's page tables look like from the
point of view of a user-mode attacker: a sparse set of regions, each with a
page size and permission bits. Layouts are drawn from a seeded SplitMix64
stream so the same ``(kind, seed)`` always yields the same regions.
"""
from __future__ import annotations

import enum
import functools
import json
from bisect import bisect_right
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import ConfigError, DomainError
from .rng import SplitMix64

KiB = 1 << 10
MiB = 1 << 20
GiB = 1 << 30
PAGE_4K = 4 * KiB
PAGE_2M = 2 * MiB
PAGE_1G = GiB

KERNEL_TEXT_START = 0xFFFFFFFF80000000
KERNEL_TEXT_END = 0xFFFFFFFFC0000000
KERNEL_SLOTS = 512
NOKASLR_BASE = 0xFFFFFFFF81000000
MODULES_START = 0xFFFFFFFFC0000000
MODULES_END = 0xFFFFFFFFC4000000
MODULE_SLOTS = (MODULES_END - MODULES_START) // PAGE_4K
WINDOWS_START = 0xFFFFF80000000000
WINDOWS_END = 0xFFFFF88000000000
WINDOWS_SLOTS = (WINDOWS_END - WINDOWS_START) // PAGE_2M
WINDOWS_KERNEL_PAGES = 5
KVAS_PAGES = 3
KPTI_TRAMPOLINE_PAGES = 2
USER_CODE_BASE = 0x550000000000
USER_LIB_BASE = 0x7F0000000000
USER_SPACE_END = 0x800000000000
KERNEL_SPACE_START = 0xFFFF800000000000

DEFAULT_KERNEL_IMAGE_SIZE = 32 * MiB
DEFAULT_TRAMPOLINE_OFFSET = 0xC00000
AWS_TRAMPOLINE_OFFSET = 0xE00000
DEFAULT_KVAS_OFFSET = 0x298000
# Stand-in positions of the 4-KiB pages inside an AMD kernel image; the real
# offsets are not public.
AMD_4K_OFFSETS = (0x0, 0x4000, 0x201000, 0x600000, 0xA04000)

# (text, rodata, data) of the victim executable, plus one page that the
# process never reports in its maps listing.
PROGRAM_SECTIONS = (0x5000, 0x2000, 0x1000)


class SizeClass(enum.Enum):
    Page4K = PAGE_4K
    Page2M = PAGE_2M
    Page1G = PAGE_1G

    @property
    def level(self) -> "Level":
        return {PAGE_4K: Level.PT, PAGE_2M: Level.PD, PAGE_1G: Level.PDPT}[self.value]


class Level(enum.IntEnum):
    """Paging-structure level, numbered by walk depth."""

    PML4 = 1
    PDPT = 2
    PD = 3
    PT = 4


class ScenarioKind(enum.Enum):
    LinuxDefault = "LinuxDefault"
    LinuxKpti = "LinuxKpti"
    LinuxFlare = "LinuxFlare"
    LinuxNokaslr = "LinuxNokaslr"
    AmdLinux = "AmdLinux"
    Windows = "Windows"
    WindowsKvas = "WindowsKvas"
    Userspace = "Userspace"
    Custom = "Custom"


LINUX_KINDS = frozenset(
    {
        ScenarioKind.LinuxDefault,
        ScenarioKind.LinuxKpti,
        ScenarioKind.LinuxFlare,
        ScenarioKind.LinuxNokaslr,
        ScenarioKind.AmdLinux,
    }
)


class Mitigation(enum.Enum):
    FlareDummyMap = "FlareDummyMap"
    TlbPartition = "TlbPartition"
    MaskedOpNop = "MaskedOpNop"


@dataclass(frozen=True)
class PageAttributes:
    present: bool
    user_accessible: bool
    writable: bool
    executable: bool
    dirty: bool = False
    size_class: SizeClass = SizeClass.Page4K

    @classmethod
    def user(cls, perms: str, dirty: bool = False) -> "PageAttributes":
        """User page from an ``r-x``-style string; ``---`` gives a PROT_NONE page.

        PROT_NONE pages keep their page-table entry but with the present bit
        clear, exactly like Linux does it.
        """
        if len(perms) != 3:
            raise ConfigError(f"bad permission string {perms!r}")
        readable = perms[0] == "r"
        return cls(
            present=readable,
            user_accessible=True,
            writable=perms[1] == "w",
            executable=perms[2] == "x",
            dirty=dirty,
        )

    @property
    def perms(self) -> str:
        if not self.present:
            return "---"
        return "r" + ("w" if self.writable else "-") + ("x" if self.executable else "-")


KERNEL_TEXT_2M = PageAttributes(True, False, False, True, False, SizeClass.Page2M)
KERNEL_TEXT_4K = PageAttributes(True, False, False, True, False, SizeClass.Page4K)
DUMMY_2M = PageAttributes(True, False, False, False, False, SizeClass.Page2M)


@dataclass(frozen=True)
class Region:
    base: int
    length: int
    attrs: PageAttributes
    label: str = ""

    @property
    def end(self) -> int:
        return self.base + self.length

    @property
    def page_size(self) -> int:
        return self.attrs.size_class.value

    def pages(self) -> range:
        return range(self.base, self.end, self.page_size)


@dataclass(frozen=True)
class ScenarioSpec:
    kind: ScenarioKind = ScenarioKind.LinuxDefault
    seed: int = 0
    mitigations: frozenset = frozenset()
    module_catalog: tuple = ()
    library_catalog: tuple = ()
    trampoline_offset: int = DEFAULT_TRAMPOLINE_OFFSET
    kvas_offset: int = DEFAULT_KVAS_OFFSET
    userspace_window_bits: int = 20
    kernel_image_size: int = DEFAULT_KERNEL_IMAGE_SIZE
    nokaslr: bool = False
    profile: str = "alderlake"
    custom_regions: tuple = ()

    def with_seed(self, seed: int) -> "ScenarioSpec":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class GroundTruth:
    kernel_base: int | None = None
    kernel_size: int = 0
    module_placements: tuple = ()  # (name, base, size)
    library_placements: tuple = ()  # (name, base, section sizes)
    trampoline_base: int | None = None
    kvas_base: int | None = None
    program_base: int | None = None
    amd_4k_pages: tuple = ()
    # what the victim's own /proc/PID/maps would list: (start, end, perms, label)
    maps_fixture: tuple = ()


@dataclass(frozen=True)
class PageTables:
    """Which paging structures exist, as sets of virtual-address prefixes.

    ``pml4e`` holds ``va >> 39`` of present PML4 entries, ``pdpte_tables``
    the ``va >> 30`` of PDPT entries that point at a page directory, and
    ``pde_tables`` the ``va >> 21`` of PD entries that point at a page table.
    """

    pml4e: frozenset
    pdpte_tables: frozenset
    pde_tables: frozenset

    def nonpresent_level(self, addr: int) -> Level:
        """Level at which a walk for an address outside every region stops."""
        if (addr >> 39) not in self.pml4e:
            return Level.PML4
        if (addr >> 30) not in self.pdpte_tables:
            return Level.PDPT
        if (addr >> 21) not in self.pde_tables:
            return Level.PD
        return Level.PT


def build_page_tables(regions: Iterable[Region]) -> PageTables:
    pml4e: set[int] = set()
    pdpt: set[int] = set()
    pde: set[int] = set()
    for r in regions:
        last = r.end - 1
        pml4e.update(range(r.base >> 39, (last >> 39) + 1))
        if r.attrs.size_class is not SizeClass.Page1G:
            pdpt.update(range(r.base >> 30, (last >> 30) + 1))
        if r.attrs.size_class is SizeClass.Page4K:
            pde.update(range(r.base >> 21, (last >> 21) + 1))
    return PageTables(frozenset(pml4e), frozenset(pdpt), frozenset(pde))


def check_canonical(addr: int) -> int:
    if not 0 <= addr < (1 << 64):
        raise DomainError(f"address {addr!r} is not a 64-bit value")
    top = addr >> 47
    if top not in (0, 0x1FFFF):
        raise DomainError(f"non-canonical address {addr:#x}")
    return addr


def is_kernel_address(addr: int) -> bool:
    return addr >= KERNEL_SPACE_START


@dataclass(frozen=True)
class AddressSpace:
    regions: tuple
    truth: GroundTruth
    spec: ScenarioSpec

    @cached_property
    def _starts(self) -> list[int]:
        return [r.base for r in self.regions]

    @cached_property
    def page_tables(self) -> PageTables:
        return build_page_tables(self.regions)

    def region_at(self, addr: int) -> Region | None:
        i = bisect_right(self._starts, addr) - 1
        if i >= 0:
            r = self.regions[i]
            if addr < r.end:
                return r
        return None

    def lookup(self, addr: int) -> PageAttributes | None:
        check_canonical(addr)
        r = self.region_at(addr)
        return r.attrs if r is not None else None

    def terminal_level(self, addr: int) -> Level:
        r = self.region_at(addr)
        if r is not None:
            return r.attrs.size_class.level
        return self.page_tables.nonpresent_level(addr)


def lookup(space: AddressSpace, addr: int) -> PageAttributes | None:
    """Attributes of the page holding ``addr``; ``None`` means not mapped."""
    return space.lookup(addr)


def enumerate_truth(space: AddressSpace) -> GroundTruth:
    return space.truth


# --------------------------------------------------------------------------
# catalogs


def _data_path(name: str):
    return resources.files("aslrlab").joinpath("data", name)


@functools.lru_cache(maxsize=None)
def default_module_catalog() -> tuple:
    data = json.loads(_data_path("modules.json").read_text())
    return tuple((m["name"], int(m["size"])) for m in data)


@functools.lru_cache(maxsize=None)
def default_library_catalog() -> tuple:
    data = json.loads(_data_path("libraries.json").read_text())
    return tuple((m["name"], tuple(int(s) for s in m["section_sizes"])) for m in data)


def load_module_catalog(path: str | Path) -> tuple:
    return tuple((m["name"], _int(m["size"])) for m in json.loads(Path(path).read_text()))


def load_library_catalog(path: str | Path) -> tuple:
    return tuple(
        (m["name"], tuple(_int(s) for s in m["section_sizes"]))
        for m in json.loads(Path(path).read_text())
    )


# --------------------------------------------------------------------------
# layout builders


def _kernel_offset(spec: ScenarioSpec, rng: SplitMix64, image_slots: int, fit: bool) -> int:
    if spec.nokaslr or spec.kind is ScenarioKind.LinuxNokaslr:
        return (NOKASLR_BASE - KERNEL_TEXT_START) // PAGE_2M
    if fit:
        return rng.below(KERNEL_SLOTS - image_slots + 1)
    return rng.below(KERNEL_SLOTS)


def _place_modules(spec: ScenarioSpec, rng: SplitMix64) -> tuple[list[Region], tuple]:
    catalog = list(spec.module_catalog)
    pages = [size // PAGE_4K for _, size in catalog]
    free = MODULE_SLOTS - sum(pages) - (len(catalog) + 1)
    if free < 0:
        raise ConfigError("module catalog does not fit in the module area")
    order = list(range(len(catalog)))
    rng.shuffle(order)
    # spread the spare pages over the n+1 gaps (stars and bars), each gap
    # keeps its mandatory separator page
    cuts = rng.sample(free + len(catalog), len(catalog))
    extra = [c - i for i, c in enumerate(cuts)]
    regions, placements = [], []
    cursor = 1
    prev = 0
    for idx, e in zip(order, extra):
        cursor += e - prev
        prev = e
        name, size = catalog[idx]
        base = MODULES_START + cursor * PAGE_4K
        regions.append(Region(base, size, KERNEL_TEXT_4K, f"module:{name}"))
        placements.append((name, base, size))
        cursor += pages[idx] + 1
    placements.sort(key=lambda p: p[1])
    return regions, tuple(placements)


def _validate_catalog(spec: ScenarioSpec) -> None:
    if spec.kind in LINUX_KINDS and not spec.module_catalog:
        raise ConfigError("Linux scenarios need a non-empty module catalog")
    for name, size in spec.module_catalog:
        if size <= 0 or size % PAGE_4K:
            raise ConfigError(f"module {name!r} size {size} is not a positive 4-KiB multiple")


def _linux(spec: ScenarioSpec, rng: SplitMix64) -> tuple[list[Region], GroundTruth]:
    image_slots = -(-spec.kernel_image_size // PAGE_2M)
    kind = spec.kind
    fit = kind is not ScenarioKind.LinuxDefault and kind is not ScenarioKind.LinuxFlare
    offset = _kernel_offset(spec, rng, image_slots, fit)
    base = KERNEL_TEXT_START + offset * PAGE_2M
    size = min(image_slots * PAGE_2M, KERNEL_TEXT_END - base)
    regions: list[Region] = []
    truth: dict[str, Any] = {"kernel_base": base, "kernel_size": size}

    if kind is ScenarioKind.LinuxKpti:
        tramp = base + spec.trampoline_offset
        if spec.trampoline_offset % PAGE_4K or not base <= tramp < base + size:
            raise ConfigError("trampoline offset must be a 4-KiB multiple inside the image")
        regions.append(
            Region(tramp, KPTI_TRAMPOLINE_PAGES * PAGE_4K, KERNEL_TEXT_4K, "kpti-trampoline")
        )
        truth["trampoline_base"] = tramp
        return regions, GroundTruth(**truth)

    if kind is ScenarioKind.AmdLinux:
        split_slots = {off // PAGE_2M for off in AMD_4K_OFFSETS}
        for s in range(image_slots):
            if s not in split_slots:
                regions.append(
                    Region(base + s * PAGE_2M, PAGE_2M, KERNEL_TEXT_2M, "kernel-text")
                )
        amd_pages = tuple(base + off for off in AMD_4K_OFFSETS)
        for page in amd_pages:
            regions.append(Region(page, PAGE_4K, KERNEL_TEXT_4K, "kernel-text-4k"))
        truth["amd_4k_pages"] = amd_pages
    else:
        regions.append(Region(base, size, KERNEL_TEXT_2M, "kernel-text"))

    if kind is ScenarioKind.LinuxFlare or Mitigation.FlareDummyMap in spec.mitigations:
        if base > KERNEL_TEXT_START:
            regions.append(
                Region(KERNEL_TEXT_START, base - KERNEL_TEXT_START, DUMMY_2M, "flare-dummy")
            )
        if base + size < KERNEL_TEXT_END:
            regions.append(
                Region(base + size, KERNEL_TEXT_END - base - size, DUMMY_2M, "flare-dummy")
            )

    mod_regions, placements = _place_modules(spec, rng)
    regions.extend(mod_regions)
    truth["module_placements"] = placements
    return regions, GroundTruth(**truth)


def _windows(spec: ScenarioSpec, rng: SplitMix64) -> tuple[list[Region], GroundTruth]:
    base = WINDOWS_START + rng.below(WINDOWS_SLOTS) * PAGE_2M
    if spec.kind is ScenarioKind.Windows:
        region = Region(base, WINDOWS_KERNEL_PAGES * PAGE_2M, KERNEL_TEXT_2M, "windows-kernel")
        return [region], GroundTruth(kernel_base=base, kernel_size=region.length)
    if spec.kvas_offset % PAGE_4K:
        raise ConfigError("KVAS offset must be 4-KiB aligned")
    shadow = base + spec.kvas_offset
    region = Region(shadow, KVAS_PAGES * PAGE_4K, KERNEL_TEXT_4K, "kvas-shadow")
    return [region], GroundTruth(
        kernel_base=base, kernel_size=WINDOWS_KERNEL_PAGES * PAGE_2M, kvas_base=shadow
    )


def _userspace(spec: ScenarioSpec, rng: SplitMix64) -> tuple[list[Region], GroundTruth]:
    bits = spec.userspace_window_bits
    if not 1 <= bits <= 28:
        raise ConfigError("userspace_window_bits must be in 1..28")
    window = 1 << bits
    regions: list[Region] = []
    maps: list[tuple] = []

    text, ro, rw = PROGRAM_SECTIONS
    prog_pages = (text + ro + rw) // PAGE_4K + 2
    prog = USER_CODE_BASE + rng.below(max(1, window - prog_pages)) * PAGE_4K
    cursor = prog
    for size, perms, label in ((text, "r-x", "text"), (ro, "r--", "rodata"), (rw, "rw-", "data")):
        attrs = PageAttributes.user(perms, dirty=perms == "rw-")
        regions.append(Region(cursor, size, attrs, f"program:{label}"))
        maps.append((cursor, cursor + size, perms, "program"))
        cursor += size
    # a page present in the page tables but missing from the maps listing
    regions.append(Region(cursor + PAGE_4K, PAGE_4K, PageAttributes.user("rw-", True), "unlisted"))

    libs = list(spec.library_catalog)
    rng.shuffle(libs)
    lib_base = USER_LIB_BASE + rng.below(window) * PAGE_4K
    cursor = lib_base
    placements = []
    for name, sections in libs:
        if len(sections) != 4 or any(s <= 0 or s % PAGE_4K for s in sections):
            raise ConfigError(f"library {name!r} needs four 4-KiB-multiple sections")
        placements.append((name, cursor, tuple(sections)))
        for size, perms in zip(sections, ("r-x", "---", "r--", "rw-")):
            attrs = PageAttributes.user(perms, dirty=perms == "rw-")
            regions.append(Region(cursor, size, attrs, f"lib:{name}:{perms}"))
            maps.append((cursor, cursor + size, perms, name))
            cursor += size
    regions.append(Region(cursor + PAGE_4K, PAGE_4K, PageAttributes.user("rw-", True), "unlisted"))
    return regions, GroundTruth(
        program_base=prog, library_placements=tuple(placements), maps_fixture=tuple(maps)
    )


def _check_regions(regions: Sequence[Region]) -> None:
    prev_end = None
    for r in regions:
        if r.length <= 0:
            raise ConfigError(f"region {r.label!r} has non-positive length")
        if r.base % r.page_size or r.length % r.page_size:
            raise ConfigError(f"region {r.label!r} at {r.base:#x} is not page aligned")
        check_canonical(r.base)
        check_canonical(r.end - 1)
        if (r.base < USER_SPACE_END) != (r.end - 1 < USER_SPACE_END):
            raise ConfigError(f"region {r.label!r} crosses the canonical hole")
        if prev_end is not None and r.base < prev_end:
            raise ConfigError(f"region {r.label!r} at {r.base:#x} overlaps its predecessor")
        prev_end = r.end


def build_address_space(spec: ScenarioSpec) -> AddressSpace:
    """Lay out a scenario. Deterministic in ``(spec.kind, spec.seed)``."""
    if not spec.module_catalog and spec.kind in LINUX_KINDS:
        spec = replace(spec, module_catalog=default_module_catalog())
    if not spec.library_catalog and spec.kind is ScenarioKind.Userspace:
        spec = replace(spec, library_catalog=default_library_catalog())
    _validate_catalog(spec)
    rng = SplitMix64(spec.seed)
    if spec.kind in LINUX_KINDS:
        regions, truth = _linux(spec, rng)
    elif spec.kind in (ScenarioKind.Windows, ScenarioKind.WindowsKvas):
        regions, truth = _windows(spec, rng)
    elif spec.kind is ScenarioKind.Userspace:
        regions, truth = _userspace(spec, rng)
    else:
        regions, truth = list(spec.custom_regions), GroundTruth()
    regions.sort(key=lambda r: r.base)
    _check_regions(regions)
    return AddressSpace(tuple(regions), truth, spec)


# --------------------------------------------------------------------------
# JSON scenario files


def _int(value: Any) -> int:
    if isinstance(value, str):
        return int(value, 0)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}")
    return value


def _enum(cls, value: str):
    norm = str(value).replace("_", "").replace("-", "").lower()
    for member in cls:
        if member.value.lower() == norm:
            return member
    raise ConfigError(f"unknown {cls.__name__} {value!r}")


def _region_from_json(d: Mapping[str, Any]) -> Region:
    size_class = {
        "4k": SizeClass.Page4K,
        "page4k": SizeClass.Page4K,
        "2m": SizeClass.Page2M,
        "page2m": SizeClass.Page2M,
        "1g": SizeClass.Page1G,
        "page1g": SizeClass.Page1G,
    }.get(str(d.get("size_class", "4k")).lower())
    if size_class is None:
        raise ConfigError(f"bad size_class {d.get('size_class')!r}")
    perms = d.get("perms", "r--")
    user = bool(d.get("user", True))
    present = perms != "---" and bool(d.get("present", True))
    attrs = PageAttributes(
        present=present,
        user_accessible=user,
        writable=len(perms) == 3 and perms[1] == "w",
        executable=len(perms) == 3 and perms[2] == "x",
        dirty=bool(d.get("dirty", False)),
        size_class=size_class,
    )
    return Region(_int(d["base"]), _int(d["length"]), attrs, str(d.get("label", "")))


def scenario_from_dict(data: Mapping[str, Any], base_dir: Path | None = None) -> ScenarioSpec:
    try:
        kind = _enum(ScenarioKind, data["kind"])
    except KeyError:
        raise ConfigError("scenario needs a 'kind'") from None
    kwargs: dict[str, Any] = {"kind": kind}
    if "seed" in data:
        kwargs["seed"] = _int(data["seed"])
    if "mitigations" in data:
        kwargs["mitigations"] = frozenset(_enum(Mitigation, m) for m in data["mitigations"])
    for key in ("trampoline_offset", "kvas_offset", "userspace_window_bits", "kernel_image_size"):
        if key in data:
            kwargs[key] = _int(data[key])
    if "nokaslr" in data:
        kwargs["nokaslr"] = bool(data["nokaslr"])
    if "profile" in data:
        kwargs["profile"] = str(data["profile"])
    cat = data.get("module_catalog")
    if isinstance(cat, str):
        kwargs["module_catalog"] = load_module_catalog(_resolve(cat, base_dir))
    elif isinstance(cat, list):
        kwargs["module_catalog"] = tuple((m["name"], _int(m["size"])) for m in cat)
    lcat = data.get("library_catalog")
    if isinstance(lcat, str):
        kwargs["library_catalog"] = load_library_catalog(_resolve(lcat, base_dir))
    elif isinstance(lcat, list):
        kwargs["library_catalog"] = tuple(
            (m["name"], tuple(_int(s) for s in m["section_sizes"])) for m in lcat
        )
    if "custom_regions" in data:
        kwargs["custom_regions"] = tuple(_region_from_json(r) for r in data["custom_regions"])
    try:
        return ScenarioSpec(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _resolve(path: str, base_dir: Path | None) -> Path:
    p = Path(path)
    if not p.is_absolute() and base_dir is not None:
        p = base_dir / p
    return p


def load_scenario(path: str | Path) -> ScenarioSpec:
    """Read a scenario JSON file. Bundled presets may be named without a path."""
    p = Path(path)
    if not p.exists():
        preset = _data_path(f"scenarios/{p.name}")
        if not p.suffix:
            preset = _data_path(f"scenarios/{p.name}.json")
        if preset.is_file():
            return scenario_from_dict(json.loads(preset.read_text()))
        raise ConfigError(f"scenario file {path} not found")
    try:
        data = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("scenario file must hold a JSON object")
    return scenario_from_dict(data, p.parent)
