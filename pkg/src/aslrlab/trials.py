"""Campaign registry, ground-truth scoring and the Monte-Carlo trial runner."""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import campaigns as C
from .errors import ConfigError, UsageError
from .prober import MeasurePolicy, Prober, make_prober, parse_backend, parse_policy, Backend
from .rng import derive_seed
from .sim import MicroarchState, get_profile
from .space import (
    PAGE_4K,
    AddressSpace,
    ScenarioKind,
    ScenarioSpec,
    build_address_space,
)
from .prober import SimProber

NOISE_STREAM = 0x6E6F697365


# ------------------------------------------------------------ scoring


def score_base(report: C.ScanReport, space: AddressSpace) -> float:
    return float(report.detected_base is not None and report.detected_base == space.truth.kernel_base)


def unique_modules_correct(report: C.ScanReport, space: AddressSpace) -> bool:
    """Every module whose size is unique in the catalog is found, by name, at its base."""
    catalog = space.spec.module_catalog
    by_size = C.catalog_index(catalog)
    found = {r.candidates[0]: r.base for r in report.regions if len(r.candidates) == 1}
    for name, base, size in space.truth.module_placements:
        if len(by_size[size]) == 1 and found.get(name) != base:
            return False
    return True


def score_modules(report: C.ScanReport, space: AddressSpace) -> float:
    return float(unique_modules_correct(report, space))


def truth_mapped_pages(space: AddressSpace, windows) -> set[int]:
    pages = set()
    for start, end in windows:
        for r in space.regions:
            if r.end <= start or r.base >= end or not r.attrs.present:
                continue
            lo, hi = max(r.base, start), min(r.end, end)
            pages.update(range(lo & ~(PAGE_4K - 1), hi, PAGE_4K))
    return pages


def score_sweep(report: C.ScanReport, space: AddressSpace) -> float:
    windows = [(int(a, 16), int(b, 16)) for a, b in report.details["windows"]]
    found = set()
    for r in report.regions:
        found.update(range(r.base, r.base + r.size, PAGE_4K))
    return float(found == truth_mapped_pages(space, windows))


def score_libraries(report: C.ScanReport, space: AddressSpace) -> float:
    libs = space.truth.library_placements
    if not libs:
        return 1.0
    got = {r.base: r.candidates for r in report.regions}
    ok = sum(1 for name, base, _ in libs if got.get(base) == (name,))
    return ok / len(libs)


def score_accuracy_field(report: C.ScanReport, space: AddressSpace) -> float:
    return float(report.per_trial_accuracy)


# ------------------------------------------------------------ registry


def _monitor(prober: Prober, policy: MeasurePolicy, ticks: int = 100) -> C.ScanReport:
    space = prober.space
    mods = [m for m in space.truth.module_placements if m[2] >= 10 * PAGE_4K]
    if not mods:
        raise UsageError("monitor needs a module of at least 10 pages")
    name, base, _ = mods[0]
    schedule = C.square_wave(ticks)
    pages = [base + i * PAGE_4K for i in range(10)]
    before = prober.probes_issued
    t0 = time.perf_counter()
    trace = C.monitor_behavior(prober, base, 10, ticks, C.kernel_event_driver(prober, pages, schedule))
    f1 = C.f1_score(trace.verdicts, schedule)
    report = C.ScanReport("monitor", C.Status.Found, detected_base=base)
    report.per_trial_accuracy = f1
    report.details = {
        "module": name,
        "separator": round(trace.separator, 3),
        "f1": f1,
        "active_ticks": sum(trace.verdicts),
    }
    report.samples = [
        ("tick", np.arange(len(trace.ticks), dtype=np.uint64), np.array([t.latency for t in trace.ticks]))
    ]
    report.probes_issued = prober.probes_issued - before
    report.elapsed = time.perf_counter() - t0
    return report


@dataclass(frozen=True)
class Campaign:
    name: str
    run: Callable[[Prober, MeasurePolicy], C.ScanReport]
    score: Callable[[C.ScanReport, AddressSpace], float]
    budget: int  # documented probes per scan before the policy multiplier
    help: str = ""


CAMPAIGNS: dict[str, Campaign] = {
    c.name: c
    for c in (
        Campaign("scan-base", lambda p, pol: C.scan_kernel_base(p, pol), score_base, 512,
                 "kernel base from 512 2-MiB slots"),
        Campaign("scan-modules", lambda p, pol: C.scan_modules(p, pol), score_modules, 16384,
                 "kernel modules from 16384 4-KiB slots"),
        Campaign("scan-kpti", lambda p, pol: C.scan_kpti(p, pol), score_base, 512,
                 "kernel base via the KPTI trampoline"),
        Campaign("scan-amd", lambda p, pol: C.scan_amd_kernel(p, pol), score_base, 512 + 6 * 512,
                 "AMD kernel base via its 4-KiB pages"),
        Campaign("scan-windows", lambda p, pol: C.scan_windows(p, pol), score_base, 262144,
                 "Windows kernel region (5 x 2 MiB)"),
        Campaign("scan-kvas", lambda p, pol: C.scan_kvas(p, pol), score_base, 262144,
                 "Windows kernel base via the KVAS shadow pages"),
        Campaign("sweep-user", lambda p, pol: C.sweep_userspace(p, pol), score_sweep, 0,
                 "all mapped user pages in the randomization windows"),
        Campaign("fingerprint-libs", lambda p, pol: C.fingerprint_libraries(p, pol), score_libraries, 0,
                 "shared libraries by section-size signature"),
        Campaign("monitor", _monitor, score_accuracy_field, 1000,
                 "module activity through the TLB (F1 of a square wave)"),
        Campaign("mitigation-pt", lambda p, pol: C.evaluate_mitigation(p, "page_table", pol),
                 score_accuracy_field, 512, "balanced accuracy of the page-table scan"),
        Campaign("mitigation-tlb", lambda p, pol: C.evaluate_mitigation(p, "tlb", pol),
                 score_accuracy_field, 512, "balanced accuracy of the TLB scan"),
    )
}


def get_campaign(name: str) -> Campaign:
    try:
        return CAMPAIGNS[name]
    except KeyError:
        raise UsageError(f"unknown campaign {name!r}; choose from {', '.join(CAMPAIGNS)}") from None


# ------------------------------------------------------------ trials


@dataclass
class TrialResult:
    trial: int
    layout_seed: int
    noise_seed: int
    report: C.ScanReport
    score: float | None


@dataclass
class TrialSummary:
    campaign: str
    scenario: str
    policy: str
    results: list = field(default_factory=list)

    @property
    def scores(self) -> list[float]:
        return [r.score for r in self.results if r.score is not None]

    @property
    def accuracy(self) -> float | None:
        s = self.scores
        return float(np.mean(s)) if s else None

    @property
    def found(self) -> int:
        return sum(1 for r in self.results if r.report.status is C.Status.Found)

    @property
    def mean_probes(self) -> float:
        return float(np.mean([r.report.probes_issued for r in self.results])) if self.results else 0.0

    @property
    def mean_elapsed(self) -> float:
        return float(np.mean([r.report.elapsed for r in self.results])) if self.results else 0.0

    def to_dict(self) -> dict:
        return {
            "campaign": self.campaign,
            "scenario": self.scenario,
            "policy": self.policy,
            "trials": len(self.results),
            "accuracy": self.accuracy,
            "found": self.found,
            "mean_probes": self.mean_probes,
            "reports": [
                {
                    "trial": r.trial,
                    "layout_seed": r.layout_seed,
                    "noise_seed": r.noise_seed,
                    "score": r.score,
                    **r.report.to_dict(),
                }
                for r in self.results
            ],
        }


def trial_seeds(seed: int, trial: int) -> tuple[int, int]:
    return derive_seed(seed, trial), derive_seed(seed ^ NOISE_STREAM, trial)


def resolve_profile(spec: ScenarioSpec, noise_sigma: float | None):
    profile = get_profile(spec.profile)
    if noise_sigma is not None:
        if noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        profile = replace(profile, noise_sigma=float(noise_sigma))
    return profile


def run_trial(
    spec: ScenarioSpec,
    campaign: str,
    trial: int,
    seed: int = 0,
    policy: MeasurePolicy | str | None = None,
    noise: bool = True,
    noise_sigma: float | None = None,
    keep_samples: bool = False,
    fixed_layout: bool = False,
) -> TrialResult:
    """One cell: fresh layout, fresh microarchitectural state, one campaign run.

    ``fixed_layout`` keeps ``spec.seed`` as the layout seed for every trial
    (only the noise stream changes).
    """
    camp = get_campaign(campaign)
    pol = parse_policy(policy)
    layout_seed, noise_seed = trial_seeds(seed, trial)
    if fixed_layout:
        layout_seed = spec.seed
    space = build_address_space(spec.with_seed(layout_seed))
    state = MicroarchState(space, resolve_profile(spec, noise_sigma), noise_seed, noise=noise)
    prober = SimProber(state)
    report = camp.run(prober, pol)
    score = camp.score(report, space)
    if report.per_trial_accuracy is None:
        report.per_trial_accuracy = score
    if not keep_samples:
        report.samples = []
    return TrialResult(trial, layout_seed, noise_seed, report, score)


def _run_trial_args(args) -> TrialResult:
    return run_trial(*args)


def run_trials(
    spec: ScenarioSpec,
    campaign: str,
    trials: int = 1,
    seed: int = 0,
    policy: MeasurePolicy | str | None = None,
    noise: bool = True,
    noise_sigma: float | None = None,
    workers: int = 1,
    keep_first_samples: bool = False,
    fixed_layout: bool = False,
    scenario_name: str = "",
) -> TrialSummary:
    """Run ``trials`` independent cells and score each against ground truth.

    Results are ordered by trial index whatever the number of workers, so
    the summary is reproducible from ``(spec, campaign, seed, policy)``.
    """
    if trials < 1:
        raise UsageError("trials must be >= 1")
    get_campaign(campaign)
    pol = parse_policy(policy)
    jobs = [
        (spec, campaign, i, seed, pol, noise, noise_sigma, keep_first_samples and i == 0, fixed_layout)
        for i in range(trials)
    ]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_run_trial_args, jobs, chunksize=max(1, trials // (4 * workers))))
    else:
        results = [_run_trial_args(j) for j in jobs]
    results.sort(key=lambda r: r.trial)
    return TrialSummary(campaign, scenario_name or spec.kind.value, str(pol), results)


def run_native(campaign: str, policy: MeasurePolicy | str | None = None, allow_native: bool = False) -> C.ScanReport:
    """Run a campaign once against the host CPU. No ground truth, so no score."""
    camp = get_campaign(campaign)
    prober = make_prober(backend=Backend.NativeHardware, allow_native=allow_native)
    return camp.run(prober, parse_policy(policy))


# ------------------------------------------------------------ table 1


TABLE1_CELLS = (
    ("alderlake", ScenarioKind.LinuxDefault, "scan-base", "Kernel base (alderlake)"),
    ("alderlake", ScenarioKind.LinuxDefault, "scan-modules", "Kernel modules (alderlake)"),
    ("icelake", ScenarioKind.LinuxDefault, "scan-base", "Kernel base (icelake)"),
    ("icelake", ScenarioKind.LinuxDefault, "scan-modules", "Kernel modules (icelake)"),
    ("zen3", ScenarioKind.AmdLinux, "scan-amd", "Kernel base (zen3)"),
)

TABLE1_HEADER = ["target", "probes", "accuracy_pct", "wall_ms_per_trial"]


def table1(
    trials: int = 100,
    seed: int = 0,
    policy: MeasurePolicy | str | None = None,
    cells=TABLE1_CELLS,
    workers: int = 1,
) -> list[list]:
    """One row per cell. Wall time is this simulator's, not comparable to hardware."""
    rows = []
    for profile, kind, campaign, label in cells:
        spec = ScenarioSpec(kind=kind, profile=profile)
        summary = run_trials(spec, campaign, trials, seed, policy, workers=workers)
        rows.append(
            [
                label,
                int(round(summary.mean_probes)),
                f"{100 * summary.accuracy:.2f}",
                f"{1000 * summary.mean_elapsed:.3f}",
            ]
        )
    return rows
