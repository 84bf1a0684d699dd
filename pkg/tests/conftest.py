from __future__ import annotations

import re

import pytest
from hypothesis import HealthCheck, settings

from aslrlab.prober import SimProber
from aslrlab.sim import MicroarchState
from aslrlab.space import ScenarioKind, ScenarioSpec, build_address_space

settings.register_profile(
    "lab", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=50
)
settings.load_profile("lab")

# LinuxDefault seed whose kernel lands in slot 271 (base 0xffffffffa1e00000)
SEED_SLOT_271 = 70


def quiet_state(spec: ScenarioSpec | None = None, profile=None, seed: int = 0, **kw) -> MicroarchState:
    spec = spec or ScenarioSpec()
    return MicroarchState(build_address_space(spec), profile, seed, noise=False, **kw)


def sim_prober(spec: ScenarioSpec | None = None, noise: bool = False, seed: int = 0, profile=None, **kw):
    spec = spec or ScenarioSpec()
    return SimProber(MicroarchState(build_address_space(spec), profile, seed, noise=noise, **kw))


@pytest.fixture
def linux_space():
    return build_address_space(ScenarioSpec(ScenarioKind.LinuxDefault, seed=SEED_SLOT_271))


# ---------------------------------------------------------------- acceptance summary

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")
_acceptance: dict[int, list] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None or (report.when != "call" and not report.failed and not report.skipped):
        return
    details = [v for k, v in report.user_properties if k == "detail"]
    _acceptance.setdefault(int(m.group(1)), []).append((report.outcome, details))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        outcomes = [o for o, _ in _acceptance[n]]
        verdict = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        details = "; ".join(d for _, ds in _acceptance[n] for d in ds)
        terminalreporter.write_line(f"criterion {n:>2}: {verdict}  {details}".rstrip())
