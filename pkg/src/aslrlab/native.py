"""Hardware backend: times real AVX masked loads/stores with rdtscp.

The probe is compiled on first use with the system C compiler and loaded
through ctypes. Every probe uses an all-zero mask, so probing an arbitrary
address cannot fault. The timed region is fenced on both sides (``mfence;
lfence; rdtscp ... rdtscp; lfence``) and the process is pinned to one core.
"""
from __future__ import annotations

import ctypes
import hashlib
import mmap
import os
import shutil
import subprocess
import tempfile
from pathlib import Path

import numpy as np

from .errors import BackendError, CapabilityError
from .prober import Backend, Prober
from .sim import LOAD, STORE, OpKind, parse_kind

REQUIRED_FLAGS = ("avx", "rdtscp", "constant_tsc", "nonstop_tsc")
PAGE = mmap.PAGESIZE

C_SOURCE = r"""
#include <stdint.h>
#include <stddef.h>
#include <immintrin.h>
#include <x86intrin.h>

static inline uint64_t start_clock(void) {
    unsigned aux;
    _mm_mfence();
    _mm_lfence();
    uint64_t t = __rdtscp(&aux);
    _mm_lfence();
    return t;
}

static inline uint64_t stop_clock(void) {
    unsigned aux;
    uint64_t t = __rdtscp(&aux);
    _mm_lfence();
    return t;
}

uint64_t probe_load(uint64_t addr) {
    __m256i mask = _mm256_setzero_si256();
    uint64_t t0 = start_clock();
    __m256 v = _mm256_maskload_ps((const float *)addr, mask);
    uint64_t t1 = stop_clock();
    volatile float sink = _mm256_cvtss_f32(v);
    (void)sink;
    return t1 - t0;
}

uint64_t probe_store(uint64_t addr) {
    __m256i mask = _mm256_setzero_si256();
    __m256 v = _mm256_setzero_ps();
    uint64_t t0 = start_clock();
    _mm256_maskstore_ps((float *)addr, mask, v);
    uint64_t t1 = stop_clock();
    return t1 - t0;
}

void probe_many(const uint64_t *addrs, size_t n, int store, int repeats,
                uint64_t *out) {
    for (size_t i = 0; i < n; i++)
        for (int r = 0; r < repeats; r++)
            out[i * repeats + r] = store ? probe_store(addrs[i]) : probe_load(addrs[i]);
}

void touch_pages(volatile uint8_t *buf, size_t pages, size_t stride) {
    for (size_t i = 0; i < pages; i++)
        (void)buf[i * stride];
}
"""


def _cpu_flags() -> set[str]:
    try:
        text = Path("/proc/cpuinfo").read_text()
    except OSError:
        return set()
    for line in text.splitlines():
        if line.startswith("flags"):
            return set(line.split(":", 1)[1].split())
    return set()


def _compiler() -> str | None:
    for cc in (os.environ.get("CC"), "cc", "gcc", "clang"):
        if cc and shutil.which(cc):
            return cc
    return None


def available() -> bool:
    """True when the CPU has AVX and an invariant, serializable cycle counter."""
    flags = _cpu_flags()
    return all(f in flags for f in REQUIRED_FLAGS) and _compiler() is not None


def _build_library() -> ctypes.CDLL:
    cc = _compiler()
    if cc is None:
        raise CapabilityError("no C compiler found for the native probe")
    digest = hashlib.sha256(C_SOURCE.encode()).hexdigest()[:16]
    cache = Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "aslrlab"
    try:
        cache.mkdir(parents=True, exist_ok=True)
    except OSError:
        cache = Path(tempfile.gettempdir()) / "aslrlab"
        cache.mkdir(parents=True, exist_ok=True)
    lib = cache / f"probe-{digest}.so"
    if not lib.exists():
        src = cache / f"probe-{digest}.c"
        src.write_text(C_SOURCE)
        tmp = cache / f"probe-{digest}.{os.getpid()}.so"
        cmd = [cc, "-O2", "-mavx2", "-shared", "-fPIC", "-o", str(tmp), str(src)]
        res = subprocess.run(cmd, capture_output=True, text=True)
        if res.returncode != 0:
            raise BackendError(f"native probe failed to compile: {res.stderr.strip()}")
        os.replace(tmp, lib)
    dll = ctypes.CDLL(str(lib))
    dll.probe_load.restype = ctypes.c_uint64
    dll.probe_load.argtypes = [ctypes.c_uint64]
    dll.probe_store.restype = ctypes.c_uint64
    dll.probe_store.argtypes = [ctypes.c_uint64]
    dll.probe_many.restype = None
    dll.probe_many.argtypes = [
        ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int, ctypes.c_int, ctypes.c_void_p
    ]
    dll.touch_pages.restype = None
    dll.touch_pages.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_size_t]
    return dll


_libc = ctypes.CDLL(None, use_errno=True)
_libc.mmap.restype = ctypes.c_void_p
_libc.mmap.argtypes = [
    ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int, ctypes.c_int, ctypes.c_int, ctypes.c_long
]
_libc.mprotect.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]
_libc.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]

_PROT = {"r": mmap.PROT_READ, "w": mmap.PROT_WRITE, "x": mmap.PROT_EXEC}
_MAP_FAILED = ctypes.c_void_p(-1).value


def _mmap(length: int, prot: int) -> int:
    addr = _libc.mmap(None, length, prot, mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS, -1, 0)
    if addr is None or addr == _MAP_FAILED:
        raise BackendError(f"mmap failed: errno {ctypes.get_errno()}")
    return addr


class NativeProber(Prober):
    backend = Backend.NativeHardware

    def __init__(self, cpu: int | None = None, tlb_entries: int = 1536, slack: float = 0.25):
        if not available():
            raise CapabilityError("CPU lacks AVX or an invariant rdtscp cycle counter")
        if hasattr(os, "sched_setaffinity"):
            allowed = sorted(os.sched_getaffinity(0))
            self.cpu = allowed[0] if cpu is None else cpu
            os.sched_setaffinity(0, {self.cpu})
        self._dll = _build_library()
        self._count = 0
        self._pages: list[int] = []
        # one touched page per 2 MiB so eviction also churns page-walk caches
        self._evict_pages = tlb_entries + int(round(slack * tlb_entries))
        self._evict_stride = 1 << 21
        self._evict_len = self._evict_pages * self._evict_stride
        self._evict_buf = _mmap(self._evict_len, mmap.PROT_READ | mmap.PROT_WRITE)
        # populate one byte per stride; the rest of the range stays untouched
        for i in range(self._evict_pages):
            ctypes.c_uint8.from_address(self._evict_buf + i * self._evict_stride).value = 1

    def probe(self, addr: int, kind: OpKind = LOAD) -> int:
        kind = parse_kind(kind)
        self._count += 1
        fn = self._dll.probe_store if kind is STORE else self._dll.probe_load
        return int(fn(addr))

    def probe_many(self, addrs, kind=LOAD, repeats=1, evict_each=False):
        kind = parse_kind(kind)
        n = len(addrs)
        out = np.empty((n, repeats), dtype=np.uint64)
        if evict_each:
            for i, a in enumerate(addrs):
                self.evict_tlb()
                arr = np.array([a], dtype=np.uint64)
                self._dll.probe_many(arr.ctypes.data, 1, int(kind is STORE), repeats, out[i].ctypes.data)
        elif n:
            arr = np.ascontiguousarray(np.array([int(a) for a in addrs], dtype=np.uint64))
            self._dll.probe_many(arr.ctypes.data, n, int(kind is STORE), repeats, out.ctypes.data)
        self._count += n * repeats
        return out.astype(np.int64)

    def evict_tlb(self) -> None:
        self._dll.touch_pages(self._evict_buf, self._evict_pages, self._evict_stride)

    def alloc_calibration_page(self, perms: str = "rw-", touched: bool = False) -> int:
        addr = _mmap(PAGE, mmap.PROT_READ | mmap.PROT_WRITE)
        if touched:
            ctypes.c_uint8.from_address(addr).value = 1
        prot = 0
        for ch in perms:
            prot |= _PROT.get(ch, 0)
        if _libc.mprotect(addr, PAGE, prot) != 0:
            raise BackendError(f"mprotect failed: errno {ctypes.get_errno()}")
        self._pages.append(addr)
        return addr

    def unmapped_page(self) -> int:
        """Address of a page that was mapped and then released."""
        addr = _mmap(PAGE, mmap.PROT_READ)
        _libc.munmap(addr, PAGE)
        return addr

    @property
    def probes_issued(self) -> int:
        return self._count
