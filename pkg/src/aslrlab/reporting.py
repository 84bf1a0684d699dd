"""Sample CSV files, latency histograms and plain-text tables."""
from __future__ import annotations

import csv
import io
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError

SAMPLES_HEADER = ["addr", "kind", "latency"]
HIST_HEADER = ["bucket_start", "bucket_end", "count"]


def write_samples_csv(rows: Iterable[tuple], path: str | Path) -> int:
    """Write ``(addr, kind, latency)`` rows; returns the number of rows."""
    n = 0
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLES_HEADER)
        for addr, kind, lat in rows:
            w.writerow([f"{addr:#x}", kind, int(lat)])
            n += 1
    return n


def read_latencies(path: str | Path) -> list[int]:
    """Latency column of a samples CSV. An empty file holds no samples."""
    try:
        text = Path(path).read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not text.strip():
        return []
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if "latency" not in header:
        raise ConfigError(f"{path}: no 'latency' column in header {header}")
    col = header.index("latency")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ConfigError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            out.append(int(row[col]))
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: latency {row[col]!r} is not an integer") from None
    return out


def histogram(latencies: Sequence[int], bucket_width: int = 1) -> list[tuple[int, int]]:
    """``(bucket_start, count)`` for every non-empty bucket, in ascending order."""
    if bucket_width < 1:
        raise ConfigError("bucket width must be >= 1")
    counts = Counter((int(x) // bucket_width) * bucket_width for x in latencies)
    return sorted(counts.items())


def histogram_csv(hist: list[tuple[int, int]], bucket_width: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HIST_HEADER)
    for start, count in hist:
        w.writerow([start, start + bucket_width - 1, count])
    return buf.getvalue()


def render_histogram(hist: list[tuple[int, int]], bucket_width: int, width: int = 60) -> str:
    """ASCII bars, one line per bucket, scaled to the tallest bucket."""
    if not hist:
        return "(no samples)\n"
    peak = max(c for _, c in hist)
    label_w = max(len(f"{s}-{s + bucket_width - 1}") for s, _ in hist)
    count_w = len(str(peak))
    lines = []
    for start, count in hist:
        label = f"{start}" if bucket_width == 1 else f"{start}-{start + bucket_width - 1}"
        bar = "#" * max(1, round(width * count / peak))
        lines.append(f"{label:>{label_w}} {count:>{count_w}} {bar}")
    return "\n".join(lines) + "\n"


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def table_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()
