"""Result records, manifest headers and aligned text tables."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from . import __version__


class Record(NamedTuple):
    domain: str
    method: str
    metric: str
    seed: str
    value: float | None


def version_string() -> str:
    return f"mergelab v{__version__}"


def manifest_header(config_digest: str, seed: int | str | Sequence[int]) -> str:
    if isinstance(seed, (list, tuple)):
        seed = ",".join(str(s) for s in seed)
    return f"{version_string()}\tconfig={config_digest}\tseed={seed}"


def comment_block(header: str) -> str:
    return "".join(f"# {line}\n" for line in header.splitlines())


def fmt_value(value: float | None, digits: int = 6) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "NA"
    return f"{value:.{digits}f}"


def write_records(path: str | Path, records: Iterable[Record], header: str) -> Path:
    """`domain<TAB>method<TAB>metric<TAB>seed<TAB>value` lines; NA marks unavailable values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(comment_block(header))
        for r in records:
            fh.write(f"{r.domain}\t{r.method}\t{r.metric}\t{r.seed}\t{fmt_value(r.value)}\n")
    return path


def read_records(path: str | Path) -> list[Record]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        domain, method, metric, seed, value = line.split("\t")
        out.append(Record(domain, method, metric, seed, None if value == "NA" else float(value)))
    return out


def write_trajectory(path: str | Path, rows: Iterable[tuple[int, str, float]], header: str) -> Path:
    """`step<TAB>name<TAB>value` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(comment_block(header))
        for step, name, value in rows:
            fh.write(f"{step}\t{name}\t{value:.8g}\n")
    return path


def format_table(headers: Sequence[str], rows: Sequence[Sequence[str]], title: str = "") -> str:
    """Left-aligned first column, right-aligned others, two-space gutters."""
    cells = [list(headers)] + [list(r) for r in rows]
    widths = [max(len(row[c]) for row in cells) for c in range(len(headers))]

    def line(row):
        parts = [row[0].ljust(widths[0])] + [row[c].rjust(widths[c]) for c in range(1, len(row))]
        return "  ".join(parts).rstrip()

    out = [title] if title else []
    out.append(line(cells[0]))
    out.append("  ".join("-" * w for w in widths))
    out.extend(line(r) for r in cells[1:])
    return "\n".join(out) + "\n"


def write_text(path: str | Path, text: str, header: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(comment_block(header) + text, encoding="utf-8", newline="\n")
    return path


class Manifest:
    """Line-per-artifact index at <out>/manifest.tsv, kept sorted so reruns rewrite identical bytes."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def _read(self) -> dict[str, str]:
        if not self.path.exists():
            return {}
        entries = {}
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if line and not line.startswith("#"):
                entries[line.split("\t", 1)[0]] = line
        return entries

    def record(self, artifact: str, **fields) -> None:
        entries = self._read()
        entries[artifact] = "\t".join([artifact] + [f"{k}={fields[k]}" for k in sorted(fields)])
        self.path.parent.mkdir(parents=True, exist_ok=True)
        body = "".join(entries[k] + "\n" for k in sorted(entries))
        self.path.write_text(comment_block(version_string()) + body, encoding="utf-8", newline="\n")

    def lookup(self, artifact: str) -> dict[str, str] | None:
        line = self._read().get(artifact)
        if line is None:
            return None
        return dict(part.split("=", 1) for part in line.split("\t")[1:])
