"""Single-file checkpoint container.

Layout: a UTF-8 text manifest of `key: value` lines ending with a line
`---`, then every layer's weight and bias as little-endian float32 in
manifest order. Writing the same ParamSet twice gives identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import IncompatibleError, InputError
from .recmodel import ParamSet

MAGIC = "mergelab-checkpoint"
FORMAT_VERSION = 1
_END = "---"
_DTYPE = np.dtype("<f4")


def _fmt_shape(shape: tuple[int, ...]) -> str:
    return "x".join(str(n) for n in shape)


def to_bytes(params: ParamSet) -> bytes:
    lines = [
        f"{MAGIC} {FORMAT_VERSION}",
        f"role: {params.role}",
        f"domain_id: {params.domain_id}",
        f"seed: {params.seed}",
    ]
    for key in sorted(params.extra):
        value = str(params.extra[key])
        if "\n" in value or ":" in key:
            raise InputError(f"checkpoint metadata {key!r} must be a single line")
        lines.append(f"meta.{key}: {value}")
    lines.append(f"layers: {params.n_layers}")
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        lines.append(f"layer.{l}.weight: {_fmt_shape(w.shape)}")
        lines.append(f"layer.{l}.bias: {_fmt_shape(b.shape)}")
    lines.append(_END)
    header = ("\n".join(lines) + "\n").encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype=_DTYPE).tobytes() for a in params.arrays())
    return header + body


def from_bytes(blob: bytes, source: str = "<bytes>") -> ParamSet:
    marker = ("\n" + _END + "\n").encode("utf-8")
    cut = blob.find(marker)
    if cut < 0:
        raise InputError(f"{source}: not a checkpoint (no manifest terminator)")
    header = blob[:cut].decode("utf-8").split("\n")
    body = blob[cut + len(marker):]
    first = header[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise InputError(f"{source}: not a checkpoint")
    if int(first[1]) != FORMAT_VERSION:
        raise InputError(f"{source}: unsupported checkpoint version {first[1]}")
    fields: dict[str, str] = {}
    for line in header[1:]:
        key, sep, value = line.partition(": ")
        if not sep:
            key, value = line.rstrip(":"), ""
        fields[key] = value
    n_layers = int(fields["layers"])
    shapes = []
    for l in range(n_layers):
        for kind in ("weight", "bias"):
            shapes.append(tuple(int(n) for n in fields[f"layer.{l}.{kind}"].split("x")))
    total = sum(int(np.prod(s)) for s in shapes) * _DTYPE.itemsize
    if len(body) != total:
        raise InputError(f"{source}: expected {total} payload bytes, found {len(body)}")
    arrays, pos = [], 0
    for shape in shapes:
        n = int(np.prod(shape)) * _DTYPE.itemsize
        arrays.append(np.frombuffer(body[pos:pos + n], dtype=_DTYPE).astype(np.float64).reshape(shape))
        pos += n
    extra = {k[len("meta."):]: v for k, v in fields.items() if k.startswith("meta.")}
    return ParamSet(
        arrays[0::2],
        arrays[1::2],
        role=fields.get("role", ""),
        domain_id=fields.get("domain_id", ""),
        seed=int(fields.get("seed", "0")),
        extra=extra,
    )


def save(params: ParamSet, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(params))
    return path


def load(path: str | Path) -> ParamSet:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), str(path))


def load_compatible(paths, reference: ParamSet | None = None) -> list[ParamSet]:
    """Load several checkpoints, raising with every offending shape if they disagree."""
    models = [load(p) for p in paths]
    ref = reference if reference is not None else (models[0] if models else None)
    bad = [(str(p), m.shapes()) for p, m in zip(paths, models) if ref is not None and not m.compatible(ref)]
    if bad:
        listing = "; ".join(f"{p}: {s}" for p, s in bad)
        raise IncompatibleError(f"checkpoints incompatible with {ref.shapes()}: {listing}")
    return models
