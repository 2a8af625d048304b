"""Serialization: the LVT1 tensor container, checkpoints, CSV tables and SVG plots.

Container layout (all integers little-endian)::

    b"LVT1"
    repeated until EOF:
        u32 name length, name bytes (UTF-8)
        u8  dtype code (1 = float32, 2 = float64)
        u32 rank, rank x u64 extents
        row-major payload
"""
from __future__ import annotations

import csv
import hashlib
import html
import json
import struct

import numpy as np

MAGIC = b"LVT1"
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
MANIFEST_KEY = "__manifest__"


class ContainerError(ValueError):
    pass


def write_container(path, tensors):
    """Write ``{name: float32/float64 array}`` in insertion order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in CODES:
                raise ContainerError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BI", CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=DTYPES[CODES[arr.dtype]]).tobytes())


def read_container(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_container(buf)


def decode_container(buf):
    if buf[:4] != MAGIC:
        raise ContainerError(f"bad magic at offset 0: {buf[:4]!r}")
    out = {}
    off = 4

    def take(n, what):
        nonlocal off
        if off + n > len(buf):
            raise ContainerError(f"truncated {what} at byte offset {off} (need {n} bytes, have {len(buf) - off})")
        chunk = buf[off:off + n]
        off += n
        return chunk

    while off < len(buf):
        start = off
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        code, rank = struct.unpack("<BI", take(5, "dtype/rank"))
        if code not in DTYPES:
            raise ContainerError(f"unknown dtype code {code} for {name!r} at byte offset {start}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        dtype = DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = take(n_bytes, f"payload of {name!r}")
        if name in out:
            raise ContainerError(f"duplicate entry {name!r} at byte offset {start}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return out


def _encode_json(obj):
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _decode_json(arr):
    return json.loads(np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8"))


def save_checkpoint(path, model, extra=None):
    """All named parameters plus a manifest entry holding the model config."""
    manifest = {"config": json.loads(model.config.to_json())}
    if extra:
        manifest.update(extra)
    tensors = {MANIFEST_KEY: _encode_json(manifest)}
    tensors.update(model.state_dict())
    write_container(path, tensors)


def load_checkpoint(path):
    from .model import Model, ModelConfig

    tensors = read_container(path)
    if MANIFEST_KEY not in tensors:
        raise ContainerError(f"{path}: no {MANIFEST_KEY} entry")
    manifest = _decode_json(tensors.pop(MANIFEST_KEY))
    model = Model(ModelConfig(**manifest["config"]))
    model.load_state_dict(tensors)
    return model, manifest


def file_sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_csv(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c] if isinstance(row, dict) else row[i]) for i, c in enumerate(columns)])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# ---------------------------------------------------------------------------
# SVG plots
# ---------------------------------------------------------------------------
_W, _H, _PAD = 480, 320, 48


def _frame(title, xlabel, ylabel):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="18" text-anchor="middle" font-size="13">{html.escape(title)}</text>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - 12}" y2="{_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_PAD}" y2="28" stroke="black"/>',
        f'<text x="{_W / 2}" y="{_H - 10}" text-anchor="middle">{html.escape(xlabel)}</text>',
        f'<text x="14" y="{_H / 2}" transform="rotate(-90 14 {_H / 2})" text-anchor="middle">{html.escape(ylabel)}</text>',
    ]


def _scale(v, lo, hi, a, b):
    return a + (b - a) * ((v - lo) / (hi - lo) if hi > lo else 0.5)


def svg_histogram(path, series, bins=20, title="", xlabel="", ylabel="count"):
    """Overlaid step histograms; ``series`` maps a label to a 1-D array."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    vals = np.concatenate([np.asarray(v, dtype=float) for v in series.values()]) if series else np.zeros(1)
    lo, hi = float(vals.min()), float(vals.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts = {k: np.histogram(v, edges)[0] for k, v in series.items()}
    top = max([c.max() for c in counts.values()] + [1])
    out = _frame(title, xlabel, ylabel)
    for n, (label, c) in enumerate(counts.items()):
        pts = []
        for i, h in enumerate(c):
            x0 = _scale(edges[i], lo, hi, _PAD, _W - 12)
            x1 = _scale(edges[i + 1], lo, hi, _PAD, _W - 12)
            y = _scale(h, 0, top, _H - _PAD, 32)
            pts += [f"{x0:.1f},{y:.1f}", f"{x1:.1f},{y:.1f}"]
        color = colors[n % len(colors)]
        out.append(f'<polyline fill="none" stroke="{color}" points="{" ".join(pts)}"/>')
        out.append(f'<text x="{_W - 120}" y="{40 + 14 * n}" fill="{color}">{html.escape(label)}</text>')
    out += [f'<text x="{_PAD}" y="{_H - _PAD + 14}">{lo:.3g}</text>',
            f'<text x="{_W - 12}" y="{_H - _PAD + 14}" text-anchor="end">{hi:.3g}</text>', "</svg>"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out))


def svg_line(path, xs, ys, title="", xlabel="", ylabel="", y_range=(0.0, 1.0)):
    """Single polyline with markers; ``None`` y values are skipped."""
    pts = [(float(x), float(y)) for x, y in zip(xs, ys) if y is not None and np.isfinite(y)]
    out = _frame(title, xlabel, ylabel)
    if pts:
        x_lo = min(p[0] for p in pts)
        x_hi = max(p[0] for p in pts)
        coords = [(_scale(x, x_lo, x_hi, _PAD, _W - 12), _scale(y, *y_range, _H - _PAD, 32)) for x, y in pts]
        out.append('<polyline fill="none" stroke="#1f77b4" points="%s"/>' % " ".join(f"{a:.1f},{b:.1f}" for a, b in coords))
        out += [f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="#1f77b4"/>' for a, b in coords]
        out += [f'<text x="{_PAD}" y="{_H - _PAD + 14}">{x_lo:.3g}</text>',
                f'<text x="{_W - 12}" y="{_H - _PAD + 14}" text-anchor="end">{x_hi:.3g}</text>']
    out += [f'<text x="{_PAD - 4}" y="{_H - _PAD}" text-anchor="end">{y_range[0]:.3g}</text>',
            f'<text x="{_PAD - 4}" y="36" text-anchor="end">{y_range[1]:.3g}</text>', "</svg>"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out))
