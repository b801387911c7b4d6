"""Communication accounting, FLOPs, evaluation, and report plumbing.

Two compression numbers are always available: the parameter-count ratio
(total/nonzero, the convention used when quoting "50x at 98% sparse") and
the honest wire-byte ratio that charges for index overhead. The wire
format is COO over the full flat parameter vector with an automatic dense
fallback once indices would cost more than they save; a bitmap codec is
selectable for mid-density payloads.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, LayoutError, PayloadError
from .model import Conv2d, Dense, ModelSpec, ModelState, activation_shapes, forward

_COO_MAGIC = b"FPSP"
_BITMAP_MAGIC = b"FPBM"
_HEADER = 12  # magic + u32 total_len + u32 nnz

CSV_COLUMNS = (
    "round",
    "strategy",
    "kappa",
    "alpha",
    "seed",
    "accuracy",
    "loss",
    "bytes_up",
    "bytes_down",
    "sparsity",
    "flops",
    "wallclock_ms",
)


@dataclass
class RoundReport:
    round: int
    test_accuracy: float
    train_loss: float
    bytes_up: int
    bytes_down: int
    model_nnz: int
    sparsity: float
    flops_per_forward: int
    wallclock_ms: int

    def __post_init__(self):
        if self.bytes_up < 0 or self.bytes_down < 0:
            raise LayoutError("byte counters must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "RoundReport":
        return cls(**json.loads(text))


@dataclass
class SparsePayload:
    """Wire representation of a (possibly sparse) flat parameter vector.

    COO layout: magic "FPSP", u32 total_len, u32 nnz, u32 indices
    (strictly increasing), f32 values --- all little-endian. When
    nnz == total_len the indices array is omitted (dense fallback).
    Bitmap layout: magic "FPBM", same header, then one keep-bit per
    position (LSB first) followed by the f32 values.
    """

    total_len: int
    indices: np.ndarray  # u32, strictly increasing
    values: np.ndarray  # f32
    codec: str = "coo"

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.uint32)
        self.values = np.asarray(self.values, dtype=np.float32)
        if len(self.indices) != len(self.values):
            raise PayloadError("indices and values disagree in length")
        if len(self.indices) and (
            int(self.indices[-1]) >= self.total_len
            or np.any(np.diff(self.indices.astype(np.int64)) <= 0)
        ):
            raise PayloadError("indices must be strictly increasing and < total_len")

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def byte_size(self) -> int:
        if self.codec == "bitmap":
            return _HEADER + math.ceil(self.total_len / 8) + 4 * self.nnz
        if self.nnz == self.total_len:
            return _HEADER + 4 * self.nnz  # dense: indices omitted
        return _HEADER + 8 * self.nnz

    def to_bytes(self) -> bytes:
        header = np.array([self.total_len, self.nnz], dtype="<u4").tobytes()
        if self.codec == "bitmap":
            keep = np.zeros(self.total_len, dtype=np.uint8)
            keep[self.indices] = 1
            return (
                _BITMAP_MAGIC + header + np.packbits(keep, bitorder="little").tobytes()
                + self.values.astype("<f4").tobytes()
            )
        body = b"" if self.nnz == self.total_len else self.indices.astype("<u4").tobytes()
        return _COO_MAGIC + header + body + self.values.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SparsePayload":
        magic, codec = blob[:4], "coo"
        if magic == _BITMAP_MAGIC:
            codec = "bitmap"
        elif magic != _COO_MAGIC:
            raise PayloadError(f"bad payload magic {magic!r}")
        total_len, nnz = np.frombuffer(blob[4:_HEADER], dtype="<u4")
        total_len, nnz = int(total_len), int(nnz)
        pos = _HEADER
        if codec == "bitmap":
            nbytes = math.ceil(total_len / 8)
            keep = np.unpackbits(
                np.frombuffer(blob[pos : pos + nbytes], dtype=np.uint8),
                bitorder="little",
            )[:total_len]
            indices = np.flatnonzero(keep).astype(np.uint32)
            pos += nbytes
        elif nnz == total_len:
            indices = np.arange(total_len, dtype=np.uint32)
        else:
            indices = np.frombuffer(blob[pos : pos + 4 * nnz], dtype="<u4")
            pos += 4 * nnz
        values = np.frombuffer(blob[pos : pos + 4 * nnz], dtype="<f4")
        if len(values) != nnz or len(indices) != nnz:
            raise PayloadError("truncated payload")
        return cls(total_len, indices, values, codec)


def _kept_positions(state: ModelState, mask) -> np.ndarray:
    """Full-layout transmitted positions: all non-prunable parameters plus
    the prunable ones whose mask bit is set."""
    n = len(state.params)
    if mask is None:
        return np.arange(n, dtype=np.uint32)
    idx = state.layout.prunable_index
    if len(mask.bits) != len(idx):
        raise LayoutError(f"mask length {len(mask.bits)} != prunable count {len(idx)}")
    keep = np.ones(n, dtype=bool)
    keep[idx[mask.bits == 0]] = False
    return np.flatnonzero(keep).astype(np.uint32)


def encode_sparse(state: ModelState, mask=None, codec: str = "auto") -> SparsePayload:
    """Encode the on-mask entries of a model; round-trips at f32 precision.

    ``codec="auto"`` picks COO while it is cheaper than shipping the dense
    vector and falls back to dense above 50% density.
    """
    positions = _kept_positions(state, mask)
    n = len(state.params)
    if codec == "auto":
        codec = "dense" if 8 * len(positions) > 4 * n else "coo"
    if codec == "dense":
        return SparsePayload(n, np.arange(n, dtype=np.uint32), state.params, "coo")
    if codec == "bitmap":
        return SparsePayload(n, positions, state.params[positions], "bitmap")
    if codec == "coo":
        return SparsePayload(n, positions, state.params[positions], "coo")
    raise ConfigError(field="codec", value=codec, allowed="auto|coo|bitmap|dense")


def decode_sparse(payload: SparsePayload) -> np.ndarray:
    """Full-length float64 vector with zeros off the transmitted set."""
    out = np.zeros(payload.total_len)
    out[payload.indices.astype(np.int64)] = payload.values.astype(np.float64)
    return out


def compression_rate(total_params: int, nnz: int) -> float:
    """Parameter-count compression: total / retained."""
    if nnz <= 0:
        raise ConfigError(field="nnz", value=nnz, allowed="> 0")
    return total_params / nnz


def wire_compression(total_params: int, payload: SparsePayload) -> float:
    """Dense f32 bytes divided by actual payload bytes (index overhead in)."""
    return (4 * total_params) / payload.byte_size


def flops_forward(spec: ModelSpec) -> int:
    """Multiply-accumulate count of one forward pass through the spec."""
    total = 0
    shapes = [spec.input_shape] + activation_shapes(spec)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            total += layer.in_dim * layer.out_dim
        elif isinstance(layer, Conv2d):
            _, h, w = shapes[i + 1]
            total += layer.in_channels * layer.out_channels * layer.kernel_size**2 * h * w
    return total


def evaluate(spec: ModelSpec, state: ModelState, test_x, test_y) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy on a held-out set."""
    y = np.asarray(test_y)
    if y.size == 0:
        raise LayoutError("empty test set")
    logits = forward(spec, state, test_x).data
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(len(y)), y]))
    accuracy = float(np.mean(np.argmax(logits, axis=1) == y))
    return accuracy, loss


def write_jsonl(reports, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in reports:
            f.write(r.to_json() + "\n")


def read_jsonl(path) -> list[RoundReport]:
    with open(path, encoding="utf-8") as f:
        return [RoundReport.from_json(line) for line in f if line.strip()]


def csv_rows(reports, strategy: str, kappa: float, alpha, seed: int) -> list[dict]:
    alpha_text = "iid" if alpha is None else repr(float(alpha))
    return [
        {
            "round": r.round,
            "strategy": strategy,
            "kappa": repr(float(kappa)),
            "alpha": alpha_text,
            "seed": seed,
            "accuracy": repr(r.test_accuracy),
            "loss": repr(r.train_loss),
            "bytes_up": r.bytes_up,
            "bytes_down": r.bytes_down,
            "sparsity": repr(r.sparsity),
            "flops": r.flops_per_forward,
            "wallclock_ms": r.wallclock_ms,
        }
        for r in reports
    ]


def write_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def accuracy_vs_round(rows) -> dict[tuple[str, str, str], list[tuple[int, float]]]:
    """Mean accuracy per round over seeds, keyed by (strategy, kappa, alpha)."""
    acc: dict[tuple, dict[int, list[float]]] = {}
    for row in rows:
        key = (row["strategy"], row["kappa"], row["alpha"])
        acc.setdefault(key, {}).setdefault(int(row["round"]), []).append(float(row["accuracy"]))
    return {
        key: [(rnd, float(np.mean(vals))) for rnd, vals in sorted(per_round.items())]
        for key, per_round in acc.items()
    }


def accuracy_vs_sparsity(rows) -> dict[tuple[str, str], list[tuple[float, float]]]:
    """Final-round accuracy (mean over seeds) against sparsity = 1 - kappa."""
    finals: dict[tuple, dict[float, list[float]]] = {}
    last_round: dict[tuple, int] = {}
    for row in rows:
        cell = (row["strategy"], row["alpha"], row["kappa"], row["seed"])
        last_round[cell] = max(last_round.get(cell, -1), int(row["round"]))
    for row in rows:
        cell = (row["strategy"], row["alpha"], row["kappa"], row["seed"])
        if int(row["round"]) != last_round[cell]:
            continue
        key = (row["strategy"], row["alpha"])
        sparsity = 1.0 - float(row["kappa"])
        finals.setdefault(key, {}).setdefault(sparsity, []).append(float(row["accuracy"]))
    return {
        key: [(s, float(np.mean(vals))) for s, vals in sorted(per_s.items())]
        for key, per_s in finals.items()
    }


def write_dat(path, points, header: str) -> None:
    """Two-column whitespace table (gnuplot-ready)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {header}\n")
        for x, y in points:
            f.write(f"{x} {y}\n")


def write_svg(path, series: dict[str, list[tuple[float, float]]], xlabel: str, ylabel: str) -> None:
    """Minimal self-contained SVG line chart (one polyline per series)."""
    width, height, margin = 640, 420, 50
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    sx = lambda x: margin + (x - x0) / (x1 - x0) * (width - 2 * margin)
    sy = lambda y: height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin)
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 10}" font-size="12">{xlabel}</text>',
        f'<text x="12" y="{height // 2}" font-size="12" '
        f'transform="rotate(-90 12 {height // 2})">{ylabel}</text>',
    ]
    for i, (label, pts) in enumerate(sorted(series.items())):
        color = palette[i % len(palette)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{width - margin + 4}" y="{margin + 14 * i}" font-size="10" '
            f'fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts))
