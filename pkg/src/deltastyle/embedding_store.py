"""Bit-exact serialization and validation of the pipeline's file formats.

All multi-byte values are little-endian. Embedding payloads are stored as
IEEE-754 32-bit reals (the containers hold float32 so round-trips are
bit-exact); checkpoints store float64 so a reloaded model reproduces forward
passes and optimizer trajectories exactly.

Dataset ("DEDS"):
    magic 4s | version u32 = 1 | n u64 | clip_dim u32 | style_dim u32 |
    digest u64 | images payload (n * clip_dim f32, row-major) |
    styles payload (n * style_dim f32, row-major)
    The digest is 64-bit FNV-1a over the two payloads in order.

Text table ("DETT"):
    magic 4s | entry count u32 | per entry: name length u16 | UTF-8 name |
    clip_dim f32 values
    The vector width is not embedded; readers supply it from context (a
    checkpoint or dataset header).

Relevance matrix ("DERM"):
    magic 4s | version u32 = 1 | style_dim u32 | clip_dim u32 |
    probe magnitude f64 | samples-per-channel u32 |
    rows payload (style_dim * clip_dim f32, row-major)

Checkpoint ("DMAP"):
    magic 4s | version u32 = 1 | coarse_layers u32 | coarse_dim u32 |
    medium_layers u32 | medium_dim u32 | fine_channels u32 | clip_dim u32 |
    negative_slope f64 | seed u64 | config digest u64 | has_state u8 |
    payload digest u64 | parameter payload | optional trainer-state payload
    Parameters hold the nine stacks in STACK_ORDER, each as layer count u32
    then per layer out u32, in u32, leaky u8, weight f64 row-major, bias f64.
    Trainer state is step u64, lr/beta1/beta2/eps f64, then first and second
    Adam moments per parameter array in param_list order.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .delta_mapper import (
    MapperParams,
    StyleLayout,
    param_list,
)
from .errors import (
    BadMagicError,
    DigestError,
    TruncatedError,
    ValidationError,
    VersionError,
)
from .numerics import AdamState, LinearLayer, LinearStack
from .relevance import RelevanceMatrix

try:  # pragma: no cover - exercised implicitly everywhere
    from numba import njit as _njit
except ImportError:  # pragma: no cover
    _njit = None

DATASET_MAGIC = b"DEDS"
TEXT_MAGIC = b"DETT"
RELEVANCE_MAGIC = b"DERM"
CHECKPOINT_MAGIC = b"DMAP"
FORMAT_VERSION = 1

UNIT_NORM_TOL = 1e-3

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_FNV_MASK = 0xFFFFFFFFFFFFFFFF

if _njit is not None:
    @_njit(cache=False)
    def _fnv1a_jit(buf, h):  # pragma: no cover - compiled
        prime = np.uint64(0x100000001B3)
        for i in range(buf.size):
            h = (h ^ np.uint64(buf[i])) * prime
        return h


def _fnv1a_py(data: bytes, h: int) -> int:
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _FNV_MASK
    return h


def fnv1a(data: bytes | memoryview, state: int = _FNV_OFFSET) -> int:
    """64-bit FNV-1a over ``data``; pass a previous result to chain chunks."""
    if _njit is not None:
        buf = np.frombuffer(data, dtype=np.uint8)
        return int(_fnv1a_jit(buf, np.uint64(state)))
    return _fnv1a_py(bytes(data), state)


# --------------------------------------------------------------------------
# containers


def _freeze_f32(name: str, x: np.ndarray, ndim: int) -> np.ndarray:
    arr = np.array(x, dtype="<f4", order="C", copy=True)
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-dimensional")
    arr.flags.writeable = False
    return arr


@dataclass
class EmbeddingDataset:
    """Paired image embeddings and style codes, immutable once built."""

    images: np.ndarray  # (n, clip_dim) float32
    styles: np.ndarray  # (n, style_dim) float32

    def __post_init__(self):
        self.images = _freeze_f32("images", self.images, 2)
        self.styles = _freeze_f32("styles", self.styles, 2)
        if self.images.shape[0] != self.styles.shape[0]:
            raise ValidationError(
                f"images hold {self.images.shape[0]} records but styles hold "
                f"{self.styles.shape[0]}"
            )

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def clip_dim(self) -> int:
        return self.images.shape[1]

    @property
    def style_dim(self) -> int:
        return self.styles.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingDataset):
            return NotImplemented
        return (self.images.shape == other.images.shape
                and self.styles.shape == other.styles.shape
                and self.images.tobytes() == other.images.tobytes()
                and self.styles.tobytes() == other.styles.tobytes())


@dataclass
class TextTable:
    """Named unit-norm embedding vectors, typically whole-prompt embeddings."""

    names: tuple[str, ...]
    vectors: np.ndarray  # (count, clip_dim) float32

    def __post_init__(self):
        self.names = tuple(self.names)
        self.vectors = _freeze_f32("vectors", self.vectors, 2)
        if len(self.names) != self.vectors.shape[0]:
            raise ValidationError("name count does not match vector rows")

    @property
    def clip_dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def get(self, name: str) -> np.ndarray:
        try:
            row = self.names.index(name)
        except ValueError:
            raise KeyError(name) from None
        return self.vectors[row].astype(np.float64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TextTable):
            return NotImplemented
        return (self.names == other.names
                and self.vectors.shape == other.vectors.shape
                and self.vectors.tobytes() == other.vectors.tobytes())


@dataclass
class Checkpoint:
    """Mapper parameters plus provenance and optional optimizer state."""

    params: MapperParams
    seed: int
    config_digest: int
    trainer_state: AdamState | None = None

    @property
    def layout(self) -> StyleLayout:
        return self.params.layout

    @property
    def clip_dim(self) -> int:
        return self.params.clip_dim


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Finding:
    code: str
    message: str
    count: int
    first_index: tuple | None = None


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...]

    @property
    def ok(self) -> bool:
        return not self.findings

    def summary(self) -> str:
        if self.ok:
            return "ok"
        return "; ".join(f.message for f in self.findings)


def _first_bad_index(mask: np.ndarray) -> tuple:
    flat = int(np.flatnonzero(mask)[0])
    return tuple(int(v) for v in np.unravel_index(flat, mask.shape))


def _matrix_findings(name: str, mat: np.ndarray,
                     check_norm: bool) -> list[Finding]:
    out: list[Finding] = []
    values = mat.astype(np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        idx = _first_bad_index(bad)
        out.append(Finding(
            code=f"{name}_nonfinite",
            message=(f"{name} contain {int(bad.sum())} non-finite values, "
                     f"first at index {idx}"),
            count=int(bad.sum()),
            first_index=idx,
        ))
    if check_norm:
        finite_rows = np.isfinite(values).all(axis=1)
        norms = np.linalg.norm(np.where(finite_rows[:, None], values, 0.0),
                               axis=1)
        off = finite_rows & (np.abs(norms - 1.0) > UNIT_NORM_TOL)
        if off.any():
            row = int(np.flatnonzero(off)[0])
            out.append(Finding(
                code=f"{name}_norm",
                message=(f"{int(off.sum())} {name} rows are not unit-norm "
                         f"within {UNIT_NORM_TOL}, first at row {row} "
                         f"(norm {norms[row]:.6f})"),
                count=int(off.sum()),
                first_index=(row,),
            ))
    return out


def validate(dataset: EmbeddingDataset) -> ValidationReport:
    """List every violated dataset invariant; never raises."""
    findings: list[Finding] = []
    findings.extend(_matrix_findings("images", dataset.images, check_norm=True))
    findings.extend(_matrix_findings("styles", dataset.styles, check_norm=False))
    if dataset.n < 2:
        findings.append(Finding(
            code="insufficient_records",
            message=(f"dataset holds {dataset.n} record(s); pair sampling "
                     f"needs at least 2"),
            count=1,
        ))
    return ValidationReport(tuple(findings))


def validate_text_table(table: TextTable) -> ValidationReport:
    findings = _matrix_findings("vectors", table.vectors, check_norm=True)
    seen: dict[str, int] = {}
    dupes = 0
    first_dup = None
    for i, name in enumerate(table.names):
        if name in seen:
            dupes += 1
            if first_dup is None:
                first_dup = (i,)
        seen.setdefault(name, i)
    if dupes:
        findings.append(Finding(
            code="duplicate_names",
            message=f"{dupes} duplicate entry name(s), first at entry "
                    f"{first_dup[0]}",
            count=dupes,
            first_index=first_dup,
        ))
    return ValidationReport(tuple(findings))


def validate_relevance(matrix: RelevanceMatrix) -> ValidationReport:
    findings = _matrix_findings("rows", matrix.rows, check_norm=False)
    rows = matrix.rows.astype(np.float64)
    finite = np.isfinite(rows).all(axis=1)
    norms = np.linalg.norm(np.where(finite[:, None], rows, 0.0), axis=1)
    bad = finite & (norms > 0) & (np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        findings.append(Finding(
            code="rows_norm",
            message=(f"{int(bad.sum())} relevance rows are neither zero nor "
                     f"unit-norm, first at row {row}"),
            count=int(bad.sum()),
            first_index=(row,),
        ))
    if matrix.probe <= 0:
        findings.append(Finding(
            code="probe_magnitude",
            message=f"probe magnitude {matrix.probe} is not positive",
            count=1,
        ))
    if matrix.samples_per_channel < 1:
        findings.append(Finding(
            code="sample_count",
            message="samples-per-channel must be >= 1",
            count=1,
        ))
    return ValidationReport(tuple(findings))


def _require_valid(report: ValidationReport, what: str) -> None:
    if not report.ok:
        raise ValidationError(f"refusing to write invalid {what}: "
                              f"{report.summary()}")


# --------------------------------------------------------------------------
# low-level I/O helpers


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int, piece: str) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise TruncatedError(expected=n, actual=len(self.data) - self.pos,
                                 offset=self.pos, what=f"{self.what} {piece}")
        out = self.data[self.pos:end]
        self.pos = end
        return out

    def unpack(self, fmt: str, piece: str) -> tuple:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, piece))

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise TruncatedError(expected=self.pos, actual=len(self.data),
                                 offset=self.pos,
                                 what=f"{self.what} (trailing bytes)")


def _check_magic(reader: _Reader, magic: bytes) -> None:
    got = reader.take(4, "magic")
    if got != magic:
        raise BadMagicError(
            f"bad magic {got!r}, expected {magic!r}", offset=0)


def _check_version(reader: _Reader) -> None:
    offset = reader.pos
    (version,) = reader.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise VersionError(
            f"unsupported format version {version}, expected "
            f"{FORMAT_VERSION}", offset=offset)


def _atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."),
                               prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _f32_matrix(reader: _Reader, rows: int, cols: int, piece: str
                ) -> np.ndarray:
    raw = reader.take(rows * cols * 4, piece)
    mat = np.frombuffer(raw, dtype="<f4").reshape(rows, cols)
    return mat


# --------------------------------------------------------------------------
# dataset files


def write_dataset(path: str | Path, dataset: EmbeddingDataset) -> None:
    """Serialize a dataset; refuses invariant violations before any write."""
    _require_valid(validate(dataset), "dataset")
    images_b = dataset.images.tobytes()
    styles_b = dataset.styles.tobytes()
    digest = fnv1a(styles_b, fnv1a(images_b))
    header = struct.pack("<4sIQIIQ", DATASET_MAGIC, FORMAT_VERSION,
                         dataset.n, dataset.clip_dim, dataset.style_dim,
                         digest)
    _atomic_write(path, header + images_b + styles_b)


def read_datasets(spec: str | Path) -> EmbeddingDataset:
    """Load one dataset, or several comma-separated files concatenated.

    All parts must agree on both embedding widths; records keep file order.
    """
    parts = [p.strip() for p in str(spec).split(",") if p.strip()]
    if not parts:
        raise ValidationError("no dataset path given")
    loaded = [read_dataset(p) for p in parts]
    if len(loaded) == 1:
        return loaded[0]
    first = loaded[0]
    for path, other in zip(parts[1:], loaded[1:]):
        if (other.clip_dim != first.clip_dim
                or other.style_dim != first.style_dim):
            raise ValidationError(
                f"dataset {path} has dims ({other.clip_dim}, "
                f"{other.style_dim}), expected ({first.clip_dim}, "
                f"{first.style_dim})")
    return EmbeddingDataset(
        images=np.vstack([d.images for d in loaded]),
        styles=np.vstack([d.styles for d in loaded]),
    )


def read_dataset(path: str | Path) -> EmbeddingDataset:
    """Load and fully validate a dataset file."""
    reader = _Reader(Path(path).read_bytes(), "dataset")
    _check_magic(reader, DATASET_MAGIC)
    _check_version(reader)
    n, clip_dim, style_dim, digest = reader.unpack("<QIIQ", "header")
    images = _f32_matrix(reader, n, clip_dim, "images payload")
    styles = _f32_matrix(reader, n, style_dim, "styles payload")
    reader.expect_end()
    actual = fnv1a(styles.tobytes(), fnv1a(images.tobytes()))
    if actual != digest:
        raise DigestError(
            f"content digest mismatch: header says {digest:#018x}, payload "
            f"hashes to {actual:#018x}")
    dataset = EmbeddingDataset(images, styles)
    report = validate(dataset)
    # A short dataset is readable; corrupt numbers are not.
    hard = [f for f in report.findings if f.code != "insufficient_records"]
    if hard:
        raise ValidationError(
            "dataset payload violates invariants: "
            + "; ".join(f.message for f in hard))
    return dataset


# --------------------------------------------------------------------------
# text table files


def write_text_table(path: str | Path, table: TextTable) -> None:
    _require_valid(validate_text_table(table), "text table")
    chunks = [TEXT_MAGIC, struct.pack("<I", len(table.names))]
    for name, row in zip(table.names, table.vectors):
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValidationError(f"entry name too long: {name[:32]!r}...")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(row.tobytes())
    _atomic_write(path, b"".join(chunks))


def read_text_table(path: str | Path, clip_dim: int) -> TextTable:
    """Load a text table; the vector width comes from the caller's context."""
    reader = _Reader(Path(path).read_bytes(), "text table")
    _check_magic(reader, TEXT_MAGIC)
    (count,) = reader.unpack("<I", "entry count")
    names: list[str] = []
    rows: list[np.ndarray] = []
    for k in range(count):
        (name_len,) = reader.unpack("<H", f"entry {k} name length")
        names.append(reader.take(name_len, f"entry {k} name").decode("utf-8"))
        raw = reader.take(clip_dim * 4, f"entry {k} vector")
        rows.append(np.frombuffer(raw, dtype="<f4"))
    reader.expect_end()
    vectors = (np.stack(rows) if rows
               else np.zeros((0, clip_dim), dtype="<f4"))
    table = TextTable(tuple(names), vectors)
    report = validate_text_table(table)
    if not report.ok:
        raise ValidationError(
            f"text table violates invariants: {report.summary()}")
    return table


# --------------------------------------------------------------------------
# relevance matrix files


def write_relevance(path: str | Path, matrix: RelevanceMatrix) -> None:
    _require_valid(validate_relevance(matrix), "relevance matrix")
    header = struct.pack("<4sIIIdI", RELEVANCE_MAGIC, FORMAT_VERSION,
                         matrix.style_dim, matrix.clip_dim,
                         matrix.probe, matrix.samples_per_channel)
    _atomic_write(path, header + matrix.rows.tobytes())


def read_relevance(path: str | Path) -> RelevanceMatrix:
    reader = _Reader(Path(path).read_bytes(), "relevance matrix")
    _check_magic(reader, RELEVANCE_MAGIC)
    _check_version(reader)
    style_dim, clip_dim, probe, samples = reader.unpack("<IIdI", "header")
    rows = _f32_matrix(reader, style_dim, clip_dim, "rows payload")
    reader.expect_end()
    matrix = RelevanceMatrix(rows=rows, probe=probe,
                             samples_per_channel=samples)
    report = validate_relevance(matrix)
    if not report.ok:
        raise ValidationError(
            f"relevance matrix violates invariants: {report.summary()}")
    return matrix


# --------------------------------------------------------------------------
# checkpoints


def _pack_stack(stack: LinearStack) -> bytes:
    chunks = [struct.pack("<I", len(stack.layers))]
    for layer in stack.layers:
        chunks.append(struct.pack("<IIB", layer.out_dim, layer.in_dim,
                                  1 if layer.leaky else 0))
        chunks.append(np.ascontiguousarray(layer.weight, "<f8").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, "<f8").tobytes())
    return b"".join(chunks)


def _read_stack(reader: _Reader, slope: float, name: str) -> LinearStack:
    (n_layers,) = reader.unpack("<I", f"{name} layer count")
    layers = []
    for k in range(n_layers):
        out_dim, in_dim, leaky = reader.unpack("<IIB", f"{name} layer {k}")
        w_raw = reader.take(out_dim * in_dim * 8, f"{name} layer {k} weight")
        b_raw = reader.take(out_dim * 8, f"{name} layer {k} bias")
        weight = np.frombuffer(w_raw, "<f8").reshape(out_dim, in_dim).copy()
        bias = np.frombuffer(b_raw, "<f8").copy()
        layers.append(LinearLayer(weight, bias, leaky=bool(leaky)))
    return LinearStack(layers, slope)


def write_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    params = checkpoint.params
    lay = params.layout
    payload_chunks = [_pack_stack(stack) for stack in params.stacks()]
    state = checkpoint.trainer_state
    if state is not None:
        payload_chunks.append(struct.pack(
            "<Qdddd", state.step, state.lr, state.beta1, state.beta2,
            state.eps))
        for m, v in zip(state.m, state.v):
            payload_chunks.append(np.ascontiguousarray(m, "<f8").tobytes())
            payload_chunks.append(np.ascontiguousarray(v, "<f8").tobytes())
    payload = b"".join(payload_chunks)
    header = struct.pack(
        "<4sIIIIIIIdQQBQ", CHECKPOINT_MAGIC, FORMAT_VERSION,
        lay.coarse_layers, lay.coarse_dim, lay.medium_layers, lay.medium_dim,
        lay.fine_channels, params.clip_dim,
        params.style_coarse.negative_slope, checkpoint.seed,
        checkpoint.config_digest, 1 if state is not None else 0,
        fnv1a(payload))
    _atomic_write(path, header + payload)


def read_checkpoint(path: str | Path) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes(), "checkpoint")
    _check_magic(reader, CHECKPOINT_MAGIC)
    _check_version(reader)
    (cl, cd, ml, md, fine, clip_dim) = reader.unpack("<6I", "layout")
    (slope,) = reader.unpack("<d", "negative slope")
    seed, config_digest = reader.unpack("<QQ", "provenance")
    (has_state,) = reader.unpack("<B", "state flag")
    (digest,) = reader.unpack("<Q", "payload digest")
    payload_start = reader.pos
    actual = fnv1a(reader.data[payload_start:])
    if actual != digest:
        raise DigestError(
            f"checkpoint payload digest mismatch: header says {digest:#018x},"
            f" payload hashes to {actual:#018x}", offset=payload_start)
    layout = StyleLayout(cl, cd, ml, md, fine)
    stacks = {}
    from .delta_mapper import STACK_ORDER
    for name in STACK_ORDER:
        stacks[name] = _read_stack(reader, slope, name)
    params = MapperParams(layout=layout, clip_dim=clip_dim, **stacks)
    state = None
    if has_state:
        step, lr, beta1, beta2, eps = reader.unpack("<Qdddd", "trainer state")
        arrays = param_list(params)
        m, v = [], []
        for i, p in enumerate(arrays):
            m_raw = reader.take(p.size * 8, f"moment m[{i}]")
            v_raw = reader.take(p.size * 8, f"moment v[{i}]")
            m.append(np.frombuffer(m_raw, "<f8").reshape(p.shape).copy())
            v.append(np.frombuffer(v_raw, "<f8").reshape(p.shape).copy())
        state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                          step=step, m=m, v=v)
    reader.expect_end()
    return Checkpoint(params=params, seed=seed, config_digest=config_digest,
                      trainer_state=state)


def read_magic(path: str | Path) -> bytes:
    """First four bytes of a file, for format sniffing."""
    with open(path, "rb") as fh:
        return fh.read(4)
