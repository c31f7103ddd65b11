"""File formats: volumes, label maps, fields, landmarks, network weights, results.

Volumes, label maps and displacement fields are a JSON header plus a raw
little-endian payload in x-fastest order (``name.json`` + ``name.raw``).
Fields interleave the three components per voxel.  Landmarks are CSV with
header ``x_mm,y_mm,z_mm``.  Network weights are a single binary file::

    b"MLREGNET" | u32 version | u32 depth, base_filters, convs_per_stage,
    input_channels, output_channels, output units (0 mm, 1 voxel) |
    u32 block count |
    per block: u16 name length, utf-8 name, u8 ndim, u32 shape[ndim], f32 data

Every reader validates before constructing anything and raises
:class:`FormatError` with one of the :class:`ErrorCode` values.
"""

from __future__ import annotations

import csv
import enum
import json
import struct
from pathlib import Path

import numpy as np

from .fields import DisplacementField
from .grid import Grid, LabelVolume, Volume
from .metrics import LandmarkSet
from .unet import OUTPUT_UNITS, NetWeights, UNetConfig, xavier_init

VOLUME_MAGIC = "MLREG-VOL"
VOLUME_VERSION = 1
WEIGHTS_MAGIC = b"MLREGNET"
WEIGHTS_VERSION = 1
LANDMARK_HEADER = ["x_mm", "y_mm", "z_mm"]

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class ErrorCode(enum.IntEnum):
    BAD_MAGIC = 10      # magic string/bytes wrong
    BAD_VERSION = 11    # unsupported format version
    BAD_HEADER = 12     # header unparsable, missing keys or invalid values
    TRUNCATED = 13      # payload shorter than the header implies
    SIZE_MISMATCH = 14  # payload longer than the header implies
    WRONG_KIND = 15     # valid file of another kind (e.g. labels where a field is expected)


class FormatError(ValueError):
    def __init__(self, code: ErrorCode, message: str):
        super().__init__(f"[{code.name}] {message}")
        self.code = code


def _json_path(path) -> Path:
    p = Path(path)
    return p if p.suffix == ".json" else p.with_suffix(".json")


# ---------------------------------------------------------------------------
# volumes, labels, fields

def _write_grid_file(path, grid: Grid, kind: str, payload: np.ndarray, dtype: str, components: int):
    header_path = _json_path(path)
    raw_path = header_path.with_suffix(".raw")
    header = {
        "magic": VOLUME_MAGIC, "version": VOLUME_VERSION, "kind": kind,
        "dims": list(grid.dims), "spacing_mm": list(grid.spacing_mm),
        "origin_mm": list(grid.origin_mm), "dtype": dtype, "components": components,
        "order": "x-fastest", "endianness": "little", "data_file": raw_path.name,
    }
    raw_path.write_bytes(np.ascontiguousarray(payload, dtype=_DTYPES[dtype]).tobytes())
    header_path.write_text(json.dumps(header, indent=2))
    return header_path


def _read_grid_file(path, expected_kind: str):
    header_path = _json_path(path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(ErrorCode.BAD_HEADER, f"{header_path}: invalid JSON ({exc})") from None
    if not isinstance(header, dict) or header.get("magic") != VOLUME_MAGIC:
        raise FormatError(ErrorCode.BAD_MAGIC, f"{header_path}: bad magic")
    if header.get("version") != VOLUME_VERSION:
        raise FormatError(ErrorCode.BAD_VERSION,
                          f"{header_path}: unsupported version {header.get('version')!r}")
    try:
        kind = header["kind"]
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        origin = tuple(float(o) for o in header["origin_mm"])
        dtype = _DTYPES[header["dtype"]]
        components = int(header["components"])
        data_file = str(header["data_file"])
        if header.get("order", "x-fastest") != "x-fastest" or \
                header.get("endianness", "little") != "little":
            raise ValueError("only x-fastest little-endian payloads are supported")
        grid = Grid(dims, spacing, origin)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(ErrorCode.BAD_HEADER, f"{header_path}: {exc}") from None
    if kind != expected_kind:
        raise FormatError(ErrorCode.WRONG_KIND, f"{header_path}: expected {expected_kind}, found {kind}")
    want_components = 3 if kind == "field" else 1
    if components != want_components:
        raise FormatError(ErrorCode.BAD_HEADER,
                          f"{header_path}: {kind} needs {want_components} components, header says {components}")
    raw = (header_path.parent / data_file).read_bytes()
    expected = grid.size * components * dtype.itemsize
    if len(raw) < expected:
        raise FormatError(ErrorCode.TRUNCATED, f"{header_path}: payload has {len(raw)} bytes, "
                                               f"header implies {expected}")
    if len(raw) > expected:
        raise FormatError(ErrorCode.SIZE_MISMATCH, f"{header_path}: payload has {len(raw)} bytes, "
                                                   f"header implies {expected}")
    flat = np.frombuffer(raw, dtype=dtype)
    return grid, flat, header


def write_volume(v: Volume, path):
    return _write_grid_file(path, v.grid, "volume", v.flat(), "f32", 1)


def read_volume(path) -> Volume:
    grid, flat, _ = _read_grid_file(path, "volume")
    return Volume.on(grid, flat.reshape(grid.dims, order="F").copy())


def write_labels(lv: LabelVolume, path):
    if lv.data.size and lv.data.max() > 255:
        raise ValueError("label values above 255 do not fit the u8 payload")
    return _write_grid_file(path, lv.grid, "labels", lv.flat(), "u8", 1)


def read_labels(path) -> LabelVolume:
    grid, flat, _ = _read_grid_file(path, "labels")
    return LabelVolume.on(grid, flat.reshape(grid.dims, order="F").astype(np.int64))


def write_field(f: DisplacementField, path):
    # components interleaved per voxel, voxels x-fastest
    payload = np.transpose(f.u, (2, 1, 0, 3)).reshape(-1)
    return _write_grid_file(path, f.grid, "field", payload, "f32", 3)


def read_field(path) -> DisplacementField:
    grid, flat, _ = _read_grid_file(path, "field")
    nx, ny, nz = grid.dims
    u = flat.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
    return DisplacementField(grid, u.astype(np.float64))


def field_payload_bytes(grid: Grid) -> int:
    return grid.size * 3 * 4


# ---------------------------------------------------------------------------
# landmarks

def write_landmarks(lms: LandmarkSet, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LANDMARK_HEADER)
        for p in lms.points:
            w.writerow([repr(float(c)) for c in p])
    return Path(path)


def read_landmarks(path, case_id: str = "") -> LandmarkSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != LANDMARK_HEADER:
        raise FormatError(ErrorCode.BAD_HEADER, f"{path}: expected header {','.join(LANDMARK_HEADER)}")
    pts = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise FormatError(ErrorCode.BAD_HEADER, f"{path}:{i}: expected 3 columns, got {len(row)}")
        try:
            pts.append([float(c) for c in row])
        except ValueError:
            raise FormatError(ErrorCode.BAD_HEADER, f"{path}:{i}: non-numeric value") from None
    try:
        return LandmarkSet(np.array(pts).reshape(-1, 3), case_id or Path(path).stem)
    except ValueError as exc:
        raise FormatError(ErrorCode.BAD_HEADER, f"{path}: {exc}") from None


def read_dirlab_landmarks(path, grid: Grid, case_id: str = "") -> LandmarkSet:
    """DIR-LAB ``*_300_*.txt`` files: 1-based voxel indices, whitespace separated.

    Index ``i`` maps to the centre of voxel ``i - 1`` of ``grid``, so distances
    are the spacing-scaled index differences and the points sit where a field
    on that grid expects them.
    """
    try:
        idx = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise FormatError(ErrorCode.BAD_HEADER, f"{path}: {exc}") from None
    if idx.shape[1] != 3:
        raise FormatError(ErrorCode.BAD_HEADER, f"{path}: expected 3 columns, got {idx.shape[1]}")
    pts = np.asarray(grid.origin_mm) + (idx - 0.5) * np.asarray(grid.spacing_mm)
    return LandmarkSet(pts, case_id or Path(path).stem)


def is_landmark_csv(path) -> bool:
    with open(path, newline="") as fh:
        first = fh.readline()
    return [c.strip() for c in first.split(",")] == LANDMARK_HEADER


# ---------------------------------------------------------------------------
# network weights

_CONFIG_FIELDS = ("depth", "base_filters", "convs_per_stage", "input_channels", "output_channels")
_UNIT_CODES = {u: i for i, u in enumerate(OUTPUT_UNITS)}


def write_weights(w: NetWeights, path):
    cfg = w.config
    parts = [WEIGHTS_MAGIC, struct.pack("<I", WEIGHTS_VERSION),
             struct.pack("<5I", *(getattr(cfg, k) for k in _CONFIG_FIELDS)),
             struct.pack("<I", _UNIT_CODES[cfg.output_units]),
             struct.pack("<I", len(w.params))]
    for name, arr in w.params.items():
        b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(b)) + b)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))
    return Path(path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(ErrorCode.TRUNCATED, f"{self.path}: unexpected end of file at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_weights(path) -> NetWeights:
    r = _Reader(Path(path).read_bytes(), path)
    if len(r.buf) < len(WEIGHTS_MAGIC) or r.buf[:len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise FormatError(ErrorCode.BAD_MAGIC, f"{path}: bad magic")
    r.take(len(WEIGHTS_MAGIC))
    (version,) = r.unpack("<I")
    if version != WEIGHTS_VERSION:
        raise FormatError(ErrorCode.BAD_VERSION, f"{path}: unsupported version {version}")
    values = r.unpack("<5I")
    (unit,) = r.unpack("<I")
    if unit >= len(OUTPUT_UNITS):
        raise FormatError(ErrorCode.BAD_HEADER, f"{path}: unknown output unit code {unit}")
    try:
        cfg = UNetConfig(**dict(zip(_CONFIG_FIELDS, values)), output_units=OUTPUT_UNITS[unit])
    except ValueError as exc:
        raise FormatError(ErrorCode.BAD_HEADER, f"{path}: {exc}") from None
    if cfg.depth > 8 or cfg.base_filters > 1024:
        raise FormatError(ErrorCode.BAD_HEADER, f"{path}: implausible configuration {cfg}")
    layout = {k: v.shape for k, v in xavier_init(cfg, 0).params.items()}
    (count,) = r.unpack("<I")
    if count != len(layout):
        raise FormatError(ErrorCode.BAD_HEADER, f"{path}: {count} blocks, configuration needs {len(layout)}")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(ErrorCode.BAD_HEADER, f"{path}: undecodable block name") from None
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if name not in layout or layout[name] != shape:
            raise FormatError(ErrorCode.BAD_HEADER,
                              f"{path}: block {name!r} shape {shape} inconsistent with {cfg}")
        size = int(np.prod(shape)) * 4
        params[name] = np.frombuffer(r.take(size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.buf):
        raise FormatError(ErrorCode.SIZE_MISMATCH, f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return NetWeights(cfg, {k: params[k] for k in layout})


def weights_path(directory, level: int) -> Path:
    return Path(directory) / f"level_{level}.mlw"


# ---------------------------------------------------------------------------
# registration results

def write_result(result, directory):
    """Store the final field, each level's field and a small manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_field(result.displacement(), d / "field.json")
    for l, f in enumerate(result.fields, start=1):
        write_field(f, d / f"level_{l}.json")
    manifest = {"levels": result.levels, "folding_fraction": result.folding_fraction,
                "runtime_s": result.runtime_s}
    (d / "result.json").write_text(json.dumps(manifest, indent=2))
    return d


def read_result(path):
    """Load a result directory, or a single field file as a one-level result."""
    from .fields import jacobian_folding
    from .multilevel import MultilevelResult, level_transform

    p = Path(path)
    if p.is_dir():
        manifest_path = p / "result.json"
        try:
            manifest = json.loads(manifest_path.read_text())
            levels = int(manifest["levels"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(ErrorCode.BAD_HEADER, f"{manifest_path}: {exc}") from None
        fields = [read_field(p / f"level_{l}.json") for l in range(1, levels + 1)]
    else:
        fields = [read_field(p)]
    Y = level_transform(fields, fields[0].grid, 0)
    fold = jacobian_folding(Y.displacement())[1]
    return MultilevelResult(fields, Y, [], [], fold)
