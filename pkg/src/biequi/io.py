"""File formats: PLY and XYZ scans, trajectory-style ground-truth logs,
pair lists and JSON records for transforms and matches."""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, UnsupportedEncoding
from .geometry import RigidTransform, project_to_rotation
from .pointcloud import PointCloud

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
# 17 significant digits round-trip every float64 exactly
FLOAT_FMT = "%.17g"
ORTHO_WARN = 1e-6
ORTHO_FAIL = 1e-4


@dataclass(frozen=True)
class ScanFile:
    path: str
    format: str
    n_points: int


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype) or (name, (count_dtype, item_dtype)) for lists


def _parse_header(f):
    first = f.readline()
    if first.strip() != b"ply":
        raise FormatError(f"{f.name}: missing 'ply' magic at byte 0")
    fmt = None
    elements = []
    line_no = 1
    while True:
        offset = f.tell()
        raw = f.readline()
        line_no += 1
        if not raw:
            raise FormatError(f"{f.name}: header not terminated (line {line_no}, byte {offset})")
        parts = raw.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        key = parts[0]
        if key == "end_header":
            break
        if key == "format":
            if len(parts) < 2:
                raise FormatError(f"{f.name}: bad format line {line_no}")
            fmt = parts[1]
            if fmt == "binary_big_endian":
                raise UnsupportedEncoding(f"{f.name}: big-endian PLY is not supported")
            if fmt not in ("ascii", "binary_little_endian"):
                raise FormatError(f"{f.name}: unknown encoding {fmt!r} on line {line_no}")
        elif key == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise FormatError(f"{f.name}: bad element line {line_no}")
            elements.append(_Element(parts[1], int(parts[2]), []))
        elif key == "property":
            if not elements:
                raise FormatError(f"{f.name}: property before element on line {line_no}")
            try:
                if parts[1] == "list":
                    elements[-1].props.append((parts[4], (PLY_TYPES[parts[2]], PLY_TYPES[parts[3]])))
                else:
                    elements[-1].props.append((parts[2], PLY_TYPES[parts[1]]))
            except (KeyError, IndexError) as exc:
                raise FormatError(f"{f.name}: bad property on line {line_no}") from exc
        else:
            raise FormatError(f"{f.name}: unexpected header keyword {key!r} on line {line_no}")
    if fmt is None:
        raise FormatError(f"{f.name}: no format line in header")
    return fmt, elements, line_no


def _vertex_columns(elem, path):
    names = [p[0] for p in elem.props]
    missing = [c for c in "xyz" if c not in names]
    if missing:
        raise FormatError(f"{path}: vertex element lacks {', '.join(missing)}")
    return [names.index(c) for c in "xyz"]


def _read_ascii(f, elements, line_no, path):
    out = None
    for elem in elements:
        if elem.name == "vertex":
            cols = _vertex_columns(elem, path)
            if any(isinstance(p[1], tuple) for p in elem.props):
                raise FormatError(f"{path}: list properties on vertices are not supported")
            pts = np.empty((elem.count, 3))
        for i in range(elem.count):
            raw = f.readline()
            line_no += 1
            if not raw:
                raise FormatError(f"{path}: file ends inside element {elem.name!r} (line {line_no})")
            if elem.name != "vertex":
                continue
            vals = raw.split()
            if len(vals) != len(elem.props):
                raise FormatError(f"{path}: expected {len(elem.props)} values on line {line_no}")
            try:
                pts[i] = [float(vals[c]) for c in cols]
            except ValueError as exc:
                raise FormatError(f"{path}: non-numeric value on line {line_no}") from exc
        if elem.name == "vertex":
            out = pts
    return out


def _read_binary(f, elements, path):
    out = None
    for elem in elements:
        start = f.tell()
        if any(isinstance(p[1], tuple) for p in elem.props):
            if elem.name == "vertex":
                raise FormatError(f"{path}: list properties on vertices are not supported")
            # variable-length rows: walk them to find the end of the element
            for _ in range(elem.count):
                for _, dt in elem.props:
                    if isinstance(dt, tuple):
                        cdt = np.dtype("<" + dt[0])
                        buf = f.read(cdt.itemsize)
                        if len(buf) != cdt.itemsize:
                            raise FormatError(f"{path}: truncated list at byte {f.tell()}")
                        n = int(np.frombuffer(buf, cdt)[0])
                        size = n * np.dtype(dt[1]).itemsize
                    else:
                        size = np.dtype(dt).itemsize
                    if len(f.read(size)) != size:
                        raise FormatError(f"{path}: truncated element {elem.name!r} at byte {f.tell()}")
            continue
        dtype = np.dtype([(name, "<" + dt) for name, dt in elem.props])
        nbytes = dtype.itemsize * elem.count
        buf = f.read(nbytes)
        if len(buf) != nbytes:
            raise FormatError(f"{path}: element {elem.name!r} truncated at byte {start + len(buf)}")
        if elem.name == "vertex":
            _vertex_columns(elem, path)
            rec = np.frombuffer(buf, dtype)
            out = np.column_stack([rec[c].astype(float) for c in "xyz"])
    return out


def read_ply(path):
    """Vertex positions of an ascii or binary little-endian PLY file.

    Raises
    ------
    FormatError
        Malformed header or body (the message carries the line or byte
        offset), or no vertex element.
    UnsupportedEncoding
        Big-endian files.
    """
    path = os.fspath(path)
    with open(path, "rb") as f:
        fmt, elements, line_no = _parse_header(f)
        if not any(e.name == "vertex" for e in elements):
            raise FormatError(f"{path}: no vertex element")
        if fmt == "ascii":
            pts = _read_ascii(f, elements, line_no, path)
        else:
            pts = _read_binary(f, elements, path)
    return PointCloud(pts)


def write_ply(path, points, binary=False):
    """Write ``x y z`` vertices; ascii output uses ``%.17g`` so reading it
    back is exact."""
    pts = np.asarray(getattr(points, "points", points), dtype=float).reshape(-1, 3)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (f"ply\nformat {fmt} 1.0\nelement vertex {len(pts)}\n"
              "property double x\nproperty double y\nproperty double z\nend_header\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            f.write(pts.astype("<f8").tobytes())
        else:
            f.write("".join(f"{FLOAT_FMT % x} {FLOAT_FMT % y} {FLOAT_FMT % z}\n" for x, y, z in pts).encode("ascii"))


def read_xyz(path):
    """Whitespace-separated text, the first three columns of each line are
    ``x y z``; blank lines and ``#`` comments are skipped."""
    rows = []
    with open(path) as f:
        for no, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = line.split()
            if len(vals) < 3:
                raise FormatError(f"{path}: fewer than 3 values on line {no}")
            try:
                rows.append([float(v) for v in vals[:3]])
            except ValueError as exc:
                raise FormatError(f"{path}: non-numeric value on line {no}") from exc
    return PointCloud(np.array(rows, dtype=float).reshape(-1, 3))


def read_scan(path):
    """Load ``.ply`` or text ``.xyz``/``.txt``/``.pts`` scans by extension."""
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext == ".ply":
        return read_ply(path)
    if ext in (".xyz", ".txt", ".pts"):
        return read_xyz(path)
    raise FormatError(f"{path}: unknown scan extension {ext!r}")


def scan_info(path):
    path = os.fspath(path)
    if path.lower().endswith(".ply"):
        with open(path, "rb") as f:
            fmt, elements, _ = _parse_header(f)
        vertex = [e for e in elements if e.name == "vertex"]
        if not vertex:
            raise FormatError(f"{path}: no vertex element")
        return ScanFile(path, f"ply_{'ascii' if fmt == 'ascii' else 'binary_le'}", vertex[0].count)
    return ScanFile(path, "xyz_text", len(read_xyz(path)))


@dataclass(frozen=True)
class GtEntry:
    ref_id: int
    src_id: int
    n_fragments: int
    transform: RigidTransform


@dataclass
class GtLog:
    entries: list

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


def _as_rigid(m, where):
    if not np.all(np.isfinite(m)):
        raise FormatError(f"{where}: non-finite matrix entry")
    if np.abs(m[3] - [0, 0, 0, 1]).max() > ORTHO_FAIL:
        raise FormatError(f"{where}: bottom row is not 0 0 0 1")
    r = m[:3, :3]
    dev = np.abs(r.T @ r - np.eye(3)).max()
    if dev > ORTHO_FAIL or np.linalg.det(r) <= 0:
        raise FormatError(f"{where}: rotation block is not a rotation (deviation {dev:.2e})")
    if dev > ORTHO_WARN:
        warnings.warn(f"{where}: rotation re-orthonormalised (deviation {dev:.2e})", stacklevel=3)
    return RigidTransform(project_to_rotation(r), m[:3, 3].copy())


def read_gt_log(path):
    """Five-line records: ``i j n`` then four rows of the 4x4 matrix.

    Rotation blocks are projected onto the nearest rotation; a warning is
    issued when they were off by more than 1e-6 and :class:`FormatError`
    raised beyond 1e-4.
    """
    with open(path) as f:
        lines = [(no, ln.split()) for no, ln in enumerate(f, 1) if ln.strip()]
    if len(lines) % 5:
        raise FormatError(f"{path}: truncated record ({len(lines)} nonblank lines is not a multiple of 5)")
    entries = []
    for k in range(0, len(lines), 5):
        no, head = lines[k]
        if len(head) != 3:
            raise FormatError(f"{path}: record header on line {no} needs 3 integers")
        try:
            ids = [int(v) for v in head]
            rows = []
            for rno, row in lines[k + 1:k + 5]:
                if len(row) != 4:
                    raise FormatError(f"{path}: matrix row on line {rno} needs 4 numbers")
                rows.append([float(v) for v in row])
        except ValueError as exc:
            raise FormatError(f"{path}: non-numeric value in record starting on line {no}") from exc
        entries.append(GtEntry(ids[0], ids[1], ids[2], _as_rigid(np.array(rows), f"{path}:{no}")))
    return GtLog(entries)


def write_gt_log(path, entries):
    with open(path, "w") as f:
        for e in entries:
            f.write(f"{e.ref_id}\t{e.src_id}\t{e.n_fragments}\n")
            for row in e.transform.as_matrix():
                f.write(" ".join(FLOAT_FMT % v for v in row) + "\n")


def read_transform_json(path):
    with open(path) as f:
        data = json.load(f)
    m = np.asarray(data["matrix"] if isinstance(data, dict) else data, dtype=float)
    if m.size != 16:
        raise FormatError(f"{path}: 'matrix' must hold 16 numbers")
    return _as_rigid(m.reshape(4, 4), path)


def transform_record(transform, gt=None, src=None):
    """The output schema: row-major ``matrix`` plus error metrics when the
    ground truth (and, for RMSE, the source cloud) is known."""
    from .bench import metric_rmse, metrics_rre_rte

    rec = {"matrix": None if transform is None else transform.to_list()}
    if gt is not None and transform is not None:
        rec["rre_deg"], rec["rte_m"] = metrics_rre_rte(transform, gt)
        if src is not None:
            rec["rmse_m"] = metric_rmse(transform, gt, src)
    return rec


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=False, allow_nan=False)
        f.write("\n")


def read_pairs(path):
    """``ref<TAB>src[<TAB>overlap]`` per line; relative paths resolve
    against the directory of the pairs file."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path) as f:
        for no, line in enumerate(f, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) not in (2, 3):
                raise FormatError(f"{path}: line {no} needs 2 or 3 tab-separated fields")
            ref, src = (p if os.path.isabs(p) else os.path.join(base, p) for p in parts[:2])
            try:
                overlap = float(parts[2]) if len(parts) == 3 else None
            except ValueError as exc:
                raise FormatError(f"{path}: bad overlap on line {no}") from exc
            out.append((ref, src, overlap))
    return out


def read_matches(path):
    with open(path) as f:
        data = json.load(f)
    m = np.asarray(data["matches"] if isinstance(data, dict) else data, dtype=np.int64)
    if m.size and (m.ndim != 2 or m.shape[1] != 2):
        raise FormatError(f"{path}: matches must be a list of [ref_index, src_index] pairs")
    return m.reshape(-1, 2)


def write_matches(path, matches):
    write_json(path, {"matches": np.asarray(matches, dtype=np.int64).reshape(-1, 2).tolist()})


def write_synthetic(out_dir, pair):
    """Write ``ref.ply``, ``src.ply``, ``gt.json`` and ``matches.json``."""
    os.makedirs(out_dir, exist_ok=True)
    write_ply(os.path.join(out_dir, "ref.ply"), pair.ref)
    write_ply(os.path.join(out_dir, "src.ply"), pair.src)
    write_json(os.path.join(out_dir, "gt.json"), {"matrix": pair.gt.to_list(), "overlap": pair.overlap})
    write_matches(os.path.join(out_dir, "matches.json"), pair.matches)
