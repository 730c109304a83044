"""Point cloud containers, file formats and voxel occupancy counting.

Two cloud formats are supported:

* ``ply-ascii``: a PLY subset with a single ``element vertex`` block whose
  properties are ``x y z`` optionally followed by ``red green blue``,
  ``nx ny nz`` and ``semantic instance`` (in that order of groups).
  Colors are written as floats in [0, 1].
* ``columnar-binary``: magic ``SPW1``, little-endian ``u32`` point count,
  ``f32`` position triples, then four optional sections (colors, normals,
  semantics, instances), each preceded by a one-byte presence flag.
  Colors and normals are ``f32`` triples, semantics and instances ``i32``.

Result files are tab separated; see :func:`write_results`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, ParseError, SupersegError, ValidationError

DEFAULT_VOXEL_SIZE = 0.05

BINARY_MAGIC = b"SPW1"
FORMATS = ("ply-ascii", "columnar-binary")


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None
    gt_semantic: np.ndarray | None = None
    gt_instance: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        bad = ~np.isfinite(self.positions).all(axis=1)
        if bad.any():
            raise ValidationError(f"non-finite coordinate at point {int(np.flatnonzero(bad)[0])}")
        if self.colors is not None:
            self.colors = _column(self.colors, n, "colors", (n, 3), np.float64)
        if self.normals is not None:
            self.normals = _column(self.normals, n, "normals", (n, 3), np.float64)
            norms = np.linalg.norm(self.normals, axis=1)
            off = np.abs(norms - 1.0) > 1e-6
            if off.any():
                raise ValidationError(f"normal of point {int(np.flatnonzero(off)[0])} is not unit length")
        if self.gt_semantic is not None:
            self.gt_semantic = _column(self.gt_semantic, n, "gt_semantic", (n,), np.int64)
        if self.gt_instance is not None:
            self.gt_instance = _column(self.gt_instance, n, "gt_instance", (n,), np.int64)
            if self.gt_semantic is None:
                raise ValidationError("gt_instance requires gt_semantic")
            _check_single_class(self.gt_instance, self.gt_semantic)

    def __len__(self):
        return len(self.positions)

    @property
    def has_ground_truth(self):
        return self.gt_semantic is not None and self.gt_instance is not None

    def instance_ids(self):
        """Sorted ground-truth instance ids, excluding the unassigned id -1."""
        if self.gt_instance is None:
            return np.zeros(0, dtype=np.int64)
        ids = np.unique(self.gt_instance)
        return ids[ids >= 0]

    def subset(self, index):
        index = np.asarray(index)
        pick = lambda a: None if a is None else a[index]
        return PointCloud(
            self.positions[index],
            pick(self.colors),
            pick(self.normals),
            pick(self.gt_semantic),
            pick(self.gt_instance),
        )


def _column(values, n, name, shape, dtype):
    arr = np.asarray(values)
    if arr.shape != shape:
        raise ValidationError(f"{name} has shape {arr.shape}, expected {shape} for {n} points")
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    return arr.astype(dtype, copy=False)


def _check_single_class(instances, semantics):
    mask = instances >= 0
    if not mask.any():
        return
    pairs = np.unique(np.stack([instances[mask], semantics[mask]], axis=1), axis=0)
    ids, counts = np.unique(pairs[:, 0], return_counts=True)
    if (counts > 1).any():
        raise ValidationError(f"instance {int(ids[counts > 1][0])} spans more than one semantic class")


@dataclass
class VoxelGrid:
    voxel_size: float
    origin: np.ndarray
    occupied: set = field(default_factory=set)

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValidationError("voxel_size must be positive")

    @classmethod
    def from_points(cls, positions, voxel_size, origin=None):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if origin is None:
            origin = positions.min(axis=0)
        idx = voxel_indices(positions, voxel_size, origin)
        return cls(voxel_size, np.asarray(origin, dtype=np.float64), {tuple(map(int, r)) for r in idx})

    def __len__(self):
        return len(self.occupied)


def voxel_indices(positions, voxel_size, origin):
    """Integer cell index of every point; cells are half-open ``[k, k+1)``."""
    if not voxel_size > 0:
        raise ValidationError("voxel_size must be positive")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    return np.floor((positions - np.asarray(origin, dtype=np.float64)) / voxel_size).astype(np.int64)


def voxel_count(positions, voxel_size=DEFAULT_VOXEL_SIZE):
    """Number of occupied voxels, with the grid anchored at the subset's min corner."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        raise DomainError("voxel_count of an empty point set")
    idx = voxel_indices(positions, voxel_size, positions.min(axis=0))
    return int(len(np.unique(idx, axis=0)))


# ---------------------------------------------------------------------------
# cloud files


def save_point_cloud(path, cloud: PointCloud, format="ply-ascii"):
    path = Path(path)
    if format == "ply-ascii":
        _save_ply(path, cloud)
    elif format == "columnar-binary":
        _save_binary(path, cloud)
    else:
        raise ValidationError(f"unknown point cloud format {format!r}")


def load_point_cloud(path, format=None) -> PointCloud:
    path = Path(path)
    if format is None:
        format = guess_format(path)
    if not path.exists():
        raise SupersegError(f"{path}: no such file")
    if format == "ply-ascii":
        return _load_ply(path)
    if format == "columnar-binary":
        return _load_binary(path)
    raise ValidationError(f"unknown point cloud format {format!r}")


def guess_format(path):
    return "columnar-binary" if Path(path).suffix in (".spw", ".bin") else "ply-ascii"


_PLY_GROUPS = [
    ("colors", ("red", "green", "blue")),
    ("normals", ("nx", "ny", "nz")),
    ("labels", ("semantic", "instance")),
]


def _save_ply(path, cloud):
    props = ["x", "y", "z"]
    cols = [cloud.positions]
    if cloud.colors is not None:
        props += ["red", "green", "blue"]
        cols.append(cloud.colors)
    if cloud.normals is not None:
        props += ["nx", "ny", "nz"]
        cols.append(cloud.normals)
    labels = cloud.gt_semantic is not None and cloud.gt_instance is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    for p in props:
        lines.append(f"property double {p}")
    if labels:
        lines += ["property int semantic", "property int instance"]
    lines.append("end_header")
    data = np.concatenate(cols, axis=1) if cols else np.zeros((len(cloud), 0))
    for i in range(len(cloud)):
        row = [repr(float(v)) for v in data[i]]
        if labels:
            row += [str(int(cloud.gt_semantic[i])), str(int(cloud.gt_instance[i]))]
        lines.append(" ".join(row))
    path.write_text("\n".join(lines) + "\n")


def _load_ply(path):
    with open(path, "r") as fh:
        text = fh.read().split("\n")
    if not text or text[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path, 1)
    n = None
    props = []
    lineno = 1
    in_vertex = False
    for lineno in range(2, len(text) + 1):
        tokens = text[lineno - 1].split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1:2] != ["ascii"]:
                raise ParseError(f"unsupported format {' '.join(tokens[1:])!r}", path, lineno)
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", path, lineno)
            in_vertex = tokens[1] == "vertex"
            if not in_vertex:
                raise ParseError(f"unsupported element {tokens[1]!r}", path, lineno)
            try:
                n = int(tokens[2])
            except ValueError:
                raise ParseError("vertex count is not an integer", path, lineno) from None
        elif tokens[0] == "property":
            if len(tokens) != 3 or not in_vertex:
                raise ParseError("malformed property line", path, lineno)
            props.append(tokens[2])
        elif tokens[0] == "end_header":
            break
        else:
            raise ParseError(f"unexpected header keyword {tokens[0]!r}", path, lineno)
    else:
        raise ParseError("missing end_header", path, lineno)
    if n is None:
        raise ParseError("no vertex element declared", path, lineno)
    expected = ["x", "y", "z"]
    layout = {}
    for name, group in _PLY_GROUPS:
        start = len(expected)
        if tuple(props[start:start + len(group)]) == group:
            layout[name] = slice(start, start + len(group))
            expected += list(group)
    if props != expected:
        raise ParseError(f"unsupported property layout {props}", path, lineno)

    body_start = lineno + 1
    rows = np.empty((n, len(props)), dtype=np.float64)
    filled = 0
    for offset, line in enumerate(text[lineno:]):
        tokens = line.split()
        if not tokens:
            continue
        if filled >= n:
            raise ParseError("more vertex records than declared", path, body_start + offset)
        if len(tokens) != len(props):
            raise ParseError(
                f"expected {len(props)} values, got {len(tokens)}", path, body_start + offset
            )
        try:
            rows[filled] = [float(t) for t in tokens]
        except ValueError:
            raise ParseError("non-numeric value", path, body_start + offset) from None
        filled += 1
    if filled != n:
        raise ParseError(f"declared {n} vertices, found {filled}", path, len(text))

    def grab(name):
        return rows[:, layout[name]] if name in layout else None

    labels = grab("labels")
    return PointCloud(
        rows[:, :3],
        colors=grab("colors"),
        normals=grab("normals"),
        gt_semantic=None if labels is None else labels[:, 0].astype(np.int64),
        gt_instance=None if labels is None else labels[:, 1].astype(np.int64),
    )


def _save_binary(path, cloud):
    n = len(cloud)
    parts = [BINARY_MAGIC, struct.pack("<I", n), cloud.positions.astype("<f4").tobytes()]
    for arr, dtype in (
        (cloud.colors, "<f4"),
        (cloud.normals, "<f4"),
        (cloud.gt_semantic, "<i4"),
        (cloud.gt_instance, "<i4"),
    ):
        if arr is None:
            parts.append(b"\x00")
        else:
            parts.append(b"\x01")
            parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    path.write_bytes(b"".join(parts))


def _load_binary(path):
    buf = path.read_bytes()
    if buf[:4] != BINARY_MAGIC:
        raise ParseError("bad magic, expected SPW1", path, offset=0)
    if len(buf) < 8:
        raise ParseError("truncated header", path, offset=4)
    (n,) = struct.unpack_from("<I", buf, 4)
    pos = 8

    def take(count, dtype, width):
        nonlocal pos
        nbytes = count * np.dtype(dtype).itemsize
        if pos + nbytes > len(buf):
            raise ParseError("truncated section", path, offset=pos)
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
        pos += nbytes
        return arr.reshape(-1, width) if width > 1 else arr

    positions = take(3 * n, "<f4", 3).astype(np.float64)
    sections = []
    for dtype, width in (("<f4", 3), ("<f4", 3), ("<i4", 1), ("<i4", 1)):
        if pos >= len(buf):
            raise ParseError("missing presence flag", path, offset=pos)
        flag = buf[pos]
        pos += 1
        if flag not in (0, 1):
            raise ParseError(f"invalid presence flag {flag}", path, offset=pos - 1)
        if flag:
            arr = take(width * n, dtype, width)
            sections.append(arr.astype(np.float64 if dtype == "<f4" else np.int64))
        else:
            sections.append(None)
    if pos != len(buf):
        raise ParseError("trailing bytes after last section", path, offset=pos)
    colors, normals, sem, inst = sections
    return PointCloud(positions, colors, normals, sem, inst)


# ---------------------------------------------------------------------------
# result files


def write_results(path, instances, report=None):
    """Write instance membership, a per-instance summary and a metrics block.

    Layout (tab separated, ``#`` lines open a section)::

        # assignments
        point_index  instance_id  semantic_id  confidence
        # instances
        instance_id  semantic_id  confidence  num_points  superpoint_ids
        # metrics
        key  value

    Assignment rows cover only points that belong to an instance, sorted by
    point index. ``superpoint_ids`` is a comma-separated list.
    """
    path = Path(path)
    rows = []
    for iid, inst in enumerate(instances.instances):
        for p in inst.point_ids:
            rows.append((int(p), iid, inst.semantic_class, inst.confidence))
    rows.sort()
    out = [f"# assignments provenance={instances.provenance}", "point_index\tinstance_id\tsemantic_id\tconfidence"]
    out += [f"{p}\t{i}\t{s}\t{_fmt(c)}" for p, i, s, c in rows]
    out += ["# instances", "instance_id\tsemantic_id\tconfidence\tnum_points\tsuperpoint_ids"]
    for iid, inst in enumerate(instances.instances):
        sps = ",".join(str(int(s)) for s in sorted(inst.superpoint_ids))
        out.append(f"{iid}\t{inst.semantic_class}\t{_fmt(inst.confidence)}\t{len(inst.point_ids)}\t{sps}")
    if report is not None:
        out += ["# metrics", "key\tvalue"]
        out += [f"{k}\t{v}" for k, v in report.as_kv().items()]
    try:
        path.write_text("\n".join(out) + "\n")
    except OSError as err:
        raise SupersegError(f"{path}: cannot write results ({err.strerror})") from err


def read_results(path):
    """Parse a file written by :func:`write_results` into ``(InstanceSet, metrics dict)``."""
    from .instance import Instance, InstanceSet

    path = Path(path)
    section = None
    provenance = "clustered"
    members = {}
    summary = []
    metrics = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line:
            continue
        if line.startswith("#"):
            head = line[1:].split()
            section = head[0]
            for tok in head[1:]:
                if tok.startswith("provenance="):
                    provenance = tok.split("=", 1)[1]
            continue
        cols = line.split("\t")
        if cols[0] in ("point_index", "instance_id", "key"):
            continue
        try:
            if section == "assignments":
                members.setdefault(int(cols[1]), []).append(int(cols[0]))
            elif section == "instances":
                sps = [int(s) for s in cols[4].split(",")] if len(cols) > 4 and cols[4] else []
                summary.append((int(cols[0]), int(cols[1]), float(cols[2]), sps))
            elif section == "metrics":
                metrics[cols[0]] = cols[1]
            else:
                raise ParseError("row outside a known section", path, lineno)
        except (IndexError, ValueError):
            raise ParseError("malformed row", path, lineno) from None
    insts = [
        Instance(frozenset(sps), sem, conf, np.array(sorted(members.get(iid, [])), dtype=np.int64))
        for iid, sem, conf, sps in summary
    ]
    return InstanceSet(insts, provenance), metrics


def _fmt(x):
    return repr(float(x))
