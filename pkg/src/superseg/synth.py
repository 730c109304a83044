"""Synthetic scenes with known instances, plus simulated one-click annotation."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import DomainError, GenerationError, ValidationError
from .pcio import PointCloud

SHAPE_KINDS = ("box", "sphere", "plane-slab")


@dataclass
class SceneSpec:
    """Parameters of a synthetic scene.

    Instances are axis-aligned primitives placed uniformly inside a cube of
    side ``extent``. Placement enforces both the centroid ``spacing`` and a
    surface ``clearance`` between bounding spheres so that instances never
    touch.
    """

    num_instances: int = 4
    classes: tuple = (0, 1, 2)
    shape_kinds: tuple = SHAPE_KINDS
    points_per_instance: tuple = (400, 800)
    spacing: float = 1.0
    noise_sigma: float = 0.0
    rng_seed: int = 0
    extent: float = 5.0
    size_range: tuple = (0.3, 0.6)
    clearance: float = 0.3
    max_retries: int = 200

    def __post_init__(self):
        self.classes = tuple(int(c) for c in self.classes)
        self.shape_kinds = tuple(self.shape_kinds)
        self.points_per_instance = tuple(int(v) for v in self.points_per_instance)
        self.size_range = tuple(float(v) for v in self.size_range)
        if self.num_instances < 1:
            raise ValidationError("num_instances must be >= 1")
        if not self.spacing > 0:
            raise ValidationError("spacing must be > 0")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not self.classes:
            raise ValidationError("classes must be nonempty")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown or not self.shape_kinds:
            raise ValidationError(f"shape_kinds must be a nonempty subset of {SHAPE_KINDS}")
        lo, hi = self.points_per_instance
        if not 1 <= lo <= hi:
            raise ValidationError("points_per_instance must satisfy 1 <= min <= max")


@dataclass(frozen=True)
class WeakAnnotation:
    """One clicked point per instance as ``(point_index, instance_id, semantic_class)``."""

    entries: tuple

    def __len__(self):
        return len(self.entries)

    def save(self, path):
        lines = ["point_index\tinstance_id\tsemantic_class"]
        lines += [f"{p}\t{i}\t{c}" for p, i, c in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        rows = Path(path).read_text().splitlines()[1:]
        return cls(tuple(tuple(int(v) for v in r.split("\t")) for r in rows if r))


def _parse_value(raw):
    raw = raw.strip()
    if "," in raw:
        return tuple(_parse_value(v) for v in raw.split(",") if v.strip())
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw


def scene_spec_from_mapping(mapping):
    known = {f.name for f in fields(SceneSpec)}
    kwargs = {}
    for key, raw in mapping.items():
        key = key.replace("-", "_")
        if key not in known:
            raise ValidationError(f"unknown scene key {key!r}")
        val = _parse_value(raw) if isinstance(raw, str) else raw
        if key in ("classes", "shape_kinds", "points_per_instance", "size_range") and not isinstance(val, tuple):
            val = (val,)
        kwargs[key] = val
    return SceneSpec(**kwargs)


def load_scene_spec(path, section="scene"):
    """Read a :class:`SceneSpec` from the ``[scene]`` section of an INI file.

    Lists are comma separated, e.g. ``classes = 0, 1, 2``.
    """
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ValidationError(f"{path}: cannot read scene config")
    if section not in parser:
        raise ValidationError(f"{path}: missing [{section}] section")
    return scene_spec_from_mapping(dict(parser[section]))


def _place_centres(spec, radii, rng):
    """Rejection sampling; every instance stays inside the scene cube.

    A full layout is restarted when one instance cannot be placed, up to
    ``max_retries`` layouts.
    """
    if (2 * radii > spec.extent).any():
        raise GenerationError("scene extent too small for the requested instance sizes")
    per_instance = 100
    for _ in range(spec.max_retries):
        centres = []
        for i in range(spec.num_instances):
            for _ in range(per_instance):
                c = rng.uniform(radii[i], spec.extent - radii[i], size=3)
                ok = all(
                    np.linalg.norm(c - q) >= max(spec.spacing, radii[i] + radii[j] + spec.clearance)
                    for j, q in enumerate(centres)
                )
                if ok:
                    centres.append(c)
                    break
            else:
                break
        if len(centres) == spec.num_instances:
            return np.array(centres)
    raise GenerationError(
        f"could not place {spec.num_instances} instances after {spec.max_retries} retries; "
        f"spacing {spec.spacing} infeasible within extent {spec.extent}"
    )


def _sample_box_surface(half, n, rng):
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]) * 2
    areas = np.repeat(areas, 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, size=(n, 3)) * half
    normals = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    normals[np.arange(n), axis] = sign
    return pts, normals


def _sample_sphere_surface(radius, n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius, v.copy()


def sample_shape(kind, size, n, rng):
    """Uniform surface samples (relative to the shape centre) and outward normals."""
    if kind == "sphere":
        return _sample_sphere_surface(size, n, rng)
    if kind == "box":
        return _sample_box_surface(np.full(3, size), n, rng)
    if kind == "plane-slab":
        return _sample_box_surface(np.array([size, size, 0.1 * size]), n, rng)
    raise ValidationError(f"unknown shape kind {kind!r}")


def _bounding_radius(kind, size):
    if kind == "sphere":
        return size
    if kind == "box":
        return size * np.sqrt(3)
    return size * np.sqrt(2.01)


def generate_scene(spec: SceneSpec) -> PointCloud:
    rng = np.random.default_rng(spec.rng_seed)
    kinds = [spec.shape_kinds[rng.integers(len(spec.shape_kinds))] for _ in range(spec.num_instances)]
    sizes = rng.uniform(*spec.size_range, size=spec.num_instances)
    radii = np.array([_bounding_radius(k, s) for k, s in zip(kinds, sizes)])
    centres = _place_centres(spec, radii, rng)
    lo, hi = spec.points_per_instance
    pos, nrm, col, sem, ins = [], [], [], [], []
    for i in range(spec.num_instances):
        n = int(rng.integers(lo, hi + 1))
        p, nn = sample_shape(kinds[i], sizes[i], n, rng)
        if spec.noise_sigma > 0:
            p = p + rng.normal(scale=spec.noise_sigma, size=p.shape)
        base = rng.uniform(0.1, 0.9, size=3)
        c = np.clip(base + rng.normal(scale=0.02, size=(n, 3)), 0.0, 1.0)
        pos.append(p + centres[i])
        nrm.append(nn)
        col.append(c)
        sem.append(np.full(n, spec.classes[i % len(spec.classes)]))
        ins.append(np.full(n, i))
    # f32-representable values keep the binary format lossless
    positions = np.concatenate(pos).astype(np.float32).astype(np.float64)
    normals = np.concatenate(nrm).astype(np.float32).astype(np.float64)
    colors = np.concatenate(col).astype(np.float32).astype(np.float64)
    return PointCloud(positions, colors, normals, np.concatenate(sem), np.concatenate(ins))


def instance_centroids(cloud: PointCloud):
    """Mapping gt instance id -> mean position of its points."""
    return {int(i): cloud.positions[cloud.gt_instance == i].mean(axis=0) for i in cloud.instance_ids()}


def sample_weak_labels(cloud: PointCloud, seed) -> WeakAnnotation:
    """Click one uniformly random point of every ground-truth instance."""
    if cloud.gt_instance is None:
        raise DomainError("cloud has no gt_instance labels")
    rng = np.random.default_rng(seed)
    entries = []
    for iid in cloud.instance_ids():
        members = np.flatnonzero(cloud.gt_instance == iid)
        if len(members) == 0:
            raise DomainError(f"instance {iid} has no points")
        p = int(members[rng.integers(len(members))])
        entries.append((p, int(iid), int(cloud.gt_semantic[p])))
    return WeakAnnotation(tuple(entries))
