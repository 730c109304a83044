"""Pipeline configuration, read from a single INI-style text file.

Sections and keys (all optional)::

    [pipeline]    seed, num_scenes, workers, out, source (synth | files)
    [scene]       any SceneSpec field; lists comma separated
    [files]       cloud, superpoints, annotation, predictions
    [overseg]     target_superpoint_size, normal_angle_max, color_dist_max, grid_size
    [graph]       k
    [affinity]    params (path), hidden, embedding_dim
    [propagation] mode, steps, rounds, sources (labeled | annotated)
    [clustering]  lambda, beta, voxel_size
    [noise]       semantic_flip_prob, offset_sigma, volume_rel_sigma, embedding_cluster_sigma
    [metrics]     include_annotated
    [sweep]       mode, steps, rounds, k, lambda, beta  (comma separated grids)
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ValidationError
from .overseg import OversegParams
from .propagate import MODES
from .provider import DEFAULT_EMBEDDING_DIM, NoiseSpec
from .synth import SceneSpec, _parse_value, scene_spec_from_mapping

SWEEP_KEYS = ("mode", "steps", "rounds", "k", "lam", "beta")


@dataclass
class PipelineConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    source: str = "synth"
    cloud_path: str | None = None
    superpoints_path: str | None = None
    annotation_path: str | None = None
    predictions_path: str | None = None
    overseg: OversegParams = field(default_factory=OversegParams)
    k: int = 5
    affinity_params: str | None = None
    hidden: int = 8
    embedding_dim: int = DEFAULT_EMBEDDING_DIM
    mode: str = "affinity_semantic"
    steps: int = 3
    rounds: int = 3
    sources: str = "labeled"
    lam: float = 0.25
    beta: float = 0.3
    voxel_size: float = 0.05
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    include_annotated: bool = True
    out: str | None = None
    seed: int = 0
    num_scenes: int = 1
    workers: int = 1
    sweep: dict = field(default_factory=dict)

    def validate(self):
        if self.source not in ("synth", "files"):
            raise ValidationError(f"source must be 'synth' or 'files', got {self.source!r}")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.sources not in ("labeled", "annotated"):
            raise ValidationError("sources must be 'labeled' or 'annotated'")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.rounds < 0:
            raise ValidationError("rounds must be >= 0")
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if not (self.lam > 0 and self.beta > 0 and self.voxel_size > 0):
            raise ValidationError("lambda, beta and voxel_size must be positive")
        if self.num_scenes < 1 or self.workers < 1:
            raise ValidationError("num_scenes and workers must be >= 1")
        if self.source == "files" and not self.cloud_path:
            raise ValidationError("source 'files' needs [files] cloud")
        for name in ("cloud_path", "superpoints_path", "annotation_path", "predictions_path", "affinity_params"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ValidationError(f"{name}: {p} does not exist")
        for key in self.sweep:
            if key not in SWEEP_KEYS:
                raise ValidationError(f"cannot sweep over {key!r}")
        return self


_SIMPLE = {
    ("pipeline", "seed"): ("seed", int),
    ("pipeline", "num_scenes"): ("num_scenes", int),
    ("pipeline", "workers"): ("workers", int),
    ("pipeline", "out"): ("out", str),
    ("pipeline", "source"): ("source", str),
    ("files", "cloud"): ("cloud_path", str),
    ("files", "superpoints"): ("superpoints_path", str),
    ("files", "annotation"): ("annotation_path", str),
    ("files", "predictions"): ("predictions_path", str),
    ("graph", "k"): ("k", int),
    ("affinity", "params"): ("affinity_params", str),
    ("affinity", "hidden"): ("hidden", int),
    ("affinity", "embedding_dim"): ("embedding_dim", int),
    ("propagation", "mode"): ("mode", str),
    ("propagation", "steps"): ("steps", int),
    ("propagation", "rounds"): ("rounds", int),
    ("propagation", "sources"): ("sources", str),
    ("clustering", "lambda"): ("lam", float),
    ("clustering", "beta"): ("beta", float),
    ("clustering", "voxel_size"): ("voxel_size", float),
    ("metrics", "include_annotated"): ("include_annotated", lambda s: s.strip().lower() in ("1", "true", "yes")),
}


def _typed(dc_type, mapping, section):
    names = {f.name: f.type for f in fields(dc_type)}
    kwargs = {}
    for key, raw in mapping.items():
        if key not in names:
            raise ValidationError(f"unknown key {key!r} in [{section}]")
        kwargs[key] = _parse_value(raw)
    return kwargs


def load_config(path) -> PipelineConfig:
    parser = configparser.ConfigParser()
    try:
        ok = parser.read(path)
    except configparser.Error as err:
        raise ValidationError(f"{path}: {err}") from None
    if not ok:
        raise ValidationError(f"{path}: cannot read config")
    base = Path(path).parent
    cfg = PipelineConfig()
    for section in parser.sections():
        items = dict(parser[section])
        if section == "scene":
            cfg.scene = scene_spec_from_mapping(items)
            continue
        if section == "overseg":
            cfg.overseg = OversegParams(**_typed(OversegParams, items, section))
            continue
        if section == "noise":
            cfg.noise = NoiseSpec(**_typed(NoiseSpec, items, section))
            continue
        if section == "sweep":
            for key, raw in items.items():
                key = "lam" if key == "lambda" else key
                val = _parse_value(raw)
                cfg.sweep[key] = list(val) if isinstance(val, tuple) else [val]
            continue
        for key, raw in items.items():
            spec = _SIMPLE.get((section, key))
            if spec is None:
                raise ValidationError(f"unknown key {key!r} in [{section}]")
            name, conv = spec
            val = conv(raw.strip())
            if section in ("files",) or (section, key) == ("affinity", "params"):
                val = str((base / val)) if not Path(val).is_absolute() else val
            setattr(cfg, name, val)
    return cfg


def with_overrides(cfg: PipelineConfig, **overrides) -> PipelineConfig:
    """Copy of ``cfg`` with every non-None override applied."""
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
