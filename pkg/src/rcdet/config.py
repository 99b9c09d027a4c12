"""Experiment configuration: a strict YAML schema with line-anchored
errors and a canonical writer.

Strictness rules: unknown keys are rejected, and quantities that change
the outcome of an experiment (seeds, epoch/lr budget, connection
strength, dataset sizes) have no defaults and must be written out.
Architecture texture (channel widths, level count) may be omitted.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from .rc import COMPLETE_MATRIX, AddonFlags, ConnectionSpec
from .scenes import SceneSpec

ADDON_NAMES = ("projection_1x1", "norm", "activation")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorCfg:
    num_levels: int = 3
    pafpn: bool = False
    stem_channels: int = 8
    stage_channels: tuple = (12, 16, 16)
    pyramid_channels: int = 12
    head_channels: int = 12


@dataclass
class ExperimentConfig:
    scene: SceneSpec
    train_count: int
    test_count: int
    detector: DetectorCfg
    connection: Optional[ConnectionSpec]
    epochs: int
    lr: float
    seeds: tuple
    outputs: str

    def __eq__(self, other):
        if not isinstance(other, ExperimentConfig):
            return NotImplemented
        return save_text(self) == save_text(other)

    def config_hash(self) -> str:
        return hashlib.sha256(save_text(self).encode()).hexdigest()[:12]


# --- loading ---------------------------------------------------------------

def _line_index(node, prefix=(), out=None):
    """Map key paths to 1-based source lines for error anchoring."""
    if out is None:
        out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (str(k.value),)
            out[path] = k.start_mark.line + 1
            _line_index(v, path, out)
    return out


class _Section:
    def __init__(self, data, lines, path):
        if not isinstance(data, dict):
            raise ConfigError(f"line {lines.get(path, 1)}: "
                              f"{'.'.join(path) or 'top level'} must be a mapping")
        self.data = dict(data)
        self.lines = lines
        self.path = path

    def _line(self, key=None):
        p = self.path + (key,) if key else self.path
        return self.lines.get(p, self.lines.get(self.path, 1))

    def take(self, key, kind, required=False, default=None):
        if key not in self.data:
            if required:
                raise ConfigError(f"line {self._line()}: "
                                  f"{'.'.join(self.path + (key,))} is required")
            return default
        val = self.data.pop(key)
        where = f"line {self._line(key)}: {'.'.join(self.path + (key,))}"
        if kind is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if kind in (int, float, bool, str) and (not isinstance(val, kind)
                                                or isinstance(val, bool) is not (kind is bool)):
            raise ConfigError(f"{where} must be {kind.__name__}, got {val!r}")
        if kind is list and not isinstance(val, list):
            raise ConfigError(f"{where} must be a list, got {val!r}")
        return val

    def subsection(self, key):
        val = self.data.pop(key, None)
        if val is None:
            return None
        return _Section(val, self.lines, self.path + (key,))

    def finish(self):
        for key in self.data:
            raise ConfigError(f"line {self._line(key)}: unknown key "
                              f"{'.'.join(self.path + (key,))!r}")


def _pair(sec, key, kind, default):
    val = sec.take(key, list, default=None)
    if val is None:
        return default
    if len(val) != 2 or not all(isinstance(v, (int, float)) for v in val):
        raise ConfigError(f"line {sec._line(key)}: "
                          f"{'.'.join(sec.path + (key,))} must be two numbers")
    return (kind(val[0]), kind(val[1]))


def _scene(sec: _Section) -> tuple[SceneSpec, int, int]:
    spec = SceneSpec(
        image_size=sec.take("image_size", int, default=96),
        size_range=_pair(sec, "size_range", int, (3, 8)),
        density=sec.take("density", int, default=3),
        distractor_count=sec.take("distractor_count", int, default=2),
        distractor_scale=_pair(sec, "distractor_scale", float, (4.0, 8.0)),
        noise_level=sec.take("noise_level", float, default=0.02),
        amplitude_range=_pair(sec, "amplitude_range", float, (0.5, 1.0)),
        num_classes=sec.take("num_classes", int, default=2),
        seed=sec.take("seed", int, required=True))
    train_count = sec.take("train_count", int, required=True)
    test_count = sec.take("test_count", int, required=True)
    sec.finish()
    if train_count < 1 or test_count < 1:
        raise ConfigError(f"line {sec._line()}: dataset counts must be >= 1")
    return spec, train_count, test_count


def _detector(sec: Optional[_Section]) -> DetectorCfg:
    if sec is None:
        return DetectorCfg()
    stages = sec.take("stage_channels", list, default=None)
    cfg = DetectorCfg(
        num_levels=sec.take("num_levels", int, default=3),
        pafpn=sec.take("pafpn", bool, default=False),
        stem_channels=sec.take("stem_channels", int, default=8),
        stage_channels=tuple(stages) if stages else (12, 16, 16),
        pyramid_channels=sec.take("pyramid_channels", int, default=12),
        head_channels=sec.take("head_channels", int, default=12))
    sec.finish()
    if len(cfg.stage_channels) != 3:
        raise ConfigError(f"line {sec._line('stage_channels')}: "
                          "stage_channels needs exactly 3 entries")
    return cfg


def _connection(sec: Optional[_Section]) -> Optional[ConnectionSpec]:
    if sec is None:
        return None
    form = sec.take("form", str, required=True)
    n = sec.take("n", float, required=form in
                 ("economical", "variant_sm", "variant_sl"), default=4.0)
    matrix = sec.take("matrix", list, default=None)
    if matrix is not None:
        if len(matrix) != 16 or not all(isinstance(v, (int, float)) for v in matrix):
            raise ConfigError(f"line {sec._line('matrix')}: "
                              "matrix must hold 16 numbers, row-major")
        matrix = np.array(matrix, dtype=np.float64).reshape(4, 4)
    addons = sec.take("addons", list, default=[])
    for a in addons:
        if a not in ADDON_NAMES:
            raise ConfigError(f"line {sec._line('addons')}: unknown addon {a!r} "
                              f"(choose from {', '.join(ADDON_NAMES)})")
    attach = sec.take("attach_point", str, default="topdown_out")
    uniform = sec.take("variant_uniform", bool, default=False)
    sec.finish()
    try:
        return ConnectionSpec(
            form=form, n=n, matrix=matrix,
            addons=AddonFlags(**{a: True for a in addons}),
            attach_point=attach, variant_uniform=uniform)
    except ValueError as e:
        raise ConfigError(f"line {sec._line()}: {e}") from e


def load_text(text: str) -> ExperimentConfig:
    try:
        root_node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        line = mark.line + 1 if mark else 1
        raise ConfigError(f"line {line}: {e.problem or 'unparseable yaml'}") from e
    lines = _line_index(root_node)
    top = _Section(data if data is not None else {}, lines, ())

    scene_sec = top.subsection("scene")
    if scene_sec is None:
        raise ConfigError("line 1: scene section is required")
    scene, train_count, test_count = _scene(scene_sec)
    detector = _detector(top.subsection("detector"))
    connection = _connection(top.subsection("connection"))

    training = top.subsection("training")
    if training is None:
        raise ConfigError("line 1: training section is required")
    epochs = training.take("epochs", int, required=True)
    lr = training.take("lr", float, required=True)
    seeds = training.take("seeds", list, required=True)
    training.finish()
    if epochs < 0:
        raise ConfigError(f"line {training._line('epochs')}: epochs must be >= 0")
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError(f"line {training._line('seeds')}: "
                          "seeds must be a non-empty list of integers")

    outputs = top.take("outputs", str, required=True)
    top.finish()

    if connection is not None and connection.form == "complete" and detector.num_levels != 4:
        raise ConfigError("line 1: the complete form needs detector.num_levels: 4")
    return ExperimentConfig(scene=scene, train_count=train_count,
                            test_count=test_count, detector=detector,
                            connection=connection, epochs=epochs, lr=lr,
                            seeds=tuple(seeds), outputs=outputs)


def load(path) -> ExperimentConfig:
    with open(path) as f:
        return load_text(f.read())


# --- saving ----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _fmt_list(vals) -> str:
    return "[" + ", ".join(_fmt(v) for v in vals) + "]"


def save_text(cfg: ExperimentConfig) -> str:
    s = cfg.scene
    out = ["scene:"]
    out.append(f"  image_size: {s.image_size}")
    out.append(f"  size_range: {_fmt_list(s.size_range)}")
    out.append(f"  density: {s.density}")
    out.append(f"  distractor_count: {s.distractor_count}")
    out.append(f"  distractor_scale: {_fmt_list(float(v) for v in s.distractor_scale)}")
    out.append(f"  noise_level: {_fmt(float(s.noise_level))}")
    out.append(f"  amplitude_range: {_fmt_list(float(v) for v in s.amplitude_range)}")
    out.append(f"  num_classes: {s.num_classes}")
    out.append(f"  seed: {s.seed}")
    out.append(f"  train_count: {cfg.train_count}")
    out.append(f"  test_count: {cfg.test_count}")
    d = cfg.detector
    out.append("detector:")
    out.append(f"  num_levels: {d.num_levels}")
    out.append(f"  pafpn: {_fmt(d.pafpn)}")
    out.append(f"  stem_channels: {d.stem_channels}")
    out.append(f"  stage_channels: {_fmt_list(d.stage_channels)}")
    out.append(f"  pyramid_channels: {d.pyramid_channels}")
    out.append(f"  head_channels: {d.head_channels}")
    c = cfg.connection
    if c is not None:
        out.append("connection:")
        out.append(f"  form: {c.form}")
        if c.form in ("economical", "variant_sm", "variant_sl"):
            out.append(f"  n: {_fmt(float(c.n))}")
        if c.form == "complete":
            out.append(f"  matrix: {_fmt_list(float(v) for v in np.asarray(c.matrix).reshape(-1))}")
        flags = [a for a in ADDON_NAMES if getattr(c.addons, a)]
        out.append(f"  addons: {_fmt_list(flags)}")
        out.append(f"  attach_point: {c.attach_point}")
        out.append(f"  variant_uniform: {_fmt(c.variant_uniform)}")
    out.append("training:")
    out.append(f"  epochs: {cfg.epochs}")
    out.append(f"  lr: {_fmt(float(cfg.lr))}")
    out.append(f"  seeds: {_fmt_list(cfg.seeds)}")
    out.append(f"outputs: {cfg.outputs}")
    return "\n".join(out) + "\n"


def save(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        f.write(save_text(cfg))
