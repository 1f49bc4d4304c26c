"""INI run configuration: one dataclass per section, ``section.key`` addressing."""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field

from . import engine as E
from .networks import PRESETS
from .data import PhantomSpec
from .objectives import GanConfig
from .radon import ScanGeometry
from .sensor import NoiseParams
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key, msg):
        super().__init__(f"{key}: {msg}")
        self.key = key


def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


@dataclass
class GeometrySection:
    image_size: int = 64
    n_angles: int = 64
    n_detectors: int = 64
    pixel_spacing: float = 0.05


@dataclass
class NoiseSection:
    s: float = math.log(1e3)
    epsilon: float = 1.0
    k: float = 1.0
    b: int = 16
    # declared default ladder
    ladder: tuple = (math.log(1e2), math.log(1e3), math.log(1e4))


@dataclass
class TrainSection:
    profile: str = "desk"
    batch_size: int = 8
    steps: int = 2000
    epochs: int = 10
    lr_peak: float = 1e-3
    warmup_batches: int = 100
    halve_every: int = 700
    seed: int = 0
    g1: str = "T16"
    g2: str = "T32"
    bridge_channels: int = 16
    posterior_steps: int = 1500
    posterior_channels: int = 32
    posterior_lr_peak: float = 3e-3
    posterior_warmup_batches: int = 50
    posterior_halve_every: int = 500
    checkpoint_every: int = 500


@dataclass
class GanSection:
    # "lambda" is a keyword, hence lam
    lam: float = 0.05
    n_critic: int = 5
    steps: int = 600
    lr_peak: float = 1e-3
    warmup_batches: int = 50
    halve_every: int = 300
    z_shape: tuple = (8, 4, 4)
    critic_channels: int = 16
    critic_depth: int = 5
    critic_lr: float = 2e-4
    refine_iters: int = 200
    refine_lr: float = 1e-4


@dataclass
class DataSection:
    phantom: str = "random_ellipses"
    n_ellipses_min: int = 3
    n_ellipses_max: int = 8
    intensity_min: float = 0.1
    intensity_max: float = 0.9
    # printed value kept; -950 is the likely intended one
    hu_threshold: float = -9050.0
    hu_window: tuple = (-1000.0, 2000.0)


@dataclass
class PathsSection:
    run_dir: str = "runs/default"


@dataclass
class RunConfig:
    geometry: GeometrySection = field(default_factory=GeometrySection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    train: TrainSection = field(default_factory=TrainSection)
    gan: GanSection = field(default_factory=GanSection)
    data: DataSection = field(default_factory=DataSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # --- derived objects ---
    def scan_geometry(self) -> ScanGeometry:
        g = self.geometry
        return ScanGeometry(g.image_size, g.n_angles, g.n_detectors, g.pixel_spacing)

    def noise_params(self, s: float | None = None) -> NoiseParams:
        n = self.noise
        return NoiseParams(n.s if s is None else s, n.epsilon, n.k, n.b)

    def schedule(self) -> E.LrSchedule:
        t = self.train
        return E.LrSchedule(t.lr_peak, t.warmup_batches, t.halve_every)

    def train_config(self, kind: str = "recon", steps: int | None = None) -> TrainConfig:
        t, gan = self.train, self.gan
        if kind == "recon":
            default, sched = t.steps, self.schedule()
        elif kind == "posterior":
            default = t.posterior_steps
            sched = E.LrSchedule(t.posterior_lr_peak, t.posterior_warmup_batches, t.posterior_halve_every)
        elif kind == "gan":
            default, sched = gan.steps, E.LrSchedule(gan.lr_peak, gan.warmup_batches, gan.halve_every)
        else:
            raise ValueError(f"unknown training kind {kind!r}")
        return TrainConfig(t.batch_size, default if steps is None else steps, sched, tuple(self.noise.ladder), t.seed)

    def phantom_spec(self) -> PhantomSpec:
        d = self.data
        return PhantomSpec(d.phantom, (d.n_ellipses_min, d.n_ellipses_max),
                           (d.intensity_min, d.intensity_max), self.train.seed)

    def gan_config(self) -> GanConfig:
        return GanConfig(self.gan.lam, 1.0, self.gan.n_critic)

    def validate(self):
        try:
            self.scan_geometry()
        except ValueError as exc:
            raise ConfigError("geometry", str(exc)) from None
        try:
            self.noise_params()
        except ValueError as exc:
            raise ConfigError("noise", str(exc)) from None
        try:
            self.phantom_spec()
        except ValueError as exc:
            raise ConfigError("data", str(exc)) from None
        if len(self.data.hu_window) != 2 or self.data.hu_window[0] >= self.data.hu_window[1]:
            raise ConfigError("data.hu_window", "must be two increasing values")
        if self.train.profile not in PROFILES:
            raise ConfigError("train.profile", f"unknown profile {self.train.profile!r}")
        if self.train.profile == "paper" and self.geometry.image_size != 256:
            raise ConfigError("train.profile", "profile 'paper' requires geometry.image_size = 256")
        for key in ("g1", "g2"):
            if getattr(self.train, key) not in PRESETS:
                raise ConfigError(f"train.{key}", f"unknown preset {getattr(self.train, key)!r}")
        if self.train.batch_size < 2:
            raise ConfigError("train.batch_size", "must be >= 2")
        if self.gan.lam < 0:
            raise ConfigError("gan.lam", "must be >= 0")
        if len(self.gan.z_shape) != 3:
            raise ConfigError("gan.z_shape", "must have three entries (channels, height, width)")
        return self

    # --- serialization ---
    def items(self):
        for sec in dataclasses.fields(self):
            section = getattr(self, sec.name)
            for f in dataclasses.fields(section):
                yield f"{sec.name}.{f.name}", getattr(section, f.name)

    def set(self, dotted: str, text: str):
        sec_name, _, key = dotted.partition(".")
        section = getattr(self, sec_name, None) if sec_name in _SECTIONS else None
        if section is None or key not in {f.name for f in dataclasses.fields(section)}:
            raise ConfigError(dotted, "unknown key")
        current = getattr(section, key)
        try:
            if isinstance(current, tuple):
                value = _ints(text) if all(isinstance(v, int) for v in current) else _floats(text)
            elif isinstance(current, bool):
                value = str(text).lower() in ("1", "true", "yes", "on")
            else:
                value = type(current)(text)
        except (TypeError, ValueError):
            raise ConfigError(dotted, f"cannot parse {text!r} as {type(current).__name__}") from None
        setattr(section, key, value)

    def dump(self) -> str:
        lines, last = [], None
        for dotted, value in self.items():
            sec, key = dotted.split(".", 1)
            if sec != last:
                if last is not None:
                    lines.append("")
                lines.append(f"[{sec}]")
                last = sec
            if isinstance(value, tuple):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


_SECTIONS = ("geometry", "noise", "train", "gan", "data", "paths")

PROFILES = {
    "desk": {},
    "paper": {
        "geometry.image_size": "256", "geometry.n_angles": "256", "geometry.n_detectors": "256",
        "geometry.pixel_spacing": "0.0125",
        "train.batch_size": "16", "train.lr_peak": "3e-4", "train.warmup_batches": "5000",
        "train.halve_every": "80000", "train.g1": "S", "train.g2": "L", "train.bridge_channels": "32",
        "gan.z_shape": "32,16,16",
    },
}


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults <- profile <- file <- ``key=value`` overrides (later wins)."""
    cfg = RunConfig()
    file_items = []
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(str(path), f"malformed config: {exc}") from None
        for sec in cp.sections():
            for key, value in cp[sec].items():
                file_items.append((f"{sec}.{key}", value))
    pairs = []
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "override must look like section.key=value")
        pairs.append((key.strip(), value.strip()))
    profile = dict(file_items + pairs).get("train.profile", cfg.train.profile)
    if profile not in PROFILES:
        raise ConfigError("train.profile", f"unknown profile {profile!r}")
    for key, value in [*PROFILES[profile].items(), *file_items, *pairs]:
        cfg.set(key, value)
    return cfg.validate()
