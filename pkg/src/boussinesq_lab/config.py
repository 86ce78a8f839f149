"""Run configuration with lossless JSON round-trip and a content hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import build_basis
from .geometry import CHANNEL, TORUS, Geometry
from .picard import PicardSettings

SCHEMA_VERSION = 1

# excluded from the hash: they cannot change the numbers
_VOLATILE = ("out_dir", "threads")


class ConfigError(ValueError):
    pass


@dataclass
class GeometryConfig:
    kind: str = TORUS
    Lx: float = 2 * np.pi
    Ly: float = 2 * np.pi

    def build(self) -> Geometry:
        if self.kind == TORUS:
            return Geometry.torus(self.Lx, self.Ly)
        return Geometry.channel(self.Lx)


@dataclass
class BasisConfig:
    """Torus: ``max_wavenumber`` on an ``N x N`` grid. Channel: ``kx_max``, ``Ny``, ``modes_per_k``, ``Nx``."""

    N: int = 64
    max_wavenumber: int = 21
    kx_max: int = 4
    Ny: int = 48
    modes_per_k: int = 8
    Nx: int | None = None


@dataclass
class ScenarioConfig:
    name: str = "blob"
    params: dict = field(default_factory=dict)


@dataclass
class SimConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    picard: PicardSettings = field(default_factory=PicardSettings)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    T: float = 2.0
    record_every: int = 10
    checkpoint_every: int = 0  # windows between checkpoints; 0 disables
    tail_fraction: float = 0.25
    seed: int = 0
    out_dir: str | None = None
    threads: int | None = None
    schema: int = SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self):
        g, b, p = self.geometry, self.basis, self.picard
        if g.kind not in (TORUS, CHANNEL):
            raise ConfigError(f"geometry.kind must be torus or channel, got {g.kind!r}")
        if not (g.Lx > 0 and g.Ly > 0):
            raise ConfigError("geometry side lengths must be positive")
        if g.kind == CHANNEL and g.Ly != 1.0:
            raise ConfigError("channel height is fixed to 1")
        if g.kind == TORUS:
            if b.N < 8 or b.max_wavenumber < 1 or b.N < 3 * b.max_wavenumber:
                raise ConfigError("torus basis needs N >= 8, max_wavenumber >= 1, N >= 3 max_wavenumber")
        else:
            if b.Ny < 16 or b.kx_max < 0 or b.modes_per_k < 1:
                raise ConfigError("channel basis needs Ny >= 16, kx_max >= 0, modes_per_k >= 1")
        if not self.T > 0:
            raise ConfigError("T must be positive")
        steps = self.T / p.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError(f"T = {self.T} is not a multiple of dt = {p.dt}")
        if self.record_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("record_every >= 1 and checkpoint_every >= 0 required")
        if not 0 < self.tail_fraction < 1:
            raise ConfigError("tail_fraction must lie in (0, 1)")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.schema != SCHEMA_VERSION:
            raise ConfigError(f"config schema {self.schema} is not supported (expected {SCHEMA_VERSION})")

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            parts = {
                "geometry": GeometryConfig(**d.pop("geometry", {})),
                "basis": BasisConfig(**d.pop("basis", {})),
                "picard": PicardSettings(**d.pop("picard", {})),
                "scenario": ScenarioConfig(**d.pop("scenario", {})),
            }
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**parts, **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SimConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "SimConfig":
        return cls.from_json(Path(path).read_text())

    def content_hash(self) -> str:
        d = self.to_dict()
        for k in _VOLATILE:
            d.pop(k, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **dotted) -> "SimConfig":
        """Copy with ``section.key=value`` overrides (e.g. ``picard.T0_max``)."""
        d = self.to_dict()
        for key, val in dotted.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node and not (len(parts) > 1 and parts[-2] == "params"):
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = val
        return SimConfig.from_dict(d)

    # -- construction -----------------------------------------------------------

    def build_basis(self):
        geom = self.geometry.build()
        b = self.basis
        if geom.kind == TORUS:
            return build_basis(geom, max_wavenumber=b.max_wavenumber, grid=(b.N, b.N))
        return build_basis(geom, kx_max=b.kx_max, Ny=b.Ny, modes_per_k=b.modes_per_k, Nx=b.Nx)
