"""Key=value run configuration files."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .data import toy_corpus_dir
from .errors import ConfigError
from .model import CaeConfig
from .optim import DescentConfig
from .projections import CONSTRAINTS

SCOPES = ("encoder", "decoder", "all")


def _parse_encoder(text: str) -> tuple[tuple[int, int, int], ...]:
    specs = []
    for part in text.split(","):
        bits = part.strip().split(":")
        if len(bits) != 3:
            raise ValueError(f"layer {part!r} is not out:kernel:stride")
        specs.append(tuple(int(b) for b in bits))
    return tuple(specs)


def _format_encoder(specs) -> str:
    return ",".join(":".join(str(v) for v in s) for s in specs)


def _format_float(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


@dataclass
class RunConfig:
    # model
    patch_size: int = 32
    encoder: str = "32:5:2,64:3:2,16:3:2"
    latent_channels: int = 16
    quant_bits: int = 4
    lam: float = 1e-5
    huber_beta: float = 1.0
    slope: float = 0.01
    # optimizer
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    # sparsification
    constraint: str = "l11"
    eta: float = math.inf
    scope: str = "encoder"
    eta_mode: str = "layer"
    restart: str = "init"
    # data
    train_dir: str = ""
    eval_dir: str = ""
    patch_policy: str = "grid"
    patches_per_image: int = 4
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.constraint not in CONSTRAINTS:
            raise ConfigError(f"constraint must be one of {CONSTRAINTS}, got {self.constraint!r}")
        if self.scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if self.eta_mode not in ("layer", "global"):
            raise ConfigError(f"eta_mode must be layer or global, got {self.eta_mode!r}")
        if self.restart not in ("init", "continue"):
            raise ConfigError(f"restart must be init or continue, got {self.restart!r}")
        if self.patch_policy not in ("grid", "random"):
            raise ConfigError(f"patch_policy must be grid or random, got {self.patch_policy!r}")
        if not self.eta >= 0:
            raise ConfigError("eta must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        try:
            self.cae_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def cae_config(self) -> CaeConfig:
        return CaeConfig(
            patch_size=self.patch_size,
            encoder=_parse_encoder(self.encoder),
            latent_channels=self.latent_channels,
            quant_bits=self.quant_bits,
            lam=self.lam,
            huber_beta=self.huber_beta,
            slope=self.slope,
        )

    def descent_config(self) -> DescentConfig:
        return DescentConfig(
            epochs=self.epochs, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            batch_size=self.batch_size, lam=self.lam, restart=self.restart, eta_mode=self.eta_mode,
        )

    def train_path(self) -> Path:
        return Path(self.train_dir) if self.train_dir else toy_corpus_dir()

    def eval_path(self) -> Path:
        return Path(self.eval_dir) if self.eval_dir else self.train_path()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_float(v) if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind in ("int", int):
        return int(raw, 0)
    if kind in ("float", float):
        return float(raw)
    if key == "encoder":
        _parse_encoder(raw)
    return raw


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected key = value, got {stripped!r}", line=lineno)
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        try:
            values[key] = convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", line=lineno) from exc
    start = dataclasses.asdict(base) if base is not None else {}
    start.update(values)
    return RunConfig(**start)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())
