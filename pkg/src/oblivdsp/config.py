"""Run configuration: dataclasses, INI loading and a stable digest.

Config files are INI with sections ``[vitals]``, ``[gesture]``, ``[ckks]``
and ``[run]``; keys mirror the dataclass fields. Tuples are written as
comma-separated values. See ``docs/CONFIG.md`` for the schema.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


def _pow2(x: int, name: str) -> None:
    if x < 1 or x & (x - 1):
        raise ConfigError(f"{name} must be a power of two >= 1, got {x}")


@dataclass
class VitalsConfig:
    gamma: int = 2
    p_phi: int = 2
    taylor_order: int = 3
    taylor_form: str = "full"
    phase_scale: float = 1.0
    resp_band: tuple = (0.1, 0.6)
    heart_band: tuple = (0.8, 2.5)
    iq_filter: str = "lowpass"  # "lowpass" or "bands"
    iq_cutoff: float = 4.0
    numtaps: int = 31
    spectrum_gain: float = 4.0  # DFT rows are scaled by this; rates are ratio-invariant
    antenna: int = 0
    low_confidence: float = 1e-6
    return_phase: bool = False

    def validate(self) -> None:
        _pow2(self.gamma, "vitals.gamma")
        _pow2(self.p_phi, "vitals.p_phi")
        if self.taylor_order not in (1, 3):
            raise ConfigError("vitals.taylor_order must be 1 or 3")
        if self.taylor_form not in ("full", "odd"):
            raise ConfigError("vitals.taylor_form must be 'full' or 'odd'")
        if self.iq_filter not in ("lowpass", "bands"):
            raise ConfigError("vitals.iq_filter must be 'lowpass' or 'bands'")
        for name in ("resp_band", "heart_band"):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                raise ConfigError(f"vitals.{name} must satisfy 0 < low < high")
        if self.numtaps < 1 or self.iq_cutoff <= 0:
            raise ConfigError("vitals FIR settings must be positive")
        if min(self.phase_scale, self.low_confidence, self.spectrum_gain) <= 0:
            raise ConfigError("vitals.phase_scale, spectrum_gain and low_confidence must be positive")


@dataclass
class GestureConfig:
    gamma: int = 4
    notch_width: int = 1
    fc_dims: tuple = (1536, 32, 16, 5)
    weights: str = ""  # .npz with W0, b0, W1, b1, ...; empty means seeded random
    weight_seed: int = 0

    def validate(self) -> None:
        _pow2(self.gamma, "gesture.gamma")
        if self.notch_width < 1:
            raise ConfigError("gesture.notch_width must be >= 1")
        if len(self.fc_dims) < 2 or min(self.fc_dims) < 1:
            raise ConfigError("gesture.fc_dims needs at least two positive sizes")


@dataclass
class CkksConfig:
    profile: str = "desk"  # "desk" or "standard128"
    n: int = 4096
    depth: int = 11
    scaling_bits: int = 40
    edge_bits: int = 60
    sigma: float = 3.2

    def validate(self) -> None:
        if self.profile not in ("desk", "standard128"):
            raise ConfigError("ckks.profile must be 'desk' or 'standard128'")
        _pow2(self.n, "ckks.n")
        if self.n < 8 or self.depth < 1:
            raise ConfigError("ckks.n must be >= 8 and ckks.depth >= 1")

    def params(self):
        from .ckks import CkksParams

        if self.profile == "standard128":
            return CkksParams.standard128(self.depth, self.scaling_bits, self.edge_bits)
        p = CkksParams.desk(self.n, self.depth, self.scaling_bits, self.edge_bits)
        return dataclasses.replace(p, sigma=self.sigma) if self.sigma != p.sigma else p


@dataclass
class RunConfig:
    backend: str = "exactsim"  # "exactsim" or "ckks"
    seed: int = 0
    trials: int = 10
    jobs: int = 1

    def validate(self) -> None:
        if self.backend not in ("exactsim", "ckks"):
            raise ConfigError("run.backend must be 'exactsim' or 'ckks'")
        if self.trials < 1 or self.jobs < 1:
            raise ConfigError("run.trials and run.jobs must be >= 1")


@dataclass
class Config:
    vitals: VitalsConfig = field(default_factory=VitalsConfig)
    gesture: GestureConfig = field(default_factory=GestureConfig)
    ckks: CkksConfig = field(default_factory=CkksConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "Config":
        for sec in (self.vitals, self.gesture, self.ckks, self.run):
            sec.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_ini(self) -> str:
        lines = []
        for name, sec in self.to_dict().items():
            lines.append(f"[{name}]")
            for k, v in sec.items():
                if isinstance(v, (tuple, list)):
                    v = ", ".join(str(x) for x in v)
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in raw.replace(" ", "").split(",") if x)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def apply_overrides(cfg: Config, section: str, values: dict) -> Config:
    sec = getattr(cfg, section, None)
    if sec is None:
        raise ConfigError(f"unknown section [{section}]")
    known = {f.name: f for f in dataclasses.fields(sec)}
    for k, raw in values.items():
        if k not in known:
            raise ConfigError(f"unknown key {section}.{k}")
        default = getattr(sec, k)
        setattr(sec, k, _coerce(raw, default, f"{section}.{k}") if isinstance(raw, str) else raw)
    return cfg


def parse_config(text: str) -> Config:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    cfg = Config()
    for section in parser.sections():
        apply_overrides(cfg, section, dict(parser[section]))
    return cfg.validate()


def load_config(path=None) -> Config:
    if path is None:
        return Config().validate()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
