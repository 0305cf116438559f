"""Project configuration files and bundled example configurations."""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .certificates import CertificateSet, load_certificates
from .flow import FlowConfig
from .model import BoxUnion, SwitchedSystem, SystemFormatError, load_system
from .synthesis import Spec

BUNDLED = {"room": "room.yaml", "room-relaxed": "room_relaxed.yaml", "spiral": "spiral.yaml"}

_TOP = {"system", "certificates", "approach", "parameters", "spec", "validation", "flow",
        "output_dir", "seed"}
_PARAMS = {"tau", "epsilon", "eta", "N", "x_s", "n_max", "dwell_time"}
_VALID = {"x0", "horizon", "runs", "set", "eta_hat_samples", "eta_hat_pairs", "eta_hat_confidence",
          "bisim_sequences", "bisim_runs", "bisim_steps", "sample_paths"}
_FLOW = {"ode_substeps_per_tau", "sde_substeps_per_tau"}


class ConfigError(ValueError):
    pass


@dataclass
class ProjectConfig:
    path: Path
    system_path: Path
    certificates_path: Path
    approach: str
    parameters: dict
    spec: Spec
    validation: dict
    flow: FlowConfig
    output_dir: Path
    seed: int = 0
    _system: Optional[SwitchedSystem] = field(default=None, repr=False)
    _certs: Optional[CertificateSet] = field(default=None, repr=False)

    @property
    def system(self) -> SwitchedSystem:
        if self._system is None:
            self._system = load_system(self.system_path)
        return self._system

    @property
    def certificates(self) -> CertificateSet:
        if self._certs is None:
            self._certs = load_certificates(self.certificates_path, self.system)
        return self._certs


def _check(d, allowed, where):
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    return d


def resolve_config_path(ref: str) -> Path:
    if ref in BUNDLED:
        return Path(str(resources.files("symswitch") / "data" / BUNDLED[ref]))
    p = Path(ref)
    if not p.exists():
        raise ConfigError(f"config file {ref} not found (bundled names: {', '.join(BUNDLED)})")
    return p


def load_config(ref: str, output_dir: Optional[str] = None, seed: Optional[int] = None) -> ProjectConfig:
    path = resolve_config_path(ref)
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    _check(doc, _TOP, "config")
    base = path.parent
    for k in ("system", "certificates", "parameters", "spec"):
        if k not in doc:
            raise ConfigError(f"config: missing key '{k}'")
    sysp, certp = base / doc["system"], base / doc["certificates"]
    for p in (sysp, certp):
        if not p.exists():
            raise ConfigError(f"referenced file {p} does not exist")
    params = _check(doc["parameters"], _PARAMS, "parameters")
    for k in ("tau", "epsilon"):
        if k not in params:
            raise ConfigError(f"parameters: missing key '{k}'")
    approach = doc.get("approach", "auto")
    if approach not in ("grid", "sequence", "auto"):
        raise ConfigError(f"approach must be grid, sequence or auto, not {approach!r}")
    try:
        spec = Spec.from_dict(doc["spec"])
    except (ValueError, KeyError) as e:
        raise ConfigError(f"spec: {e}") from e
    validation = _check(doc.get("validation"), _VALID, "validation")
    flow = FlowConfig(**_check(doc.get("flow"), _FLOW, "flow"))
    out = Path(output_dir) if output_dir else Path(doc.get("output_dir", "out"))
    return ProjectConfig(path, sysp, certp, approach, dict(params), spec, dict(validation), flow, out,
                         int(doc.get("seed", 0) if seed is None else seed))


def validation_set(cfg: ProjectConfig, n: int) -> BoxUnion:
    v = cfg.validation.get("set")
    if v is None:
        return cfg.spec.region(0.0)
    return BoxUnion.from_list(v, n)
