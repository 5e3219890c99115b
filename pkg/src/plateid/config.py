"""Flat ``key = value`` scenario configuration.

Keys carry a section prefix (``mesh.n_divisions``, ``noise.sigma_u``, ...).
Unknown keys, malformed values and out-of-range settings raise
:class:`~plateid.errors.ConfigurationError` naming the offending key.
Lines starting with ``#`` are comments.

Randomness is derived from the single ``run.seed`` through labelled
streams: the seed for purpose ``label`` is the first 32-bit word of
``numpy.random.SeedSequence([run.seed, crc32(label)])``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .constitutive import MATERIALS
from .errors import ConfigurationError
from .mesh import PATTERNS

__all__ = ["PipelineConfig", "SCENARIOS", "load_config", "parse_config", "derive_seed"]

# pattern, per-segment materials and flagging threshold of each preset
SCENARIOS = {
    "cross": ("cross", ("NH2_a", "NH2_b"), 2.0),
    "split3": ("split3", ("NH2_c", "ISH", "HW"), 1.5),
    "multi_inclusion": ("multi_inclusion", ("ISH", "NH2_b", "HW", "NH2_a"), 1.7),
    "homogeneous": ("homogeneous", ("NH2_a",), 2.0),
}

FRAC_FREE_RANGE = (0.02, 0.10)


def derive_seed(seed, label):
    """Seed of the stream ``label`` derived from the global seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(label.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class PipelineConfig:
    scenario: str = "cross"
    seed: int = 0
    out: str = "run"
    side: float = 50.0
    thickness: float = 1.0
    n_divisions: int = 40
    inverse_divisions: int = 0
    pattern: str = ""
    materials: dict = field(default_factory=dict)
    lambda_x: float = 1.6
    lambda_y: float = 2.2
    n_steps: int = 6
    sigma_u: float = 0.0
    denoise_trials: int = 40
    lambda_flag: float = 0.0
    lambda_r: float = 0.0
    min_segment_size: int = 1
    frac_free: float = 0.02
    frac_flag: float = 0.20
    chains: int = 3
    chain_length: int = 500
    burn_in: int = 100
    workers: int = 1
    a_sigma: float = 1e-4
    b_sigma: float = 1e-4
    a_nu: float = 0.5
    b_nu: float = 0.5
    a_p: float = 1.0
    b_p: float = 1.0

    def __post_init__(self):
        if self.scenario not in SCENARIOS and not self.pattern:
            raise ConfigurationError(f"scenario.name {self.scenario!r} is not a preset; set pattern.name")
        pattern, mats, lam = SCENARIOS.get(self.scenario, ("", (), 0.0))
        if not self.pattern:
            object.__setattr__(self, "pattern", pattern)
        if not self.materials:
            object.__setattr__(self, "materials", {i + 1: MATERIALS[m] for i, m in enumerate(mats)})
        if self.lambda_flag == 0.0:
            object.__setattr__(self, "lambda_flag", lam or 2.0)
        self.validate()

    def validate(self):
        def need(ok, key, msg):
            if not ok:
                raise ConfigurationError(f"{key}: {msg}")

        need(self.side > 0, "mesh.side", "must be positive")
        need(self.thickness > 0, "mesh.thickness", "must be positive")
        need(self.n_divisions >= 2, "mesh.n_divisions", "must be >= 2")
        need(self.inverse_divisions == 0 or self.inverse_divisions >= 2, "mesh.inverse_divisions",
             "must be 0 (native mesh) or >= 2")
        need(self.pattern in PATTERNS or self.pattern.startswith("from_file:"), "pattern.name",
             f"must be one of {sorted(PATTERNS)} or from_file:<path>")
        if self.pattern.startswith("from_file:"):
            need(Path(self.pattern[10:]).is_file(), "pattern.name", f"file {self.pattern[10:]} does not exist")
        for k, th in self.materials.items():
            need(np.all(np.asarray(th) >= 0), f"material.{k}", "coefficients must be nonnegative")
            need(np.asarray(th)[-1] > 0, f"material.{k}", "volumetric coefficient must be positive")
        need(self.lambda_x > 0 and self.lambda_y > 0, "load.lambda_x/lambda_y", "must be positive")
        need(self.n_steps >= 1, "load.n_steps", "must be >= 1")
        need(self.sigma_u >= 0, "noise.sigma_u", "must be nonnegative")
        need(self.denoise_trials >= 1, "noise.denoise_trials", "must be >= 1")
        need(self.lambda_flag > 0, "segment.lambda_flag", "must be positive")
        need(self.lambda_r >= 0, "segment.lambda_r", "must be nonnegative (0 selects the default weight)")
        need(self.min_segment_size >= 1, "segment.min_segment_size", "must be >= 1")
        lo, hi = FRAC_FREE_RANGE
        need(lo <= self.frac_free <= hi, "identify.frac_free", f"must lie in [{lo}, {hi}], got {self.frac_free}")
        need(0 < self.frac_flag <= 1, "identify.frac_flag", f"must lie in (0, 1], got {self.frac_flag}")
        need(self.chains >= 2, "sampler.chains", "must be >= 2 (convergence diagnostics need several chains)")
        need(self.chain_length >= 2, "sampler.chain_length", "must be >= 2")
        need(0 <= self.burn_in < self.chain_length, "sampler.burn_in", "must lie in [0, chain_length)")
        need(self.workers >= 1, "sampler.workers", "must be >= 1")
        for key in ("a_sigma", "b_sigma", "a_nu", "b_nu", "a_p", "b_p"):
            need(getattr(self, key) > 0, f"sampler.{key}", "must be positive")

    def with_overrides(self, **kw):
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self

    def to_lines(self):
        """Canonical ``key = value`` lines; parsing them gives an equal config."""
        lines = []
        for key, attr in _KEYS.items():
            lines.append(f"{key} = {_format(getattr(self, attr))}")
        for k in sorted(self.materials):
            lines.append(f"material.{k} = " + ", ".join(repr(float(v)) for v in self.materials[k]))
        return lines


# config key -> dataclass attribute
_KEYS = {
    "scenario.name": "scenario",
    "run.seed": "seed",
    "run.out": "out",
    "mesh.side": "side",
    "mesh.thickness": "thickness",
    "mesh.n_divisions": "n_divisions",
    "mesh.inverse_divisions": "inverse_divisions",
    "pattern.name": "pattern",
    "load.lambda_x": "lambda_x",
    "load.lambda_y": "lambda_y",
    "load.n_steps": "n_steps",
    "noise.sigma_u": "sigma_u",
    "noise.denoise_trials": "denoise_trials",
    "segment.lambda_flag": "lambda_flag",
    "segment.lambda_r": "lambda_r",
    "segment.min_segment_size": "min_segment_size",
    "identify.frac_free": "frac_free",
    "identify.frac_flag": "frac_flag",
    "sampler.chains": "chains",
    "sampler.chain_length": "chain_length",
    "sampler.burn_in": "burn_in",
    "sampler.workers": "workers",
    "sampler.a_sigma": "a_sigma",
    "sampler.b_sigma": "b_sigma",
    "sampler.a_nu": "a_nu",
    "sampler.b_nu": "b_nu",
    "sampler.a_p": "a_p",
    "sampler.b_p": "b_p",
}

_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _format(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def _convert(key, attr, text):
    kind = _TYPES[attr]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r} as {kind}") from None
    return text


def _material(key, text):
    text = text.strip()
    if text in MATERIALS:
        return MATERIALS[text].copy()
    try:
        vals = np.array([float(v) for v in text.replace(",", " ").split()])
    except ValueError:
        raise ConfigurationError(f"{key}: expected a preset name {sorted(MATERIALS)} or 6 numbers") from None
    if vals.size != 6:
        raise ConfigurationError(f"{key}: expected 6 coefficients, got {vals.size}")
    return vals


def parse_config(text, source="<config>"):
    """Parse configuration text into a :class:`PipelineConfig`."""
    kw = {}
    mats = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("material."):
            try:
                seg = int(key.split(".", 1)[1])
            except ValueError:
                raise ConfigurationError(f"{source}:{lineno}: {key}: segment id must be an integer") from None
            if seg < 1:
                raise ConfigurationError(f"{source}:{lineno}: {key}: segment ids start at 1")
            if seg in mats:
                raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
            mats[seg] = _material(key, value)
            continue
        if key not in _KEYS:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        attr = _KEYS[key]
        if attr in kw:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        kw[attr] = _convert(key, attr, value)
    if mats:
        if sorted(mats) != list(range(1, len(mats) + 1)):
            raise ConfigurationError("material.<id> keys must cover 1..n_c without gaps")
        kw["materials"] = mats
    return PipelineConfig(**kw)


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} not found")
    return parse_config(path.read_text(encoding="utf-8"), str(path))
