"""Run configuration: a flat namespace of dotted keys.

Files are UTF-8, one ``key = value`` per line, ``#`` starts a comment.
Values are layered defaults < config file < ``SCN_*`` environment < command
line flags.  ``SCN_STAGE1_N_LAMBDAS=15`` sets ``stage1.n_lambdas``.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "SCN_"


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _strlist(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


# key -> (parser, default, check); check returns an error message or None
_positive = lambda v: None if v > 0 else "must be positive"  # noqa: E731
_nonneg = lambda v: None if v >= 0 else "must be nonnegative"  # noqa: E731
_fraction = lambda v: None if 0 < v < 1 else "must lie in (0, 1)"  # noqa: E731


def _choice(*options):
    return lambda v: None if v in options else f"must be one of {', '.join(options)}"


SCHEMA: dict[str, tuple[Any, Any, Any]] = {
    "run.seed": (int, 0, _nonneg),
    "run.threads": (int, 1, _positive),
    "run.output": (str, "scn-out", None),
    "data.dir": (str, "", None),
    "data.subjects": (_strlist, (), None),
    "split.train_fraction": (float, 0.8, _fraction),
    "split.val_fraction": (float, 0.1, _fraction),
    "preprocess.center": (_bool, True, None),
    "preprocess.scale": (_bool, False, None),
    "path.lambda_ratio": (float, 1e-3, _fraction),
    "stage1.n_lambdas": (int, 20, lambda v: None if v >= 2 else "must be at least 2"),
    "stage2.n_lambdas": (int, 10, lambda v: None if v >= 2 else "must be at least 2"),
    "stage2.refit": (str, "unshrunk", _choice("unshrunk", "lasso")),
    "l21.max_iter": (int, 500, _positive),
    "l21.tol": (float, 1e-8, _positive),
    "l21.eps": (float, 1e-10, _positive),
    "lasso.max_sweeps": (int, 1000, _positive),
    "lasso.tol": (float, 1e-9, _positive),
    "ridge.mu_min": (float, 1e-6, _positive),
    "ridge.mu_max": (float, 1e2, _positive),
    "ridge.n_mu": (int, 8, _positive),
    "significance.n_perm": (int, 100, _positive),
    "significance.alpha": (float, 0.05, _fraction),
    "significance.scheme": (str, "predictors", _choice("predictors", "full")),
    "ica.n_components": (int, 20, _positive),
    "ica.max_iter": (int, 1000, _positive),
    "ica.tol": (float, 1e-6, _positive),
    "ica.block": (str, "train", _choice("train", "all")),
    "ica.voxels": (str, "selected", _choice("selected", "all")),
    "group.n_components": (int, 20, _positive),
    "group.subject_components": (int, 0, _nonneg),
    "group.maps": (str, "", None),
    "blur.sigma": (float, 3.0, _positive),
    "blur.radius": (int, 0, _nonneg),
    "cluster.n_clusters": (int, 4, _positive),
    "cluster.metric": (str, "manhattan", _choice("manhattan", "euclidean")),
    "cluster.linkage": (str, "weighted", _choice("weighted", "average", "single", "complete")),
    "synth.kind": (str, "var", _choice("var", "sources")),
    "synth.n_subjects": (int, 5, _positive),
    "synth.V": (int, 600, _positive),
    "synth.T": (int, 300, lambda v: None if v >= 3 else "must be at least 3"),
    "synth.n_regions": (int, 10, _positive),
    "synth.n_drivers": (int, 5, _nonneg),
    "synth.snr": (float, 3.0, _positive),
    "synth.driver_radius": (float, 0.0, _nonneg),
    "synth.driven_fraction": (float, 0.1, lambda v: None if 0 <= v <= 1 else "must lie in [0, 1]"),
    "synth.grid": (int, 20, _positive),
    "synth.n_sources": (int, 5, _positive),
    "synth.n_hidden": (int, 1, _nonneg),
    "synth.noise": (float, 1.0, _nonneg),
}


_RESULT_NEUTRAL = ("run.output", "run.threads")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any] = field(default_factory=lambda: {k: v[1] for k, v in SCHEMA.items()})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def updated(self, mapping: Mapping[str, Any]) -> "RunConfig":
        vals = dict(self.values)
        for k, v in mapping.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            vals[k] = v
        return RunConfig(vals)

    def validate(self) -> "RunConfig":
        for key, (_, _, check) in SCHEMA.items():
            msg = check(self.values[key]) if check else None
            if msg:
                raise ConfigError(f"{key} = {_format(self.values[key])}: {msg}")
        if self["split.train_fraction"] + self["split.val_fraction"] >= 1.0:
            raise ConfigError("split.train_fraction + split.val_fraction must be below 1")
        if self["ridge.mu_min"] > self["ridge.mu_max"]:
            raise ConfigError("ridge.mu_min exceeds ridge.mu_max")
        return self

    def serialize(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in SCHEMA)

    def digest(self) -> str:
        """Hash of every setting that can change a result (not the output
        location or the thread count)."""
        text = "".join(f"{k} = {_format(self.values[k])}\n" for k in SCHEMA if k not in _RESULT_NEUTRAL)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_value(key: str, text: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return SCHEMA[key][0](text.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text.strip()!r}: {exc}") from None


def parse(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return (base or RunConfig()).updated(out)


def load(path: str | os.PathLike, base: RunConfig | None = None) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    return parse(text, base, str(p))


def env_key(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "_")


def apply_env(cfg: RunConfig, environ: Mapping[str, str] | None = None) -> RunConfig:
    environ = os.environ if environ is None else environ
    lookup = {env_key(k): k for k in SCHEMA}
    out = {}
    for name, text in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        if name not in lookup:
            logger.warning("ignoring unknown environment override %s", name)
            continue
        out[lookup[name]] = parse_value(lookup[name], text)
    return cfg.updated(out)
