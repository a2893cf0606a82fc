"""Sectioned key-value run configuration: parsing, validation, serialization.

The format is deliberately small: `[section]` headers, `key = value` lines,
`#` comments, UTF-8.  Every key is declared in the schema below with a type
and default; unknown sections or keys are reported, all errors at once.  The
master seed is mandatory so no run ever depends on wall-clock state.
Coefficient functions are arithmetic expressions over coordinates (see
`exprs`).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import exprs
from .drivers import LevyChannel, LevySpec, TimeGrid
from .fields import ConfigurationError, DomainSpec, ModelDims


class ConfigError(ValueError):
    """Carries the full list of configuration problems."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

def _int(lo=None, hi=None):
    def parse(s: str):
        v = int(s)
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}")
        return v
    return parse


def _float(lo=None, strict_lo=None):
    def parse(s: str):
        v = float(s)
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}")
        if strict_lo is not None and v <= strict_lo:
            raise ValueError(f"must be > {strict_lo}")
        return v
    return parse


def _bool(s: str):
    t = s.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError("must be a boolean")


def _choice(*opts):
    def parse(s: str):
        if s not in opts:
            raise ValueError(f"must be one of {opts}")
        return s
    return parse


def _expr(s: str):
    # validated against the most permissive variable set at parse time;
    # builders re-compile against their actual variables
    exprs.compile_expression(s, ("x", "x1", "x2", "x3", "y", "z", "v"))
    return s


def _str(s: str):
    return s


# key -> (parser, default-as-string or None meaning absent-by-default)
SCHEMA: dict[str, dict[str, tuple[Callable, str | None]]] = {
    "run": {
        "seed": (_int(), None),
        "n_paths": (_int(lo=1), "1000"),
        "out_dir": (_str, "out"),
        "threads": (_int(lo=1), "1"),
    },
    "dims": {
        "p": (_int(lo=1), "1"),
        "q": (_int(lo=1), "1"),
        "d": (_int(lo=0), "1"),
        "h": (_int(lo=0), "0"),
    },
    "domain": {
        "kind": (_choice("box", "annulus"), "box"),
        "bounds": (_str, "0,1"),
        "b": (_float(lo=0), "0"),
        "n": (_float(strict_lo=0), "1"),
        "resolution": (_int(lo=3), "17"),
    },
    "time": {
        "horizon": (_float(strict_lo=0), "1.0"),
        "n_steps": (_int(lo=1), "32"),
    },
    "operator": {
        "type": (_choice("linear", "finance", "custom"), "linear"),
        "c": (_expr, "0"),
        "cbar": (_expr, "0"),
        "k_d": (_str, "auto"),
        "drift_expr": (_expr, "0"),
        "diffusion_expr": (_expr, "0"),
        # aij / bj / abarij / bbarj handled dynamically below
    },
    "terminal": {
        "h_expr": (_expr, "0"),
    },
    "levy": {
        "channels": (_int(lo=0), "0"),
        # chanN_* handled dynamically
    },
    "picard": {
        "gamma": (_str, "auto"),
        "max_iters": (_int(lo=1), "40"),
        "tol": (_float(lo=0), "1e-12"),
        "rel_tol": (_float(lo=0), "1e-7"),
        "basis_degree": (_int(lo=0), "2"),
        "cross_terms": (_bool, "true"),
        "ridge": (_float(lo=0), "1e-8"),
        "c_max": (_int(lo=0), "0"),
        "norm_k_max": (_int(lo=1), "2"),
        "k_max": (_int(lo=1), "15"),
        "initial": (_choice("zero", "terminal"), "zero"),
        "x_filter_degree": (_str, "none"),
    },
    "environment": {
        "evaluate": (_bool, "false"),
        "preset": (_choice("frozen", "ou", "gbm", "custom"), "frozen"),
        "x0": (_str, "1.0"),
        "b": (_float(lo=0), "0"),
        "rate": (_float(), "1.0"),
        "vol": (_float(lo=0), "0.5"),
        "drift": (_float(), "0.0"),
        "mu_expr": (_str, "0"),
        "sigma_expr": (_str, "0"),
        "n_paths": (_str, "run"),
        "derivative_orders": (_int(lo=0), "0"),
    },
    "finance": {
        "r": (_float(), "0.0"),
        "beta": (_expr, "0.05"),
        "sigma": (_expr, "0.2"),
        "c": (_expr, "0"),
        "d": (_expr, "0"),
        "rho": (_float(), "0.0"),
        "gamma_risk": (_float(strict_lo=0), "0.5"),
        "b": (_float(lo=1), "1.0"),
        "kappa": (_float(strict_lo=0), "1e-4"),
        "x0": (_float(strict_lo=0), "2.0"),
        "y0": (_float(), "0.0"),
        "x_max": (_str, "auto"),
        "dx": (_float(strict_lo=0), "0.015625"),
        "eval_x_max": (_str, "auto"),
        "x_filter_degree": (_int(lo=0), "8"),
        "tol_v": (_float(strict_lo=0), "0.02"),
        "tau_paths": (_int(lo=1), "2000"),
        "n_y": (_int(lo=1), "81"),
    },
    "output": {
        "long_format": (_bool, "true"),
        "per_step_files": (_bool, "false"),
    },
}

_DYNAMIC_PREFIXES = {
    "operator": ("a", "b", "abar", "bbar"),
    "levy": ("chan",),
}


def _dynamic_ok(section: str, key: str) -> Callable | None:
    """Parser for schema keys with numbered names (a11, b2, chan1_atoms, ...)."""
    if section == "operator":
        for pref in ("abar", "bbar", "a", "b"):
            if key.startswith(pref) and key[len(pref):].isdigit():
                return _expr
    if section == "levy" and key.startswith("chan"):
        rest = key[4:]
        if "_" in rest:
            idx, sub = rest.split("_", 1)
            if idx.isdigit() and sub in ("atoms", "lambda", "density", "cap", "eps", "quad"):
                return _str
    return None


# ---------------------------------------------------------------------------
# the parsed object
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration: resolved raw values plus typed access."""

    values: tuple[tuple[str, tuple[tuple[str, str], ...]], ...]

    @staticmethod
    def from_dict(sections: dict[str, dict[str, str]]) -> "RunConfig":
        packed = tuple(
            (sec, tuple(sorted(kv.items()))) for sec, kv in sorted(sections.items())
        )
        return RunConfig(values=packed)

    def sections(self) -> dict[str, dict[str, str]]:
        return {sec: dict(kv) for sec, kv in self.values}

    def get(self, section: str, key: str) -> str:
        for sec, kv in self.values:
            if sec == section:
                for k, v in kv:
                    if k == key:
                        return v
        raise KeyError(f"[{section}] {key}")

    def has(self, section: str, key: str) -> bool:
        try:
            self.get(section, key)
            return True
        except KeyError:
            return False

    def typed(self, section: str, key: str):
        parser = SCHEMA[section].get(key, (None, None))[0] or _dynamic_ok(section, key) or _str
        return parser(self.get(section, key))

    def content_hash(self) -> str:
        return hashlib.sha256(serialize_config(self).encode()).hexdigest()


def parse_config(text: str) -> RunConfig:
    """Parse and validate a sectioned key-value config.

    Returns the resolved RunConfig (schema defaults filled in) or raises
    ConfigError carrying every problem found, not just the first.
    """
    errors: list[str] = []
    raw: dict[str, dict[str, str]] = {}
    section = None
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                errors.append(f"line {ln}: unknown section [{section}]")
                section = None
            else:
                raw.setdefault(section, {})
            continue
        if "=" not in stripped:
            errors.append(f"line {ln}: expected 'key = value'")
            continue
        if section is None:
            errors.append(f"line {ln}: key outside any known section")
            continue
        key, val = (part.strip() for part in stripped.split("=", 1))
        schema = SCHEMA[section]
        parser = schema.get(key, (None, None))[0] or _dynamic_ok(section, key)
        if parser is None:
            errors.append(f"[{section}] unknown key {key!r}")
            continue
        try:
            parser(val)
        except Exception as exc:
            errors.append(f"[{section}] {key} = {val!r}: {exc}")
            continue
        raw.setdefault(section, {})[key] = val

    resolved: dict[str, dict[str, str]] = {}
    for sec, keys in SCHEMA.items():
        out = dict(raw.get(sec, {}))
        for key, (_, default) in keys.items():
            if key not in out and default is not None:
                out[key] = default
        resolved[sec] = out
    if "seed" not in resolved.get("run", {}):
        errors.append("[run] missing mandatory key 'seed' (no wall-clock default)")
    if errors:
        raise ConfigError(errors)
    return RunConfig.from_dict(resolved)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; parse(serialize(parse(t))) == parse(t)."""
    lines = []
    for sec, kv in cfg.values:
        if not kv:
            continue
        lines.append(f"[{sec}]")
        for k, v in kv:
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_dims(cfg: RunConfig) -> ModelDims:
    return ModelDims(p=cfg.typed("dims", "p"), q=cfg.typed("dims", "q"),
                     d=cfg.typed("dims", "d"), h=cfg.typed("dims", "h"))


def build_domain(cfg: RunConfig) -> DomainSpec:
    kind = cfg.typed("domain", "kind")
    p = cfg.typed("dims", "p")
    res = cfg.typed("domain", "resolution")
    if kind == "box":
        pairs = []
        for chunk in cfg.get("domain", "bounds").split(";"):
            lo, hi = (float(v) for v in chunk.split(","))
            pairs.append((lo, hi))
        if len(pairs) == 1 and p > 1:
            pairs = pairs * p
        if len(pairs) != p:
            raise ConfigError([f"[domain] bounds lists {len(pairs)} axes, dims.p = {p}"])
        return DomainSpec.box(pairs, res)
    return DomainSpec.annulus(cfg.typed("domain", "b"), cfg.typed("domain", "n"), p, res)


def build_time(cfg: RunConfig) -> TimeGrid:
    return TimeGrid(T=cfg.typed("time", "horizon"), n_steps=cfg.typed("time", "n_steps"))


def build_levy(cfg: RunConfig) -> LevySpec:
    n = cfg.typed("levy", "channels")
    channels = []
    for i in range(1, n + 1):
        lam = float(cfg.get("levy", f"chan{i}_lambda")) if cfg.has("levy", f"chan{i}_lambda") else 1.0
        if cfg.has("levy", f"chan{i}_atoms"):
            atoms = []
            for chunk in cfg.get("levy", f"chan{i}_atoms").split(","):
                z, mass = (float(v) for v in chunk.split(":"))
                atoms.append((z, mass))
            channels.append(LevyChannel.from_atoms(atoms, lam))
        elif cfg.has("levy", f"chan{i}_density"):
            rate_fn = exprs.compile_expression(cfg.get("levy", f"chan{i}_density"), ("z",))
            cap = float(cfg.get("levy", f"chan{i}_cap")) if cfg.has("levy", f"chan{i}_cap") else 1.0
            eps = float(cfg.get("levy", f"chan{i}_eps")) if cfg.has("levy", f"chan{i}_eps") else None
            quad = int(cfg.get("levy", f"chan{i}_quad")) if cfg.has("levy", f"chan{i}_quad") else 16
            channels.append(LevyChannel.from_density(lambda z, fn=rate_fn: fn(z=z), cap, lam,
                                                     eps=eps, n_quad=quad))
        else:
            raise ConfigError([f"[levy] channel {i}: need chan{i}_atoms or chan{i}_density"])
    return LevySpec(channels=tuple(channels))


def build_linear_coefficients(cfg: RunConfig):
    from .operators import LinearCoefficients

    p = cfg.typed("dims", "p")
    sec = cfg.sections().get("operator", {})

    def as_field(text: str):
        if text.strip() == "0":
            return 0.0
        try:
            return float(text)
        except ValueError:
            return exprs.coefficient_of_x(text, p)

    a, b, abar, bbar = {}, {}, {}, {}
    for key, val in sec.items():
        if key.startswith("abar") and key[4:].isdigit():
            ij = key[4:]
            abar[(int(ij[0]) - 1, int(ij[1]) - 1)] = as_field(val)
        elif key.startswith("bbar") and key[4:].isdigit():
            bbar[int(key[4:]) - 1] = as_field(val)
        elif key.startswith("a") and key[1:].isdigit() and len(key) >= 3:
            ij = key[1:]
            a[(int(ij[0]) - 1, int(ij[1]) - 1)] = as_field(val)
        elif key.startswith("b") and key[1:].isdigit():
            b[int(key[1:]) - 1] = as_field(val)
    return LinearCoefficients(p=p, a=a, b=b, c=as_field(sec.get("c", "0")),
                              abar=abar, bbar=bbar, cbar=as_field(sec.get("cbar", "0")))


def build_finance_model(cfg: RunConfig):
    from .finance import FinanceModel

    sec = cfg.sections()["finance"]

    def coeff(text: str):
        try:
            return float(text)
        except ValueError:
            return exprs.coefficient_of_y(text)

    x_max = None if sec["x_max"] == "auto" else float(sec["x_max"])
    return FinanceModel(
        r=float(sec["r"]), beta=coeff(sec["beta"]), sigma=coeff(sec["sigma"]),
        c=coeff(sec["c"]), d=coeff(sec["d"]), rho=float(sec["rho"]),
        gamma_risk=float(sec["gamma_risk"]), b=float(sec["b"]), kappa=float(sec["kappa"]),
        T=cfg.typed("time", "horizon"), x0=float(sec["x0"]), y0=float(sec["y0"]),
        x_max=x_max,
    )


def build_picard_config(cfg: RunConfig, k_d: float, T: float):
    from .picard import PicardConfig, RegressionBasis, gamma_rule

    gamma_raw = cfg.get("picard", "gamma")
    gamma = gamma_rule(k_d, T) if gamma_raw == "auto" else float(gamma_raw)
    filt = cfg.get("picard", "x_filter_degree")
    return PicardConfig(
        gamma=gamma,
        max_iters=cfg.typed("picard", "max_iters"),
        tol=cfg.typed("picard", "tol"),
        rel_tol=cfg.typed("picard", "rel_tol"),
        basis=RegressionBasis(degree=cfg.typed("picard", "basis_degree"),
                              cross_terms=cfg.typed("picard", "cross_terms"),
                              ridge=cfg.typed("picard", "ridge")),
        c_max=cfg.typed("picard", "c_max"),
        norm_k_max=cfg.typed("picard", "norm_k_max"),
        initial=cfg.typed("picard", "initial"),
        x_filter_degree=None if filt == "none" else int(filt),
    )


def build_environment(cfg: RunConfig):
    from .domains import EnvironmentSpec

    sec = cfg.sections()["environment"]
    x0 = np.array([float(v) for v in sec["x0"].split(",")])
    b = float(sec["b"])
    preset = sec["preset"]
    if preset == "frozen":
        return EnvironmentSpec.frozen(x0, b=b)
    if preset == "ou":
        return EnvironmentSpec.ornstein_uhlenbeck(x0, rate=float(sec["rate"]),
                                                  vol=float(sec["vol"]), b=b)
    if preset == "gbm":
        return EnvironmentSpec.geometric(x0, drift=float(sec["drift"]),
                                         vol=float(sec["vol"]), b=b)
    p = len(x0)
    mu_fns = [exprs.coefficient_of_x(ch.strip(), p) for ch in sec["mu_expr"].split(";")]
    sig_fns = [exprs.coefficient_of_x(ch.strip(), p) for ch in sec["sigma_expr"].split(";")]
    if len(mu_fns) != p or len(sig_fns) != p:
        raise ConfigError(["[environment] custom preset needs one mu/sigma expression per axis"])

    def mu(x):
        return np.stack([fn(x) for fn in mu_fns], axis=1)

    def sigma(x):
        diag = np.stack([fn(x) for fn in sig_fns], axis=1)
        return diag[:, :, None] * np.eye(p)[None]

    return EnvironmentSpec(mu=mu, sigma=sigma, x0=x0, b=b, p_w=p)
