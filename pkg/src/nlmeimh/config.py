"""JSON run configuration: presets, validation and model builders.

A config is a JSON object; ``"preset"`` names a bundled base that the other
keys override (nested objects are merged).  Sections::

    model     type (continuous|tte), structural|hazard, names, transforms,
              dose, design, n_subjects, tau_c, error, omega_structure
    theta     psi_pop, omega_sd | omega, sigma2 | b   (population parameters)
    theta0    list of theta objects (SAEM starting points)
    data      path of a dataset CSV (sample / fit); simulated when absent
    sampler   kernels, n_iter, individuals, stepsize, family, dof, approximation, init
    saem      algorithm (saem|f-saem|both), n_iter, burn_len, decay,
              mcmc_transitions, switch
    mcstudy   replicates, components
    seed      master seed
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, NlmeError
from .likelihood import ContinuousModel, ErrorModel, TimeToEventModel
from .model import TRANSFORMS, PopulationModel, Theta
from .models import PK1_ORAL, WEIBULL, linear_structural, polynomial_basis
from .samplers import KERNELS

PK_TIMES = [0.5, 1.0, 2.0, 4.0, 8.0, 12.0, 24.0, 48.0]

PRESETS = {
    "warfarin-like-pk": {
        "model": {"type": "continuous", "structural": "pk1_oral", "names": ["ka", "V", "k"],
                  "transforms": "log", "dose": 100.0, "error": "constant", "n_subjects": 32,
                  "design": "pk-default"},
        "theta": {"psi_pop": [1.0, 8.0, 0.1], "omega_sd": [0.5, 0.2, 0.3], "sigma2": 0.5},
        "theta0": [
            {"psi_pop": [3.0, 3.0, 0.5], "omega_sd": [1.0, 1.0, 1.0], "sigma2": 1.0},
            {"psi_pop": [0.5, 15.0, 0.05], "omega_sd": [0.3, 0.3, 0.3], "sigma2": 2.0},
            {"psi_pop": [1.5, 6.0, 0.2], "omega_sd": [0.6, 0.6, 0.6], "sigma2": 0.3},
        ],
    },
    "weibull-tte": {
        "model": {"type": "tte", "hazard": "weibull", "names": ["lambda", "beta"],
                  "transforms": "log", "n_subjects": 100, "tau_c": 20.0},
        "theta": {"psi_pop": [10.0, 3.0], "omega_sd": [0.3, 0.3]},
        "theta0": [
            {"psi_pop": [5.0, 1.5], "omega_sd": [1.0, 1.0]},
            {"psi_pop": [20.0, 5.0], "omega_sd": [0.8, 0.8]},
            {"psi_pop": [8.0, 2.5], "omega_sd": [0.6, 0.6]},
        ],
    },
}
# MCMC comparison setting: same model with the smaller elimination rate
PRESETS["warfarin-like-pk-mcmc"] = copy.deepcopy(PRESETS["warfarin-like-pk"])
PRESETS["warfarin-like-pk-mcmc"]["theta"]["psi_pop"] = [1.0, 8.0, 0.01]

SECTION_KEYS = {
    "model": {"type", "structural", "hazard", "names", "transforms", "dose", "design",
              "n_subjects", "tau_c", "error", "omega_structure", "degree"},
    "theta": {"psi_pop", "omega_sd", "omega", "sigma2", "b"},
    "sampler": {"kernels", "n_iter", "individuals", "stepsize", "family", "dof",
                "approximation", "init"},
    "saem": {"algorithm", "n_iter", "burn_len", "decay", "mcmc_transitions", "switch"},
    "mcstudy": {"replicates", "components"},
}
TOP_KEYS = {"preset", "command", "model", "theta", "theta0", "data", "sampler", "saem",
            "mcstudy", "seed", "benchmark"}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides=None) -> dict:
    """Read a JSON config (or start empty), apply the preset and validate it."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config: file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a JSON object")
        if isinstance(raw.get("data"), str) and not Path(raw["data"]).is_absolute():
            raw["data"] = str((p.parent / raw["data"]).resolve())
    raw = _merge(raw, overrides or {})
    return resolve_config(raw)


def resolve_config(raw: dict) -> dict:
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown config key")
    preset = raw.get("preset")
    cfg = raw
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r} (have {sorted(PRESETS)})")
        cfg = _merge(PRESETS[preset], raw)
    validate(cfg)
    return cfg


def _num(sec, key, value, positive=False, integer=False, nonneg=False):
    field = f"{sec}.{key}" if sec else key
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{field}: expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{field}: expected an integer, got {value!r}")
    if not np.isfinite(value):
        raise ConfigError(f"{field}: must be finite")
    if positive and value <= 0:
        raise ConfigError(f"{field}: must be positive, got {value!r}")
    if nonneg and value < 0:
        raise ConfigError(f"{field}: must be nonnegative, got {value!r}")
    return value


def validate(cfg: dict):
    """Check every section; errors name the offending field."""
    for sec, keys in SECTION_KEYS.items():
        body = cfg.get(sec)
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"{sec}: expected an object")
        bad = set(body) - keys
        if bad:
            raise ConfigError(f"{sec}.{sorted(bad)[0]}: unknown field")
    if "seed" in cfg:
        _num("", "seed", cfg["seed"], integer=True, nonneg=True)
    model = cfg.get("model")
    if model is None:
        raise ConfigError("model: missing (give a preset or a model section)")
    mtype = model.get("type")
    if mtype not in ("continuous", "tte"):
        raise ConfigError(f"model.type: expected 'continuous' or 'tte', got {mtype!r}")
    if mtype == "continuous" and model.get("structural") not in ("pk1_oral", "polynomial"):
        raise ConfigError(f"model.structural: unknown structural model {model.get('structural')!r}")
    if mtype == "tte":
        if model.get("hazard") != "weibull":
            raise ConfigError(f"model.hazard: unknown hazard model {model.get('hazard')!r}")
        _num("model", "tau_c", model.get("tau_c"), positive=True)
    if "n_subjects" in model:
        _num("model", "n_subjects", model["n_subjects"], positive=True, integer=True)
    if "dose" in model:
        _num("model", "dose", model["dose"], nonneg=True)
    if model.get("error", "constant") not in ("constant", "proportional", "combined"):
        raise ConfigError(f"model.error: unknown error model {model.get('error')!r}")
    tr = model.get("transforms", "log")
    for tag in [tr] if isinstance(tr, str) else list(tr):
        if tag not in TRANSFORMS:
            raise ConfigError(f"model.transforms: unknown transform {tag!r} (expected one of {TRANSFORMS})")
    if model.get("omega_structure", "diagonal") not in ("diagonal", "full"):
        raise ConfigError("model.omega_structure: expected 'diagonal' or 'full'")
    if "theta" in cfg:
        build_theta(cfg, cfg["theta"], "theta")
    for j, t0 in enumerate(cfg.get("theta0", []) or []):
        build_theta(cfg, t0, f"theta0[{j}]")
    s = cfg.get("sampler", {})
    for kern in s.get("kernels", []):
        if kern not in KERNELS:
            raise ConfigError(f"sampler.kernels: unknown kernel {kern!r} (expected one of {KERNELS})")
    if "n_iter" in s:
        _num("sampler", "n_iter", s["n_iter"], integer=True, nonneg=True)
    if "stepsize" in s:
        _num("sampler", "stepsize", s["stepsize"], positive=True)
    if "dof" in s:
        _num("sampler", "dof", s["dof"], positive=True, integer=True)
    if s.get("family", "gaussian") not in ("gaussian", "student"):
        raise ConfigError(f"sampler.family: unknown family {s.get('family')!r}")
    a = cfg.get("saem", {})
    if a.get("algorithm", "both") not in ("saem", "f-saem", "both"):
        raise ConfigError(f"saem.algorithm: expected saem, f-saem or both, got {a.get('algorithm')!r}")
    for key in ("n_iter", "burn_len", "switch"):
        if key in a:
            _num("saem", key, a[key], integer=True, nonneg=True)
    if "decay" in a:
        d = _num("saem", "decay", a["decay"])
        if not 0.5 < d <= 1:
            raise ConfigError("saem.decay: must lie in (0.5, 1]")
    if a.get("mcmc_transitions") is not None:
        _num("saem", "mcmc_transitions", a["mcmc_transitions"], integer=True, positive=True)
    if "replicates" in cfg.get("mcstudy", {}):
        _num("mcstudy", "replicates", cfg["mcstudy"]["replicates"], integer=True, positive=True)


def _vector(field, v, names):
    if isinstance(v, dict):
        missing = [n for n in names if n not in v]
        if missing:
            raise ConfigError(f"{field}: missing entry {missing[0]!r}")
        v = [v[n] for n in names]
    if not isinstance(v, (list, tuple)) or len(v) != len(names):
        raise ConfigError(f"{field}: expected {len(names)} values")
    for j, x in enumerate(v):
        _num("", f"{field}[{j}]", x)
    return np.asarray(v, dtype=float)


def build_theta(cfg: dict, spec: dict, field="theta") -> Theta:
    """Theta from a ``{psi_pop, omega_sd|omega, sigma2|b}`` object."""
    model = cfg["model"]
    names = tuple(model["names"])
    if not isinstance(spec, dict):
        raise ConfigError(f"{field}: expected an object")
    if "psi_pop" not in spec:
        raise ConfigError(f"{field}.psi_pop: missing")
    psi = _vector(f"{field}.psi_pop", spec["psi_pop"], names)
    if "omega" in spec:
        omega = np.asarray(spec["omega"], dtype=float)
    elif "omega_sd" in spec:
        sd = _vector(f"{field}.omega_sd", spec["omega_sd"], names)
        if np.any(sd <= 0):
            raise ConfigError(f"{field}.omega_sd: must be positive")
        omega = np.diag(sd ** 2)
    else:
        raise ConfigError(f"{field}.omega_sd: missing")
    try:
        pop = PopulationModel(names, psi, omega, transforms=model.get("transforms", "log"),
                              omega_structure=model.get("omega_structure", "diagonal"))
    except DomainError as exc:
        raise ConfigError(f"{field}.psi_pop: {exc}") from None
    except NlmeError as exc:
        raise ConfigError(f"{field}.omega: {exc}") from None
    error = None
    if model["type"] == "continuous":
        kind = model.get("error", "constant")
        try:
            if kind == "constant":
                if "sigma2" not in spec:
                    raise ConfigError(f"{field}.sigma2: missing")
                error = ErrorModel.constant(_num(field, "sigma2", spec["sigma2"], positive=True))
            elif kind == "proportional":
                error = ErrorModel("proportional", (_num(field, "b", spec.get("b"), positive=True),))
            else:
                ab = spec.get("b")
                if not isinstance(ab, (list, tuple)) or len(ab) != 2:
                    raise ConfigError(f"{field}.b: combined error needs [a, b]")
                error = ErrorModel("combined", tuple(ab))
        except ConfigError:
            raise
        except NlmeError as exc:
            raise ConfigError(f"{field}: {exc}") from None
    return Theta(pop, error)


def build_obs_model(cfg: dict):
    model = cfg["model"]
    if model["type"] == "tte":
        return TimeToEventModel(WEIBULL)
    if model["structural"] == "pk1_oral":
        return ContinuousModel(PK1_ORAL)
    deg = len(model["names"]) - 1
    return ContinuousModel(linear_structural(polynomial_basis(deg), model["names"], "polynomial"))


def build_design(cfg: dict, n: int) -> list:
    """Observation times per subject.

    ``pk-default`` samples at 0.5, 1, 2, 4, 8, 12, 24 and 48 h; the last five
    subjects of 32 miss the 0.5 h sample (251 observations in total).
    """
    design = cfg["model"].get("design", "pk-default")
    if design == "pk-default":
        n_short = max(0, n - 27)
        return [np.array(PK_TIMES[1:] if i >= n - n_short else PK_TIMES) for i in range(n)]
    if isinstance(design, list) and design and all(isinstance(x, (int, float)) for x in design):
        return [np.asarray(design, float)] * n
    if isinstance(design, list) and len(design) == n:
        return [np.asarray(d, float) for d in design]
    raise ConfigError("model.design: expected 'pk-default', a time list, or one list per subject")


def theta0_list(cfg: dict) -> list:
    specs = cfg.get("theta0") or [cfg["theta"]]
    return [build_theta(cfg, s, f"theta0[{j}]") for j, s in enumerate(specs)]
