"""Dataset CSV and run-manifest serialization."""

from __future__ import annotations

import csv
import json
import platform
from collections import OrderedDict
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError
from .model import IndividualData


def write_dataset_csv(path, dataset, covariate_names=()):
    """Continuous: ``id,time,value,dose[,covariates]``; TTE: ``id,time,event``.

    TTE subjects get one ``event=1`` row per event and a final ``event=0``
    censoring row at ``tau_c``.
    """
    dataset = list(dataset)
    kinds = {ind.kind for ind in dataset}
    if len(kinds) > 1:
        raise ConfigError("dataset mixes continuous and time-to-event subjects")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if kinds == {"tte"}:
            w.writerow(["id", "time", "event"])
            for ind in dataset:
                for t in ind.event_times:
                    w.writerow([ind.id, repr(float(t)), 1])
                if ind.censored:
                    w.writerow([ind.id, repr(float(ind.tau_c)), 0])
            return
        w.writerow(["id", "time", "value", "dose"] + list(covariate_names))
        for ind in dataset:
            cov = [] if ind.covariates is None else [repr(float(c)) for c in ind.covariates]
            for t, y in zip(ind.times, ind.values):
                w.writerow([ind.id, repr(float(t)), repr(float(y)), repr(float(ind.dose))] + cov)


def _parse_id(s):
    try:
        return int(s)
    except ValueError:
        return s


def read_dataset_csv(path, tau_c=None):
    """Inverse of :func:`write_dataset_csv`; subject order follows first appearance."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"data: file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
        header = rows[0].keys() if rows else []
    if not rows:
        raise ConfigError(f"data: {path} has no rows")
    groups = OrderedDict()
    for r in rows:
        groups.setdefault(_parse_id(r["id"]), []).append(r)
    if "event" in header:
        out = []
        for sid, rs in groups.items():
            ev = [float(r["time"]) for r in rs if int(r["event"]) == 1]
            cens = [float(r["time"]) for r in rs if int(r["event"]) == 0]
            tc = cens[-1] if cens else tau_c
            out.append(IndividualData(sid, event_times=ev, tau_c=tc, censored=bool(cens) or tau_c is not None))
        return out
    if not {"time", "value"} <= set(header):
        raise ConfigError(f"data: {path} needs columns id,time,value[,dose] or id,time,event")
    extra = [c for c in header if c not in ("id", "time", "value", "dose")]
    out = []
    for sid, rs in groups.items():
        cov = [float(rs[0][c]) for c in extra] if extra else None
        dose = float(rs[0].get("dose") or 0.0)
        out.append(IndividualData(sid, times=[float(r["time"]) for r in rs],
                                  values=[float(r["value"]) for r in rs], dose=dose, covariates=cov))
    return out


def versions() -> dict:
    return {"nlmeimh": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def write_manifest(path, **entries):
    """JSON manifest with the given entries plus library versions."""
    doc = _jsonable(dict(entries, versions=versions()))
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc
