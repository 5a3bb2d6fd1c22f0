"""Experiment drivers shared by the command line and the acceptance suite."""

from __future__ import annotations

import csv
import json
import math
import os

import numpy as np

from . import fields as fl
from .estimators import EstimatorResult, RateEstimates
from .rng import RandomStream
from .transport import MINUTE, QOI_NAMES

METHOD_FIELD = 3  # stream path prefix for standalone field draws
SUMMARY_SCHEMA = "tracer-uq-summary/1"


# ---------------------------------------------------------------------------
# Matérn covariance study


def covariance_pairs(domain, lam: float, n_pairs: int = 10) -> np.ndarray:
    """Point pairs ``(n_pairs, 2, d)`` centred in G with separations ``0 .. 1.35 λ``."""
    c = np.asarray(domain.center)
    d = domain.dim
    out = np.empty((n_pairs, 2, d))
    for i in range(n_pairs):
        r = 0.15 * lam * i
        ang = math.pi * i / n_pairs
        u = np.zeros(d)
        u[0], u[1] = math.cos(ang), math.sin(ang)
        out[i, 0] = c - 0.5 * r * u
        out[i, 1] = c + 0.5 * r * u
    return out


def draw_fields(level, params: fl.MaternParams, n: int, seed: int, batch: int = 500, index: int = 0):
    """Yield batches of standard Matérn fields on Ĝ, deterministic in ``(seed, batch)``."""
    sampler = fl.matern_sampler(level, params)
    done, b = 0, 0
    while done < n:
        m = min(batch, n - done)
        stream = RandomStream(seed, (METHOD_FIELD, level.level, index, b))
        yield sampler.sample(fl.sample_white_noise(level, stream, m))
        done += m
        b += 1


def covariance_study(level, params: fl.MaternParams, n_samples: int, seed: int, pairs=None,
                     batch: int = 500) -> dict:
    """Empirical ``E[X(x)X(y)]`` at vertex-snapped pairs against the closed form.

    The field mean is zero by construction, so the estimator is the plain
    mean of products; its standard error is the product standard deviation
    over ``√K``.
    """
    g = level.outer
    if pairs is None:
        pairs = covariance_pairs(level.domain, params.lam)
    ia = fl.probe_indices(g, pairs[:, 0])
    ib = fl.probe_indices(g, pairs[:, 1])
    xa, xb = g.vertices[ia], g.vertices[ib]
    r = np.linalg.norm(xa - xb, axis=1)
    exact = params.covariance(r)
    s1 = np.zeros(len(ia))
    s2 = np.zeros(len(ia))
    m1 = np.zeros(len(ia))
    for X in draw_fields(level, params, n_samples, seed, batch):
        p = X[:, ia] * X[:, ib]
        s1 += p.sum(axis=0)
        s2 += (p * p).sum(axis=0)
        m1 += X[:, ia].sum(axis=0)
    rows = []
    K = n_samples
    for j in range(len(ia)):
        row = {"pair": j, "x": xa[j].tolist(), "y": xb[j].tolist(), "r": float(r[j]), "exact": float(exact[j])}
        if K >= 2:
            est = s1[j] / K
            sd = math.sqrt(max(s2[j] / K - est * est, 0.0) * K / (K - 1))
            se = sd / math.sqrt(K)
            z = (est - exact[j]) / se if se > 0 else math.inf
            row.update(empirical=float(est), stderr=float(se), z=float(z), mean=float(m1[j] / K),
                       within_3se=bool(abs(z) <= 3.0),
                       within_5pct=bool(abs(est - exact[j]) <= 0.05 * params.sigma**2))
        rows.append(row)
    return {"samples": K, "level": level.level, "h": level.h,
            "params": {"sigma": params.sigma, "nu": params.nu, "lambda": params.lam, "dim": params.dim},
            "pairs": rows,
            "passed": bool(K >= 2 and all(r["within_3se"] and r["within_5pct"] for r in rows))}


# ---------------------------------------------------------------------------
# output tables


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)


def _num(x):
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])


def write_levels_csv(path, result: EstimatorResult) -> None:
    """``level, N, mean, V, C``: max-over-QoI |mean| and variance of ``Y_ℓ``, work per sample."""
    rows = [(r["level"], r["N"], r["mean_Y"], r["var_Y"], r["cost"]) for r in result.levels]
    write_csv(path, ["level", "N", "mean", "V", "C"], rows)


def write_qoi_mean_std(path, result: EstimatorResult, config) -> None:
    times = config.qoi_times / MINUTE
    K = len(times)
    mean = np.asarray(result.estimate).reshape(len(QOI_NAMES), K)
    std = result.std
    std = np.full_like(mean, np.nan) if std is None else np.asarray(std).reshape(len(QOI_NAMES), K)
    header = ["time_min"]
    for name in QOI_NAMES:
        header += [f"{name}_mean", f"{name}_std"]
    rows = []
    for k in range(K):
        row = [float(times[k])]
        for i in range(len(QOI_NAMES)):
            row += [float(mean[i, k]), float(std[i, k])]
        rows.append(row)
    write_csv(path, header, rows)


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def rates_dict(rates: RateEstimates, extra=None) -> dict:
    out = rates.to_dict()
    if extra:
        out.update(extra)
    return out


def summary_dict(command: str, cfg, result: EstimatorResult, extra=None) -> dict:
    """Deterministic summary; wall-clock values live under ``timing`` only."""
    res = result.to_dict()
    timing = {"wall_seconds": res.pop("wall_seconds", None)}
    for row in res.get("levels", []):
        timing.setdefault("wall_per_sample", []).append(row.pop("wall_per_sample", None))
    out = {
        "schema": SUMMARY_SCHEMA,
        "command": command,
        "method": result.method,
        "preset": cfg.values["run"]["preset"] or None,
        "seed": cfg.seed,
        "fingerprint": cfg.fingerprint,
        "qoi": {"names": list(QOI_NAMES), "times_min": (cfg.spec.transport.qoi_times / MINUTE).tolist()},
        "estimate": np.asarray(result.estimate).tolist(),
        "estimator_variance": np.asarray(result.variance).tolist(),
        "std": None if result.std is None else np.asarray(result.std).tolist(),
        "result": res,
        "timing": timing,
        "config": cfg.to_dict(),
    }
    if extra:
        out.update(extra)
    return _clean(out)


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj
