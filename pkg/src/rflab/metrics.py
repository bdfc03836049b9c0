"""Desk-scale evaluation: Gaussian Frechet (2-Wasserstein) distance and a
matched-filter temporal alignment score."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from rflab.errors import DimensionError, UsageError


@dataclass
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray


def fit_gaussian(samples) -> GaussianFit:
    """Sample mean and unbiased covariance of ``samples`` [n, D]."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise UsageError(f"fit_gaussian needs at least 2 samples, got {x.shape[0]}")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    return GaussianFit(mu, 0.5 * (cov + cov.T))


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, Q)`` with ``a ~= Q diag(w) Q^T``. Intended for D <= 16.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise DimensionError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    q = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if abs(apr) <= 1e-300:
                    continue
                theta = (a[r, r] - a[p, p]) / (2.0 * apr)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                cs = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * cs
                # A <- J^T A J on rows/cols p, r
                ap, ar = a[:, p].copy(), a[:, r].copy()
                a[:, p] = cs * ap - sn * ar
                a[:, r] = sn * ap + cs * ar
                ap, ar = a[p, :].copy(), a[r, :].copy()
                a[p, :] = cs * ap - sn * ar
                a[r, :] = sn * ap + cs * ar
                qp, qr = q[:, p].copy(), q[:, r].copy()
                q[:, p] = cs * qp - sn * qr
                q[:, r] = sn * qp + cs * qr
    return np.diag(a).copy(), q


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix (negative eigenvalues clamped)."""
    w, q = jacobi_eigh(0.5 * (a + a.T))
    return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T


def frechet_w2(a: GaussianFit, b: GaussianFit) -> float:
    """Squared 2-Wasserstein distance between two Gaussians.

    ``|mu_a - mu_b|^2 + tr(Ca + Cb - 2 (Cb^1/2 Ca Cb^1/2)^1/2)``.
    """
    if a.mean.shape != b.mean.shape:
        raise DimensionError(f"frechet_w2 dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    rb = sqrtm_psd(b.cov)
    cross = sqrtm_psd(rb @ a.cov @ rb)
    dm = a.mean - b.mean
    value = float(dm @ dm + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def per_class_w2(samples: np.ndarray, labels: np.ndarray, reference: np.ndarray,
                 ref_labels: np.ndarray) -> float:
    """Average over classes of ``frechet_w2`` between generated and reference fits.

    Samples are flattened to one vector per frame.
    """
    scores = []
    for k in np.unique(ref_labels):
        gen = _frames(samples[labels == k])
        ref = _frames(reference[ref_labels == k])
        scores.append(frechet_w2(fit_gaussian(gen), fit_gaussian(ref)))
    return float(np.mean(scores))


def _frames(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x.reshape(-1, x.shape[-1])


# --------------------------------------------------------------------------
# Temporal alignment
# --------------------------------------------------------------------------

@dataclass
class AlignmentScore:
    accuracy: float
    chance: float
    events: int

    def __float__(self) -> float:
        return self.accuracy

    @property
    def chance_sigma(self) -> float:
        if self.events == 0:
            return 0.0
        return math.sqrt(self.chance * (1 - self.chance) / self.events)


def block_responses(x: np.ndarray, templates: np.ndarray) -> np.ndarray:
    """Normalized correlation of every template with every block: [N, L_c, K]."""
    k, r, d = templates.shape
    x = np.asarray(x, dtype=np.float64)
    n, length, dx = x.shape
    if dx != d or length % r:
        raise DimensionError(f"generated shape {x.shape} does not tile into blocks of {r}x{d}")
    blocks = x.reshape(n, length // r, r * d)
    tmpl = templates.reshape(k, r * d)
    bn = np.linalg.norm(blocks, axis=-1, keepdims=True)
    tn = np.linalg.norm(tmpl, axis=-1)
    return (blocks @ tmpl.T) / np.maximum(bn * tn, 1e-12)


def alignment_accuracy(generated, conditions, spec) -> AlignmentScore:
    """Fraction of planted events recovered at the right block.

    An event of type k planted at block j counts as recovered when template
    k's normalized correlation at block j is strictly higher than at every
    block where no type-k event was planted. ``chance`` is the mean of
    ``1 / (1 + #competing blocks)`` (the success rate for exchangeable noise).
    """
    templates = spec.template_bank()
    c = np.asarray(conditions)
    gen = np.asarray(generated)
    if c.shape[0] != gen.shape[0] or c.shape[1] * spec.regulate_ratio != gen.shape[1]:
        raise DimensionError(f"generated {gen.shape} does not match conditions {c.shape} "
                             f"at ratio {spec.regulate_ratio}")
    if c.shape[2] != templates.shape[0]:
        raise DimensionError(f"conditions have {c.shape[2]} event ids, spec has {templates.shape[0]}")
    resp = block_responses(gen, templates)
    planted = c > 0.5
    hits, chance, events = 0, 0.0, 0
    for n, j, k in zip(*np.nonzero(planted)):
        others = ~planted[n, :, k]
        rivals = resp[n, others, k]
        events += 1
        chance += 1.0 / (1 + rivals.size)
        if rivals.size == 0 or resp[n, j, k] > rivals.max():
            hits += 1
    if events == 0:
        return AlignmentScore(float("nan"), float("nan"), 0)
    return AlignmentScore(hits / events, chance / events, events)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

REPORT_COLUMNS = ["kind", "steps", "gamma", "w2", "alignment", "chance", "field_evals", "wall_ms"]


def write_report(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in REPORT_COLUMNS})


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def timed(fn: Callable[[], object]) -> tuple[object, float]:
    start = time.perf_counter()
    out = fn()
    return out, (time.perf_counter() - start) * 1000.0
