"""Temporal knn imputation, AU summary features and GMM clustering."""
from __future__ import annotations

import csv
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .core import DataError, LongitudinalDataset, make_dataset

log = logging.getLogger(__name__)

# OpenFace's 18 action units (AU28 is presence-only in OpenFace; treated alike here)
AU_NAMES = (
    "AU01", "AU02", "AU04", "AU05", "AU06", "AU07", "AU09", "AU10", "AU12",
    "AU14", "AU15", "AU17", "AU20", "AU23", "AU25", "AU26", "AU28", "AU45",
)
MEASURES = ("mean", "max", "min", "std")
SUB_SESSIONS = ("Meditation", "Interaction")
PRESENCE_THRESHOLD = 1.0
VARIANCE_FLOOR = 1e-6


def feature_names() -> tuple[str, ...]:
    return tuple(f"{au}_{m}" for au in AU_NAMES for m in MEASURES)


# ------------------------------------------------------------------ imputation


def _nearest(observed_weeks: np.ndarray, week: int, k: int) -> np.ndarray:
    # stable sort on distance keeps earlier weeks first among ties
    order = np.argsort(np.abs(observed_weeks - week), kind="stable")
    return observed_weeks[order[:k]]


def knn_impute(data: LongitudinalDataset, k: int = 2) -> LongitudinalDataset:
    """Fill each missing cell with the mean of the subject's k temporally nearest
    observed values of that variable (ties toward the earlier week)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    values = np.array(data.values)
    weeks = np.arange(data.weeks)
    for s, subj in enumerate(data.subjects):
        for v, name in enumerate(data.variables):
            miss = data.missing[s, :, v]
            if not miss.any():
                continue
            obs = weeks[~miss]
            if obs.size < k:
                raise DataError(
                    f"subject {subj!r}, variable {name!r}: {obs.size} observed weeks, need k={k}"
                )
            for t in weeks[miss]:
                nn = _nearest(obs, t, k)
                values[s, t, v] = data.values[s, nn, v].mean()
    return make_dataset(data.subjects, data.variables, values, np.zeros_like(data.missing))


# ------------------------------------------------------------- AU features


def summarize_aus(frames: np.ndarray) -> np.ndarray:
    """72-vector of (mean, max, min, std) per AU after zeroing intensities <= 1.

    ``frames`` is (n_frames, 18) in :data:`AU_NAMES` order. The std is the
    population standard deviation.
    """
    x = np.asarray(frames, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("summarize_aus needs a non-empty (frames, AUs) array")
    if x.shape[1] != len(AU_NAMES):
        raise DataError(f"expected {len(AU_NAMES)} AU columns, got {x.shape[1]}")
    if x.shape[0] < 2:
        raise DataError("summarize_aus needs at least 2 frames")
    if np.isnan(x).any():
        raise DataError("AU intensities contain NaN")
    gated = np.where(x > PRESENCE_THRESHOLD, x, 0.0)
    stats = np.stack([gated.mean(0), gated.max(0), gated.min(0), gated.std(0)], axis=1)
    return stats.ravel()


_AU_COL = re.compile(r"^\s*(AU\d\d)(_r)?\s*$")


def read_au_frames(path: str | Path) -> np.ndarray:
    """Read one frame-level AU intensity CSV (columns ``frame, AU01 ... AU45``).

    OpenFace-style ``AU01_r`` headers are accepted; ``_c`` presence columns and
    anything else are ignored.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty AU file") from None
        cols = {}
        for i, h in enumerate(header):
            m = _AU_COL.match(h)
            if m and m.group(1) in AU_NAMES:
                cols[m.group(1)] = i
        absent = [a for a in AU_NAMES if a not in cols]
        if absent:
            raise DataError(f"{path}: missing AU columns {absent}")
        rows = []
        for line in reader:
            if not any(c.strip() for c in line):
                continue
            try:
                rows.append([float(line[cols[a]]) for a in AU_NAMES])
            except (ValueError, IndexError):
                raise DataError(f"{path}: malformed frame row {line[:3]}...") from None
    return np.array(rows).reshape(len(rows), len(AU_NAMES))


def au_file_name(subject: str, week: int, sub_session: str) -> str:
    return f"{subject}_w{week}_{sub_session}.csv"


def load_au_features(
    directory: str | Path, subjects: Sequence[str], weeks: int, sub_session: str
) -> LongitudinalDataset:
    """Summary features per (subject, week) for one sub-session.

    Absent files leave the row missing; those are filled later by
    :func:`knn_impute` on the feature vectors.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"AU directory {directory} does not exist")
    names = feature_names()
    values = np.full((len(subjects), weeks, len(names)), np.nan)
    found = 0
    for s, subj in enumerate(subjects):
        for w in range(1, weeks + 1):
            f = directory / au_file_name(subj, w, sub_session)
            if f.exists():
                values[s, w - 1] = summarize_aus(read_au_frames(f))
                found += 1
    if found == 0:
        raise DataError(f"no {sub_session} AU files found in {directory}")
    return make_dataset(subjects, names, values)


# ---------------------------------------------------------------------- GMM


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d), standardized space
    variances: np.ndarray  # (K, d), standardized space
    center: np.ndarray  # (d,) per-dimension mean used for z-scoring
    scale: np.ndarray  # (d,) per-dimension std (1 for constant dimensions)
    loglik: float
    trace: tuple[float, ...]
    seed: int = 0
    restart: int = 0
    warnings: tuple[str, ...] = field(default=())

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_params(self) -> int:
        return (self.K - 1) + 2 * self.K * self.dim

    def standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"feature width {x.shape[-1]} != model dimension {self.dim}")
        return (x - self.center) / self.scale

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        z = self.standardize(x)
        lp = _log_joint(z, self.weights, self.means, self.variances)
        return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))

    def score_samples(self, x: np.ndarray) -> np.ndarray:
        """Per-sample log density in standardized space."""
        z = self.standardize(x)
        return logsumexp(_log_joint(z, self.weights, self.means, self.variances), axis=1)


def _log_joint(z, weights, means, variances):
    # log w_k + log N(z | mu_k, diag(var_k)), shape (n, K)
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    prec = 1.0 / variances
    quad = (z * z) @ prec.T - 2.0 * z @ (means * prec).T + (means * means * prec).sum(1)
    logdet = np.log(variances).sum(-1)
    d = z.shape[1]
    return logw - 0.5 * (d * math.log(2 * math.pi) + logdet + quad)


def _logsumexp_rows(a):
    m = a.max(1, keepdims=True)
    return m + np.log(np.exp(a - m).sum(1, keepdims=True))


def _kmeans_pp(z: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = z.shape[0]
    centers = [int(rng.integers(n))]
    d2 = ((z - z[centers[0]]) ** 2).sum(1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with chosen centers
            rest = np.setdiff1d(np.arange(n), centers)
            nxt = int(rng.choice(rest))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, ((z - z[nxt]) ** 2).sum(1))
    return z[centers].copy()


def _em(z, K, rng, max_iter, tol, floor):
    n, d = z.shape
    means = _kmeans_pp(z, K, rng)
    # hard assignment to the seeds gives the starting responsibilities
    dist = ((z[:, None, :] - means[None]) ** 2).sum(-1)
    resp = np.zeros((n, K))
    resp[np.arange(n), dist.argmin(1)] = 1.0
    trace = []
    prev = -math.inf
    z2 = z * z
    for _ in range(max_iter):
        # M-step
        nk = resp.sum(0)
        weights = nk / n
        safe = np.where(nk > 0, nk, 1.0)
        means = np.where(nk[:, None] > 0, (resp.T @ z) / safe[:, None], means)
        var = (resp.T @ z2) / safe[:, None] - means ** 2
        variances = np.maximum(np.where(nk[:, None] > 0, var, 1.0), floor)
        # E-step
        lp = _log_joint(z, weights, means, variances)
        norm = _logsumexp_rows(lp)
        resp = np.exp(lp - norm)
        ll = float(norm.sum())
        trace.append(ll)
        if ll - prev < tol * n:
            break
        prev = ll
    return weights, means, variances, ll, trace


def fit_gmm(
    features: np.ndarray,
    K: int,
    seed: int = 0,
    restarts: int = 10,
    max_iter: int = 200,
    tol: float = 1e-6,
    variance_floor: float = VARIANCE_FLOOR,
    workers: int = 1,
    log_warnings: bool = True,
) -> GmmModel:
    """Diagonal-covariance GMM on z-scored features.

    Each restart seeds with k-means++, then alternates M and E steps until the
    per-sample log-likelihood gain drops below ``tol`` or ``max_iter`` is hit.
    The restart with the highest log-likelihood wins (ties: lowest index).
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise ValueError("features must be a 2-d array")
    n, d = x.shape
    if K < 1:
        raise ValueError("K must be >= 1")
    if n < K:
        raise ValueError(f"need at least K={K} samples, got {n}")
    center = x.mean(0)
    scale = x.std(0)
    warn = []
    const = scale == 0
    if const.any():
        warn.append(f"zero-variance dimensions left unscaled: {np.flatnonzero(const).tolist()}")
        if log_warnings:
            log.warning(warn[-1])
        scale = np.where(const, 1.0, scale)
    z = (x - center) / scale

    seeds = np.random.SeedSequence(seed).spawn(restarts)

    def run(i):
        return _em(z, K, np.random.default_rng(seeds[i]), max_iter, tol, variance_floor)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(restarts)))
    else:
        results = [run(i) for i in range(restarts)]
    best = max(range(restarts), key=lambda i: (results[i][3], -i))
    w, m, v, ll, trace = results[best]
    return GmmModel(w, m, v, center, scale, ll, tuple(trace), seed, best, tuple(warn))


@dataclass(frozen=True)
class KSelection:
    best_k: int
    ks: tuple[int, ...]
    bic: tuple[float, ...]
    aic: tuple[float, ...]
    models: tuple[GmmModel, ...]

    @property
    def best_model(self) -> GmmModel:
        return self.models[self.ks.index(self.best_k)]


def select_k(features: np.ndarray, k_min: int = 2, k_max: int = 20, seed: int = 0, **fit_kw) -> KSelection:
    """Fit K = k_min..k_max and pick the BIC minimizer (ties: smaller K)."""
    x = np.asarray(features, dtype=float)
    if k_min < 1:
        raise ValueError("k_min must be >= 1")
    if k_min > k_max:
        raise ValueError(f"k_min={k_min} > k_max={k_max}")
    if k_max > x.shape[0]:
        raise ValueError(f"k_max={k_max} exceeds the number of samples {x.shape[0]}")
    n = x.shape[0]
    ks, bic, aic, models = [], [], [], []
    for K in range(k_min, k_max + 1):
        m = fit_gmm(x, K, seed=seed, log_warnings=K == k_min, **fit_kw)
        p = m.n_params
        ks.append(K)
        bic.append(-2 * m.loglik + p * math.log(n))
        aic.append(-2 * m.loglik + 2 * p)
        models.append(m)
    best = ks[int(np.argmin(bic))]
    return KSelection(best, tuple(ks), tuple(bic), tuple(aic), tuple(models))


def assign_states(model: GmmModel, features: np.ndarray) -> np.ndarray:
    """Hard labels 1..K by maximum responsibility (ties: lower component)."""
    return model.responsibilities(features).argmax(1) + 1


def write_bic_curves(rows: Sequence[tuple[str, KSelection]], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sub_session", "K", "bic", "aic"])
        for label, sel in rows:
            for K, b, a in zip(sel.ks, sel.bic, sel.aic):
                w.writerow([label, K, f"{b:.6f}", f"{a:.6f}"])
