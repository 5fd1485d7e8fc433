"""Poisson regression of clicks on trigger counts, bootstrap inference, triage scoring.

The single-fit path is textbook IRLS (weighted least squares on the working
response).  The bootstrap refits thousands of case-resampled datasets, which
is the same as refitting with integer frequency weights, so replicates are
solved together by a batched Newton iteration.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import linalg, stats
from scipy.special import gammaln, xlogy

from . import LABELS

INTERCEPT = "alpha"
SPOOF = "SpoofDist"
TRIGGERS = LABELS
# regressors enter the nested models in this order
STEP_ORDER = ("Reciprocity", "Consistency", "SocialProof", "Authority", "Scarcity", "Liking", SPOOF)
MODELS: dict[str, tuple[str, ...]] = {f"M{i}": STEP_ORDER[:i] for i in range(1, 8)}
MODELS["PM1"] = ("Reciprocity", "Consistency", "Scarcity", SPOOF)
MODELS["PM2"] = ("Reciprocity", "Consistency", "SocialProof", "Authority", "Scarcity", "Liking", SPOOF)

DEFAULT_MIN_CLICKS = 10
MAX_ITER = 100
GRAD_TOL = 1e-8
DESIGN_FIELDS = ("email_id", "clicks_avg", *TRIGGERS, "spoof_dist")


class FitError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# -- design ------------------------------------------------------------------------


@dataclass
class Design:
    email_ids: list[str]
    y: np.ndarray
    X: np.ndarray
    columns: list[str]

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.y), -1)
        if len(set(self.columns)) != len(self.columns):
            raise FitError("design column names must be unique")
        if self.X.shape[1] != len(self.columns):
            raise FitError("column names do not match X")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise FitError("design contains missing values")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def regressors(self) -> list[str]:
        return [c for c in self.columns if c != INTERCEPT]

    def select(self, regressors: Sequence[str]) -> "Design":
        missing = [c for c in regressors if c not in self.columns]
        if missing:
            raise FitError(f"unknown columns: {', '.join(missing)}")
        cols = [INTERCEPT, *regressors]
        idx = [self.columns.index(c) for c in cols]
        return Design(list(self.email_ids), self.y.copy(), self.X[:, idx], cols)

    def training_stats(self) -> dict[str, tuple[float, float]]:
        """Per-regressor (mean, sample sd)."""
        out = {}
        for j, c in enumerate(self.columns):
            if c == INTERCEPT:
                continue
            col = self.X[:, j]
            out[c] = (float(col.mean()), float(col.std(ddof=1)) if self.n > 1 else 0.0)
        return out

    def digest(self) -> str:
        return hashlib.sha256(self.y.tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class DesignRow:
    email_id: str
    clicks_avg: float
    triggers: tuple[int, ...]
    spoof_dist: int

    def value(self, name: str) -> float:
        if name == SPOOF:
            return float(self.spoof_dist)
        return float(self.triggers[TRIGGERS.index(name)])


def build_design(
    rows: Iterable[DesignRow],
    regressors: Sequence[str] = STEP_ORDER,
    min_clicks: float = DEFAULT_MIN_CLICKS,
) -> Design:
    """Rows with rounded clicks >= ``min_clicks``; ``y`` is clicks_avg rounded half-up."""
    kept = [r for r in rows if round_half_up(r.clicks_avg) >= min_clicks]
    X = np.array([[1.0, *(r.value(c) for c in regressors)] for r in kept]).reshape(len(kept), len(regressors) + 1)
    y = np.array([round_half_up(r.clicks_avg) for r in kept], dtype=np.float64)
    return Design([r.email_id for r in kept], y, X, [INTERCEPT, *regressors])


def read_design_csv(path: str | Path) -> list[DesignRow]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out.append(DesignRow(
                rec["email_id"],
                float(rec["clicks_avg"]),
                tuple(int(rec[t]) for t in TRIGGERS),
                int(rec["spoof_dist"]),
            ))
    return out


def write_design_csv(rows: Iterable[DesignRow], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DESIGN_FIELDS)
        for r in rows:
            w.writerow([r.email_id, repr(float(r.clicks_avg)), *r.triggers, r.spoof_dist])


# -- fitting ----------------------------------------------------------------------


@dataclass
class PoissonFit:
    columns: list[str]
    coef: np.ndarray
    se: np.ndarray
    loglik: float
    null_loglik: float
    deviance: float
    adj_mcfadden_r2: float
    n: int
    converged: bool
    iterations: int = 0
    model_id: str = ""
    data_digest: str = ""

    @property
    def k(self) -> int:
        return len(self.columns)

    @property
    def coef_map(self) -> dict[str, float]:
        return dict(zip(self.columns, map(float, self.coef)))

    @property
    def pvalues(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.abs(self.coef / self.se)
        return 2 * stats.norm.sf(z)

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "columns": list(self.columns),
            "coef": [float(x) for x in self.coef],
            "se": [float(x) for x in self.se],
            "loglik": self.loglik,
            "null_loglik": self.null_loglik,
            "deviance": self.deviance,
            "adj_mcfadden_r2": self.adj_mcfadden_r2,
            "n": self.n,
            "converged": self.converged,
            "iterations": self.iterations,
            "data_digest": self.data_digest,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "PoissonFit":
        return cls(list(d["columns"]), np.asarray(d["coef"], dtype=float), np.asarray(d["se"], dtype=float),
                   d["loglik"], d["null_loglik"], d["deviance"], d["adj_mcfadden_r2"], d["n"],
                   d["converged"], d.get("iterations", 0), d.get("model_id", ""), d.get("data_digest", ""))


def poisson_loglik(y: np.ndarray, mu: np.ndarray, w: np.ndarray | None = None) -> float:
    terms = xlogy(y, mu) - mu - gammaln(y + 1)
    return float(np.sum(terms if w is None else w * terms))


def poisson_deviance(y: np.ndarray, mu: np.ndarray, w: np.ndarray | None = None) -> float:
    terms = 2 * (xlogy(y, y) - xlogy(y, mu) - (y - mu))
    return float(max(0.0, np.sum(terms if w is None else w * terms)))


def null_loglik(y: np.ndarray, w: np.ndarray | None = None) -> float:
    w = np.ones_like(y) if w is None else w
    ybar = float(np.sum(w * y) / np.sum(w))
    return poisson_loglik(y, np.full_like(y, ybar), w)


def adj_mcfadden(loglik: float, null_ll: float, k: int) -> float:
    if null_ll == 0:
        return math.nan
    return 1.0 - (loglik - k) / null_ll


def check_rank(X: np.ndarray, columns: Sequence[str]) -> None:
    """Raise naming the columns that are linear combinations of earlier ones."""
    if X.shape[0] < X.shape[1]:
        raise FitError("need more observations than coefficients")
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    _, R, piv = linalg.qr(X / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(X.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0) * 1e3
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        bad = sorted(piv[rank:])
        raise FitError("rank-deficient design; collinear columns: " + ", ".join(columns[i] for i in bad))


def _grad_small(g: np.ndarray, y: np.ndarray, w: np.ndarray) -> bool:
    # gradient relative to the total count keeps the test scale-free
    return float(np.linalg.norm(g)) < GRAD_TOL * (1.0 + float(np.sum(w * y)))


def fit_poisson(
    d: Design, weights: np.ndarray | None = None, max_iter: int = MAX_ITER, model_id: str = ""
) -> PoissonFit:
    """Log-link Poisson MLE by iteratively reweighted least squares with step halving."""
    X, y = d.X, d.y
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise FitError("y must be non-negative integers")
    if d.n <= X.shape[1]:
        raise FitError("need n > number of coefficients")
    check_rank(X, d.columns)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    mu = y + 0.1
    eta = np.log(mu)
    beta = np.linalg.lstsq(X * np.sqrt(w * mu)[:, None], eta * np.sqrt(w * mu), rcond=None)[0]
    eta = X @ beta
    mu = np.exp(eta)
    ll = poisson_loglik(y, mu, w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = X.T @ (w * (y - mu))
        if _grad_small(g, y, w):
            converged = True
            it -= 1
            break
        sw = np.sqrt(w * mu)
        zw = (eta + (y - mu) / mu) * sw
        new = np.linalg.lstsq(X * sw[:, None], zw, rcond=None)[0]
        step = new - beta
        accepted = False
        for _ in range(30):
            cand = beta + step
            eta_c = X @ cand
            if np.all(eta_c < 700):
                mu_c = np.exp(eta_c)
                ll_c = poisson_loglik(y, mu_c, w)
                if ll_c >= ll - 1e-12 * abs(ll):
                    accepted = True
                    break
            step = step / 2
        if not accepted:
            break
        beta, eta, mu, ll = cand, eta_c, mu_c, ll_c
    else:
        g = X.T @ (w * (y - mu))
        converged = _grad_small(g, y, w)
    info = X.T @ ((w * mu)[:, None] * X)
    try:
        se = np.sqrt(np.diag(np.linalg.inv(info)))
    except np.linalg.LinAlgError:
        se = np.full(len(beta), np.nan)
    null_ll = null_loglik(y, w)
    return PoissonFit(
        columns=list(d.columns),
        coef=beta,
        se=se,
        loglik=ll,
        null_loglik=null_ll,
        deviance=poisson_deviance(y, mu, w),
        adj_mcfadden_r2=adj_mcfadden(ll, null_ll, X.shape[1]),
        n=d.n,
        converged=converged,
        iterations=it,
        model_id=model_id,
        data_digest=d.digest(),
    )


def stepwise(d_full: Design, order: Sequence[str] = STEP_ORDER) -> list[PoissonFit]:
    """Nested fits M1..Mk, adding one regressor at a time."""
    return [fit_poisson(d_full.select(order[:i]), model_id=f"M{i}") for i in range(1, len(order) + 1)]


def anova_chisq(nested: PoissonFit, fuller: PoissonFit) -> tuple[float, int, float]:
    """Likelihood-ratio test: (deviance drop, df, upper-tail chi-square p)."""
    if not set(nested.columns) <= set(fuller.columns):
        raise FitError("models are not nested")
    if nested.n != fuller.n or (nested.data_digest and fuller.data_digest and nested.data_digest != fuller.data_digest):
        raise FitError("models were fitted on different data")
    df = fuller.k - nested.k
    stat = max(0.0, nested.deviance - fuller.deviance)
    if df == 0:
        return stat, 0, 1.0
    return stat, df, chi2_pvalue(stat, df)


def chi2_pvalue(stat: float, df: int) -> float:
    return float(stats.chi2.sf(stat, df))


# -- bootstrap --------------------------------------------------------------------


QUANTILES = (0.025, 0.5, 0.975)


@dataclass
class BootstrapFit:
    columns: list[str]
    draws: np.ndarray  # B x K
    seed: int | None = None
    dropped: int = 0
    warnings: list[str] = field(default_factory=list)
    model_id: str = ""

    @property
    def B(self) -> int:
        return int(self.draws.shape[0])

    @property
    def quantiles(self) -> dict[str, tuple[float, float, float]]:
        q = np.quantile(self.draws, QUANTILES, axis=0)
        return {c: tuple(float(v) for v in q[:, j]) for j, c in enumerate(self.columns)}

    @classmethod
    def pinned(cls, columns: Sequence[str], coef: Sequence[float], model_id: str = "") -> "BootstrapFit":
        """A one-row bootstrap whose every draw is ``coef``."""
        return cls(list(columns), np.asarray([coef], dtype=np.float64), model_id=model_id)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        side = path.with_suffix(".f64")
        side.write_bytes(np.ascontiguousarray(self.draws, dtype="<f8").tobytes())
        meta = {
            "model_id": self.model_id,
            "columns": self.columns,
            "seed": self.seed,
            "dropped": self.dropped,
            "warnings": self.warnings,
            "quantiles": {c: list(v) for c, v in self.quantiles.items()},
            "draws_sidecar": {"file": side.name, "dtype": "<f8", "shape": list(self.draws.shape), "order": "C"},
        }
        path.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BootstrapFit":
        path = Path(path)
        meta = json.loads(path.read_text(encoding="utf-8"))
        sc = meta["draws_sidecar"]
        raw = (path.parent / sc["file"]).read_bytes()
        draws = np.frombuffer(raw, dtype=sc["dtype"]).astype(np.float64).reshape(sc["shape"])
        return cls(meta["columns"], draws, meta.get("seed"), meta.get("dropped", 0),
                   meta.get("warnings", []), meta.get("model_id", ""))


def _batched_newton(X, y, W, beta0, max_iter=MAX_ITER):
    """Poisson MLE for each row of frequency weights ``W``; returns (betas, converged mask)."""
    R = W.shape[0]
    beta = np.tile(beta0, (R, 1))
    eta = beta @ X.T
    mu = np.exp(eta)
    ll = np.sum(W * (y * eta - mu), axis=1)
    done = np.zeros(R, dtype=bool)
    ok = np.ones(R, dtype=bool)
    tot = 1.0 + W @ y
    for _ in range(max_iter):
        act = np.flatnonzero(~done & ok)
        if act.size == 0:
            break
        Wa, mua = W[act], mu[act]
        g = (Wa * (y - mua)) @ X
        small = np.linalg.norm(g, axis=1) < GRAD_TOL * tot[act]
        done[act[small]] = True
        act, g, Wa, mua = act[~small], g[~small], Wa[~small], mua[~small]
        if act.size == 0:
            break
        H = np.einsum("rn,nk,nl->rkl", Wa * mua, X, X)
        try:
            step = np.linalg.solve(H, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.zeros_like(g)
            for i in range(len(act)):
                try:
                    step[i] = np.linalg.solve(H[i], g[i])
                except np.linalg.LinAlgError:
                    ok[act[i]] = False
        cur = ll[act]
        pending = np.ones(len(act), dtype=bool)
        for _ in range(30):
            idx = np.flatnonzero(pending)
            if idx.size == 0:
                break
            cand = beta[act[idx]] + step[idx]
            eta_c = cand @ X.T
            with np.errstate(over="ignore"):
                mu_c = np.exp(eta_c)
            ll_c = np.sum(W[act[idx]] * (y * eta_c - mu_c), axis=1)
            good = np.isfinite(ll_c) & (ll_c >= cur[idx] - 1e-12 * np.abs(cur[idx]))
            gi = idx[good]
            beta[act[gi]] = cand[good]
            mu[act[gi]] = mu_c[good]
            ll[act[gi]] = ll_c[good]
            pending[gi] = False
            step[idx[~good]] /= 2
        # a replicate whose step could not improve the likelihood is stuck
        ok[act[pending]] = False
    return beta, done & ok


def bootstrap_fit(
    d: Design, B: int = 5000, seed: int = 0, chunk: int = 250, model_id: str = ""
) -> BootstrapFit:
    """Case-resampling bootstrap; non-converged replicates are dropped and counted."""
    if B < 100:
        raise FitError("B must be at least 100")
    base = fit_poisson(d)
    rng = np.random.default_rng(seed)
    n = d.n
    out = []
    dropped = 0
    for start in range(0, B, chunk):
        r = min(chunk, B - start)
        idx = rng.integers(0, n, size=(r, n))
        W = np.zeros((r, n))
        np.add.at(W, (np.repeat(np.arange(r), n), idx.ravel()), 1.0)
        betas, conv = _batched_newton(d.X, d.y, W, base.coef)
        out.append(betas[conv])
        dropped += int((~conv).sum())
    draws = np.concatenate(out) if out else np.zeros((0, d.X.shape[1]))
    notes = []
    if dropped > 0.2 * B:
        msg = f"{dropped} of {B} bootstrap replicates did not converge"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    return BootstrapFit(list(d.columns), draws, seed, dropped, notes, model_id)


# -- prediction and ranking ---------------------------------------------------------


@dataclass
class TriageScore:
    email_id: str
    predicted_clicks_mean: float
    predicted_clicks_q025: float
    predicted_clicks_q50: float
    predicted_clicks_q975: float
    model_id: str
    in_domain: bool

    def to_row(self) -> list:
        return [self.email_id, f"{self.predicted_clicks_mean:.6f}", f"{self.predicted_clicks_q025:.6f}",
                f"{self.predicted_clicks_q50:.6f}", f"{self.predicted_clicks_q975:.6f}",
                self.model_id, int(self.in_domain)]


SCORE_FIELDS = ("email_id", "predicted_clicks_mean", "predicted_clicks_q025", "predicted_clicks_q50",
                "predicted_clicks_q975", "model_id", "in_domain")


def regressor_vector(trigger_counts: Sequence[float], spoof_distance: float, names: Sequence[str]) -> np.ndarray:
    vals = dict(zip(TRIGGERS, trigger_counts))
    vals[SPOOF] = spoof_distance
    return np.array([float(vals[c]) for c in names])


def weighted_sample_quantiles(values: np.ndarray, counts: np.ndarray, qs: Sequence[float]) -> np.ndarray:
    """Quantiles (linear interpolation) of the multiset where ``values[i]`` repeats ``counts[i]`` times.

    ``values`` and ``counts`` are (m x B); identical to ``np.quantile`` on the expanded sample.
    """
    order = np.argsort(values, axis=1, kind="stable")
    v = np.take_along_axis(values, order, axis=1)
    c = np.take_along_axis(counts, order, axis=1)
    cum = np.cumsum(c, axis=1)
    N = cum[:, -1]
    out = np.empty((values.shape[0], len(qs)))
    rows = np.arange(values.shape[0])
    for j, q in enumerate(qs):
        h = (N - 1) * q
        lo = np.floor(h).astype(np.int64)
        hi = np.minimum(lo + 1, N - 1)
        frac = h - lo
        # the k-th order statistic (0-based) is the first value whose cumulative count exceeds k
        ilo = np.array([np.searchsorted(cum[i], lo[i], side="right") for i in rows])
        ihi = np.array([np.searchsorted(cum[i], hi[i], side="right") for i in rows])
        a = v[rows, ilo]
        b = v[rows, ihi]
        out[:, j] = a + frac * (b - a)
    return out


def predict_clicks(
    bf: BootstrapFit,
    profiles: Sequence[tuple[str, Sequence[float], float]],
    model_id: str = "PM1",
    draws: int = 50_000,
    seed: int = 0,
    training_stats: Mapping[str, tuple[float, float]] | None = None,
    chunk: int = 512,
) -> list[TriageScore]:
    """Score each (email_id, trigger_counts, spoof_distance) by resampling bootstrap coefficient rows.

    One shared set of ``draws`` row indices is used for every email, so scores are
    comparable across emails and independent of the order they are passed in.
    """
    if bf.B == 0:
        raise FitError("bootstrap has no draws")
    regs = [c for c in bf.columns if c != INTERCEPT]
    expected = MODELS.get(model_id)
    if expected is not None and list(expected) != regs:
        raise FitError(f"bootstrap columns {regs} do not match model {model_id}")
    rng = np.random.default_rng(seed)
    counts = np.bincount(rng.integers(0, bf.B, size=draws), minlength=bf.B).astype(np.float64)
    keep = counts > 0
    coef = bf.draws[keep]
    cnt = counts[keep]
    Xp = np.array([[1.0, *regressor_vector(t, s, regs)] for _, t, s in profiles]).reshape(len(profiles), len(bf.columns))
    out = []
    for start in range(0, len(profiles), chunk):
        Xc = Xp[start:start + chunk]
        pred = np.exp(Xc @ coef.T)
        mean = (pred @ cnt) / draws
        qs = weighted_sample_quantiles(pred, np.broadcast_to(cnt, pred.shape), QUANTILES)
        for i in range(Xc.shape[0]):
            eid = profiles[start + i][0]
            x = Xc[i, 1:]
            in_dom = True
            if training_stats is not None:
                in_dom = all(abs(x[j] - training_stats[c][0]) <= training_stats[c][1] for j, c in enumerate(regs))
            out.append(TriageScore(eid, float(mean[i]), float(qs[i, 0]), float(qs[i, 1]), float(qs[i, 2]),
                                   model_id, bool(in_dom)))
    return out


def triage_rank(scores: Iterable[TriageScore]) -> list[TriageScore]:
    return sorted(scores, key=lambda s: (-s.predicted_clicks_q50, -s.predicted_clicks_mean, s.email_id))


def write_scores(scores: Iterable[TriageScore], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for s in scores:
            w.writerow(s.to_row())


def read_scores(path: str | Path) -> list[TriageScore]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [TriageScore(r["email_id"], float(r["predicted_clicks_mean"]), float(r["predicted_clicks_q025"]),
                            float(r["predicted_clicks_q50"]), float(r["predicted_clicks_q975"]),
                            r["model_id"], r["in_domain"] == "1")
                for r in csv.DictReader(fh)]


# -- single-regressor scans ---------------------------------------------------------


@dataclass
class ScanResult:
    regressor: str
    beta: float
    se: float
    p: float
    n: int


def _single(y: np.ndarray, x: np.ndarray, ids: list[str], name: str) -> ScanResult:
    if np.ptp(x) == 0:
        # a constant regressor carries no information about the slope
        return ScanResult(name, 0.0, math.nan, 1.0, len(y))
    d = Design(ids, y, np.column_stack([np.ones_like(x), x]), [INTERCEPT, name])
    f = fit_poisson(d)
    return ScanResult(name, float(f.coef[1]), float(f.se[1]), float(f.pvalues[1]), len(y))


def simple_poisson_scan(
    rows: Sequence[DesignRow], min_clicks: float = DEFAULT_MIN_CLICKS
) -> tuple[list[ScanResult], list[tuple[str, str, int, int]]]:
    """Slopes for vulnerability count, each trigger alone and spoof distance, plus the scatter table."""
    kept = [r for r in rows if round_half_up(r.clicks_avg) >= min_clicks]
    if not kept:
        raise FitError("no rows pass the click filter")
    ids = [r.email_id for r in kept]
    y = np.array([round_half_up(r.clicks_avg) for r in kept], dtype=float)
    trig = np.array([r.triggers for r in kept], dtype=float).reshape(len(kept), len(TRIGGERS))
    results = [_single(y, (trig > 0).sum(axis=1).astype(float), ids, "VulnCount")]
    for j, name in enumerate(TRIGGERS):
        results.append(_single(y, trig[:, j], ids, name))
    results.append(_single(y, np.array([r.spoof_dist for r in kept], dtype=float), ids, SPOOF))
    table = [(r.email_id, name, int(r.triggers[j]), int(yy)) for r, yy in zip(kept, y) for j, name in enumerate(TRIGGERS)]
    return results, table
