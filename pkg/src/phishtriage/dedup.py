"""Near-duplicate detection and campaign clustering.

Emails are compared by cosine similarity of L2-normalized term-frequency
vectors.  The cutoff is tuned by bootstrapping a hand-labeled sample and
picking the grid point where mean sensitivity and specificity cross.
Emails above the cutoff are merged into duplicate families with
union-find semantics (connected components), which are then summarised as
campaigns.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .corpus import Email, format_ts
from .textproc import TfVector, tf_matrix

# slack for float round-off when comparing a cosine against a threshold
SCORE_EPS = 1e-9
DEFAULT_FLOOR = 0.05
SECONDS_PER_DAY = 86400.0

SINGLE_DAY, SHORT, LONG = "SINGLE-DAY", "SHORT", "LONG"


@dataclass
class SimilarityMatrix:
    ids: list[str]
    scores: sparse.csr_matrix
    floor: float = DEFAULT_FLOOR

    def __len__(self) -> int:
        return len(self.ids)

    def get(self, i: int, j: int) -> float:
        return float(self.scores[i, j])

    def dense(self) -> np.ndarray:
        return self.scores.toarray()


def _normalized_matrix(docs: Sequence[TfVector]) -> sparse.csr_matrix:
    vocab: dict[str, int] = {}
    for d in docs:
        for tok in d.weights:
            vocab.setdefault(tok, len(vocab))
    X = tf_matrix(docs, vocab)
    norms = np.sqrt(np.asarray(X.multiply(X).sum(axis=1)).ravel())
    scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return sparse.diags(scale) @ X


def pairwise_dense(docs: Sequence[TfVector]) -> np.ndarray:
    """Full cosine matrix for small sets (used by threshold tuning)."""
    X = _normalized_matrix(docs)
    S = (X @ X.T).toarray()
    np.clip(S, 0.0, 1.0, out=S)
    S = np.triu(S, 1)
    S = S + S.T
    nonempty = np.asarray(X.getnnz(axis=1)) > 0
    S[np.diag_indices_from(S)] = nonempty.astype(float)
    return S


def similarity_matrix(
    docs: Sequence[TfVector], floor: float = DEFAULT_FLOOR, block: int = 512
) -> SimilarityMatrix:
    """All pairwise cosines, stored sparsely; off-diagonal entries below ``floor`` are dropped."""
    n = len(docs)
    X = _normalized_matrix(docs)
    XT = X.T.tocsc()
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    for start in range(0, n, block):
        stop = min(n, start + block)
        B = (X[start:stop] @ XT).toarray()
        # upper triangle only; symmetry is restored exactly below
        ii, jj = np.nonzero(B >= floor)
        gi = ii + start
        keep = jj > gi
        rows.append(gi[keep])
        cols.append(jj[keep])
        vals.append(np.minimum(B[ii[keep], jj[keep]], 1.0))
    r = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    v = np.concatenate(vals) if vals else np.zeros(0)
    diag = (np.asarray(X.getnnz(axis=1)) > 0).astype(float)
    di = np.flatnonzero(diag)
    S = sparse.coo_matrix(
        (np.concatenate([v, v, diag[di]]), (np.concatenate([r, c, di]), np.concatenate([c, r, di]))),
        shape=(n, n),
    ).tocsr()
    S.sort_indices()
    return SimilarityMatrix([d.email_id for d in docs], S, floor)


# -- threshold tuning ----------------------------------------------------------


class TuningError(ValueError):
    pass


@dataclass
class ThresholdTuning:
    threshold_grid: list[float]
    sensitivity_mean: list[float]
    specificity_mean: list[float]
    chosen_threshold: float
    bootstrap_n: int
    sample_size: int
    seed: int = 0

    @property
    def chosen_index(self) -> int:
        return self.threshold_grid.index(self.chosen_threshold)

    @property
    def sensitivity(self) -> float:
        return self.sensitivity_mean[self.chosen_index]

    @property
    def specificity(self) -> float:
        return self.specificity_mean[self.chosen_index]

    def to_json(self) -> dict:
        return {
            "threshold_grid": self.threshold_grid,
            "sensitivity_mean": self.sensitivity_mean,
            "specificity_mean": self.specificity_mean,
            "chosen_threshold": self.chosen_threshold,
            "bootstrap_n": self.bootstrap_n,
            "sample_size": self.sample_size,
            "seed": self.seed,
        }


def threshold_grid(step: float = 0.01) -> np.ndarray:
    n = int(round(1.0 / step))
    return np.round(np.arange(n + 1) * step, 10)


def score_bins(scores: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """For each score, the number of grid thresholds it clears (``score >= t``)."""
    return np.searchsorted(grid, scores + SCORE_EPS, side="right")


def pick_intersection(grid: np.ndarray, sens: np.ndarray, spec: np.ndarray) -> float:
    """Grid point minimizing |sensitivity - specificity|; ties go to the higher threshold."""
    gap = np.abs(sens - spec)
    gap = np.where(np.isnan(gap), np.inf, gap)
    best = np.flatnonzero(gap <= gap.min() + 1e-12)
    return float(grid[best.max()])


def tune_threshold(
    labeled: Sequence[tuple[str, object]],
    docs: Mapping[str, TfVector] | Sequence[TfVector],
    bootstrap_n: int = 10_000,
    sample_size: int = 300,
    seed: int = 0,
    grid_step: float = 0.01,
    chunk: int = 128,
) -> ThresholdTuning:
    """Bootstrap the pair-level sensitivity/specificity curves of the cosine cutoff.

    Each replicate draws ``sample_size`` labeled emails with replacement and scores
    every unordered pair of draws coming from distinct source emails.
    """
    if bootstrap_n < 1:
        raise TuningError("bootstrap_n must be >= 1")
    if sample_size > len(labeled):
        raise TuningError("sample_size exceeds the number of labeled emails")
    groups = [g for _, g in labeled]
    if len(set(groups)) < 2:
        raise TuningError("cannot tune: single class")
    by_id = docs if isinstance(docs, Mapping) else {d.email_id: d for d in docs}
    vecs = [by_id[i] for i, _ in labeled]
    n = len(vecs)
    S = pairwise_dense(vecs)
    iu, ju = np.triu_indices(n, 1)
    gid = {g: k for k, g in enumerate(dict.fromkeys(groups))}
    codes = np.array([gid[g] for g in groups])
    same = codes[iu] == codes[ju]
    if not same.any():
        raise TuningError("cannot tune: no duplicate pairs among labeled emails")
    grid = threshold_grid(grid_step)
    nb = len(grid) + 1
    bins = score_bins(S[iu, ju], grid)
    # one-hot pair -> (class, bin) map; positives occupy columns [0, nb), negatives [nb, 2nb)
    col = bins + np.where(same, 0, nb)
    P = sparse.csr_matrix((np.ones(len(col)), (np.arange(len(col)), col)), shape=(len(col), 2 * nb))

    rng = np.random.default_rng(seed)
    sens_sum = np.zeros(len(grid))
    spec_sum = np.zeros(len(grid))
    sens_n = spec_n = 0
    for start in range(0, bootstrap_n, chunk):
        r = min(chunk, bootstrap_n - start)
        draws = rng.integers(0, n, size=(r, sample_size))
        C = np.zeros((r, n))
        np.add.at(C, (np.repeat(np.arange(r), sample_size), draws.ravel()), 1.0)
        W = C[:, iu] * C[:, ju]
        H = np.asarray((P.T @ W.T).T)
        pos, neg = H[:, :nb], H[:, nb:]
        # predicted duplicate at grid[t] iff bin > t
        tp = np.cumsum(pos[:, ::-1], axis=1)[:, ::-1][:, 1:]
        tn = np.cumsum(neg, axis=1)[:, :-1]
        pos_tot = pos.sum(axis=1)
        neg_tot = neg.sum(axis=1)
        okp = pos_tot > 0
        okn = neg_tot > 0
        sens_sum += (tp[okp] / pos_tot[okp, None]).sum(axis=0)
        spec_sum += (tn[okn] / neg_tot[okn, None]).sum(axis=0)
        sens_n += int(okp.sum())
        spec_n += int(okn.sum())
    sens = sens_sum / sens_n if sens_n else np.full(len(grid), np.nan)
    spec = spec_sum / spec_n if spec_n else np.full(len(grid), np.nan)
    return ThresholdTuning(
        threshold_grid=[float(t) for t in grid],
        sensitivity_mean=[float(x) for x in sens],
        specificity_mean=[float(x) for x in spec],
        chosen_threshold=pick_intersection(grid, sens, spec),
        bootstrap_n=bootstrap_n,
        sample_size=sample_size,
        seed=seed,
    )


# -- duplicate families ----------------------------------------------------------


def assign_duplicate_ids(
    m: SimilarityMatrix,
    threshold: float,
    timestamps: Mapping[str, float | None] | None = None,
) -> dict[str, int]:
    """Connected components of the ``score >= threshold`` graph.

    Component ids are dense, ordered by the earliest member timestamp
    (undated components last, then by first member position).
    """
    if not 0.0 <= threshold <= 1.0 + SCORE_EPS:
        raise ValueError("threshold must lie in [0, 1]")
    if threshold < m.floor:
        raise ValueError(f"threshold {threshold} below the matrix storage floor {m.floor}")
    n = len(m.ids)
    if n == 0:
        return {}
    S = m.scores.tocoo()
    keep = (S.data + SCORE_EPS >= threshold) & (S.row != S.col)
    G = sparse.csr_matrix((np.ones(int(keep.sum())), (S.row[keep], S.col[keep])), shape=(n, n))
    _, comp = connected_components(G, directed=False)
    ts = timestamps or {}
    first: dict[int, tuple[float, int]] = {}
    for idx, (eid, c) in enumerate(zip(m.ids, comp)):
        t = ts.get(eid)
        key = (float("inf") if t is None else float(t), idx)
        if c not in first or key < first[c]:
            first[c] = key
    order = sorted(first, key=first.__getitem__)
    relabel = {c: k for k, c in enumerate(order)}
    return {eid: relabel[c] for eid, c in zip(m.ids, comp)}


@dataclass
class CampaignCluster:
    duplicate_id: int
    member_ids: list[str]
    first_seen: float | None
    last_seen: float | None
    duration_days: float
    duration_class: str
    samples: int = field(init=False)

    def __post_init__(self):
        self.samples = len(self.member_ids)


def duration_class(days: float) -> str:
    if days <= 1.0:
        return SINGLE_DAY
    if days <= 100.0:
        return SHORT
    return LONG


def campaigns(emails: Iterable[Email]) -> list[CampaignCluster]:
    """One cluster per duplicate id; undated members count as samples but not towards duration."""
    members: dict[int, list[Email]] = {}
    for e in emails:
        if e.duplicate_id is None:
            raise ValueError(f"email {e.id} has no duplicate_id")
        members.setdefault(e.duplicate_id, []).append(e)
    out = []
    for dup in sorted(members):
        es = members[dup]
        ts = [e.timestamp for e in es if e.timestamp is not None]
        first = min(ts) if ts else None
        last = max(ts) if ts else None
        days = (last - first) / SECONDS_PER_DAY if ts else 0.0
        out.append(CampaignCluster(dup, [e.id for e in es], first, last, days, duration_class(days)))
    return out


def write_campaigns(clusters: Iterable[CampaignCluster], path: str | Path) -> None:
    from datetime import datetime, timezone

    def iso(t):
        return format_ts(datetime.fromtimestamp(t, tz=timezone.utc)) if t is not None else ""

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["duplicate_id", "samples", "first_seen", "last_seen", "duration_days", "duration_class", "member_ids"])
        for c in clusters:
            w.writerow([
                c.duplicate_id, c.samples, iso(c.first_seen), iso(c.last_seen),
                f"{c.duration_days:.6f}", c.duration_class, " ".join(c.member_ids),
            ])


def read_similarity_labels(path: str | Path) -> list[tuple[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [(r["email_id"], r["similarity_group_id"]) for r in csv.DictReader(fh)]
