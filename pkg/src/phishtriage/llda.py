"""Labeled LDA over the six influence principles.

Training is collapsed Gibbs sampling in which every token of a document may
only take one of that document's labels.  Inference holds the label-word
distribution fixed and samples assignments over all labels.  The sampling
loops are numba kernels driven by a small counter-based generator
(splitmix64) so results depend only on the seed, never on thread scheduling.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numba import njit

from . import LABELS
from .textproc import TokenDoc, build_vocabulary

FORMAT_VERSION = 1
CHECK_EVERY = 100
NO_SIGNAL = "no-signal"


class LldaError(ValueError):
    pass


class GibbsInvariantError(AssertionError):
    pass


@dataclass(frozen=True)
class LldaConfig:
    alpha: float = 1.0
    beta: float = 0.001
    k_labels: int = 6
    n_iterations: int = 1000
    seed: int = 0
    burn_in: int = 900
    labels: tuple[str, ...] = LABELS
    # >0: average counts/probabilities over this many final sweeps instead of using the last one
    average_last: int = 0
    # sweeps used when inferring unlabeled docs; None means n_iterations
    infer_iterations: int | None = None

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise LldaError("alpha and beta must be positive")
        if self.k_labels != len(self.labels):
            raise LldaError("k_labels must equal the number of labels")
        if not self.n_iterations >= self.burn_in >= 0:
            raise LldaError("need n_iterations >= burn_in >= 0")
        if self.average_last < 0 or self.average_last > self.n_iterations - self.burn_in:
            raise LldaError("average_last must fit inside the post burn-in window")

    @property
    def sweeps_for_inference(self) -> int:
        return self.n_iterations if self.infer_iterations is None else self.infer_iterations

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LldaConfig":
        d = dict(d)
        d["labels"] = tuple(d.get("labels", LABELS))
        return cls(**d)


# -- random numbers -----------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, nogil=True)
def _uniform(state):
    s = state[0] + _GOLDEN
    state[0] = s
    z = s
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    z = z ^ (z >> np.uint64(31))
    return float(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


def _seed_state(*parts) -> np.ndarray:
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return np.array([int.from_bytes(h, "little")], dtype=np.uint64)


# -- kernels ------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _init_assign(w, d, z, ndk, nkw, nk, mask, state):
    K = nk.shape[0]
    for i in range(w.shape[0]):
        di = d[i]
        m = 0
        for j in range(K):
            if mask[di, j]:
                m += 1
        r = int(_uniform(state) * m)
        if r >= m:
            r = m - 1
        k = -1
        for j in range(K):
            if mask[di, j]:
                if r == 0:
                    k = j
                    break
                r -= 1
        z[i] = k
        ndk[di, k] += 1
        nkw[k, w[i]] += 1
        nk[k] += 1


@njit(cache=True, nogil=True)
def _train_sweeps(w, d, z, ndk, nkw, nk, mask, alpha, beta, vbeta, n_sweeps, state):
    K = nk.shape[0]
    p = np.empty(K)
    for _ in range(n_sweeps):
        for i in range(w.shape[0]):
            wi = w[i]
            di = d[i]
            k = z[i]
            ndk[di, k] -= 1
            nkw[k, wi] -= 1
            nk[k] -= 1
            tot = 0.0
            last = -1
            for j in range(K):
                if mask[di, j]:
                    tot += (nkw[j, wi] + beta) / (nk[j] + vbeta) * (ndk[di, j] + alpha)
                    last = j
                p[j] = tot
            u = _uniform(state) * tot
            k = last
            for j in range(K):
                if mask[di, j] and u < p[j]:
                    k = j
                    break
            z[i] = k
            ndk[di, k] += 1
            nkw[k, wi] += 1
            nk[k] += 1


@njit(cache=True, nogil=True)
def _infer_doc(w, phi_t, alpha, n_sweeps, avg_last, state, ndk, acc):
    """Sample one document against fixed ``phi_t`` (V x K); returns final-sweep counts in ``ndk``."""
    K = ndk.shape[0]
    n = w.shape[0]
    z = np.empty(n, dtype=np.int64)
    p = np.empty(K)
    ndk[:] = 0
    acc[:] = 0.0
    for i in range(n):
        k = int(_uniform(state) * K)
        if k >= K:
            k = K - 1
        z[i] = k
        ndk[k] += 1
    for s in range(n_sweeps):
        for i in range(n):
            wi = w[i]
            ndk[z[i]] -= 1
            tot = 0.0
            for j in range(K):
                tot += phi_t[wi, j] * (ndk[j] + alpha)
                p[j] = tot
            u = _uniform(state) * tot
            k = K - 1
            for j in range(K):
                if u < p[j]:
                    k = j
                    break
            z[i] = k
            ndk[k] += 1
        if s >= n_sweeps - avg_last:
            for j in range(K):
                acc[j] += ndk[j]


# -- model --------------------------------------------------------------------


@dataclass
class LldaModel:
    vocab: list[str]
    label_word_counts: np.ndarray  # K x V
    label_totals: np.ndarray
    config: LldaConfig
    text_config: dict | None = None
    invariant_checks: int = 0

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.vocab)}

    @property
    def index(self) -> dict[str, int]:
        return self._index

    def phi(self) -> np.ndarray:
        """Smoothed label-word distribution, rows sum to one."""
        V = len(self.vocab)
        b = self.config.beta
        return (self.label_word_counts + b) / (self.label_totals[:, None] + V * b)

    def top_words(self, label: str | int, n: int = 10) -> list[str]:
        k = label if isinstance(label, int) else self.config.labels.index(label)
        order = np.argsort(-self.label_word_counts[k], kind="stable")
        return [self.vocab[i] for i in order[:n]]

    def to_json(self) -> dict:
        def num(x):
            return int(x) if float(x).is_integer() else float(x)

        return {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "text_config": self.text_config,
            "vocab": list(self.vocab),
            "label_word_counts": [[num(x) for x in row] for row in self.label_word_counts],
            "label_totals": [num(x) for x in self.label_totals],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "LldaModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise LldaError(f"unsupported model format_version {d.get('format_version')!r}")
        counts = np.asarray(d["label_word_counts"], dtype=np.float64)
        totals = np.asarray(d["label_totals"], dtype=np.float64)
        if counts.ndim != 2 or counts.shape[1] != len(d["vocab"]):
            raise LldaError("label_word_counts shape does not match vocab")
        return cls(list(d["vocab"]), counts, totals, LldaConfig.from_dict(d["config"]), d.get("text_config"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LldaModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def check_gibbs_state(w, d, z, ndk, nkw, nk, mask) -> None:
    """Raise if counts drifted from the assignments or a token left its doc's label set."""
    D, K = ndk.shape
    if not mask[d, z].all():
        raise GibbsInvariantError("token assigned a label outside its document's label set")
    if not np.array_equal(np.bincount(d * K + z, minlength=D * K).reshape(D, K), ndk):
        raise GibbsInvariantError("doc-label counts out of sync with assignments")
    if not np.array_equal(np.bincount(z * nkw.shape[1] + w, minlength=nkw.size).reshape(nkw.shape), nkw):
        raise GibbsInvariantError("label-word counts out of sync with assignments")
    if not np.array_equal(nkw.sum(axis=1), nk) or nk.sum() != w.shape[0]:
        raise GibbsInvariantError("label totals do not add up to the training token count")
    if not np.array_equal(ndk.sum(axis=1), np.bincount(d, minlength=D)):
        raise GibbsInvariantError("doc-label counts do not add up to doc lengths")


def train(
    docs: Sequence[TokenDoc],
    labels: Mapping[str, Iterable[str]],
    cfg: LldaConfig | None = None,
    text_config: dict | None = None,
) -> LldaModel:
    cfg = cfg or LldaConfig()
    lab_index = {name: k for k, name in enumerate(cfg.labels)}
    K = cfg.k_labels
    mask = np.zeros((len(docs), K), dtype=np.bool_)
    for i, doc in enumerate(docs):
        names = labels.get(doc.email_id)
        if not names:
            raise LldaError(f"document {doc.email_id} has no labels")
        for name in names:
            if name not in lab_index:
                raise LldaError(f"unknown label {name!r}")
            mask[i, lab_index[name]] = True
    missing = [cfg.labels[k] for k in np.flatnonzero(~mask.any(axis=0))]
    if missing:
        raise LldaError(f"label absent from all documents: {', '.join(missing)}")
    vocab_map = build_vocabulary(docs)
    if not vocab_map:
        raise LldaError("empty vocabulary")
    V = len(vocab_map)
    w = np.fromiter((vocab_map[t] for doc in docs for t in doc.tokens), dtype=np.int64)
    d = np.repeat(np.arange(len(docs), dtype=np.int64), [len(doc) for doc in docs])
    z = np.empty_like(w)
    ndk = np.zeros((len(docs), K), dtype=np.int64)
    nkw = np.zeros((K, V), dtype=np.int64)
    nk = np.zeros(K, dtype=np.int64)
    state = _seed_state("train", cfg.seed)
    _init_assign(w, d, z, ndk, nkw, nk, mask, state)
    check_gibbs_state(w, d, z, ndk, nkw, nk, mask)
    checks = 1
    vbeta = V * cfg.beta
    avg_from = cfg.n_iterations - cfg.average_last
    acc = np.zeros((K, V))
    done = 0
    while done < cfg.n_iterations:
        # stop at every check point and at the start of the averaging window
        step = CHECK_EVERY - done % CHECK_EVERY
        if cfg.average_last and done >= avg_from:
            step = 1
        elif cfg.average_last and done < avg_from:
            step = min(step, avg_from - done)
        _train_sweeps(w, d, z, ndk, nkw, nk, mask, cfg.alpha, cfg.beta, vbeta, step, state)
        done += step
        if done % CHECK_EVERY == 0:
            check_gibbs_state(w, d, z, ndk, nkw, nk, mask)
            checks += 1
        if cfg.average_last and done > avg_from:
            acc += nkw
    if cfg.average_last:
        counts = acc / cfg.average_last
    else:
        counts = nkw.astype(np.float64)
    return LldaModel(
        vocab=sorted(vocab_map, key=vocab_map.__getitem__),
        label_word_counts=counts,
        label_totals=counts.sum(axis=1),
        config=cfg,
        text_config=text_config,
        invariant_checks=checks,
    )


@dataclass
class CognitiveProfile:
    email_id: str
    trigger_counts: list[int]
    label_probs: list[float]
    vulns_present: list[bool] | None = None
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "email_id": self.email_id,
            "trigger_counts": list(self.trigger_counts),
            "label_probs": list(self.label_probs),
            "vulns_present": self.vulns_present,
            "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "CognitiveProfile":
        return cls(d["email_id"], list(d["trigger_counts"]), list(d["label_probs"]),
                   d.get("vulns_present"), list(d.get("flags", [])))


def infer_many(model: LldaModel, docs: Sequence[TokenDoc], cfg: LldaConfig | None = None) -> list[CognitiveProfile]:
    """Per-doc inference; each doc's chain is seeded from (seed, email_id) so order does not matter."""
    cfg = cfg or model.config
    K = cfg.k_labels
    phi_t = np.ascontiguousarray(model.phi().T)
    idx = model.index
    sweeps = cfg.sweeps_for_inference
    avg = min(cfg.average_last, sweeps)
    ndk = np.zeros(K, dtype=np.int64)
    acc = np.zeros(K)
    out = []
    for doc in docs:
        w = np.fromiter((idx[t] for t in doc.tokens if t in idx), dtype=np.int64)
        if w.size == 0:
            out.append(CognitiveProfile(doc.email_id, [0] * K, [1.0 / K] * K, flags=[NO_SIGNAL]))
            continue
        state = _seed_state("infer", cfg.seed, doc.email_id)
        _infer_doc(w, phi_t, cfg.alpha, sweeps, avg, state, ndk, acc)
        n = w.size
        mean_counts = acc / avg if avg else ndk.astype(np.float64)
        probs = (mean_counts + cfg.alpha) / (n + K * cfg.alpha)
        probs = probs / probs.sum()
        out.append(CognitiveProfile(doc.email_id, [int(x) for x in ndk], [float(p) for p in probs]))
    return out


def infer(model: LldaModel, doc: TokenDoc, cfg: LldaConfig | None = None) -> CognitiveProfile:
    return infer_many(model, [doc], cfg)[0]


def vulns_present(profile: CognitiveProfile, margin: float = 0.05) -> list[bool]:
    """Deployment rule for a single email: label probability clears uniform plus ``margin``."""
    k = len(profile.label_probs)
    return [p >= 1.0 / k + margin for p in profile.label_probs]


# -- evaluation ---------------------------------------------------------------


def topn(n_train_docs: int, n_test_docs: int, n_train_pos: int) -> int:
    """ceil(n_test / n_train * n_pos) in exact integer arithmetic, clamped to n_test."""
    if n_train_docs <= 0:
        raise LldaError("n_train_docs must be positive")
    return min(n_test_docs, -(-n_test_docs * n_train_pos // n_train_docs))


def proportional_cutoff(
    scores: np.ndarray, n_train_docs: int, n_test_docs: int, n_train_pos: Sequence[int]
) -> list[list[int]]:
    """Positive test-doc indices per label; ``scores`` is (n_test x K)."""
    scores = np.asarray(scores, dtype=np.float64)
    out = []
    for k, pos in enumerate(n_train_pos):
        n = topn(n_train_docs, n_test_docs, int(pos))
        order = np.argsort(-scores[:, k], kind="stable")
        out.append(sorted(int(i) for i in order[:n]))
    return out


METRICS = ("sensitivity", "specificity", "precision", "f1")


def _ratio(a: float, b: float) -> float:
    # 0/0 counts as perfect: nothing to find and nothing wrongly found
    return 1.0 if b == 0 else float(a / b)


def confusion_metrics(tp: float, fp: float, fn: float, tn: float) -> dict[str, float]:
    return {
        "sensitivity": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
        "precision": _ratio(tp, tp + fp),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
    }


@dataclass
class MetricSummary:
    macro_mean: float
    macro_sd: float
    micro: float
    micro_sd: float


@dataclass
class EvalReport:
    per_label: dict[str, dict[str, MetricSummary]]
    aggregate: dict[str, MetricSummary]
    n_folds: int
    skipped: list[tuple[int, int, str]] = field(default_factory=list)
    invariant_checks: int = 0  # Gibbs state checks passed across all fold models

    def to_json(self) -> dict:
        return {
            "per_label": {k: {m: asdict(s) for m, s in v.items()} for k, v in self.per_label.items()},
            "aggregate": {m: asdict(s) for m, s in self.aggregate.items()},
            "n_folds": self.n_folds,
            "skipped": [list(s) for s in self.skipped],
            "invariant_checks": self.invariant_checks,
        }


def stratified_folds(label_sets: Sequence[frozenset[int]], folds: int, rng: np.random.Generator) -> list[int]:
    """Greedy multi-label stratification; returns a fold index per doc."""
    n = len(label_sets)
    K = max((max(s) for s in label_sets if s), default=-1) + 1
    freq = np.zeros(max(K, 1))
    for s in label_sets:
        for k in s:
            freq[k] += 1
    perm = rng.permutation(n)
    # rarest label first so scarce labels get spread before the folds fill up
    rarity = [min((freq[k] for k in label_sets[i]), default=np.inf) for i in perm]
    order = [perm[j] for j in np.argsort(rarity, kind="stable")]
    size_target = n / folds
    fold_lab = np.zeros((folds, max(K, 1)))
    fold_size = np.zeros(folds)
    assign = [0] * n
    for i in order:
        labs = list(label_sets[i])
        need = (freq[labs] / folds - fold_lab[:, labs]).sum(axis=1) if labs else np.zeros(folds)
        room = fold_size < np.ceil(size_target)
        cand = np.flatnonzero(room) if room.any() else np.arange(folds)
        best = max(cand, key=lambda f: (need[f], -fold_size[f], -f))
        assign[i] = int(best)
        fold_size[best] += 1
        for k in labs:
            fold_lab[best, k] += 1
    return assign


def _run_fold(args):
    docs, labels, cfg, train_idx, test_idx, fold_seed = args
    K = cfg.k_labels
    lab_index = {n: k for k, n in enumerate(cfg.labels)}
    train_docs = [docs[i] for i in train_idx]
    test_docs = [docs[i] for i in test_idx]
    n_pos = np.zeros(K, dtype=np.int64)
    for doc in train_docs:
        for name in labels[doc.email_id]:
            n_pos[lab_index[name]] += 1
    present = n_pos > 0
    # labels missing from the training fold are dropped from this fold's model and metrics
    sub_labels = tuple(n for k, n in enumerate(cfg.labels) if present[k])
    sub_cfg = LldaConfig(**{**cfg.to_dict(), "labels": sub_labels, "k_labels": len(sub_labels), "seed": fold_seed})
    sub_map = {d.email_id: [n for n in labels[d.email_id] if n in sub_labels] for d in train_docs}
    model = train(train_docs, sub_map, sub_cfg)
    profiles = infer_many(model, test_docs, sub_cfg)
    scores = np.array([p.label_probs for p in profiles]).reshape(len(test_docs), len(sub_labels))
    picks = proportional_cutoff(scores, len(train_docs), len(test_docs), n_pos[present])
    conf = np.full((K, 4), np.nan)  # tp fp fn tn
    for j, name in enumerate(sub_labels):
        k = lab_index[name]
        pred = np.zeros(len(test_docs), dtype=bool)
        pred[picks[j]] = True
        truth = np.array([name in labels[d.email_id] for d in test_docs])
        conf[k] = [(pred & truth).sum(), (pred & ~truth).sum(), (~pred & truth).sum(), (~pred & ~truth).sum()]
    return conf, model.invariant_checks


def cross_validate(
    docs: Sequence[TokenDoc],
    labels: Mapping[str, Iterable[str]],
    cfg: LldaConfig | None = None,
    repeats: int = 5,
    folds: int = 5,
    seed: int = 0,
    n_jobs: int = 1,
) -> EvalReport:
    cfg = cfg or LldaConfig()
    if len(docs) < folds:
        raise LldaError("fewer labeled documents than folds")
    labels = {k: frozenset(v) for k, v in labels.items()}
    lab_index = {n: k for k, n in enumerate(cfg.labels)}
    sets = [frozenset(lab_index[n] for n in labels[d.email_id]) for d in docs]
    rng = np.random.default_rng(seed)
    jobs = []
    for r in range(repeats):
        assign = np.asarray(stratified_folds(sets, folds, rng))
        for f in range(folds):
            tr = np.flatnonzero(assign != f)
            te = np.flatnonzero(assign == f)
            jobs.append((docs, labels, cfg, tr, te, int(rng.integers(2**62))))
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            results = list(ex.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]
    confs = np.stack([c for c, _ in results])  # folds x K x 4
    skipped = [(i // folds, i % folds, cfg.labels[k]) for i in range(len(jobs)) for k in range(cfg.k_labels)
               if np.isnan(confs[i, k, 0])]
    rep = summarize(confs, cfg.labels, skipped)
    rep.invariant_checks = sum(c for _, c in results)
    return rep


def summarize(confs: np.ndarray, label_names: Sequence[str], skipped=()) -> EvalReport:
    """Macro (mean/sd over folds) and micro (pooled counts) summaries of per-fold confusions."""
    n_folds, K, _ = confs.shape

    def sd(x):
        return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0

    per_label = {}
    for k, name in enumerate(label_names):
        rows = confs[:, k][~np.isnan(confs[:, k, 0])]
        fold_m = [confusion_metrics(*r) for r in rows]
        pooled = confusion_metrics(*rows.sum(axis=0)) if len(rows) else {m: math.nan for m in METRICS}
        per_label[name] = {
            m: MetricSummary(
                float(np.mean([x[m] for x in fold_m])) if fold_m else math.nan,
                sd([x[m] for x in fold_m]),
                pooled[m],
                sd([x[m] for x in fold_m]),
            )
            for m in METRICS
        }
    macro_fold = []
    micro_fold = []
    for i in range(n_folds):
        rows = confs[i][~np.isnan(confs[i, :, 0])]
        if not len(rows):
            continue
        ms = [confusion_metrics(*r) for r in rows]
        macro_fold.append({m: float(np.mean([x[m] for x in ms])) for m in METRICS})
        micro_fold.append(confusion_metrics(*rows.sum(axis=0)))
    valid = confs[~np.isnan(confs[:, :, 0])]
    pooled = confusion_metrics(*valid.sum(axis=0))
    aggregate = {
        m: MetricSummary(
            float(np.mean([x[m] for x in macro_fold])),
            sd([x[m] for x in macro_fold]),
            pooled[m],
            sd([x[m] for x in micro_fold]),
        )
        for m in METRICS
    }
    return EvalReport(per_label, aggregate, n_folds, list(skipped))


def read_labels(path: str | Path) -> dict[str, frozenset[str]]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["email_id"]] = frozenset(rec["labels"])
    return out


def write_labels(labels: Mapping[str, Iterable[str]], path: str | Path, order: Sequence[str] = LABELS) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for eid in sorted(labels):
            fh.write(json.dumps({"email_id": eid, "labels": [n for n in order if n in labels[eid]]}) + "\n")


def write_profiles(profiles: Iterable[CognitiveProfile], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in profiles:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def read_profiles(path: str | Path) -> list[CognitiveProfile]:
    return [CognitiveProfile.from_json(json.loads(l))
            for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
