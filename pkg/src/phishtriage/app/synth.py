"""Synthetic corpora with known ground truth.

``synth_corpus`` writes a complete pipeline input set (forwarded raw emails,
LLDA training labels, dedup labels, click counts, redirect map) together with
a truth file recording every latent variable.  The smaller generators feed
the property tests of individual stages.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from email.utils import format_datetime
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .. import LABELS
from ..econometrics import SPOOF, DesignRow
from ..textproc import DEFAULT_TEXT_CONFIG, TextConfig, TokenDoc, clean_and_tokenize, tf_vector
from ..urlintel import spoof_distance

# (probability of zero, mean if non-zero, negative-binomial shape); medians and
# upper quantiles land close to those of a large real corpus of reported phishing
TRIGGER_SHAPES: dict[str, tuple[float, float, float]] = {
    "Reciprocity": (0.25, 14.0, 0.6),
    "Consistency": (0.15, 25.0, 1.1),
    "SocialProof": (0.30, 5.0, 0.7),
    "Authority": (0.20, 13.0, 0.8),
    "Liking": (0.65, 3.0, 0.6),
    "Scarcity": (0.05, 50.0, 2.0),
}
SPOOF_SHAPE = (7.0, 3.6, 23)  # mean, sd, max

PM1_MEDIANS = {"alpha": 4.35, "Reciprocity": -0.01, "Consistency": 0.01, "Scarcity": 0.02, SPOOF: -0.09}
PM2_MEDIANS = {"alpha": 4.22, "Reciprocity": -0.02, "Consistency": 0.01, "SocialProof": 0.10,
               "Authority": 0.00, "Scarcity": 0.02, "Liking": 0.04, SPOOF: -0.10}

_ONSETS = "b c d f g h j k l m n p r s t v w z br dr gr kl pl st tr".split()
_VOWELS = "a e i o u".split()
_CODAS = "k l m n p r s t x z".split()


def pseudo_words(n: int, rng: np.random.Generator, config: TextConfig | None = None,
                 exclude: set[str] | None = None) -> list[str]:
    """``n`` distinct invented words that survive tokenization unchanged."""
    cfg = config or DEFAULT_TEXT_CONFIG
    seen = set(exclude or ())
    out: list[str] = []
    while len(out) < n:
        syl = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(syl))
        w += _CODAS[rng.integers(len(_CODAS))]
        if w in seen:
            continue
        seen.add(w)
        if clean_and_tokenize(w, cfg).tokens == (w,):
            out.append(w)
    return out


def trigger_counts(rng: np.random.Generator, n: int, scale: float = 1.0,
                   shapes: Mapping[str, tuple[float, float, float]] = TRIGGER_SHAPES) -> np.ndarray:
    """(n x 6) zero-inflated negative-binomial trigger counts."""
    out = np.zeros((n, len(LABELS)), dtype=np.int64)
    for k, name in enumerate(LABELS):
        p0, mean, r = shapes[name]
        m = mean * scale
        nb = rng.negative_binomial(r, r / (r + m), size=n)
        out[:, k] = np.where(rng.random(n) < p0, 0, np.maximum(nb, 1))
    return out


def spoof_distances(rng: np.random.Generator, n: int) -> np.ndarray:
    mean, sd, hi = SPOOF_SHAPE
    return np.clip(np.rint(rng.normal(mean, sd, size=n)), 0, hi).astype(np.int64)


# pairwise Pearson correlations between regressors seen in real reported phishing;
# unlisted pairs are treated as uncorrelated
REGRESSOR_CORR: dict[tuple[str, str], float] = {
    ("Reciprocity", "Consistency"): -0.19, ("Reciprocity", "SocialProof"): 0.13,
    ("Reciprocity", "Authority"): -0.06, ("Reciprocity", "Liking"): -0.11,
    ("Reciprocity", "Scarcity"): -0.09, ("Reciprocity", SPOOF): -0.17,
    ("Consistency", "SocialProof"): -0.08, ("Consistency", "Authority"): -0.24,
    ("Consistency", "Liking"): 0.10, ("Consistency", "Scarcity"): -0.09, ("Consistency", SPOOF): -0.41,
    ("SocialProof", "Authority"): 0.25, ("SocialProof", "Liking"): -0.04,
    ("SocialProof", "Scarcity"): 0.50, ("SocialProof", SPOOF): 0.13,
    ("Authority", "Liking"): 0.06, ("Authority", "Scarcity"): -0.08, ("Authority", SPOOF): -0.10,
    ("Liking", "Scarcity"): 0.09, ("Liking", SPOOF): 0.57, ("Scarcity", SPOOF): 0.24,
}


def _nearest_corr(m: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    c = v @ np.diag(np.clip(w, floor, None)) @ v.T
    d = np.sqrt(np.diag(c))
    return c / np.outer(d, d)


def correlated_regressors(rng: np.random.Generator, n: int,
                          corr: Mapping[tuple[str, str], float] = REGRESSOR_CORR,
                          scale: float = 1.0, calib_n: int = 40_000, calib_rounds: int = 6) -> np.ndarray:
    """(n x 7) trigger counts (LABELS order) plus spoof distance with target Pearson correlations.

    Gaussian copula over the usual marginals.  Zero inflation attenuates
    correlations, so the latent matrix is adjusted until a large calibration
    sample hits the targets (as far as the marginals allow).
    """
    names = [*LABELS, SPOOF]
    k = len(names)
    target = np.eye(k)
    for (a, b), v in corr.items():
        i, j = names.index(a), names.index(b)
        target[i, j] = target[j, i] = v
    crng = np.random.default_rng(int(rng.integers(2**63)))
    ref = np.column_stack([trigger_counts(crng, calib_n, scale), spoof_distances(crng, calib_n)])

    def transform(z: np.ndarray) -> np.ndarray:
        u = norm.cdf(z)
        return np.column_stack([np.quantile(ref[:, c], u[:, c], method="inverted_cdf") for c in range(k)])

    base = crng.standard_normal((calib_n, k))
    latent = _nearest_corr(target)
    for _ in range(calib_rounds):
        got = np.corrcoef(transform(base @ np.linalg.cholesky(latent).T), rowvar=False)
        adj = latent + (target - got)
        np.fill_diagonal(adj, 1.0)
        latent = _nearest_corr(adj)
    z = rng.standard_normal((n, k)) @ np.linalg.cholesky(latent).T
    return transform(z).astype(np.int64)


def correlated_design(n: int = 334, seed: int = 0, coef: Mapping[str, float] = PM1_MEDIANS,
                      prefix: str = "c") -> list[DesignRow]:
    """Design rows whose regressors follow ``REGRESSOR_CORR``; clicks drawn from ``coef``."""
    rng = np.random.default_rng(seed)
    x = correlated_regressors(rng, n)
    regs = [c for c in coef if c != "alpha"]
    names = [*LABELS, SPOOF]
    rows = []
    for i in range(n):
        lam = math.exp(coef["alpha"] + sum(coef[r] * x[i, names.index(r)] for r in regs))
        rows.append(DesignRow(f"{prefix}{i:05d}", float(rng.poisson(lam)),
                              tuple(int(v) for v in x[i, :6]), int(x[i, 6])))
    return rows


# -- stage-level generators --------------------------------------------------------


@dataclass
class TopicCorpus:
    docs: list[TokenDoc]
    labels: dict[str, frozenset[str]]
    phi: np.ndarray


def topic_corpus(n_docs: int = 1000, vocab_size: int = 500, seed: int = 0, separable: bool = False,
                 core_weight: float = 0.8, doc_len: tuple[int, int] = (40, 90),
                 label_probs: Sequence[float] = (0.15, 0.3, 0.1, 0.2, 0.08, 0.35)) -> TopicCorpus:
    """Docs drawn from six known label-word distributions.

    Each label owns a disjoint core slice of the vocabulary.  Unless
    ``separable``, a label emits ``1 - core_weight`` of its mass from a
    Dirichlet draw over the whole vocabulary, so labels overlap.
    """
    rng = np.random.default_rng(seed)
    K = len(LABELS)
    cores = np.array_split(np.arange(vocab_size), K)
    phi = np.zeros((K, vocab_size))
    for k, core in enumerate(cores):
        phi[k, core] = rng.dirichlet(np.full(len(core), 1.0))
        if not separable:
            phi[k] = core_weight * phi[k] + (1 - core_weight) * rng.dirichlet(np.full(vocab_size, 0.1))
    words = [f"w{i:04d}" for i in range(vocab_size)]
    docs, labels = [], {}
    p = np.asarray(label_probs)
    for i in range(n_docs):
        present = np.flatnonzero(rng.random(K) < p)
        if present.size == 0:
            present = np.array([rng.choice(K, p=p / p.sum())])
        theta = rng.dirichlet(np.ones(present.size))
        n = int(rng.integers(doc_len[0], doc_len[1] + 1))
        which = present[rng.choice(present.size, size=n, p=theta)]
        toks = [words[rng.choice(vocab_size, p=phi[k])] for k in which]
        eid = f"t{i:05d}"
        docs.append(TokenDoc(eid, tuple(toks)))
        labels[eid] = frozenset(LABELS[k] for k in present)
    return TopicCorpus(docs, labels, phi)


@dataclass
class DedupCorpus:
    docs: list  # TfVector
    labeled: list[tuple[str, int]]
    timestamps: dict[str, float]


def dedup_corpus(n_emails: int = 300, n_families: int = 60, noise: float = 0.05, seed: int = 0,
                 doc_len: int = 60, vocab_size: int = 3000, shared_pool: int = 80,
                 shared_frac: float = 0.35) -> DedupCorpus:
    """Duplicate families: members copy a family template and replace each token w.p. ``noise``.

    A share of every template comes from a small pool common to all families, so
    distinct families still overlap the way unrelated phishing emails do.
    """
    rng = np.random.default_rng(seed)
    sizes = np.full(n_families, n_emails // n_families)
    sizes[: n_emails - sizes.sum()] += 1
    vocab = np.array([f"v{i:05d}" for i in range(vocab_size)])
    pool = vocab[:shared_pool]
    docs, labeled, ts = [], [], {}
    t0 = 1_520_000_000.0
    i = 0
    for f, size in enumerate(sizes):
        n_shared = int(round(doc_len * shared_frac))
        template = np.concatenate([
            rng.choice(pool, n_shared),
            rng.choice(vocab[shared_pool:], doc_len - n_shared),
        ])
        start = t0 + rng.uniform(0, 150 * 86400)
        for _ in range(size):
            toks = template.copy()
            flip = rng.random(doc_len) < noise
            toks[flip] = rng.choice(vocab, int(flip.sum()))
            eid = f"d{i:05d}"
            docs.append(tf_vector(TokenDoc(eid, tuple(toks))))
            labeled.append((eid, f))
            ts[eid] = start + rng.uniform(0, 10 * 86400)
            i += 1
    return DedupCorpus(docs, labeled, ts)


@dataclass
class PoissonWorld:
    X: np.ndarray  # with intercept column
    y: np.ndarray
    columns: list[str]
    coef: np.ndarray
    rate: np.ndarray


def poisson_world(n: int, coef: Mapping[str, float], seed: int = 0,
                  regressors: Sequence[str] | None = None, scale: float = 1.0) -> PoissonWorld:
    """Counts ~ Poisson(exp(alpha + x.beta)) with realistic trigger and spoof regressors."""
    rng = np.random.default_rng(seed)
    regs = list(regressors if regressors is not None else [c for c in coef if c != "alpha"])
    trig = trigger_counts(rng, n, scale)
    spoof = spoof_distances(rng, n)
    cols = []
    for r in regs:
        cols.append(spoof if r == SPOOF else trig[:, LABELS.index(r)])
    X = np.column_stack([np.ones(n), *cols]).astype(np.float64)
    b = np.array([coef["alpha"], *(coef[r] for r in regs)])
    rate = np.exp(X @ b)
    y = rng.poisson(rate).astype(np.float64)
    return PoissonWorld(X, y, ["alpha", *regs], b, rate)


@dataclass
class TriageStream:
    rows: list[DesignRow]
    rate: dict[str, float]
    clicks: dict[str, int]


def triage_stream(n: int = 334, coef: Mapping[str, float] = PM1_MEDIANS, seed: int = 0,
                  prefix: str = "s") -> TriageStream:
    """Emails with realistic trigger and spoof regressors, true click rates and realized clicks."""
    rng = np.random.default_rng(seed)
    trig = trigger_counts(rng, n)
    spoof = spoof_distances(rng, n)
    rows, rate, clicks = [], {}, {}
    regs = [c for c in coef if c != "alpha"]
    for i in range(n):
        eid = f"{prefix}{i:05d}"
        x = {**dict(zip(LABELS, trig[i])), SPOOF: spoof[i]}
        lam = math.exp(coef["alpha"] + sum(coef[r] * x[r] for r in regs))
        c = int(rng.poisson(lam))
        rows.append(DesignRow(eid, float(c), tuple(int(v) for v in trig[i]), int(spoof[i])))
        rate[eid] = lam
        clicks[eid] = c
    return TriageStream(rows, rate, clicks)


# -- full corpus ---------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_emails: int = 5000
    mean_family_size: float = 5.0
    noise_rate: float = 0.05
    org_name: str = "org"
    org_domain: str = "org.com"
    competitors: tuple[str, ...] = ("rivalbank", "otherbank")
    allowlist: tuple[str, ...] = ("youtube.com", "google.com")
    frac_suspicious: float = 0.7
    frac_clicked: float = 0.5
    frac_fanout: float = 0.2
    frac_sms: float = 0.03
    frac_other_org: float = 0.03
    frac_dutch: float = 0.2
    trigger_scale: float = 0.25
    label_vocab: int = 150
    filler_vocab: int = 60
    family_words: int = 25
    family_vocab: int = 4000
    coef: dict[str, float] = field(default_factory=lambda: dict(PM1_MEDIANS))
    n_llda_labeled: int = 300
    n_dedup_labeled: int = 300
    reporters_per_email: float = 0.6
    start: str = "2018-02-02"
    span_days: int = 179
    duration_mix: tuple[float, float, float] = (0.6, 0.3, 0.1)

    def to_json(self) -> dict:
        d = asdict(self)
        d["competitors"] = list(self.competitors)
        d["allowlist"] = list(self.allowlist)
        d["duration_mix"] = list(self.duration_mix)
        return d


@dataclass
class SynthPaths:
    raw: Path
    llda_labels: Path
    dedup_labels: Path
    clicks: Path
    redirects: Path
    truth: Path
    allowlist: Path
    competitors: Path
    config: Path


def _spoof_domain(rng: np.random.Generator, org: str, d: int, letters: Sequence[str]) -> str:
    if d == 0:
        return org
    if d <= 2 and rng.random() < 0.5:
        chars = list(org)
        for pos in rng.choice(len(chars), size=min(d, len(chars)), replace=False):
            chars[pos] = "0" if chars[pos] == "o" else letters[rng.integers(len(letters))]
        return "".join(chars)
    # appended suffix: exactly d insertions
    return org + "-" + "".join(letters[rng.integers(len(letters))] for _ in range(d - 1))


def _wrap(words: Sequence[str], width: int = 12) -> str:
    return "\n".join(" ".join(words[i:i + width]) for i in range(0, len(words), width))


def synth_corpus(cfg: SynthConfig, seed: int, outdir: str | Path) -> SynthPaths:
    rng = np.random.default_rng(seed)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    K = len(LABELS)
    words = pseudo_words(K * cfg.label_vocab + cfg.filler_vocab + cfg.family_vocab + 400, rng,
                         exclude={cfg.org_name, *cfg.competitors})
    label_words = [words[k * cfg.label_vocab:(k + 1) * cfg.label_vocab] for k in range(K)]
    off = K * cfg.label_vocab
    filler = words[off:off + cfg.filler_vocab]
    off += cfg.filler_vocab
    fam_vocab = words[off:off + cfg.family_vocab]
    domain_words = words[off + cfg.family_vocab:]
    # Zipf-like word weights within each label vocabulary
    zipf = 1.0 / np.arange(1, cfg.label_vocab + 1) ** 0.8
    zipf /= zipf.sum()
    letters = list("abcdefghijklmnopqrstuvwxyz")
    t0 = datetime.fromisoformat(cfg.start).replace(tzinfo=timezone.utc)

    n_fam = max(1, int(round(cfg.n_emails / cfg.mean_family_size)))
    sizes = rng.geometric(1.0 / cfg.mean_family_size, size=n_fam)
    # trim or pad to exactly the requested message count (minus sms/other-org extras)
    n_extra_sms = int(round(cfg.n_emails * cfg.frac_sms))
    n_extra_other = int(round(cfg.n_emails * cfg.frac_other_org))
    target = cfg.n_emails - n_extra_sms - n_extra_other
    while sizes.sum() > target:
        sizes[int(np.argmax(sizes))] -= 1
        sizes = sizes[sizes > 0]
    while sizes.sum() < target:
        sizes[int(rng.integers(len(sizes)))] += 1
    n_fam = len(sizes)

    trig = trigger_counts(rng, n_fam, cfg.trigger_scale)
    spoof = spoof_distances(rng, n_fam)
    regs = [c for c in cfg.coef if c != "alpha"]
    n_reporters = max(1, int(cfg.n_emails * cfg.reporters_per_email))
    rep_w = 1.0 / np.arange(1, n_reporters + 1) ** 1.1
    rep_w /= rep_w.sum()

    families = []
    messages = []  # (id, raw, received_at)
    redirect_lines = []
    click_rows = []
    email_truth = {}
    mix = np.asarray(cfg.duration_mix) / np.sum(cfg.duration_mix)
    for f in range(n_fam):
        counts = trig[f]
        lab = [LABELS[k] for k in range(K) if counts[k] > 0]
        tokens = []
        for k in range(K):
            tokens += list(rng.choice(label_words[k], size=int(counts[k]), p=zipf))
        tokens += list(rng.choice(fam_vocab, size=cfg.family_words))
        tokens += list(rng.choice(filler, size=max(3, len(tokens) // 10)))
        tokens = [str(t) for t in rng.permutation(tokens)]
        cls = int(rng.choice(3, p=mix))
        dur = [rng.uniform(0, 1.0), rng.uniform(1.5, 100.0), rng.uniform(101.0, 170.0)][cls]
        start = t0 + timedelta(days=float(rng.uniform(0, max(1.0, cfg.span_days - dur))))
        d0 = int(spoof[f])
        from_dom = _spoof_domain(rng, cfg.org_name, d0, letters) + rng.choice([".com", ".net", ".info"])
        suspicious = rng.random() < cfg.frac_suspicious
        susp_url = landings = None
        rate = None
        if suspicious:
            host = f"{domain_words[rng.integers(len(domain_words))]}{f}.{rng.choice(['com', 'info', 'xyz'])}"
            susp_url = f"http://{host}/{rng.choice(fam_vocab)}/{f}"
            n_land = 2 if rng.random() < cfg.frac_fanout else 1
            landings = [f"https://{domain_words[rng.integers(len(domain_words))]}-login{f}.com/s/{j}" for j in range(n_land)]
            if n_land == 1 and rng.random() < 0.5:
                hop = f"http://r{f}.redir.example/{f}"
                redirect_lines.append(f"{susp_url} -> {hop}")
                redirect_lines.append(f"{hop} -> {landings[0]}")
            else:
                for land in landings:
                    redirect_lines.append(f"{susp_url} -> {land} 1")
            x = {**dict(zip(LABELS, counts)), SPOOF: spoof_distance(from_dom, cfg.org_name)}
            rate = math.exp(cfg.coef["alpha"] + sum(cfg.coef[r] * float(x[r]) for r in regs))
            if rng.random() < cfg.frac_clicked:
                for land in landings:
                    click_rows.append((land, int(rng.poisson(rate)), (start + timedelta(days=dur)).timestamp()))
        link_line = susp_url or rng.choice([f"https://www.{cfg.org_domain}/account", "https://www.youtube.com/watch?v=x", ""])
        subject = " ".join(rng.choice(fam_vocab, size=4))
        members = []
        for m in range(int(sizes[f])):
            if m == 0:
                when = start
            elif m == sizes[f] - 1:
                when = start + timedelta(days=dur)
            else:
                when = start + timedelta(days=float(rng.uniform(0, dur)))
            toks = list(tokens)
            for i in range(len(toks)):
                if rng.random() < cfg.noise_rate:
                    toks[i] = str(rng.choice(fam_vocab))
            # long campaigns drift towards less similar sender domains
            weeks = int((when - start).days // 7)
            drift = int(rng.binomial(weeks, 0.15)) if weeks > 0 else 0
            fdom = from_dom if drift == 0 else (
                from_dom.rsplit(".", 1)[0] + ("-" if d0 == 0 else "") + "".join(letters[rng.integers(26)] for _ in range(drift))
                + "." + from_dom.rsplit(".", 1)[1])
            body = f"Dear {cfg.org_name} customer,\n\n{_wrap(toks)}\n\n{link_line}\n\nKind regards,\n{cfg.org_name} service team"
            reporter = f"user{int(rng.choice(n_reporters, p=rep_w)):05d}@mail.example"
            members.append((when, fdom, body, subject, reporter))
        families.append({
            "family": f, "labels": lab, "trigger_counts": [int(c) for c in counts],
            "spoof_distance": int(spoof_distance(from_dom, cfg.org_name)), "from_domain": from_dom,
            "suspicious": bool(suspicious), "suspicious_url": susp_url, "landing_urls": landings,
            "true_rate": rate, "duration_days": dur, "size": int(sizes[f]),
        })
        for when, fdom, body, subject, reporter in members:
            messages.append(("fam", f, when, fdom, body, subject, reporter))

    for i in range(n_extra_sms):
        when = t0 + timedelta(days=float(rng.uniform(0, cfg.span_days)))
        messages.append(("sms", -1, when, "sms.example", f"Uw pas verloopt. Bel {cfg.org_name} {i}", "SMS", f"user{i:05d}@mail.example"))
    for i in range(n_extra_other):
        when = t0 + timedelta(days=float(rng.uniform(0, cfg.span_days)))
        comp = cfg.competitors[i % len(cfg.competitors)] if cfg.competitors else "elsewhere"
        body = f"Dear {comp} customer,\n\n{_wrap(list(rng.choice(fam_vocab, size=40)))}\n\nhttp://{comp}-verify{i}.com/x"
        messages.append(("other", -1, when, f"{comp}.com", body, "Verify", f"user{i:05d}@mail.example"))

    order = sorted(range(len(messages)), key=lambda j: (messages[j][2], j))
    raw_lines = []
    for idx, j in enumerate(order):
        kind, fam, when, fdom, body, subject, reporter = messages[j]
        eid = f"m{idx:06d}"
        report_time = when + timedelta(hours=float(rng.uniform(0.1, 48)))
        outer = (f"From: {reporter}\nTo: phishing@{cfg.org_domain}\nSubject: Fwd: {subject}\n"
                 f"Date: {format_datetime(report_time)}\nMIME-Version: 1.0\n"
                 f"Content-Type: text/plain; charset=utf-8\n\n")
        if kind == "sms":
            raw = outer + body + "\n"
        else:
            if rng.random() < cfg.frac_dutch:
                nl_months = ["januari", "februari", "maart", "april", "mei", "juni", "juli",
                             "augustus", "september", "oktober", "november", "december"]
                date_s = f"{when.day} {nl_months[when.month - 1]} {when.year} {when:%H:%M}"
                block = (f"-------- Doorgestuurd bericht --------\nVan: Service <info@{fdom}>\n"
                         f"Verzonden: {date_s}\nAan: {reporter}\nOnderwerp: {subject}\n\n")
            else:
                block = (f"---------- Forwarded message ---------\nFrom: Service <info@{fdom}>\n"
                         f"Date: {format_datetime(when.replace(microsecond=0))}\nSubject: {subject}\nTo: <{reporter}>\n\n")
            raw = outer + "Please check this one.\n\n" + block + body + "\n"
        messages_out = {"id": eid, "raw": raw, "received_at": round(report_time.timestamp(), 3)}
        raw_lines.append(json.dumps(messages_out, sort_keys=True))
        email_truth[eid] = {"kind": kind, "family": fam}

    paths = SynthPaths(
        raw=out / "raw.jsonl", llda_labels=out / "labels.jsonl", dedup_labels=out / "dedup_labels.csv",
        clicks=out / "clicks.csv", redirects=out / "redirects.fixture", truth=out / "truth.json",
        allowlist=out / "allowlist.txt", competitors=out / "competitors.txt", config=out / "pipeline.conf",
    )
    paths.raw.write_text("\n".join(raw_lines) + "\n", encoding="utf-8")

    fam_emails = [eid for eid, t in email_truth.items() if t["kind"] == "fam"]
    pick = sorted(rng.choice(len(fam_emails), size=min(cfg.n_llda_labeled, len(fam_emails)), replace=False))
    with paths.llda_labels.open("w", encoding="utf-8") as fh:
        for i in pick:
            eid = fam_emails[i]
            labs = families[email_truth[eid]["family"]]["labels"]
            if labs:
                fh.write(json.dumps({"email_id": eid, "labels": labs}) + "\n")
    # dedup labels: whole families until the sample is filled, so duplicate pairs exist
    by_fam: dict[int, list[str]] = {}
    for eid in fam_emails:
        by_fam.setdefault(email_truth[eid]["family"], []).append(eid)
    chosen: list[tuple[str, int]] = []
    for f in rng.permutation(sorted(by_fam)):
        if len(chosen) >= cfg.n_dedup_labeled:
            break
        for eid in by_fam[int(f)][: cfg.n_dedup_labeled - len(chosen)]:
            chosen.append((eid, int(f)))
    with paths.dedup_labels.open("w", encoding="utf-8") as fh:
        fh.write("email_id,similarity_group_id\n")
        for eid, f in sorted(chosen):
            fh.write(f"{eid},g{f}\n")
    with paths.clicks.open("w", encoding="utf-8") as fh:
        fh.write("landing_url,clicks,observed_at\n")
        for land, c, ts in sorted(click_rows):
            fh.write(f"{land},{c},{ts:.0f}\n")
    paths.redirects.write_text("\n".join(redirect_lines) + "\n", encoding="utf-8")
    paths.allowlist.write_text("\n".join(cfg.allowlist) + "\n", encoding="utf-8")
    paths.competitors.write_text("\n".join(cfg.competitors) + "\n", encoding="utf-8")
    truth = {"seed": seed, "config": cfg.to_json(), "coef": dict(cfg.coef), "families": families, "emails": email_truth}
    paths.truth.write_text(json.dumps(truth, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    paths.config.write_text(default_pipeline_config(cfg, paths), encoding="utf-8")
    return paths


def default_pipeline_config(cfg: SynthConfig, paths: SynthPaths, seed: int = 1) -> str:
    lines = [
        "# pipeline configuration for a synthetic corpus",
        "config_version = 1",
        f"org_name = {cfg.org_name}",
        f"org_domains = {cfg.org_domain}",
        f"allowlist = {paths.allowlist.name}",
        f"competitors = {paths.competitors.name}",
        f"llda_labels = {paths.llda_labels.name}",
        f"dedup_labels = {paths.dedup_labels.name}",
        f"redirect_fixture = {paths.redirects.name}",
        f"clicks = {paths.clicks.name}",
        "model = PM1",
        "min_clicks = 10",
    ]
    lines += [f"seed_{s} = {seed + i}" for i, s in enumerate(("dedup", "llda", "urls", "bootstrap", "predict"))]
    return "\n".join(lines) + "\n"


def read_truth(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
