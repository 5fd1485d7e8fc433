"""End-to-end run: ingest, sanitize, dedup, classify, resolve URLs, fit, predict, rank, report.

Every stage writes its artifacts into the output directory before the next
one starts, so a failure leaves everything up to the failing stage on disk.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .. import LABELS, corpus, dedup, econometrics as eco, llda, urlintel
from ..textproc import TextConfig, clean_and_tokenize, tf_vector
from .config import PipelineConfig
from .reports import report_stats
from .robustness import robustness_ratio, signature_groups

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineResult:
    outdir: Path
    queue: list[eco.TriageScore]
    artifacts: list[Path] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def manifest(self) -> dict[str, str]:
        return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(self.artifacts)}


def _dump(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def text_config(cfg: PipelineConfig) -> TextConfig:
    return TextConfig.load(cfg.language, stopwords_path=cfg.path("stopwords"), no_stem_path=cfg.path("no_stem"))


def representatives(emails: list[corpus.Email]) -> list[corpus.Email]:
    """Earliest email of each duplicate family, in duplicate-id order."""
    best: dict[int, corpus.Email] = {}
    for e in emails:
        key = (e.timestamp if e.timestamp is not None else float("inf"), e.id)
        cur = best.get(e.duplicate_id)
        if cur is None or key < (cur.timestamp if cur.timestamp is not None else float("inf"), cur.id):
            best[e.duplicate_id] = e
    return [best[k] for k in sorted(best)]


def run_pipeline(cfg: PipelineConfig, raw_path: str | Path, outdir: str | Path, raw_format: str = "jsonl") -> PipelineResult:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    res = PipelineResult(out, [])
    art = res.artifacts

    def stage(name: str, fn: Callable):
        log.info("stage %s", name)
        try:
            return fn()
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - any failure halts with the stage name
            raise StageError(name, exc) from exc

    # ingest + header recovery
    def do_ingest():
        st = corpus.IngestStats()
        emails = list(corpus.recover_all(corpus.ingest(raw_path, raw_format, st), stats=st))
        corpus.write_corpus(emails, out / "recovered.jsonl")
        art.append(out / "recovered.jsonl")
        art.append(_dump({"read": st.read, "malformed": st.malformed, "unparseable": st.unparseable,
                          "warnings": st.warnings}, out / "ingest_stats.json"))
        return emails

    emails = stage("ingest", do_ingest)

    def do_sanitize():
        comps = corpus.read_competitors(cfg.path("competitors")) if cfg.competitors else []
        kept, rep = corpus.sanitize(emails, cfg.org_name, comps, corpus.SmsHeuristics(cfg.sms_max_length))
        allow = [] if not cfg.allowlist else corpus.read_competitors(cfg.path("allowlist"))
        flagged, susp = [], []
        for e in kept:
            e2, found = urlintel.flag_suspicious(e, cfg.org_domains, allow)
            flagged.append(e2)
            susp += found
        art.append(_dump(vars(rep), out / "sanitization.json"))
        return flagged, susp

    emails, suspicious = stage("sanitize", do_sanitize)
    tcfg = text_config(cfg)
    docs = {e.id: clean_and_tokenize(e.body_text, tcfg, e.id) for e in emails}

    def do_dedup():
        vecs = [tf_vector(docs[e.id]) for e in emails]
        if cfg.dedup_threshold is not None:
            tuning = None
            thr = cfg.dedup_threshold
        else:
            present = {e.id for e in emails}
            labeled = [(i, g) for i, g in dedup.read_similarity_labels(cfg.path("dedup_labels")) if i in present]
            by_id = {v.email_id: v for v in vecs}
            tuning = dedup.tune_threshold(labeled, by_id, cfg.dedup_bootstrap_n,
                                          min(cfg.dedup_sample_size, len(labeled)), cfg.seed_dedup)
            thr = tuning.chosen_threshold
        m = dedup.similarity_matrix(vecs)
        ids = dedup.assign_duplicate_ids(m, thr, {e.id: e.timestamp for e in emails})
        from dataclasses import replace

        out_emails = [replace(e, duplicate_id=ids[e.id]) for e in emails]
        corpus.write_corpus(out_emails, out / "corpus.jsonl")
        art.append(out / "corpus.jsonl")
        art.append(_dump({"threshold": thr, "tuning": tuning.to_json() if tuning else None}, out / "threshold.json"))
        camps = dedup.campaigns(out_emails)
        dedup.write_campaigns(camps, out / "campaigns.csv")
        art.append(out / "campaigns.csv")
        return out_emails, camps

    emails, camps = stage("dedup", do_dedup)
    reps = representatives(emails)

    def do_classify():
        labels = llda.read_labels(cfg.path("llda_labels"))
        train_docs = [docs[i] for i in sorted(labels) if i in docs]
        if len(train_docs) < len(labels):
            res.notes.append(f"classify: {len(labels) - len(train_docs)} labeled ids not in the sanitized corpus")
        lcfg = llda.LldaConfig(alpha=cfg.llda_alpha, beta=cfg.llda_beta, n_iterations=cfg.llda_iterations,
                               burn_in=cfg.llda_burn_in, seed=cfg.seed_llda, average_last=cfg.llda_average_last,
                               infer_iterations=cfg.llda_infer_iterations)
        model = llda.train(train_docs, labels, lcfg, text_config=tcfg.to_dict())
        model.save(out / "model.json")
        art.append(out / "model.json")
        profiles = llda.infer_many(model, [docs[e.id] for e in reps], lcfg)
        for p in profiles:
            p.vulns_present = llda.vulns_present(p, cfg.vuln_margin)
        llda.write_profiles(profiles, out / "profiles.jsonl")
        art.append(out / "profiles.jsonl")
        return {p.email_id: p for p in profiles}

    profiles = stage("classify", do_classify)

    def do_urls():
        fixture = urlintel.RedirectFixture.load(cfg.path("redirect_fixture")) if cfg.redirect_fixture else None
        links = urlintel.resolve_all(suspicious, cfg.resolver, fixture=fixture, seed=cfg.seed_urls,
                                     allow_network=cfg.allow_network)
        urlintel.write_redirects(links, out / "redirects.jsonl")
        art.append(out / "redirects.jsonl")
        rows = urlintel.match_clicks(links, urlintel.read_clicks(cfg.path("clicks")))
        urlintel.write_email_clicks(rows, out / "emailclicks.csv")
        art.append(out / "emailclicks.csv")
        return {r.email_id: r for r in rows}

    clicks = stage("urlintel", do_urls)
    spoof = {e.id: urlintel.spoof_distance(e.from_domain, cfg.org_name) for e in emails}
    queue_reps = [e for e in reps if e.suspicious]

    def do_fit():
        rows = [eco.DesignRow(e.id, clicks[e.id].aggregate(cfg.click_strategy),
                              tuple(profiles[e.id].trigger_counts), spoof[e.id])
                for e in queue_reps if e.id in clicks]
        eco.write_design_csv(rows, out / "design.csv")
        art.append(out / "design.csv")
        if not queue_reps:
            res.notes.append("fit: no suspicious emails; nothing to fit")
            return rows, None, None
        full = eco.build_design(rows, eco.STEP_ORDER, cfg.min_clicks)
        steps: dict = {"fits": [], "anova": [], "error": None}
        try:
            fits = eco.stepwise(full)
            steps["fits"] = [f.to_json() for f in fits]
            for a, b in zip(fits, fits[1:]):
                stat, df, p = eco.anova_chisq(a, b)
                steps["anova"].append({"nested": a.model_id, "fuller": b.model_id, "delta_deviance": stat, "df": df, "p": p})
        except eco.FitError as exc:
            steps["error"] = str(exc)
        art.append(_dump(steps, out / "stepwise.json"))
        try:
            scan, table = eco.simple_poisson_scan(rows, cfg.min_clicks)
            art.append(_dump([vars(s) for s in scan], out / "scan.json"))
        except eco.FitError as exc:
            res.notes.append(f"scan: {exc}")
        d = full.select(eco.MODELS[cfg.model])
        fit = eco.fit_poisson(d, model_id=cfg.model)
        art.append(_dump(fit.to_json(), out / "fit.json"))
        bf = eco.bootstrap_fit(d, cfg.bootstrap_b, cfg.seed_bootstrap, model_id=cfg.model)
        bf.save(out / "bootstrap.json")
        art.extend([out / "bootstrap.json", out / "bootstrap.f64"])
        return rows, bf, d.training_stats()

    design_rows, bf, tstats = stage("fit", do_fit)

    def do_predict():
        if bf is None:
            queue = []
        else:
            items = [(e.id, profiles[e.id].trigger_counts, spoof[e.id]) for e in queue_reps]
            queue = eco.triage_rank(eco.predict_clicks(bf, items, cfg.model, cfg.predict_draws, cfg.seed_predict, tstats))
        eco.write_scores(queue, out / "queue.csv")
        art.append(out / "queue.csv")
        return queue

    res.queue = stage("predict", do_predict)

    def do_report():
        has_click = {eid for eid, c in clicks.items() if c.clicks_sum > 0}
        rep_of = {e.duplicate_id: e.id for e in reps}
        sig = signature_groups({eid: p.vulns_present or [False] * len(LABELS) for eid, p in profiles.items()})
        rob = {
            "family": robustness_ratio(((e.duplicate_id, e.id in has_click) for e in emails if e.suspicious),
                                       cfg.robustness_min_group),
            "signature": robustness_ratio(((sig[rep_of[e.duplicate_id]], e.id in has_click) for e in emails if e.suspicious),
                                          cfg.robustness_min_group),
        }
        bundle = report_stats(emails, camps, profiles, {r: clicks[r] for r in clicks}, spoof, design_rows,
                              cfg.spoof_cutoff, rob)
        bundle.notes += res.notes
        art.extend(bundle.write(out / "reports"))

    stage("report", do_report)
    _dump(res.manifest(), out / "manifest.json")
    return res
