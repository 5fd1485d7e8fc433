"""``triage`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import LABELS, corpus, dedup, econometrics as eco, llda, urlintel
from .textproc import TextConfig, clean_and_tokenize, tf_vector

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_STAGE = 0, 1, 2, 3

log = logging.getLogger("triage")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _dump(obj, path: str | Path | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=1) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _text_config(a) -> TextConfig:
    return TextConfig.load(a.language, stopwords_path=a.stopwords, no_stem_path=a.no_stem)


def _docs(emails, a):
    tc = _text_config(a)
    return [clean_and_tokenize(e.body_text, tc, e.id) for e in emails]


# -- subcommand handlers --------------------------------------------------------------


def cmd_ingest(a) -> int:
    st = corpus.IngestStats()
    emails = corpus.recover_all(corpus.ingest(a.input, a.format, st), stats=st)
    comps = corpus.read_competitors(a.competitors) if a.competitors else []
    kept, rep = corpus.sanitize(emails, a.org, comps, corpus.SmsHeuristics(a.sms_max_length))
    corpus.write_corpus(kept, a.output)
    _dump({"ingest": {"read": st.read, "malformed": st.malformed, "unparseable": st.unparseable},
           "sanitize": vars(rep)}, None)
    return EXIT_OK


def cmd_sanitize(a) -> int:
    comps = corpus.read_competitors(a.competitors) if a.competitors else []
    kept, rep = corpus.sanitize(corpus.read_corpus(a.input), a.org, comps, corpus.SmsHeuristics(a.sms_max_length))
    corpus.write_corpus(kept, a.output)
    _dump(vars(rep), None)
    return EXIT_OK


def _tune(a, emails, vecs):
    present = {e.id for e in emails}
    labeled = [(i, g) for i, g in dedup.read_similarity_labels(a.labels) if i in present]
    return dedup.tune_threshold(labeled, {v.email_id: v for v in vecs}, a.bootstrap_n,
                                min(a.sample_size, len(labeled)), a.seed)


def cmd_tune_threshold(a) -> int:
    emails = corpus.read_corpus(a.input)
    vecs = [tf_vector(d) for d in _docs(emails, a)]
    _dump(_tune(a, emails, vecs).to_json(), a.output)
    return EXIT_OK


def cmd_dedup(a) -> int:
    from dataclasses import replace

    if (a.threshold is None) == (a.labels is None):
        raise UsageError("give exactly one of --threshold or --labels")
    emails = corpus.read_corpus(a.input)
    vecs = [tf_vector(d) for d in _docs(emails, a)]
    thr = a.threshold if a.threshold is not None else _tune(a, emails, vecs).chosen_threshold
    ids = dedup.assign_duplicate_ids(dedup.similarity_matrix(vecs), thr, {e.id: e.timestamp for e in emails})
    out = [replace(e, duplicate_id=ids[e.id]) for e in emails]
    corpus.write_corpus(out, a.output)
    if a.campaigns:
        dedup.write_campaigns(dedup.campaigns(out), a.campaigns)
    print(f"threshold {thr} families {len(set(ids.values()))}")
    return EXIT_OK


def _llda_config(a) -> llda.LldaConfig:
    return llda.LldaConfig(alpha=a.alpha, beta=a.beta, n_iterations=a.iterations, burn_in=a.burn_in,
                           seed=a.seed, average_last=a.average_last)


def cmd_train(a) -> int:
    labels = llda.read_labels(a.labels)
    emails = [e for e in corpus.read_corpus(a.input) if e.id in labels]
    model = llda.train(_docs(emails, a), labels, _llda_config(a), _text_config(a).to_dict())
    model.save(a.output)
    print(f"trained on {len(emails)} documents, vocabulary {len(model.vocab)}, "
          f"invariant checks {model.invariant_checks}")
    return EXIT_OK


def cmd_classify(a) -> int:
    model = llda.LldaModel.load(a.model)
    tc = TextConfig.from_dict(model.text_config) if model.text_config else TextConfig.load()
    docs = [clean_and_tokenize(e.body_text, tc, e.id) for e in corpus.read_corpus(a.input)]
    profiles = llda.infer_many(model, docs)
    for p in profiles:
        p.vulns_present = llda.vulns_present(p, a.margin)
    llda.write_profiles(profiles, a.output)
    return EXIT_OK


def cmd_evaluate(a) -> int:
    labels = llda.read_labels(a.labels)
    emails = [e for e in corpus.read_corpus(a.input) if e.id in labels]
    rep = llda.cross_validate(_docs(emails, a), labels, _llda_config(a), a.repeats, a.folds, a.seed, a.workers)
    _dump(rep.to_json(), a.output)
    return EXIT_OK


def cmd_resolve_urls(a) -> int:
    allow = corpus.read_competitors(a.allowlist) if a.allowlist else []
    found = []
    for e in corpus.read_corpus(a.input):
        found += urlintel.extract_suspicious(e, a.org_domains.split(","), allow)
    fixture = urlintel.RedirectFixture.load(a.fixture) if a.fixture else None
    links = urlintel.resolve_all(found, a.resolver, fixture=fixture, seed=a.seed, allow_network=a.allow_network)
    urlintel.write_redirects(links, a.output)
    return EXIT_OK


def cmd_match_clicks(a) -> int:
    rows = urlintel.match_clicks(urlintel.read_redirects(a.redirects), urlintel.read_clicks(a.clicks))
    urlintel.write_email_clicks(rows, a.output)
    return EXIT_OK


def cmd_design(a) -> int:
    clicks = {c.email_id: c for c in urlintel.read_email_clicks(a.emailclicks)}
    emails = {e.id: e for e in corpus.read_corpus(a.corpus)}
    rows = [eco.DesignRow(p.email_id, clicks[p.email_id].aggregate(a.strategy), tuple(p.trigger_counts),
                          urlintel.spoof_distance(emails[p.email_id].from_domain, a.org))
            for p in llda.read_profiles(a.profiles) if p.email_id in clicks and p.email_id in emails]
    eco.write_design_csv(rows, a.output)
    return EXIT_OK


def _design(a) -> eco.Design:
    full = eco.build_design(eco.read_design_csv(a.design), eco.STEP_ORDER, a.min_clicks)
    return full.select(eco.MODELS[a.model]) if a.model else full


def cmd_fit(a) -> int:
    if a.stepwise:
        fits = eco.stepwise(eco.build_design(eco.read_design_csv(a.design), eco.STEP_ORDER, a.min_clicks))
        anova = []
        for x, y in zip(fits, fits[1:]):
            stat, df, p = eco.anova_chisq(x, y)
            anova.append({"nested": x.model_id, "fuller": y.model_id, "delta_deviance": stat, "df": df, "p": p})
        _dump({"fits": [f.to_json() for f in fits], "anova": anova}, a.output)
    else:
        _dump(eco.fit_poisson(_design(a), model_id=a.model).to_json(), a.output)
    return EXIT_OK


def cmd_bootstrap(a) -> int:
    bf = eco.bootstrap_fit(_design(a), a.B, a.seed, model_id=a.model)
    bf.save(a.output)
    for c, q in bf.quantiles.items():
        print(f"{c:12s} {q[0]: .5f} {q[1]: .5f} {q[2]: .5f}")
    return EXIT_OK


def cmd_predict(a) -> int:
    bf = eco.BootstrapFit.load(a.bootstrap)
    emails = {e.id: e for e in corpus.read_corpus(a.corpus)}
    items = [(p.email_id, p.trigger_counts, urlintel.spoof_distance(emails[p.email_id].from_domain, a.org))
             for p in llda.read_profiles(a.profiles) if p.email_id in emails]
    stats = _design(a).training_stats() if a.design else None
    eco.write_scores(eco.predict_clicks(bf, items, bf.model_id or a.model, a.draws, a.seed, stats), a.output)
    return EXIT_OK


def cmd_rank(a) -> int:
    eco.write_scores(eco.triage_rank(eco.read_scores(a.scores)), a.output)
    return EXIT_OK


def _run_dir_inputs(run: Path, org: str):
    emails = corpus.read_corpus(run / "corpus.jsonl")
    profiles = {p.email_id: p for p in llda.read_profiles(run / "profiles.jsonl")}
    clicks = {c.email_id: c for c in urlintel.read_email_clicks(run / "emailclicks.csv")}
    spoof = {e.id: urlintel.spoof_distance(e.from_domain, org) for e in emails}
    return emails, profiles, clicks, spoof


def cmd_report(a) -> int:
    from .app.reports import report_stats

    run = Path(a.run_dir)
    emails, profiles, clicks, spoof = _run_dir_inputs(run, a.org)
    design = eco.read_design_csv(run / "design.csv") if (run / "design.csv").exists() else []
    report_stats(emails, dedup.campaigns(emails), profiles, clicks, spoof, design, a.spoof_cutoff).write(a.output)
    return EXIT_OK


def cmd_robustness(a) -> int:
    from .app.pipeline import representatives
    from .app.robustness import robustness_ratio, signature_groups

    run = Path(a.run_dir)
    emails, profiles, clicks, _ = _run_dir_inputs(run, "x")
    hit = {k for k, c in clicks.items() if c.clicks_sum > 0}
    susp = [e for e in emails if e.suspicious]
    if a.by == "family":
        pairs = ((e.duplicate_id, e.id in hit) for e in susp)
    else:
        rep_of = {e.duplicate_id: e.id for e in representatives(emails)}
        sig = signature_groups({k: p.vulns_present or [False] * len(LABELS) for k, p in profiles.items()})
        pairs = ((sig.get(rep_of[e.duplicate_id], "?"), e.id in hit) for e in susp)
    tab = robustness_ratio(pairs, a.min_group)
    for r in tab.rows:
        print(f"{r.group}\t{r.reported}\t{r.clicked}\t{r.ratio:.4f}")
    print(f"groups={len(tab.rows)} excluded={tab.excluded_groups} mean={tab.mean:.4f} sd={tab.sd:.4f} cv={tab.cv:.4f}")
    return EXIT_OK


def cmd_simulate(a) -> int:
    from .app.robustness import skew_experiment

    tab = skew_experiment(a.families, a.family_size, a.users, a.delivery, a.skew, a.skew_share,
                          seed=a.seed, min_group=a.min_group)
    _dump({"groups": len(tab.rows), "mean": tab.mean, "sd": tab.sd, "cv": tab.cv,
           "ratios": [float(x) for x in tab.ratios]}, a.output)
    return EXIT_OK


def cmd_synth(a) -> int:
    from .app.synth import SynthConfig, synth_corpus

    p = synth_corpus(SynthConfig(n_emails=a.n_emails), a.seed, a.outdir)
    print(p.config)
    return EXIT_OK


def cmd_run(a) -> int:
    from dataclasses import replace

    from .app.config import load_config
    from .app.pipeline import run_pipeline

    cfg = load_config(a.config)
    if a.workers != 1:
        cfg = replace(cfg, workers=a.workers)
    res = run_pipeline(cfg, a.input, a.output, a.format)
    print(f"queue {len(res.queue)} -> {Path(a.output) / 'queue.csv'}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def _text_opts(p):
    p.add_argument("--language", default="english")
    p.add_argument("--stopwords")
    p.add_argument("--no-stem", dest="no_stem")


def _llda_opts(p):
    d = llda.LldaConfig()
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--iterations", type=int, default=d.n_iterations)
    p.add_argument("--burn-in", type=int, default=d.burn_in)
    p.add_argument("--average-last", type=int, default=0)
    p.add_argument("--seed", type=int, required=True)


def _design_opts(p, required_model=True):
    p.add_argument("design")
    p.add_argument("--model", choices=sorted(eco.MODELS), required=required_model)
    p.add_argument("--min-clicks", type=float, default=eco.DEFAULT_MIN_CLICKS)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="triage", description="Phishing triage: cognitive triggers to predicted clicks.")
    ap.add_argument("--workers", type=int, default=1, help="worker processes where a stage supports them")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="read raw reports, recover headers, sanitize")
    p.add_argument("--format", choices=("eml-dir", "mbox", "jsonl"), required=True)
    p.add_argument("--org", required=True)
    p.add_argument("--competitors")
    p.add_argument("--sms-max-length", type=int, default=200)
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("sanitize", help="drop SMS-like and other-organization reports")
    p.add_argument("--org", required=True)
    p.add_argument("--competitors")
    p.add_argument("--sms-max-length", type=int, default=200)
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(fn=cmd_sanitize)

    for name, fn in (("dedup", cmd_dedup), ("tune-threshold", cmd_tune_threshold)):
        p = sub.add_parser(name)
        p.add_argument("input")
        p.add_argument("output")
        if name == "dedup":
            p.add_argument("--threshold", type=float)
            p.add_argument("--labels")
            p.add_argument("--campaigns")
        else:
            p.add_argument("--labels", required=True)
        p.add_argument("--bootstrap-n", type=int, default=10_000)
        p.add_argument("--sample-size", type=int, default=300)
        p.add_argument("--seed", type=int, default=0)
        _text_opts(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("train", help="fit the labeled topic model")
    p.add_argument("--labels", required=True)
    p.add_argument("input")
    p.add_argument("output")
    _llda_opts(p)
    _text_opts(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("classify", help="infer trigger counts per email")
    p.add_argument("model")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--margin", type=float, default=0.05)
    p.set_defaults(fn=cmd_classify)

    p = sub.add_parser("evaluate", help="repeated k-fold cross-validation")
    p.add_argument("--labels", required=True)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("input")
    p.add_argument("output", nargs="?", default="-")
    _llda_opts(p)
    _text_opts(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("resolve-urls")
    p.add_argument("--org-domains", required=True, help="comma separated")
    p.add_argument("--allowlist")
    p.add_argument("--resolver", choices=("fixture", "live"), default="fixture")
    p.add_argument("--fixture")
    p.add_argument("--allow-network", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(fn=cmd_resolve_urls)

    p = sub.add_parser("match-clicks")
    p.add_argument("redirects")
    p.add_argument("clicks")
    p.add_argument("output")
    p.set_defaults(fn=cmd_match_clicks)

    p = sub.add_parser("design", help="assemble the regression design table")
    p.add_argument("--profiles", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--emailclicks", required=True)
    p.add_argument("--org", required=True)
    p.add_argument("--strategy", choices=urlintel.STRATEGIES, default="avg")
    p.add_argument("output")
    p.set_defaults(fn=cmd_design)

    p = sub.add_parser("fit", help="Poisson regression (one model or the nested sequence)")
    _design_opts(p, required_model=False)
    p.add_argument("--stepwise", action="store_true")
    p.add_argument("output", nargs="?", default="-")
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("bootstrap")
    _design_opts(p)
    p.add_argument("-B", type=int, default=5000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("output")
    p.set_defaults(fn=cmd_bootstrap)

    p = sub.add_parser("predict")
    p.add_argument("bootstrap")
    p.add_argument("profiles")
    p.add_argument("corpus")
    p.add_argument("output")
    p.add_argument("--org", required=True)
    p.add_argument("--model", choices=sorted(eco.MODELS), default="PM1")
    p.add_argument("--draws", type=int, default=50_000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--design", help="training design CSV, used to flag out-of-domain emails")
    p.add_argument("--min-clicks", type=float, default=eco.DEFAULT_MIN_CLICKS)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("rank")
    p.add_argument("scores")
    p.add_argument("output")
    p.set_defaults(fn=cmd_rank)

    p = sub.add_parser("report", help="exploratory tables from a pipeline output directory")
    p.add_argument("run_dir")
    p.add_argument("output")
    p.add_argument("--org", required=True)
    p.add_argument("--spoof-cutoff", type=int, default=3)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("robustness", help="click/report ratio per group from a pipeline output directory")
    p.add_argument("run_dir")
    p.add_argument("--by", choices=("family", "signature"), default="family")
    p.add_argument("--min-group", type=int, default=5)
    p.set_defaults(fn=cmd_robustness)

    p = sub.add_parser("simulate", help="delivery-skew simulation")
    p.add_argument("--families", type=int, default=40)
    p.add_argument("--family-size", type=int, default=10)
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--delivery", type=float, default=0.01)
    p.add_argument("--skew", type=float, default=1.0)
    p.add_argument("--skew-share", type=float, default=0.5)
    p.add_argument("--min-group", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("output", nargs="?", default="-")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("synth", help="write a synthetic corpus with ground truth")
    p.add_argument("outdir")
    p.add_argument("--n-emails", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("run", help="whole pipeline from a config file")
    p.add_argument("config")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--format", choices=("eml-dir", "mbox", "jsonl"), default="jsonl")
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv=None) -> int:
    from .app.config import ConfigError
    from .app.pipeline import StageError

    try:
        a = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"triage: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return a.fn(a)
    except UsageError as exc:
        print(f"triage: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"triage: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ConfigError, OSError, ValueError, KeyError) as exc:
        print(f"triage: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
