"""Exploratory statistics over a processed corpus, emitted as plot-ready CSV tables."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .. import LABELS
from ..corpus import Email, format_ts
from ..dedup import LONG, SHORT, SINGLE_DAY, CampaignCluster
from ..econometrics import SPOOF, STEP_ORDER, DesignRow
from ..llda import CognitiveProfile
from ..urlintel import EmailClicks
from .robustness import RobustnessTable

Table = list[list]


def ecdf(values: Sequence[float]) -> Table:
    """Rows (x, F(x)) at each distinct support point; F is right-continuous and ends at 1."""
    if not len(values):
        return []
    xs, counts = np.unique(np.asarray(values, dtype=float), return_counts=True)
    cum = np.cumsum(counts) / counts.sum()
    cum[-1] = 1.0
    return [[float(x), float(c)] for x, c in zip(xs, cum)]


def _quantile_row(values: Sequence[float]) -> list:
    if not len(values):
        return [0, "", "", "", "", "", ""]
    v = np.asarray(values, dtype=float)
    q = np.quantile(v, [0.025, 0.5, 0.975])
    return [len(v), float(v.min()), float(q[0]), float(q[1]), float(q[2]), float(v.max()), float(v.mean())]


@dataclass
class ReportBundle:
    tables: dict[str, tuple[list[str], Table]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def add(self, name: str, header: list[str], rows: Table) -> None:
        self.tables[name] = (header, rows)

    def write(self, outdir: str | Path) -> list[Path]:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name in sorted(self.tables):
            header, rows = self.tables[name]
            p = out / f"{name}.csv"
            with p.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for r in rows:
                    w.writerow([_fmt(x) for x in r])
            written.append(p)
        notes = out / "notes.txt"
        notes.write_text("".join(n + "\n" for n in self.notes), encoding="utf-8")
        written.append(notes)
        return written


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(round(x, 10))
    if isinstance(x, bool):
        return str(int(x))
    return str(x)


def weekly_spoof_trend(emails: Sequence[Email], campaigns: Sequence[CampaignCluster],
                       spoof: Mapping[str, int], duration_class: str = LONG) -> tuple[Table, float | None, float | None]:
    """Mean spoof distance per campaign week (weeks since each campaign's first email)."""
    by_id = {e.id: e for e in emails}
    weeks: dict[int, list[int]] = {}
    for c in campaigns:
        if c.duration_class != duration_class or c.first_seen is None:
            continue
        for eid in c.member_ids:
            e = by_id.get(eid)
            if e is None or e.timestamp is None or eid not in spoof:
                continue
            wk = int((e.timestamp - c.first_seen) // (7 * 86400))
            weeks.setdefault(wk, []).append(spoof[eid])
    rows = [[wk, float(np.mean(v)), len(v)] for wk, v in sorted(weeks.items())]
    if len(rows) < 3:
        return rows, None, None
    x = np.array([r[0] for r in rows], dtype=float)
    y = np.array([r[1] for r in rows])
    if np.ptp(y) == 0 or np.ptp(x) == 0:
        return rows, None, None
    r, p = stats.pearsonr(x, y)
    return rows, float(r), float(p)


def report_stats(
    emails: Sequence[Email],
    campaigns: Sequence[CampaignCluster],
    profiles: Mapping[str, CognitiveProfile],
    clicks: Mapping[str, EmailClicks],
    spoof: Mapping[str, int],
    design: Sequence[DesignRow] = (),
    spoof_cutoff: int = 3,
    robustness: Mapping[str, RobustnessTable] | None = None,
) -> ReportBundle:
    b = ReportBundle()
    ts = sorted(e.timestamp for e in emails if e.timestamp is not None)
    b.add("arrival_cdf", ["timestamp", "iso", "cdf"],
          [[t, format_ts_float(t), f] for t, f in ecdf(ts)])

    per_reporter = Counter(e.to_addr for e in emails)
    b.add("reporter_cdf", ["emails_reported", "cdf"], ecdf(list(per_reporter.values())))

    rows = []
    for group, flag in (("suspicious", True), ("not_suspicious", False)):
        for spoofed, keep in (("spoofed", lambda d: d <= spoof_cutoff), ("non_spoofed", lambda d: d > spoof_cutoff)):
            vals = [spoof[e.id] for e in emails if e.suspicious == flag and e.id in spoof and keep(spoof[e.id])]
            rows += [[group, spoofed, x, f] for x, f in ecdf(vals)]
    b.add("spoof_cdf", ["group", "class", "spoof_distance", "cdf"], rows)

    dur_rows = []
    for cls in (SINGLE_DAY, SHORT, LONG):
        cs = [c for c in campaigns if c.duration_class == cls]
        dur_rows.append([cls, len(cs), sum(c.samples for c in cs),
                         float(np.median([c.duration_days for c in cs])) if cs else math.nan,
                         float(np.median([c.samples for c in cs])) if cs else math.nan])
    b.add("campaign_durations", ["duration_class", "campaigns", "samples", "median_duration_days", "median_samples"], dur_rows)
    when = {e.id: e.timestamp for e in emails}
    b.add("campaign_arrivals", ["duplicate_id", "email_id", "timestamp"],
          [[c.duplicate_id, eid, format_ts_float(when.get(eid))] for c in campaigns for eid in c.member_ids])

    prof = list(profiles.values())
    trig_rows = []
    for k, name in enumerate(LABELS):
        vals = [p.trigger_counts[k] for p in prof]
        present = sum(1 for p in prof if p.vulns_present and p.vulns_present[k])
        trig_rows.append([name, present, *_quantile_row(vals)])
    b.add("trigger_distribution", ["label", "emails_present", "n", "min", "q025", "median", "q975", "max", "mean"], trig_rows)
    nv = Counter(sum(bool(v) for v in (p.vulns_present or [])) for p in prof)
    b.add("vulns_per_email", ["vulnerabilities", "emails"], [[k, nv[k]] for k in sorted(nv)])
    clicked_ids = set(clicks)
    b.add("trigger_vs_clicked", ["label", "clicked_mean_triggers", "unclicked_mean_triggers"],
          [[name,
            float(np.mean([p.trigger_counts[k] for p in prof if p.email_id in clicked_ids])) if clicked_ids & profiles.keys() else math.nan,
            float(np.mean([p.trigger_counts[k] for p in prof if p.email_id not in clicked_ids])) if profiles.keys() - clicked_ids else math.nan]
           for k, name in enumerate(LABELS)])

    trend, r, p = weekly_spoof_trend(emails, campaigns, spoof)
    b.add("spoof_weekly_trend", ["week", "mean_spoof_distance", "emails"], trend)
    if r is None:
        b.notes.append("spoof weekly trend: correlation omitted (fewer than 3 weeks or no variance)")
    else:
        b.notes.append(f"spoof weekly trend: pearson r={r:.4f} p={p:.4f}")

    desc = [["Length", *_quantile_row([e.body_length for e in emails])],
            *[[name, *_quantile_row([p.trigger_counts[k] for p in prof])] for k, name in enumerate(LABELS)],
            [SPOOF, *_quantile_row(list(spoof.values()))],
            ["Clicks", *_quantile_row([c.clicks_avg for c in clicks.values()])]]
    b.add("descriptive", ["variable", "n", "min", "q025", "median", "q975", "max", "mean"], desc)

    if design:
        M = np.array([[r.value(c) for c in STEP_ORDER] for r in design], dtype=float)
        with np.errstate(invalid="ignore", divide="ignore"):
            C = np.corrcoef(M, rowvar=False) if len(design) > 1 else np.full((7, 7), np.nan)
        b.add("regressor_correlation", ["regressor", *STEP_ORDER],
              [[name, *map(float, C[i])] for i, name in enumerate(STEP_ORDER)])
    else:
        b.notes.append("regressor correlation: no design rows")

    for name, tab in (robustness or {}).items():
        b.add(f"robustness_{name}", ["group", "reported", "clicked", "ratio"],
              [[r.group, r.reported, r.clicked, r.ratio] for r in tab.rows])
        b.notes.append(f"robustness {name}: groups={len(tab.rows)} excluded={tab.excluded_groups} "
                       f"mean={tab.mean:.4f} sd={tab.sd:.4f} cv={tab.cv:.4f}")
    return b


def format_ts_float(t: float | None) -> str:
    if t is None:
        return ""
    from datetime import datetime, timezone

    return format_ts(datetime.fromtimestamp(t, tz=timezone.utc)) or ""
