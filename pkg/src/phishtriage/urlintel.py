"""Suspicious links, redirect traversal, click matching and spoof distance.

Clicks are only ever observed on *landing* URLs, so the link back to the
reported email is rebuilt by traversing each suspicious URL (every time it
shows up) and matching the landing URLs found against the click feed.
"""

from __future__ import annotations

import csv
import ipaddress
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from urllib.parse import urljoin, urlsplit, urlunsplit

import numpy as np

from .corpus import Email, format_ts, parse_date
from .textproc import URL_RE, levenshtein

log = logging.getLogger(__name__)

UNRESOLVED = "unresolved"
STRATEGIES = ("avg", "sum", "max")
DEFAULT_MAX_DEPTH = 10
REDIRECT_STATUSES = frozenset({301, 302, 303, 307, 308})

# two-label public suffixes seen in practice; everything else is treated as a single-label TLD
_TWO_LABEL_SUFFIXES = frozenset(
    {
        "co.uk", "org.uk", "ac.uk", "gov.uk", "me.uk", "com.au", "net.au", "org.au",
        "co.nz", "co.jp", "ne.jp", "com.br", "com.cn", "com.tw", "co.za", "com.mx",
        "com.tr", "co.in", "com.sg", "com.hk", "co.kr", "com.ar", "com.pl", "co.il",
    }
)
_TRAILING_PUNCT = ".,;:!?)]}>'\""


@dataclass(frozen=True)
class SuspiciousUrl:
    email_id: str
    url: str
    domain: str


@dataclass(frozen=True)
class RedirectRecord:
    suspicious_url: str
    landing_urls: frozenset[str] = frozenset()
    visits: int = 0

    def merge(self, other: "RedirectRecord") -> "RedirectRecord":
        if other.suspicious_url != self.suspicious_url:
            raise ValueError("cannot merge records of different suspicious URLs")
        return RedirectRecord(
            self.suspicious_url, self.landing_urls | other.landing_urls, self.visits + other.visits
        )

    def to_json(self) -> dict:
        return {
            "suspicious_url": self.suspicious_url,
            "landing_urls": sorted(self.landing_urls),
            "visits": self.visits,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "RedirectRecord":
        return cls(d["suspicious_url"], frozenset(d["landing_urls"]), int(d["visits"]))


@dataclass(frozen=True)
class ClickRecord:
    landing_url: str
    clicks: int
    observed_at: float | None = None

    def __post_init__(self):
        if self.clicks < 0:
            raise ValueError(f"negative click count for {self.landing_url}")


@dataclass(frozen=True)
class EmailClicks:
    email_id: str
    clicks_avg: float
    clicks_sum: int
    clicks_max: int
    matched_landing_count: int

    def aggregate(self, strategy: str = "avg") -> float:
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown click aggregation {strategy!r}")
        return {"avg": self.clicks_avg, "sum": self.clicks_sum, "max": self.clicks_max}[strategy]


# -- URLs and domains -----------------------------------------------------------


def host_of(url: str) -> str:
    try:
        host = urlsplit(url if "://" in url else "http://" + url).hostname or ""
    except ValueError:
        return ""
    return host.lower().strip(".")


def registrable_domain(host: str) -> str:
    """Best-effort eTLD+1 of ``host`` (IP literals returned unchanged)."""
    host = host.lower().strip(".")
    if not host:
        return ""
    try:
        ipaddress.ip_address(host)
        return host
    except ValueError:
        pass
    labels = host.split(".")
    if len(labels) >= 3 and ".".join(labels[-2:]) in _TWO_LABEL_SUFFIXES:
        return ".".join(labels[-3:])
    return ".".join(labels[-2:])


def canonical_url(url: str) -> str:
    """Lowercase scheme and host, drop the fragment; path and query are kept verbatim."""
    url = url.strip()
    if url == UNRESOLVED:
        return url
    try:
        parts = urlsplit(url if "://" in url else "http://" + url)
    except ValueError:
        return url
    netloc = parts.netloc.lower()
    return urlunsplit((parts.scheme.lower(), netloc, parts.path, parts.query, ""))


def find_urls(text: str) -> list[str]:
    out = []
    for m in URL_RE.finditer(text):
        u = m.group(0).rstrip(_TRAILING_PUNCT)
        if u.lower().startswith("www."):
            u = "http://" + u
        out.append(u)
    return out


def _domain_set(domains: Iterable[str]) -> frozenset[str]:
    return frozenset(registrable_domain(d) for d in domains if d.strip())


def extract_suspicious(
    email: Email, org_domains: Iterable[str], allowlist: Iterable[str] = ()
) -> list[SuspiciousUrl]:
    """Links whose registrable domain is neither org-owned nor allowlisted (deduplicated, in body order)."""
    org = _domain_set(org_domains)
    allow = _domain_set(allowlist)
    seen: set[str] = set()
    out = []
    for url in find_urls(email.body_text):
        dom = registrable_domain(host_of(url))
        if not dom or dom in org or dom in allow or url in seen:
            continue
        seen.add(url)
        out.append(SuspiciousUrl(email.id, url, dom))
    return out


def flag_suspicious(
    email: Email, org_domains: Iterable[str], allowlist: Iterable[str] = ()
) -> tuple[Email, list[SuspiciousUrl]]:
    from dataclasses import replace

    found = extract_suspicious(email, org_domains, allowlist)
    return replace(email, suspicious=bool(found)), found


# -- redirects --------------------------------------------------------------------


@dataclass
class RedirectFixture:
    """Offline redirect map: ``src -> dst [weight]`` lines; several lines per source mean random fan-out."""

    edges: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "RedirectFixture":
        edges: dict[str, list[tuple[str, float]]] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            src, sep, rest = line.partition("->")
            if not sep:
                raise ValueError(f"redirect fixture line {lineno}: missing '->'")
            parts = rest.split()
            if not parts or len(parts) > 2:
                raise ValueError(f"redirect fixture line {lineno}: expected 'src -> dst [weight]'")
            weight = float(parts[1]) if len(parts) == 2 else 1.0
            if weight <= 0:
                raise ValueError(f"redirect fixture line {lineno}: weight must be positive")
            edges.setdefault(canonical_url(src.strip()), []).append((parts[0], weight))
        return cls(edges)

    @classmethod
    def load(cls, path: str | Path) -> "RedirectFixture":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def dump(self) -> str:
        lines = []
        for src in sorted(self.edges):
            for dst, w in self.edges[src]:
                lines.append(f"{src} -> {dst} {w:g}")
        return "\n".join(lines) + ("\n" if lines else "")

    def visit(self, url: str, rng: np.random.Generator, max_depth: int = DEFAULT_MAX_DEPTH) -> str:
        """Follow one independent redirect session; returns the landing URL or ``UNRESOLVED``."""
        cur = url
        seen = {canonical_url(cur)}
        for hop in range(max_depth + 1):
            outs = self.edges.get(canonical_url(cur))
            if not outs:
                return cur
            if hop == max_depth:
                break
            if len(outs) == 1:
                nxt = outs[0][0]
            else:
                w = np.array([o[1] for o in outs])
                nxt = outs[int(rng.choice(len(outs), p=w / w.sum()))][0]
            key = canonical_url(nxt)
            if key in seen:
                return UNRESOLVED
            seen.add(key)
            cur = nxt
        return UNRESOLVED


def _visit_live(url: str, max_depth: int, timeout: float) -> str:
    import requests

    cur = url
    seen = {canonical_url(cur)}
    with requests.Session() as s:  # fresh session per visit: no cookies carried over
        for _ in range(max_depth + 1):
            try:
                r = s.get(cur, allow_redirects=False, timeout=timeout, stream=True)
                r.close()
            except requests.RequestException as exc:
                log.info("visit %s failed: %s", cur, exc)
                return UNRESOLVED
            loc = r.headers.get("Location")
            if r.status_code not in REDIRECT_STATUSES or not loc:
                return cur
            nxt = urljoin(cur, loc)
            if canonical_url(nxt) in seen:
                return UNRESOLVED
            seen.add(canonical_url(nxt))
            cur = nxt
    return UNRESOLVED


def resolve_redirects(
    url: SuspiciousUrl | str,
    resolver: str = "fixture",
    prior: RedirectRecord | None = None,
    *,
    fixture: RedirectFixture | None = None,
    rng: np.random.Generator | None = None,
    visits: int = 1,
    max_depth: int = DEFAULT_MAX_DEPTH,
    allow_network: bool = False,
    timeout: float = 10.0,
) -> RedirectRecord:
    """Traverse ``url`` ``visits`` times and merge the landing URLs into ``prior``.

    Every visit counts, including those ending in a loop, timeout or depth overrun
    (recorded as ``UNRESOLVED``).
    """
    target = url.url if isinstance(url, SuspiciousUrl) else url
    if resolver == "fixture":
        if fixture is None:
            raise ValueError("fixture resolver needs a redirect map")
        gen = rng if rng is not None else np.random.default_rng(0)
        landings = {fixture.visit(target, gen, max_depth) for _ in range(visits)}
    elif resolver == "live":
        if not allow_network:
            raise PermissionError("live redirect resolution requires allow_network=True")
        landings = {_visit_live(target, max_depth, timeout) for _ in range(visits)}
    else:
        raise ValueError(f"unknown resolver {resolver!r}")
    rec = RedirectRecord(target, frozenset(landings), visits)
    return prior.merge(rec) if prior is not None else rec


def resolve_all(
    suspicious: Sequence[SuspiciousUrl],
    resolver: str = "fixture",
    *,
    fixture: RedirectFixture | None = None,
    seed: int = 0,
    max_depth: int = DEFAULT_MAX_DEPTH,
    allow_network: bool = False,
    timeout: float = 10.0,
) -> dict[str, list[RedirectRecord]]:
    """Visit each suspicious URL once per appearance; return the final records per email."""
    rng = np.random.default_rng(seed)
    per_url: dict[str, RedirectRecord] = {}
    for s in suspicious:
        per_url[s.url] = resolve_redirects(
            s, resolver, per_url.get(s.url), fixture=fixture, rng=rng, max_depth=max_depth,
            allow_network=allow_network, timeout=timeout,
        )
    out: dict[str, list[RedirectRecord]] = {}
    for s in suspicious:
        recs = out.setdefault(s.email_id, [])
        if all(r.suspicious_url != s.url for r in recs):
            recs.append(per_url[s.url])
    return out


# -- clicks -----------------------------------------------------------------------


def match_clicks(
    links: Mapping[str, Iterable[RedirectRecord]], clicks: Iterable[ClickRecord]
) -> list[EmailClicks]:
    """Aggregate clicks over every landing URL reachable from each email's suspicious URLs.

    A landing shared by several emails is credited to each of them in full.
    Emails without any matched landing are omitted.
    """
    per_landing: dict[str, int] = {}
    for c in clicks:
        key = canonical_url(c.landing_url)
        per_landing[key] = per_landing.get(key, 0) + int(c.clicks)
    out = []
    for email_id, records in links.items():
        landings = {canonical_url(u) for r in records for u in r.landing_urls} - {UNRESOLVED}
        matched = sorted(per_landing[u] for u in landings if u in per_landing)
        if not matched:
            continue
        total = sum(matched)
        out.append(EmailClicks(email_id, total / len(matched), total, max(matched), len(matched)))
    return out


def spoof_normalize(name: str) -> str:
    """Lowercase and drop one trailing public-suffix label (``org.com`` -> ``org``)."""
    name = name.strip().lower().strip(".")
    head, dot, _ = name.rpartition(".")
    return head if dot else name


def spoof_distance(from_domain: str, org_name: str) -> int:
    return levenshtein(spoof_normalize(from_domain), spoof_normalize(org_name))


# -- file formats ------------------------------------------------------------------


def read_clicks(path: str | Path) -> list[ClickRecord]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ts = row.get("observed_at") or ""
            when = None
            if ts.strip():
                try:
                    when = float(ts)
                except ValueError:
                    dt = parse_date(ts)
                    when = dt.timestamp() if dt else None
            out.append(ClickRecord(row["landing_url"].strip(), int(row["clicks"]), when))
    return out


def write_clicks(records: Iterable[ClickRecord], path: str | Path) -> None:
    from datetime import datetime, timezone

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["landing_url", "clicks", "observed_at"])
        for r in records:
            when = (
                format_ts(datetime.fromtimestamp(r.observed_at, tz=timezone.utc))
                if r.observed_at is not None
                else ""
            )
            w.writerow([r.landing_url, r.clicks, when])


def write_email_clicks(rows: Iterable[EmailClicks], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["email_id", "clicks_avg", "clicks_sum", "clicks_max", "matched_landing_count"])
        for r in rows:
            w.writerow([r.email_id, repr(float(r.clicks_avg)), r.clicks_sum, r.clicks_max, r.matched_landing_count])


def read_email_clicks(path: str | Path) -> list[EmailClicks]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [
            EmailClicks(
                r["email_id"], float(r["clicks_avg"]), int(r["clicks_sum"]),
                int(r["clicks_max"]), int(r["matched_landing_count"]),
            )
            for r in csv.DictReader(fh)
        ]


def write_redirects(links: Mapping[str, Sequence[RedirectRecord]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for email_id, recs in links.items():
            fh.write(json.dumps({"email_id": email_id, "records": [r.to_json() for r in recs]}, sort_keys=True))
            fh.write("\n")


def read_redirects(path: str | Path) -> dict[str, list[RedirectRecord]]:
    out: dict[str, list[RedirectRecord]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out[d["email_id"]] = [RedirectRecord.from_json(r) for r in d["records"]]
    return out
