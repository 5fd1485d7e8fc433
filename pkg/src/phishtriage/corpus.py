"""Ingest forwarded phishing reports and recover the original messages.

Reports reach the abuse mailbox as forwards, sometimes forwarded several
times before arriving.  :func:`recover_original_headers` digs through MIME
attachments and quoted "forwarded message" blocks to find the innermost
original with a full From/To/Date/Subject header set.  :func:`sanitize`
then drops SMS gateway noise and reports about other organizations.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import mailbox
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from email import policy
from email.message import EmailMessage, Message
from email.parser import BytesParser
from email.utils import getaddresses, parsedate_to_datetime
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

log = logging.getLogger(__name__)

FORMATS = ("eml-dir", "mbox", "jsonl")


class UnparseableMessage(ValueError):
    """No candidate message carries all four original headers."""


@dataclass(frozen=True)
class RawMessage:
    id: str
    source_path: str
    raw_bytes: bytes
    received_at: float | None = None

    def __post_init__(self):
        if not self.raw_bytes:
            raise ValueError(f"message {self.id!r} is empty")


@dataclass(frozen=True)
class Email:
    id: str
    from_addr: str
    from_domain: str
    to_addr: str
    date: datetime | None
    subject: str
    body_text: str
    body_length: int
    suspicious: bool = False
    duplicate_id: int | None = None
    # 0 = the message's own transport headers, >0 = recovered forwarded original
    header_depth: int = 0

    @classmethod
    def build(
        cls,
        id: str,
        from_addr: str,
        to_addr: str,
        date: datetime | None,
        subject: str,
        body_text: str,
        header_depth: int = 0,
        suspicious: bool = False,
        duplicate_id: int | None = None,
    ) -> "Email":
        return cls(
            id=id,
            from_addr=from_addr,
            from_domain=domain_of(from_addr),
            to_addr=to_addr,
            date=date,
            subject=subject,
            body_text=body_text,
            body_length=len(body_text),
            suspicious=suspicious,
            duplicate_id=duplicate_id,
            header_depth=header_depth,
        )

    @property
    def timestamp(self) -> float | None:
        return self.date.timestamp() if self.date is not None else None

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["date"] = format_ts(self.date)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "Email":
        d = dict(d)
        d["date"] = parse_iso(d["date"]) if d.get("date") else None
        return cls(**d)


@dataclass
class SanitizationReport:
    total_in: int = 0
    removed_sms_like: int = 0
    removed_other_org: int = 0
    retained: int = 0

    def merge(self, other: "SanitizationReport") -> "SanitizationReport":
        return SanitizationReport(
            self.total_in + other.total_in,
            self.removed_sms_like + other.removed_sms_like,
            self.removed_other_org + other.removed_other_org,
            self.retained + other.retained,
        )


@dataclass
class IngestStats:
    read: int = 0
    malformed: int = 0
    unparseable: int = 0
    warnings: list[str] = field(default_factory=list)


# -- timestamps --------------------------------------------------------------

_MONTHS_NL = {
    "januari": 1, "februari": 2, "maart": 3, "april": 4, "mei": 5, "juni": 6,
    "juli": 7, "augustus": 8, "september": 9, "oktober": 10, "november": 11, "december": 12,
    "jan": 1, "feb": 2, "mrt": 3, "apr": 4, "jun": 6, "jul": 7, "aug": 8, "sep": 9,
    "okt": 10, "nov": 11, "dec": 12,
}
_STRPTIME_FORMATS = (
    "%A, %B %d, %Y %I:%M %p",
    "%A, %B %d, %Y %H:%M",
    "%a, %b %d, %Y at %I:%M %p",
    "%d-%m-%Y %H:%M",
    "%d-%m-%Y %H:%M:%S",
    "%d/%m/%Y %H:%M",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%d %B %Y %H:%M",
)
_NL_DATE_RE = re.compile(
    r"(?i)(?:\w+\s+)?(\d{1,2})\s+([a-z]+)\.?\s+(\d{4})(?:\s+(?:om\s+)?(\d{1,2}):(\d{2})(?::(\d{2}))?)?"
)


def _utc(dt: datetime) -> datetime:
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def parse_date(text: str | None) -> datetime | None:
    """Parse RFC 2822, ISO-8601 and a handful of localized date formats; ``None`` if hopeless."""
    if not text:
        return None
    text = " ".join(text.split())
    # strict formats first: parsedate is lenient and silently drops AM/PM
    for fmt in _STRPTIME_FORMATS:
        try:
            return _utc(datetime.strptime(text, fmt))
        except ValueError:
            continue
    try:
        return _utc(parsedate_to_datetime(text))
    except (TypeError, ValueError, IndexError):
        pass
    try:
        return _utc(datetime.fromisoformat(text.replace("Z", "+00:00")))
    except ValueError:
        pass
    m = _NL_DATE_RE.fullmatch(text)
    if m and m.group(2).lower() in _MONTHS_NL:
        day, _, year, hh, mm, ss = m.groups()
        try:
            return datetime(
                int(year), _MONTHS_NL[m.group(2).lower()], int(day),
                int(hh or 0), int(mm or 0), int(ss or 0), tzinfo=timezone.utc,
            )
        except ValueError:
            return None
    return None


def format_ts(dt: datetime | None) -> str | None:
    if dt is None:
        return None
    return _utc(dt).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_iso(text: str) -> datetime:
    return _utc(datetime.fromisoformat(text.replace("Z", "+00:00")))


def domain_of(addr: str) -> str:
    _, _, dom = addr.rpartition("@")
    return dom.strip().strip(">").lower()


# -- ingest ------------------------------------------------------------------


def ingest(path: str | Path, format: str, stats: IngestStats | None = None) -> Iterator[RawMessage]:
    """Yield stored messages in deterministic order.

    Malformed container records are logged, skipped and counted in ``stats``.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown input format {format!r}; expected one of {FORMATS}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    st = stats if stats is not None else IngestStats()
    if format == "eml-dir":
        yield from _ingest_eml_dir(p, st)
    elif format == "mbox":
        yield from _ingest_mbox(p, st)
    else:
        yield from _ingest_jsonl(p, st)


def _warn(st: IngestStats, msg: str) -> None:
    log.warning(msg)
    st.warnings.append(msg)
    st.malformed += 1


def _outer_date(raw: bytes) -> float | None:
    msg = BytesParser(policy=policy.compat32).parsebytes(raw, headersonly=True)
    dt = parse_date(msg.get("Date"))
    return dt.timestamp() if dt else None


def _ingest_eml_dir(p: Path, st: IngestStats) -> Iterator[RawMessage]:
    if not p.is_dir():
        raise NotADirectoryError(p)
    for f in sorted(p.glob("*.eml"), key=lambda q: q.name):
        raw = f.read_bytes()
        if not raw.strip():
            _warn(st, f"{f}: empty message file skipped")
            continue
        st.read += 1
        yield RawMessage(f.stem, str(f), raw, _outer_date(raw))


def _ingest_mbox(p: Path, st: IngestStats) -> Iterator[RawMessage]:
    box = mailbox.mbox(str(p), create=False)
    try:
        for i, key in enumerate(box.iterkeys()):
            try:
                raw = box.get_bytes(key)
            except Exception as exc:  # noqa: BLE001 - any container damage is per-record
                _warn(st, f"{p}#{i}: unreadable mbox record ({exc})")
                continue
            if not raw.strip():
                _warn(st, f"{p}#{i}: empty mbox record skipped")
                continue
            st.read += 1
            yield RawMessage(f"{p.stem}-{i:06d}", str(p), raw, _outer_date(raw))
    finally:
        box.close()


def _ingest_jsonl(p: Path, st: IngestStats) -> Iterator[RawMessage]:
    seen: set[str] = set()
    with p.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                mid = str(rec["id"])
                raw = rec["raw"]
                raw_b = raw.encode("utf-8") if isinstance(raw, str) else bytes(raw)
                ts = rec.get("received_at")
                ts = float(ts) if ts is not None else None
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                _warn(st, f"{p}:{lineno}: malformed record skipped ({exc.__class__.__name__})")
                continue
            if not raw_b.strip():
                _warn(st, f"{p}:{lineno}: empty raw message skipped")
                continue
            if mid in seen:
                _warn(st, f"{p}:{lineno}: duplicate id {mid!r} skipped")
                continue
            seen.add(mid)
            st.read += 1
            yield RawMessage(mid, f"{p}:{lineno}", raw_b, ts)


# -- header recovery -----------------------------------------------------------

DEFAULT_HEADER_LEXICON: dict[str, tuple[str, ...]] = {
    "from": ("From", "Van", "Von", "De", "Afzender"),
    "to": ("To", "Aan", "An", "Naar"),
    "date": ("Date", "Sent", "Datum", "Verzonden", "Gesendet", "Envoyé"),
    "subject": ("Subject", "Onderwerp", "Betreff", "Objet"),
}
HEADER_KEYS = ("from", "to", "date", "subject")


def _label_regex(lexicon: Mapping[str, Sequence[str]]) -> re.Pattern:
    alts = []
    for key, names in lexicon.items():
        inner = "|".join(re.escape(n) for n in sorted(names, key=len, reverse=True))
        alts.append(f"(?P<{key}>{inner})")
    return re.compile(r"^[ \t]*(?:>[ \t]?)*\*?(?:" + "|".join(alts) + r")\*?[ \t]*:[ \t]*(?P<value>.*)$", re.I)


@dataclass
class _Candidate:
    depth: int
    headers: dict[str, str]
    body: str

    def complete(self) -> bool:
        return all(self.headers.get(k, "").strip() for k in HEADER_KEYS)


_QUOTE_PREFIX_RE = re.compile(r"^[ \t]*(?:>[ \t]?)+", re.M)


def _unquote(text: str) -> str:
    return _QUOTE_PREFIX_RE.sub("", text)


def _scan_quoted(text: str, depth: int, pattern: re.Pattern, out: list[_Candidate]) -> None:
    """Find forwarded header blocks in plain text; each block opens a deeper candidate."""
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        m = pattern.match(lines[i])
        if not m:
            i += 1
            continue
        headers: dict[str, str] = {}
        j = i
        while j < len(lines):
            mj = pattern.match(lines[j])
            if not mj:
                # folded continuation of the previous header value
                if headers and lines[j][:1] in (" ", "\t") and lines[j].strip() and not lines[j].lstrip().startswith(">"):
                    last = list(headers)[-1]
                    headers[last] += " " + lines[j].strip()
                    j += 1
                    continue
                break
            key = next(k for k in HEADER_KEYS if mj.group(k))
            headers.setdefault(key, mj.group("value").strip())
            j += 1
        if len(headers) >= 2 and "from" in headers:
            body = _unquote("\n".join(lines[j:])).strip("\n")
            out.append(_Candidate(depth + 1, headers, body))
            _scan_quoted(body, depth + 1, pattern, out)
            return
        i = j if j > i else i + 1


def _own_parts(msg: Message) -> Iterator[Message]:
    """Leaf parts and attached messages of ``msg``, without descending into the attached messages."""
    if msg.get_content_type() == "message/rfc822" or not msg.is_multipart():
        yield msg
        return
    for sub in msg.get_payload():
        yield from _own_parts(sub)


def _text_of(msg: Message) -> str:
    """Concatenate text/plain parts (text/html stripped of tags as a fallback), skipping attachments."""
    plain, html = [], []
    parts = _own_parts(msg) if msg.is_multipart() else [msg]
    for part in parts:
        if part.get_content_type() == "message/rfc822":
            continue
        if (part.get_content_disposition() or "") == "attachment":
            continue
        ctype = part.get_content_type()
        if ctype not in ("text/plain", "text/html"):
            continue
        try:
            payload = part.get_content() if isinstance(part, EmailMessage) else None
        except (LookupError, ValueError):
            payload = None
        if payload is None:
            raw = part.get_payload(decode=True) or b""
            payload = raw.decode(part.get_content_charset() or "utf-8", errors="replace")
        (plain if ctype == "text/plain" else html).append(payload)
    if plain:
        return "\n".join(plain).replace("\r\n", "\n").strip("\n")
    text = "\n".join(html)
    text = re.sub(r"(?is)<(script|style).*?>.*?</\1>", " ", text)
    text = re.sub(r"(?i)<br\s*/?>|</p>", "\n", text)
    text = re.sub(r"<[^>]+>", " ", text)
    return text.strip("\n")


def _walk_candidates(msg: Message, depth: int, pattern: re.Pattern, out: list[_Candidate]) -> None:
    headers = {k: str(msg.get(k, "") or "") for k in HEADER_KEYS}
    body = _text_of(msg)
    out.append(_Candidate(depth, headers, body))
    # attached originals first (depth-first), then forwarded blocks quoted in the text
    parts = _own_parts(msg) if msg.is_multipart() else []
    for part in parts:
        if part is not msg and part.get_content_type() == "message/rfc822":
            inner = part.get_payload()
            inner = inner[0] if isinstance(inner, list) else inner
            if isinstance(inner, Message):
                _walk_candidates(inner, depth + 1, pattern, out)
    _scan_quoted(body, depth, pattern, out)


def _first_address(value: str) -> str:
    pairs = getaddresses([value])
    for _, addr in pairs:
        if "@" in addr:
            return addr.strip().lower()
    m = re.search(r"[\w.+-]+@[\w-]+(?:\.[\w-]+)+", value)
    return m.group(0).lower() if m else value.strip().lower()


def recover_original_headers(
    msg: RawMessage, lexicon: Mapping[str, Sequence[str]] | None = None
) -> Email:
    """Return the innermost forwarded original that carries From, To, Date and Subject.

    Candidates missing any of the four are skipped in favour of the next-outer one.
    Raises :class:`UnparseableMessage` when no candidate is complete.
    """
    pattern = _label_regex(lexicon or DEFAULT_HEADER_LEXICON)
    parsed = BytesParser(policy=policy.default).parsebytes(msg.raw_bytes)
    cands: list[_Candidate] = []
    _walk_candidates(parsed, 0, pattern, cands)
    complete = [c for c in cands if c.complete()]
    if not complete:
        raise UnparseableMessage(f"{msg.id}: no recoverable original headers")
    # deepest wins; among equals the later (more nested in text) one
    best = max(enumerate(complete), key=lambda ic: (ic[1].depth, ic[0]))[1]
    h = best.headers
    return Email.build(
        id=msg.id,
        from_addr=_first_address(h["from"]),
        to_addr=_first_address(h["to"]),
        date=parse_date(h["date"]),
        subject=" ".join(h["subject"].split()),
        body_text=best.body.strip(),
        header_depth=best.depth,
    )


def recover_all(
    messages: Iterable[RawMessage],
    lexicon: Mapping[str, Sequence[str]] | None = None,
    stats: IngestStats | None = None,
) -> Iterator[Email]:
    st = stats if stats is not None else IngestStats()
    for m in messages:
        try:
            yield recover_original_headers(m, lexicon)
        except UnparseableMessage as exc:
            log.warning("%s", exc)
            st.unparseable += 1


# -- sanitization ----------------------------------------------------------------


@dataclass(frozen=True)
class SmsHeuristics:
    """A message is SMS-like iff its body is shorter than ``max_length`` and no inner header block was found."""

    max_length: int = 200


def _word_re(names: Iterable[str]) -> re.Pattern | None:
    names = [n.strip() for n in names if n.strip()]
    if not names:
        return None
    alts = "|".join(re.escape(n) for n in sorted(names, key=len, reverse=True))
    return re.compile(rf"(?<!\w)(?:{alts})(?!\w)", re.I)


def is_sms_like(email: Email, heur: SmsHeuristics) -> bool:
    return email.body_length < heur.max_length and email.header_depth == 0


def sanitize(
    emails: Iterable[Email],
    org_name: str,
    competitor_names: Sequence[str] = (),
    sms_heuristics: SmsHeuristics | None = None,
) -> tuple[list[Email], SanitizationReport]:
    """Drop SMS-like forwards and reports that target other organizations."""
    if not org_name.strip():
        raise ValueError("org_name must be non-empty")
    heur = sms_heuristics or SmsHeuristics()
    org_re = _word_re([org_name])
    comp_re = _word_re(c for c in competitor_names if c.strip().lower() != org_name.strip().lower())
    rep = SanitizationReport()
    kept = []
    for e in emails:
        rep.total_in += 1
        if is_sms_like(e, heur):
            rep.removed_sms_like += 1
        elif comp_re is not None and comp_re.search(e.body_text) and not org_re.search(e.body_text):
            rep.removed_other_org += 1
        else:
            rep.retained += 1
            kept.append(e)
    return kept, rep


def read_competitors(path: str | Path) -> list[str]:
    return [
        line.strip()
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.lstrip().startswith("#")
    ]


# -- canonical corpus IO -------------------------------------------------------------


def write_corpus(emails: Iterable[Email], path: str | Path) -> int:
    n = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for e in emails:
            fh.write(json.dumps(e.to_json(), ensure_ascii=False, sort_keys=True))
            fh.write("\n")
            n += 1
    return n


def read_corpus(path: str | Path) -> list[Email]:
    with Path(path).open("r", encoding="utf-8") as fh:
        return [Email.from_json(json.loads(line)) for line in fh if line.strip()]
