import json
import mailbox
from datetime import datetime, timezone
from email.message import EmailMessage
from email.utils import format_datetime

import pytest
from hypothesis import given, strategies as st

from phishtriage import corpus
from phishtriage.corpus import Email, RawMessage, SmsHeuristics


def _msg(frm, to, date, subject, body):
    m = EmailMessage()
    m["From"], m["To"], m["Subject"] = frm, to, subject
    if date:
        m["Date"] = date
    m.set_content(body)
    return m


def _attach(outer: EmailMessage, inner: EmailMessage) -> EmailMessage:
    outer.add_attachment(inner)  # wrapped as a message/rfc822 part
    return outer


LONG_BODY = "Your org account is on hold. Verify now at http://evil.example/x please. " * 4


def _forwarded_twice():
    original = _msg("Bank <alerts@0rg.com>", "victim@mail.example", "Mon, 03 Feb 2020 09:15:00 +0000",
                    "Account locked", LONG_BODY)
    mid = _attach(_msg("victim@mail.example", "helpdesk@org.com", "Tue, 04 Feb 2020 10:00:00 +0000",
                       "FW: Account locked", "see attached"), original)
    outer = _attach(_msg("helpdesk@org.com", "phishing@org.com", "Tue, 04 Feb 2020 11:00:00 +0000",
                         "FW: FW: Account locked", "forwarding"), mid)
    return outer


def test_forwarded_twice_recovers_innermost():
    e = corpus.recover_original_headers(RawMessage("m1", "-", bytes(_forwarded_twice())))
    assert e.from_addr == "alerts@0rg.com"
    assert e.from_domain == "0rg.com"
    assert e.subject == "Account locked"
    assert e.date == datetime(2020, 2, 3, 9, 15, tzinfo=timezone.utc)
    assert e.header_depth == 2
    assert e.body_length == len(e.body_text)


def test_direct_message_keeps_own_headers():
    m = _msg("a@x.com", "b@y.com", "Wed, 05 Feb 2020 08:00:00 +0100", "Hi", LONG_BODY)
    e = corpus.recover_original_headers(RawMessage("d", "-", bytes(m)))
    assert (e.from_addr, e.to_addr, e.subject, e.header_depth) == ("a@x.com", "b@y.com", "Hi", 0)
    assert e.date == datetime(2020, 2, 5, 7, 0, tzinfo=timezone.utc)


def test_inner_without_date_falls_back_to_next_outer():
    inner = _msg("bad@0rg.com", "victim@mail.example", None, "No date here", LONG_BODY)
    outer = _attach(_msg("victim@mail.example", "helpdesk@org.com", "Tue, 04 Feb 2020 10:00:00 +0000",
                         "FW: No date here", "look at this"), inner)
    e = corpus.recover_original_headers(RawMessage("f", "-", bytes(outer)))
    # hand-parsed expectation: the outer block is the deepest one carrying all four headers
    assert (e.from_addr, e.subject, e.header_depth) == ("victim@mail.example", "FW: No date here", 0)


def test_quoted_forward_in_dutch():
    body = ("Zie hieronder.\n\n"
            "Van: Org Klantenservice <service@org-klant.nl>\n"
            "Verzonden: maandag 3 februari 2020 14:05\n"
            "Aan: jan@mail.example\n"
            "Onderwerp: Uw pas verloopt\n\n" + LONG_BODY)
    m = _msg("jan@mail.example", "phishing@org.com", "Tue, 04 Feb 2020 10:00:00 +0000", "FW", body)
    e = corpus.recover_original_headers(RawMessage("nl", "-", bytes(m)))
    assert e.from_domain == "org-klant.nl"
    assert e.subject == "Uw pas verloopt"
    assert e.date == datetime(2020, 2, 3, 14, 5, tzinfo=timezone.utc)
    assert e.header_depth == 1 and e.to_addr == "jan@mail.example"
    assert e.body_text.startswith("Your org account")


def test_recovery_is_idempotent_on_its_output():
    e = corpus.recover_original_headers(RawMessage("m1", "-", bytes(_forwarded_twice())))
    again = _msg(e.from_addr, e.to_addr, format_datetime(e.date), e.subject, e.body_text)
    e2 = corpus.recover_original_headers(RawMessage("m1", "-", bytes(again)))
    assert (e2.from_addr, e2.to_addr, e2.date, e2.subject, e2.body_text) == \
        (e.from_addr, e.to_addr, e.date, e.subject, e.body_text)


@pytest.mark.parametrize("text,want", [
    ("Mon, 03 Feb 2020 09:15:00 +0100", datetime(2020, 2, 3, 8, 15, tzinfo=timezone.utc)),
    ("Monday, February 3, 2020 9:15 PM", datetime(2020, 2, 3, 21, 15, tzinfo=timezone.utc)),
    ("3 februari 2020 14:05", datetime(2020, 2, 3, 14, 5, tzinfo=timezone.utc)),
    ("2020-02-03T09:15:00Z", datetime(2020, 2, 3, 9, 15, tzinfo=timezone.utc)),
    ("03-02-2020 09:15", datetime(2020, 2, 3, 9, 15, tzinfo=timezone.utc)),
    ("not a date", None),
    ("", None),
])
def test_parse_date(text, want):
    assert corpus.parse_date(text) == want


def test_unparseable_date_keeps_email():
    # written by hand: the stdlib generator refuses to serialize an invalid Date
    raw = ("From: a@x.com\nTo: b@y.com\nSubject: Hi\nDate: sometime soon\n\n" + LONG_BODY).encode()
    e = corpus.recover_original_headers(RawMessage("d", "-", raw))
    assert e.date is None and e.timestamp is None


def test_ingest_eml_dir(tmp_path):
    for i in range(3):
        (tmp_path / f"m{i}.eml").write_bytes(bytes(_msg("a@x.com", "b@y.com", None, f"s{i}", LONG_BODY)))
    st_ = corpus.IngestStats()
    got = list(corpus.ingest(tmp_path, "eml-dir", st_))
    assert [m.id for m in got] == ["m0", "m1", "m2"] and st_.read == 3


def test_ingest_empty_dir(tmp_path):
    assert list(corpus.ingest(tmp_path, "eml-dir")) == []


def test_ingest_jsonl_skips_malformed(tmp_path):
    p = tmp_path / "in.jsonl"
    lines = [json.dumps({"id": f"r{i}", "raw": bytes(_msg("a@x.com", "b@y.com", None, "s", "x")).decode(),
                         "received_at": 1.0 * i}) for i in range(9)]
    lines.insert(4, "{not json")
    p.write_text("\n".join(lines) + "\n")
    st_ = corpus.IngestStats()
    got = list(corpus.ingest(p, "jsonl", st_))
    assert len(got) == 9 and st_.malformed == 1 and len(st_.warnings) == 1
    assert [m.id for m in got] == [m.id for m in corpus.ingest(p, "jsonl")]


def test_ingest_mbox(tmp_path):
    box = mailbox.mbox(str(tmp_path / "box"))
    for i in range(4):
        box.add(_msg("a@x.com", "b@y.com", "Mon, 03 Feb 2020 09:15:00 +0000", f"s{i}", LONG_BODY))
    box.flush()
    box.close()
    got = list(corpus.ingest(tmp_path / "box", "mbox"))
    assert len(got) == 4 and got[0].received_at is not None


def test_ingest_rejects_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        list(corpus.ingest(tmp_path, "pst"))


def _email(i, body, depth=1):
    return Email.build(f"e{i}", "x@a.com", "u@b.com", None, "s", body, header_depth=depth)


def test_sanitize_examples():
    sms = _email(0, "x" * 160, depth=0)
    rival = _email(1, "Dear RivalBank customer, " + "pad " * 60)
    ours = _email(2, "Dear ORG customer, also rivalbank " + "pad " * 60)
    kept, rep = corpus.sanitize([sms, rival, ours], "org", ["rivalbank"])
    assert [e.id for e in kept] == ["e2"]
    assert (rep.removed_sms_like, rep.removed_other_org, rep.retained, rep.total_in) == (1, 1, 1, 3)


def test_short_forward_with_headers_is_not_sms():
    kept, rep = corpus.sanitize([_email(0, "short", depth=1)], "org")
    assert rep.retained == 1


def test_competitor_match_is_whole_word():
    kept, _ = corpus.sanitize([_email(0, "the rivalbanking sector " + "pad " * 60)], "org", ["rivalbank"])
    assert len(kept) == 1


bodies = st.sampled_from(["x" * 50, "org " * 60, "rivalbank " * 60, "hello " * 60, "rivalbank org " * 30])


@given(st.lists(st.tuples(bodies, st.integers(0, 1)), max_size=20), st.randoms())
def test_sanitize_balances_and_is_order_independent(items, rnd):
    emails = [_email(i, b, d) for i, (b, d) in enumerate(items)]
    kept, rep = corpus.sanitize(emails, "org", ["rivalbank"])
    assert rep.total_in == rep.removed_sms_like + rep.removed_other_org + rep.retained == len(emails)
    shuffled = list(emails)
    rnd.shuffle(shuffled)
    kept2, rep2 = corpus.sanitize(shuffled, "org", ["rivalbank"])
    assert vars(rep2) == vars(rep)
    assert sorted(e.id for e in kept2) == sorted(e.id for e in kept)


def test_report_merge_is_associative():
    a, b, c = (corpus.SanitizationReport(i, i, 0, 0) for i in (1, 2, 3))
    assert vars(a.merge(b).merge(c)) == vars(a.merge(b.merge(c)))


def test_corpus_roundtrip(tmp_path):
    e = Email.build("z", "A@X.COM", "b@y.com", datetime(2020, 1, 2, 3, 4, 5, tzinfo=timezone.utc), "s", "body",
                    suspicious=True, duplicate_id=7)
    assert e.from_domain == "x.com"
    corpus.write_corpus([e], tmp_path / "c.jsonl")
    line = (tmp_path / "c.jsonl").read_text()
    assert '"date": "2020-01-02T03:04:05Z"' in line
    assert corpus.read_corpus(tmp_path / "c.jsonl") == [e]


def test_raw_message_must_not_be_empty():
    with pytest.raises(ValueError):
        RawMessage("x", "-", b"")


def test_sms_heuristic_threshold_configurable():
    e = _email(0, "y" * 250, depth=0)
    assert not corpus.is_sms_like(e, SmsHeuristics())
    assert corpus.is_sms_like(e, SmsHeuristics(300))
