from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, strategies as st

from phishtriage import dedup
from phishtriage.app.synth import dedup_corpus
from phishtriage.corpus import Email
from phishtriage.textproc import TokenDoc, cosine, tf_vector

from oracles import brute_components

vocab = st.sampled_from(list("abcdefgh"))
doc_lists = st.lists(st.lists(vocab, max_size=8), min_size=1, max_size=12)


def _vecs(token_lists):
    return [tf_vector(TokenDoc(f"d{i}", tuple(t))) for i, t in enumerate(token_lists)]


def test_identical_docs_score_one():
    m = dedup.similarity_matrix(_vecs([["a", "b"], ["a", "b"]]))
    assert m.get(0, 1) == pytest.approx(1.0)


def test_disjoint_docs_give_identity():
    m = dedup.similarity_matrix(_vecs([["a"], ["b"], ["c"]]))
    assert np.array_equal(m.dense(), np.eye(3))


@given(doc_lists, st.integers(1, 5))
def test_sparse_blocks_match_dense_pairwise(token_lists, block):
    vecs = _vecs(token_lists)
    m = dedup.similarity_matrix(vecs, floor=0.0, block=block)
    brute = np.array([[cosine(a, b) for b in vecs] for a in vecs])
    D = m.dense()
    for i, v in enumerate(vecs):
        if not v.weights:
            brute[i, i] = 0.0
    assert np.allclose(D, brute, atol=1e-12)
    assert np.array_equal(D, D.T)


def test_ten_doc_fixture_matches_dense_oracle():
    c = dedup_corpus(10, 3, 0.2, seed=4)
    D = dedup.similarity_matrix(c.docs, floor=0.0).dense()
    assert np.allclose(D, dedup.pairwise_dense(c.docs), atol=1e-12)
    assert np.allclose(np.diag(D), 1.0)


def test_floor_drops_weak_scores():
    m = dedup.similarity_matrix(_vecs([["a"] * 30 + ["b"], ["b"] + ["c"] * 30]))
    assert m.get(0, 1) == 0.0


def _matrix_from(S):
    from scipy import sparse

    return dedup.SimilarityMatrix([f"x{i}" for i in range(len(S))], sparse.csr_matrix(np.asarray(S, float)), 0.05)


def test_chain_forms_one_component():
    S = [[1, 0.9, 0.1], [0.9, 1, 0.9], [0.1, 0.9, 1]]
    ids = dedup.assign_duplicate_ids(_matrix_from(S), 0.8)
    assert len(set(ids.values())) == 1


def test_threshold_one_merges_only_exact_direction():
    S = [[1, 1.0, 0.999], [1.0, 1, 0.999], [0.999, 0.999, 1]]
    ids = dedup.assign_duplicate_ids(_matrix_from(S), 1.0)
    assert ids["x0"] == ids["x1"] != ids["x2"]


def test_threshold_below_floor_rejected():
    with pytest.raises(ValueError):
        dedup.assign_duplicate_ids(_matrix_from([[1]]), 0.01)


def test_ids_ordered_by_earliest_timestamp():
    S = np.eye(3)
    ids = dedup.assign_duplicate_ids(_matrix_from(S), 0.5, {"x0": 30.0, "x1": 10.0, "x2": None})
    assert ids == {"x1": 0, "x0": 1, "x2": 2}


def test_300_docs_match_brute_force_union():
    c = dedup_corpus(300, 60, 0.05, seed=2)
    m = dedup.similarity_matrix(c.docs)
    D = dedup.pairwise_dense(c.docs)
    for t in (0.3, 0.6, 0.9):
        ids = dedup.assign_duplicate_ids(m, t)
        iu, ju = np.nonzero(np.triu(D >= t - 1e-9, 1))
        ref = brute_components(len(c.docs), zip(iu, ju))
        got = [ids[v.email_id] for v in c.docs]
        # same partition: labels are a bijective relabelling of each other
        pairs = set(zip(got, ref))
        assert len(pairs) == len(set(got)) == len(set(ref))


@given(st.lists(st.floats(0.05, 1.0), min_size=3, max_size=3), st.floats(0.05, 0.95), st.floats(0.0, 0.05))
def test_partition_and_monotone_in_threshold(upper, t, dt):
    S = np.eye(3)
    S[0, 1] = S[1, 0] = upper[0]
    S[0, 2] = S[2, 0] = upper[1]
    S[1, 2] = S[2, 1] = upper[2]
    lo = dedup.assign_duplicate_ids(_matrix_from(S), t)
    hi = dedup.assign_duplicate_ids(_matrix_from(S), t + dt)
    assert set(lo) == {"x0", "x1", "x2"}
    for a in lo:
        for b in lo:
            if lo[a] != lo[b]:
                assert hi[a] != hi[b]


def _separable():
    docs, labeled = [], []
    for f in range(6):
        base = [f"f{f}w{k}" for k in range(40)]
        for j in range(5):
            toks = base + [f"n{f}_{j}"]  # one private token per member: cosine ~0.976
            eid = f"s{f}_{j}"
            docs.append(tf_vector(TokenDoc(eid, tuple(toks))))
            labeled.append((eid, f))
    return docs, labeled


def test_separable_set_perfect_at_choice():
    docs, labeled = _separable()
    t = dedup.tune_threshold(labeled, docs, bootstrap_n=200, sample_size=30, seed=1)
    assert 0.0 < t.chosen_threshold <= 0.97
    assert t.sensitivity == 1.0 and t.specificity == 1.0
    sens, spec = np.array(t.sensitivity_mean), np.array(t.specificity_mean)
    assert np.all(np.diff(sens) <= 1e-12) and np.all(np.diff(spec) >= -1e-12)


def test_tuning_reproducible():
    c = dedup_corpus(120, 30, 0.05, seed=5)
    a = dedup.tune_threshold(c.labeled, c.docs, 300, 100, seed=9)
    b = dedup.tune_threshold(c.labeled, c.docs, 300, 100, seed=9)
    assert a.to_json() == b.to_json()


def test_tuning_errors():
    docs, labeled = _separable()
    with pytest.raises(dedup.TuningError, match="single class"):
        dedup.tune_threshold([(i, 0) for i, _ in labeled], docs, 10, 10)
    singles = [(i, k) for k, (i, _) in enumerate(labeled)]
    with pytest.raises(dedup.TuningError, match="no duplicate pairs"):
        dedup.tune_threshold(singles, docs, 10, 10)
    with pytest.raises(dedup.TuningError):
        dedup.tune_threshold(labeled, docs, 10, 10_000)


def test_pick_intersection_prefers_higher_on_tie():
    grid = np.array([0.1, 0.2, 0.3])
    assert dedup.pick_intersection(grid, np.array([1.0, 0.8, 0.6]), np.array([0.6, 0.8, 1.0])) == 0.2
    assert dedup.pick_intersection(grid, np.array([0.9, 0.9, 0.5]), np.array([0.9, 0.9, 1.0])) == 0.2


def test_intra_family_cosine_exceeds_inter_family():
    c = dedup_corpus(300, 60, 0.05, seed=0)
    D = dedup.pairwise_dense(c.docs)
    fam = np.array([g for _, g in c.labeled])
    same = fam[:, None] == fam[None, :]
    off = ~np.eye(len(fam), dtype=bool)
    assert D[same & off].mean() > D[~same].mean()


@pytest.mark.parametrize("days,cls", [(0.0, dedup.SINGLE_DAY), (52.1, dedup.SHORT), (150.6, dedup.LONG)])
def test_duration_classes(days, cls):
    t0 = datetime(2020, 2, 1, tzinfo=timezone.utc)
    es = [Email.build("a", "x@y.z", "u@v.w", t0, "s", "b", duplicate_id=0),
          Email.build("b", "x@y.z", "u@v.w", t0 + timedelta(days=days), "s", "b", duplicate_id=0)]
    (c,) = dedup.campaigns(es)
    assert c.duration_class == cls and c.samples == 2 and c.duration_days == pytest.approx(days)


def test_campaigns_require_duplicate_ids():
    with pytest.raises(ValueError):
        dedup.campaigns([Email.build("a", "x@y.z", "u@v.w", None, "s", "b")])


def test_similarity_labels_reader(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("email_id,similarity_group_id\na,1\nb,1\nc,2\n")
    assert dedup.read_similarity_labels(p) == [("a", "1"), ("b", "1"), ("c", "2")]
