import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdssl.cohort import (
    DatasetManifest,
    FilterReport,
    ManifestError,
    StudyRoles,
    SubjectRecord,
    build_splits,
    filter_cohort,
    load_manifest,
    manifest_stats,
    save_manifest,
)


def _rec(i, study="ADNI", **kw):
    base = dict(
        subject_id=f"s{i:04d}",
        study=study,
        image_ref=f"vol/{i}.vol",
        cdr_sb_baseline=1.0,
        cdr_sb_month12=(i * 7 % 19) * 0.5 % 18,
        mmse=26,
        amyloid_positive=True,
        stage="prodromal",
    )
    base.update(kw)
    return SubjectRecord(**base)


def _write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))


def _obj(i, **kw):
    o = dict(
        subject_id=f"s{i}", study="ADNI", image_ref=f"{i}.vol", cdr_sb_baseline=1.0,
        cdr_sb_month12=2.0, mmse=25, amyloid_positive=True, stage="mild",
    )
    o.update(kw)
    return o


def test_load_three_records(tmp_path):
    p = tmp_path / "m.jsonl"
    _write_lines(p, [_obj(i) for i in range(3)])
    assert len(load_manifest(p).records) == 3


def test_load_nulls_allowed(tmp_path):
    p = tmp_path / "m.jsonl"
    _write_lines(p, [_obj(0, cdr_sb_month12=None, mmse=None, amyloid_positive=None, stage=None)])
    rec = load_manifest(p).records[0]
    assert rec.cdr_sb_month12 is None and rec.stage is None


def test_out_of_range_label_names_field_and_line(tmp_path):
    p = tmp_path / "m.jsonl"
    _write_lines(p, [_obj(0), _obj(1, cdr_sb_month12=19)])
    with pytest.raises(ManifestError, match=r":2: cdr_sb_month12"):
        load_manifest(p)


def test_duplicate_ids_listed(tmp_path):
    p = tmp_path / "m.jsonl"
    _write_lines(p, [_obj(0), _obj(1), {**_obj(0), "image_ref": "x"}])
    with pytest.raises(ManifestError, match="s0"):
        load_manifest(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope.jsonl")


@pytest.mark.parametrize(
    "patch, needle",
    [({"mmse": 31}, "mmse"), ({"stage": "severe"}, "stage"), ({"bogus": 1}, "bogus"), ({"amyloid_positive": 1}, "amyloid")],
)
def test_schema_violations(tmp_path, patch, needle):
    p = tmp_path / "m.jsonl"
    _write_lines(p, [_obj(0, **patch)])
    with pytest.raises(ManifestError, match=needle):
        load_manifest(p)


def test_roundtrip_with_roles(tmp_path):
    m = DatasetManifest([_rec(i) for i in range(5)], {"ADNI": StudyRoles(ssl=True, finetune=True, in_study_test=True)})
    save_manifest(m, tmp_path / "m.jsonl")
    back = load_manifest(tmp_path / "m.jsonl")
    assert back.records == m.records
    assert back.study_roles == m.study_roles


def test_out_study_roles_exclusive():
    with pytest.raises(ManifestError):
        DatasetManifest([], {"ABBY": StudyRoles(ssl=True, out_study_test=True)})


def test_filter_rules():
    keep = _rec(0, mmse=21, stage="prodromal")
    border = _rec(1, mmse=20, stage="mild")
    missing = _rec(2, mmse=None)
    neg = _rec(3, amyloid_positive=False)
    other = _rec(4, stage="other")
    rep = FilterReport()
    out = filter_cohort(DatasetManifest([keep, border, missing, neg, other]), rep)
    assert [r.subject_id for r in out.records] == ["s0000"]
    assert rep.excluded_missing == 1 and rep.excluded_criteria == 3 and rep.kept == 1


def test_filter_idempotent():
    m = DatasetManifest([_rec(i, mmse=18 + i % 6, stage=("mild", "other", None)[i % 3]) for i in range(30)])
    once = filter_cohort(m)
    assert filter_cohort(once).records == once.records


def _split_manifest(n_ssl=100, n_ft=100, n_out=10):
    recs = [_rec(i, study="HABS", cdr_sb_month12=None) for i in range(n_ssl)]
    recs += [_rec(1000 + i, study="ADNI" if i % 2 else "CREAD") for i in range(n_ft)]
    recs += [_rec(5000 + i, study="ABBY") for i in range(n_out)]
    roles = {
        "HABS": StudyRoles(ssl=True),
        "ADNI": StudyRoles(ssl=True, finetune=True, in_study_test=True),
        "CREAD": StudyRoles(ssl=True, finetune=True, in_study_test=True),
        "ABBY": StudyRoles(out_study_test=True),
    }
    return DatasetManifest(recs, roles)


def test_split_proportions():
    s = build_splits(_split_manifest(), seed=0)
    assert (len(s.ssl_train), len(s.ssl_val)) == (90, 10)
    assert len(s.ft_test_in_study) == 30
    assert sorted(len(v) for _, v in s.ft_folds) == [23, 23, 24]
    assert len(s.ft_test_out_study["ABBY"]) == 10


def test_split_disjoint_and_cover():
    m = _split_manifest()
    s = build_splits(m, seed=5)
    vals = [set(v) for _, v in s.ft_folds]
    test = set(s.ft_test_in_study)
    pool = {r.subject_id for r in m.records if r.study in ("ADNI", "CREAD")}
    assert set().union(*vals) == pool - test
    for i in range(3):
        assert not vals[i] & test
        train, val = s.ft_folds[i]
        assert not set(train) & set(val)
        assert set(train) | set(val) == pool - test
        for j in range(i + 1, 3):
            assert not vals[i] & vals[j]
    assert not (set(s.ssl_train) | set(s.ssl_val)) & pool
    assert not set(s.ssl_train) & set(s.ssl_val)


def test_split_deterministic_and_json_roundtrip():
    m = _split_manifest()
    a, b = build_splits(m, seed=3), build_splits(m, seed=3)
    assert a == b
    assert type(a).from_json(a.to_json()) == a
    assert build_splits(m, seed=4) != a


def test_small_strata_degrade(caplog):
    s = build_splits(_split_manifest(n_ft=8), seed=0)
    assert s.stratification == "study"
    assert "study only" in caplog.text


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 60), st.integers(6, 80), st.integers(0, 10_000))
def test_split_invariants_property(n_ssl, n_ft, seed):
    m = _split_manifest(n_ssl, n_ft, 3)
    s = build_splits(m, seed=seed)
    n_pool = n_ft
    assert len(s.ft_test_in_study) == int(0.3 * n_pool)
    sizes = [len(v) for _, v in s.ft_folds]
    assert max(sizes) - min(sizes) <= 1
    assert sum(sizes) + len(s.ft_test_in_study) == n_pool
    total_ssl = n_ssl
    assert len(s.ssl_train) + len(s.ssl_val) == total_ssl
    assert abs(len(s.ssl_train) - 0.9 * total_ssl) <= 1
    assert build_splits(m, seed=seed) == s


def test_manifest_stats():
    assert manifest_stats(DatasetManifest([]))["slices"] == {"center": 0, "five": 0}
    m = DatasetManifest([_rec(i, study="A") for i in range(3)] + [_rec(10 + i, study="B") for i in range(3)])
    st_ = manifest_stats(m)
    assert st_["per_study"] == {"A": 3, "B": 3}
    assert st_["total_subjects"] == 6
    assert st_["slices"]["five"] == 5 * st_["slices"]["center"]


def test_paper_scale_slice_count():
    # 43,740 center-slice entries correspond to 218,700 five-slice images
    m = DatasetManifest([SubjectRecord(f"x{i}", "S", "r", 0.0) for i in range(43_740)])
    assert manifest_stats(m)["slices"] == {"center": 43_740, "five": 218_700}
