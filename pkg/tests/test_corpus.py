import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptclip.corpus import (CategoryMap, DatasetError, IrmaRecord, PairRecord, RetrievalLabel,
                               caption_length_stats, default_category_map, derive_retrieval_labels,
                               irma_relevance, load_dataset, load_image_features, parse_irma_code,
                               write_dataset)
from promptclip.synthetic import length_controlled_captions


def test_load_preserves_order(roco_jsonl):
    recs = load_dataset(roco_jsonl, "rocov2-jsonl")
    assert [r.id for r in recs] == ["a", "b", "c"]
    assert recs[1].split == "valid"


def test_semantic_type_passthrough(roco_jsonl):
    rec = load_dataset(roco_jsonl)[0]
    assert rec.semantic_types["C0024109"] == "T023"
    assert "C0024109" in rec.cuis


def test_missing_caption_names_line(tmp_path):
    p = tmp_path / "d.jsonl"
    good = {"id": "a", "image_ref": [1], "caption": "x", "cuis": [], "semantic_types": {}, "split": "train"}
    bad = dict(good, id="b")
    del bad["caption"]
    p.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(DatasetError, match="missing field caption at line 2"):
        load_dataset(p)


def test_duplicate_id_named(tmp_path):
    p = tmp_path / "d.jsonl"
    row = {"id": "dup", "image_ref": [1], "caption": "x", "cuis": [], "semantic_types": {}, "split": "train"}
    p.write_text(json.dumps(row) + "\n" + json.dumps(row) + "\n")
    with pytest.raises(DatasetError, match="dup"):
        load_dataset(p)


def test_malformed_json_line(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text("{not json}\n")
    with pytest.raises(DatasetError, match="line 1"):
        load_dataset(p)


def test_semantic_type_keys_must_be_cuis(tmp_path):
    p = tmp_path / "d.jsonl"
    row = {"id": "a", "image_ref": [1], "caption": "x", "cuis": ["C1"], "semantic_types": {"C2": "T023"},
           "split": "train"}
    p.write_text(json.dumps(row) + "\n")
    with pytest.raises(DatasetError, match="line 1"):
        load_dataset(p)


def test_split_from_path_convention(tmp_path):
    p = tmp_path / "rocov2_test.jsonl"
    row = {"id": "a", "image_ref": [1], "caption": "x", "cuis": [], "semantic_types": {}}
    p.write_text(json.dumps(row) + "\n")
    assert load_dataset(p)[0].split == "test"


def test_irma_tsv(irma_tsv):
    recs = load_dataset(irma_tsv, "irma-tsv")
    assert [r.id for r in recs] == ["x1", "x2", "x3"]
    assert recs[0].image_ref == (0.1, 0.2)
    assert recs[0].axis("anatomy") == "700"


def test_image_ref_paths(tmp_path):
    np.save(tmp_path / "f.npy", np.arange(4.0))
    (tmp_path / "f.json").write_text("[1, 2]")
    assert load_image_features("f.npy", tmp_path).tolist() == [0, 1, 2, 3]
    assert load_image_features("f.json", tmp_path).tolist() == [1, 2]
    with pytest.raises(DatasetError):
        load_image_features("img.png", tmp_path)


# -- IRMA -------------------------------------------------------------------

CODE = "1121-127-700-500"


def _irma(code, rid="q"):
    return IrmaRecord(rid, (0.0,), code)


def test_irma_identical_codes():
    assert irma_relevance(_irma(CODE), _irma(CODE))


def test_irma_direction_only_difference():
    assert irma_relevance(_irma(CODE), _irma("1121-230-700-500"))


def test_irma_anatomy_difference():
    assert not irma_relevance(_irma(CODE), _irma("1121-127-710-500"))


def test_irma_depth_and_flat_codes():
    assert parse_irma_code("1121127700500") == "1121127700500"
    assert irma_relevance(_irma(CODE), _irma("1121-127-710-500"), depth=1)


@pytest.mark.parametrize("bad", ["1121-127-700", "1121-127-70-5000", "11211277005", "1121-127-7!0-500"])
def test_irma_malformed(bad):
    with pytest.raises(DatasetError):
        parse_irma_code(bad)


irma_codes = st.text(alphabet="0123456789ab", min_size=13, max_size=13)


@given(irma_codes, irma_codes, irma_codes)
def test_irma_equivalence_relation(a, b, c):
    ra, rb, rc = _irma(a), _irma(b), _irma(c)
    assert irma_relevance(ra, ra)
    assert irma_relevance(ra, rb) == irma_relevance(rb, ra)
    if irma_relevance(ra, rb) and irma_relevance(rb, rc):
        assert irma_relevance(ra, rc)


# -- labels -----------------------------------------------------------------

MOD = CategoryMap("T060", {"US": 0, "XR": 1, "CT": 2}, ["ultrasound", "x-ray", "ct"])
ORG = CategoryMap("T023", {"LUNG": 0, "LIVER": 1, "TOOTH": 2}, ["lung", "liver", "teeth"])


def _rec(rid, types):
    return PairRecord(rid, (0.0,), "c", frozenset(types), types)


def test_single_modality_mapping():
    report = derive_retrieval_labels([_rec("r", {"US": "T060"})], MOD, ORG)
    assert report.labels == [RetrievalLabel("r", modality=0, organ=None)]


def test_two_organ_classes_is_ambiguous():
    report = derive_retrieval_labels([_rec("r", {"LUNG": "T023", "LIVER": "T023"})], MOD, ORG)
    assert report.labels[0].organ is None
    assert report.ambiguous["organ"] == 1


def test_four_record_fixture_by_hand():
    recs = [
        _rec("r1", {"CT": "T060", "LUNG": "T023"}),          # ct / lung
        _rec("r2", {"US": "T060", "XR": "T060", "LIVER": "T023"}),  # ambiguous modality / liver
        _rec("r3", {"TOOTH": "T023", "OTHER": "T047"}),       # - / teeth
        _rec("r4", {"XR": "T060", "CT": "T999"}),             # CT listed under another type -> x-ray only
    ]
    report = derive_retrieval_labels(recs, MOD, ORG)
    assert report.labels == [
        RetrievalLabel("r1", 2, 0),
        RetrievalLabel("r2", None, 1),
        RetrievalLabel("r3", None, 2),
        RetrievalLabel("r4", 1, None),
    ]
    assert report.ambiguous == {"modality": 1, "organ": 0}


def test_label_semantic_type_preconditions():
    with pytest.raises(ValueError):
        derive_retrieval_labels([], ORG, ORG)


def test_category_map_range_checked():
    with pytest.raises(ValueError):
        CategoryMap("T060", {"x": 3}, ["a"])


def test_bundled_map_class_counts():
    assert len(default_category_map("modality").class_names) == 5
    assert len(default_category_map("organ").class_names) == 10


@settings(max_examples=50)
@given(st.permutations(range(4)))
def test_labels_idempotent_and_order_free(perm):
    recs = [
        _rec("r1", {"CT": "T060", "LUNG": "T023"}),
        _rec("r2", {"US": "T060", "XR": "T060"}),
        _rec("r3", {"TOOTH": "T023"}),
        _rec("r4", {"XR": "T060", "LIVER": "T023", "LUNG": "T023"}),
    ]
    base = {lab.record_id: lab for lab in derive_retrieval_labels(recs, MOD, ORG).labels}
    shuffled = derive_retrieval_labels([recs[i] for i in perm], MOD, ORG).labels
    assert {lab.record_id: lab for lab in shuffled} == base
    assert derive_retrieval_labels(recs, MOD, ORG).labels == derive_retrieval_labels(recs, MOD, ORG).labels


# -- round trip ---------------------------------------------------------------

record_st = st.builds(
    lambda i, cap, cuis, feats, split: PairRecord(
        f"id{i}", tuple(feats), cap, frozenset(cuis), {c: "T023" for c in sorted(cuis)[:1]}, split),
    st.integers(0, 10**6),
    st.text(min_size=1).filter(lambda s: s.strip() != ""),
    st.sets(st.from_regex(r"C\d{7}", fullmatch=True), max_size=4),
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=5),
    st.sampled_from(["train", "valid", "test"]),
)


@settings(max_examples=40, deadline=None)
@given(st.lists(record_st, max_size=6, unique_by=lambda r: r.id))
def test_write_read_identity(tmp_path_factory, records):
    path = tmp_path_factory.mktemp("rt") / "d.jsonl"
    write_dataset(records, path)
    assert load_dataset(path) == records


def test_irma_write_read_identity(irma_tsv, tmp_path):
    recs = load_dataset(irma_tsv, "irma-tsv")
    write_dataset(recs, tmp_path / "out.tsv")
    assert load_dataset(tmp_path / "out.tsv", "irma-tsv") == recs


# -- caption stats ------------------------------------------------------------

def _caps(lengths):
    return [PairRecord(f"r{i}", (0.0,), c) for i, c in enumerate(length_controlled_captions(lengths))]


def test_stats_two_captions():
    s = caption_length_stats(_caps([10, 20]), limits=[15])
    assert s.mean == 15.0
    assert s.exceedance == {15: 0.5}


def test_stats_short_captions_zero_exceedance():
    s = caption_length_stats(_caps([5] * 4))
    assert s.exceedance == {77: 0.0, 512: 0.0}


def test_stats_constructed_corpus_round_trip():
    # 1000 captions: 44 of length 100 (4.4% over 77), 832 of 29 and 124 of 28 -> mean exactly 32
    lengths = [100] * 44 + [29] * 832 + [28] * 124
    s = caption_length_stats(_caps(lengths))
    assert s.mean == pytest.approx(32.0, abs=1e-12)
    assert s.exceedance[77] == pytest.approx(0.044, abs=1e-12)
    assert s.exceedance[512] == 0.0
    assert s.counts.sum() == 1000


def test_stats_empty_raises():
    with pytest.raises(ValueError):
        caption_length_stats([])


@given(st.lists(st.integers(1, 60), min_size=1, max_size=30), st.integers(0, 60), st.integers(0, 60))
@settings(max_examples=50, deadline=None)
def test_exceedance_monotone(lengths, a, b):
    lo, hi = sorted((a, b))
    s = caption_length_stats(_caps(lengths), limits=[lo, hi])
    assert s.exceedance[lo] >= s.exceedance[hi]
