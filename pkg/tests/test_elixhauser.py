"""Comorbidity scoring against the bundled ICD-10 prefix map."""

import csv
from importlib import resources

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histcontrol.elixhauser import (
    elixhauser,
    elixhauser_category,
    elixhauser_groups,
    elixhauser_map_checksum,
    load_elixhauser_map,
)


def _raw_rows():
    text = (
        resources.files("histcontrol.data")
        .joinpath("elixhauser_icd10.csv")
        .read_text(encoding="utf-8")
    )
    return list(csv.DictReader(text.splitlines()))


def test_map_shape():
    table = load_elixhauser_map()
    assert len(table) == 31
    rows = _raw_rows()
    assert {r["group"] for r in rows} == set(table)


def test_every_prefix_maps_back_to_its_group():
    # independent rescan of the raw CSV as the oracle
    for row in _raw_rows():
        code = row["icd10_prefix"] + "9" * max(0, 3 - len(row["icd10_prefix"][1:]))
        groups = elixhauser_groups([row["icd10_prefix"] + "0"])
        assert row["group"] in groups, (row, code)


def test_counts_and_categories():
    assert elixhauser([]) == (0, "0")
    count, cat = elixhauser(["I10"])  # hypertension, uncomplicated
    assert count == 1 and cat == "1-4"
    assert elixhauser_category(0) == "0"
    assert elixhauser_category(4) == "1-4"
    assert elixhauser_category(5) == ">=5"


def test_duplicate_group_counted_once():
    rows = _raw_rows()
    prefixes = [r["icd10_prefix"] for r in rows if r["group"] == rows[0]["group"]]
    codes = [p + "0" for p in prefixes] + [prefixes[0] + "1"]
    count, _ = elixhauser(codes)
    assert count >= 1
    only_one_group = elixhauser_groups([prefixes[0] + "0"])
    if len(only_one_group) == 1:
        assert elixhauser([prefixes[0] + "0", prefixes[0] + "5"])[0] == 1


def test_unmatched_codes_contribute_nothing():
    assert elixhauser(["Z511", "A000"])[0] == elixhauser(["Z511", "A000", "Z999"])[0]


@settings(max_examples=40, deadline=None)
@given(
    st.lists(
        st.sampled_from([r["icd10_prefix"] + "0" for r in _raw_rows()] + ["Z511"]),
        max_size=12,
    ),
    st.sampled_from([r["icd10_prefix"] + "0" for r in _raw_rows()]),
)
def test_monotone_in_code_set(codes, extra):
    base_count, _ = elixhauser(codes)
    grown_count, _ = elixhauser(codes + [extra])
    assert grown_count >= base_count
    assert grown_count <= base_count + len(elixhauser_groups([extra]))


def test_checksum_is_stable_sha256():
    digest = elixhauser_map_checksum()
    assert len(digest) == 64
    assert digest == elixhauser_map_checksum()
