"""Elixhauser comorbidity scoring from ICD-10 diagnosis codes.

The 31-group ICD-10 prefix map ships with the package as a versioned CSV
table; its SHA-256 checksum is exposed so reports can pin the exact map a
run used.  The score is the unweighted count of distinct comorbidity groups
matched by any of a patient's codes, bucketed as 0 / 1-4 / >=5.
"""

from __future__ import annotations

import csv
import hashlib
from functools import lru_cache
from importlib import resources
from typing import Dict, Iterable, List, Tuple

__all__ = [
    "ELIXHAUSER_MAP_VERSION",
    "load_elixhauser_map",
    "elixhauser_map_checksum",
    "elixhauser_groups",
    "elixhauser",
    "elixhauser_category",
]

ELIXHAUSER_MAP_VERSION = "icd10-31group-1.0"
_MAP_RESOURCE = "elixhauser_icd10.csv"

CATEGORY_LABELS = ("0", "1-4", ">=5")


def _map_bytes() -> bytes:
    return resources.files("histcontrol.data").joinpath(_MAP_RESOURCE).read_bytes()


@lru_cache(maxsize=1)
def load_elixhauser_map() -> Dict[str, Tuple[str, ...]]:
    """Return {group: sorted tuple of ICD-10 prefixes} from the bundled table."""
    text = _map_bytes().decode("utf-8").splitlines()
    reader = csv.DictReader(text)
    grouped: Dict[str, List[str]] = {}
    for row in reader:
        grouped.setdefault(row["group"], []).append(row["icd10_prefix"])
    return {g: tuple(sorted(p)) for g, p in sorted(grouped.items())}


@lru_cache(maxsize=1)
def elixhauser_map_checksum() -> str:
    """SHA-256 of the bundled map file, recorded in run reports."""
    return hashlib.sha256(_map_bytes()).hexdigest()


@lru_cache(maxsize=65536)
def groups_for_code(code: str) -> Tuple[str, ...]:
    """Comorbidity groups a single normalized ICD-10 code falls in."""
    return tuple(
        group
        for group, prefixes in load_elixhauser_map().items()
        if code.startswith(prefixes)
    )


def elixhauser_groups(codes: Iterable[str]) -> List[str]:
    """Distinct comorbidity groups matched by any code (prefix match)."""
    matched = set()
    for code in codes:
        matched.update(groups_for_code(code))
    return sorted(matched)


def elixhauser_category(count: int) -> str:
    if count == 0:
        return "0"
    if count <= 4:
        return "1-4"
    return ">=5"


def elixhauser(codes: Iterable[str]) -> Tuple[int, str]:
    """Count of matched comorbidity groups and its 0 / 1-4 / >=5 bucket.

    Codes must already be normalized (dot-free uppercase); unmatched codes
    simply contribute nothing.
    """
    count = len(elixhauser_groups(codes))
    return count, elixhauser_category(count)
