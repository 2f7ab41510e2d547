"""Interchange formats for registries, cohorts and ground truth.

The primary format is line-delimited JSON (UTF-8, ISO-8601 dates): one
entity per line, tagged with ``type`` in {patient, visit, prescription,
ses, death}.  A matching comma-separated tabular export exists for each
entity type.  Ground truth from the synthetic generator travels in a
line-delimited sidecar keyed by patient_id.
"""

from __future__ import annotations

import csv
import json
from datetime import date
from pathlib import Path
from typing import Iterable, Optional, TextIO, Union

from .records import (
    SES_VARIABLES,
    CohortAssignment,
    Demographics,
    InpatientVisit,
    PatientRecord,
    Prescription,
    Registry,
    RegistryError,
    RowError,
    SocioPanel,
)

__all__ = [
    "load_registry",
    "write_registry",
    "export_registry_csv",
    "write_cohorts",
    "load_cohorts",
    "write_ground_truth",
    "load_ground_truth",
]

ENTITY_TYPES = ("patient", "visit", "prescription", "ses", "death")


def _parse_date(raw: str, what: str, pid: str, line: int) -> date:
    try:
        return date.fromisoformat(raw)
    except (TypeError, ValueError):
        raise RowError(f"malformed {what} date: {raw!r}", pid, line) from None


def _iter_lines(source) -> Iterable[str]:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as handle:
            yield from handle
    else:
        yield from source


def load_registry(source: Union[str, Path, Iterable[str], TextIO]) -> Registry:
    """Build a validated Registry from a line-delimited record stream.

    `source` is a path or an iterable of JSON lines.  Malformed rows raise
    :class:`RowError` with the offending patient id and 1-based line number;
    a duplicate patient entity is fatal.
    """
    patients = {}
    ses = {}
    visits = {}
    prescriptions = {}
    deaths = {}

    for lineno, raw in enumerate(_iter_lines(source), start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            row = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise RowError(f"malformed JSON: {exc}", line=lineno) from None
        kind = row.get("type")
        pid = str(row.get("patient_id", ""))
        if kind not in ENTITY_TYPES:
            raise RowError(f"unknown entity type: {kind!r}", pid, lineno)
        if not pid:
            raise RowError("missing patient_id", pid, lineno)

        try:
            if kind == "patient":
                if pid in patients:
                    raise RegistryError(f"duplicate patient_id: {pid!r}")
                patients[pid] = {
                    "diagnosis_date": _parse_date(
                        row["diagnosis_date"], "diagnosis", pid, lineno
                    ),
                    "demographics": Demographics(
                        birth_year=int(row["birth_year"]),
                        marital=row["marital"],
                        nordic_born=bool(row["nordic_born"]),
                        education=row.get("education"),
                    ),
                }
            elif kind == "ses":
                ses[pid] = SocioPanel(dict(row["values"]))
            elif kind == "visit":
                visits.setdefault(pid, []).append(
                    InpatientVisit(
                        admission_date=_parse_date(
                            row["admission_date"], "admission", pid, lineno
                        ),
                        discharge_date=_parse_date(
                            row["discharge_date"], "discharge", pid, lineno
                        ),
                        icd10_codes=tuple(row["icd10_codes"]),
                    )
                )
            elif kind == "prescription":
                prescriptions.setdefault(pid, []).append(
                    Prescription(
                        dispense_date=_parse_date(
                            row["dispense_date"], "dispense", pid, lineno
                        ),
                        atc_code=row["atc_code"],
                        ddd_count=float(row["ddd_count"]),
                    )
                )
            elif kind == "death":
                deaths[pid] = _parse_date(row["death_date"], "death", pid, lineno)
        except RowError:
            raise
        except RegistryError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise RowError(str(exc), pid, lineno) from None

    records = {}
    for pid, core in patients.items():
        try:
            records[pid] = PatientRecord(
                patient_id=pid,
                diagnosis_date=core["diagnosis_date"],
                demographics=core["demographics"],
                ses_panel=ses.get(pid, SocioPanel({})),
                visits=tuple(visits.get(pid, ())),
                prescriptions=tuple(prescriptions.get(pid, ())),
                death_date=deaths.get(pid),
            )
        except ValueError as exc:
            raise RowError(str(exc), pid) from None

    orphans = (set(ses) | set(visits) | set(prescriptions) | set(deaths)) - set(
        patients
    )
    if orphans:
        raise RegistryError(f"events for unknown patients: {sorted(orphans)[:5]}")
    return Registry(records)


def _registry_rows(registry: Registry):
    for rec in registry:
        demo = rec.demographics
        yield {
            "type": "patient",
            "patient_id": rec.patient_id,
            "diagnosis_date": rec.diagnosis_date.isoformat(),
            "birth_year": demo.birth_year,
            "marital": demo.marital,
            "nordic_born": demo.nordic_born,
            "education": demo.education,
        }
        yield {
            "type": "ses",
            "patient_id": rec.patient_id,
            "values": {k: v for k, v in rec.ses_panel.values.items() if v is not None},
        }
        for visit in rec.visits:
            yield {
                "type": "visit",
                "patient_id": rec.patient_id,
                "admission_date": visit.admission_date.isoformat(),
                "discharge_date": visit.discharge_date.isoformat(),
                "icd10_codes": list(visit.icd10_codes),
            }
        for rx in rec.prescriptions:
            yield {
                "type": "prescription",
                "patient_id": rec.patient_id,
                "dispense_date": rx.dispense_date.isoformat(),
                "atc_code": rx.atc_code,
                "ddd_count": rx.ddd_count,
            }
        if rec.death_date is not None:
            yield {
                "type": "death",
                "patient_id": rec.patient_id,
                "death_date": rec.death_date.isoformat(),
            }


def write_registry(registry: Registry, path: Union[str, Path]) -> None:
    """Write the line-delimited interchange file for a registry."""
    with open(path, "w", encoding="utf-8") as handle:
        for row in _registry_rows(registry):
            handle.write(json.dumps(row, sort_keys=True) + "\n")


def export_registry_csv(registry: Registry, outdir: Union[str, Path]) -> dict:
    """Write one comma-separated table per entity type; returns paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {name: outdir / f"{name}s.csv" for name in ENTITY_TYPES}

    headers = {
        "patient": [
            "patient_id",
            "diagnosis_date",
            "birth_year",
            "marital",
            "nordic_born",
            "education",
        ],
        "ses": ["patient_id", *SES_VARIABLES],
        "visit": ["patient_id", "admission_date", "discharge_date", "icd10_codes"],
        "prescription": ["patient_id", "dispense_date", "atc_code", "ddd_count"],
        "death": ["patient_id", "death_date"],
    }
    writers = {}
    handles = {}
    try:
        for name, path in paths.items():
            handles[name] = open(path, "w", newline="", encoding="utf-8")
            writers[name] = csv.writer(handles[name])
            writers[name].writerow(headers[name])
        for row in _registry_rows(registry):
            kind = row["type"]
            if kind == "ses":
                panel = row["values"]
                writers[kind].writerow(
                    [row["patient_id"]]
                    + [panel.get(name, "") for name in SES_VARIABLES]
                )
            elif kind == "visit":
                writers[kind].writerow(
                    [
                        row["patient_id"],
                        row["admission_date"],
                        row["discharge_date"],
                        ";".join(row["icd10_codes"]),
                    ]
                )
            else:
                writers[kind].writerow(
                    [row.get(col, "") for col in headers[kind]]
                )
    finally:
        for handle in handles.values():
            handle.close()
    return {name: str(path) for name, path in paths.items()}


def write_cohorts(assignments: Iterable[CohortAssignment], path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for a in assignments:
            row = {"patient_id": a.patient_id, "arm": a.arm}
            if a.dtp_months is not None:
                row["dtp_months"] = a.dtp_months
            handle.write(json.dumps(row, sort_keys=True) + "\n")


def load_cohorts(path) -> list:
    out = []
    for raw in _iter_lines(path):
        raw = raw.strip()
        if not raw:
            continue
        row = json.loads(raw)
        out.append(
            CohortAssignment(
                patient_id=row["patient_id"],
                arm=row["arm"],
                dtp_months=row.get("dtp_months"),
            )
        )
    return out


def write_ground_truth(truth, path) -> None:
    """Line-delimited ground-truth sidecar, one record per patient."""
    with open(path, "w", encoding="utf-8") as handle:
        header = {"kind": "header", "true_atet": truth.true_atet_table()}
        handle.write(json.dumps(header, sort_keys=True) + "\n")
        for row in truth.patient_rows():
            handle.write(json.dumps(row, sort_keys=True) + "\n")


def load_ground_truth(path) -> dict:
    """Read the sidecar back as {'true_atet': ..., 'patients': {pid: row}}."""
    true_atet: Optional[dict] = None
    patients = {}
    for raw in _iter_lines(path):
        raw = raw.strip()
        if not raw:
            continue
        row = json.loads(raw)
        if row.get("kind") == "header":
            true_atet = row["true_atet"]
        else:
            patients[row["patient_id"]] = row
    return {"true_atet": true_atet, "patients": patients}
