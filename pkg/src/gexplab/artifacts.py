"""Deterministic artifact writers: CSV (UTF-8, comma, header row) and JSON
(pretty-printed, sorted keys).  Every artifact carries the config hash; no
wall-clock data is written, so identical (config, seed) runs produce
byte-identical files."""

from __future__ import annotations

import csv
import json
import os

from .errors import UsageError


def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))  # plain-float repr even for numpy scalars
    return str(value)


def write_csv(path: str, header: list, rows, config_hash: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(header) + ["config_hash"])
        for row in rows:
            writer.writerow([_cell(v) for v in row] + [config_hash])


def write_json(path: str, payload: dict, config_hash: str) -> None:
    payload = dict(payload)
    payload["config_hash"] = config_hash
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def write_artifacts(out_dir: str, artifacts: dict, config_hash: str) -> list:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name in sorted(artifacts):
        payload = artifacts[name]
        path = os.path.join(out_dir, name)
        if name.endswith(".json"):
            write_json(path, payload, config_hash)
        elif name.endswith(".csv"):
            header, rows = payload
            write_csv(path, header, rows, config_hash)
        else:
            raise UsageError(f"unknown artifact kind for {name}")
        written.append(path)
    return written


SUMMARY_HEADER = ["check", "scenario_id", "metric", "value", "tolerance", "pass",
                  "config_hash", "seed"]


def write_summary(out_dir: str, rows, config_hash: str, seed: int) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "suite_summary.csv")
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(SUMMARY_HEADER)
        for r in rows:
            writer.writerow([r.check, r.scenario_id, r.metric, _cell(r.value),
                             _cell(r.tolerance), _cell(r.passed), config_hash, seed])
    return path


def rows_to_json(rows) -> list:
    return [
        {"check": r.check, "scenario_id": r.scenario_id, "metric": r.metric,
         "value": r.value, "tolerance": r.tolerance, "pass": r.passed}
        for r in rows
    ]


def merge_summaries(run_dirs: list, out_path: str) -> int:
    """Concatenate suite summaries; inputs are never modified.

    Returns the number of merged rows.  A directory without a readable,
    well-formed summary raises a named error.
    """
    if not run_dirs:
        raise UsageError("need at least one run directory")
    merged = []
    for run_dir in run_dirs:
        path = os.path.join(run_dir, "suite_summary.csv")
        try:
            with open(path, "r", encoding="utf-8", newline="") as handle:
                reader = csv.reader(handle)
                header = next(reader, None)
                if header != SUMMARY_HEADER:
                    raise UsageError(f"malformed report file {path}: bad header")
                for line_no, row in enumerate(reader, start=2):
                    if len(row) != len(SUMMARY_HEADER):
                        raise UsageError(
                            f"malformed report file {path}: row {line_no}")
                    merged.append(row)
        except OSError as exc:
            raise UsageError(f"cannot read report file {path}: {exc}") from exc
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    with open(out_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(SUMMARY_HEADER)
        writer.writerows(merged)
    return len(merged)
