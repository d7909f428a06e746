"""Append-only run log: every event, command, stitch, state change, and
ground-truth injection of a session, serialized as canonical JSONL so that
identical runs produce byte-identical files."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
SCHEMA_VERSION = 1


class CorruptLog(RuntimeError):
    pass


class SchemaVersionMismatch(RuntimeError):
    pass


class IncompleteLog(RuntimeError):
    pass


def _canonical(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


class RunLog:
    """In-memory ordered record list with JSONL persistence.

    Record shape: {"seq": int, "t": float, "kind": str, "data": {...}}.
    The first record is the header; the last record of a finished run is the
    end record with the terminal status.
    """

    def __init__(self) -> None:
        self.records: list[dict] = []

    # -- writing ---------------------------------------------------------------

    def append(self, t: float, kind: str, data: dict) -> dict:
        record = {"seq": len(self.records), "t": round(float(t), 9), "kind": kind, "data": data}
        self.records.append(record)
        return record

    def header(self, scenario_dict: dict, profile: str, seed: int, policy: str) -> None:
        if self.records:
            raise CorruptLog("header must be the first record")
        self.append(
            0.0,
            "header",
            {
                "schema_version": SCHEMA_VERSION,
                "scenario": scenario_dict,
                "profile": profile,
                "seed": seed,
                "policy": policy,
            },
        )

    def end(self, t: float, status: str, detail: str = "") -> None:
        self.append(t, "end", {"status": status, "detail": detail})

    # -- reading ---------------------------------------------------------------

    @property
    def header_data(self) -> dict:
        if not self.records or self.records[0]["kind"] != "header":
            raise CorruptLog("log has no header record")
        return self.records[0]["data"]

    @property
    def end_data(self) -> dict | None:
        if self.records and self.records[-1]["kind"] == "end":
            return self.records[-1]["data"]
        return None

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind]

    def events(self) -> list[dict]:
        return self.of_kind("event")

    def commands(self) -> list[dict]:
        return self.of_kind("command")

    def stitches(self) -> list[dict]:
        return self.of_kind("stitch")

    def event_sequence(self) -> list[str]:
        return [_canonical(r) for r in self.events()]

    # -- persistence ---------------------------------------------------------------

    def to_jsonl(self) -> str:
        return "".join(_canonical(r) + "\n" for r in self.records)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def write(self, path: str | Path) -> None:
        p = Path(path)
        with open(p, "w") as fh:
            fh.write(self.to_jsonl())
            fh.flush()
            import os

            os.fsync(fh.fileno())

    @staticmethod
    def read(path: str | Path) -> "RunLog":
        log = RunLog()
        expected_seq = 0
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptLog(f"line {lineno}: invalid JSON: {exc.msg}") from exc
            for key in ("seq", "t", "kind", "data"):
                if key not in record:
                    raise CorruptLog(f"line {lineno}: missing field {key!r}")
            if record["seq"] != expected_seq:
                raise CorruptLog(
                    f"line {lineno}: sequence gap (expected {expected_seq}, got {record['seq']})"
                )
            expected_seq += 1
            log.records.append(record)
        if not log.records:
            raise CorruptLog("empty log")
        header = log.records[0]
        if header["kind"] != "header":
            raise CorruptLog("first record is not a header")
        version = header["data"].get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionMismatch(
                f"log schema version {version}, supported {SCHEMA_VERSION}"
            )
        return log
