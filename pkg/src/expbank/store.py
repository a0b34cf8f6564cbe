"""Bank directory format: a JSON `manifest` plus `experiences.jsonl`.

Vectors are written as shortest round-trip decimal renderings of their
float32 values, so a load reproduces every bit. Saves go to a sibling temp
directory that is renamed into place.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from expbank.abstract import Experience
from expbank.core import action_from_record, action_to_record, state_from_record, state_to_record
from expbank.embed import check_unit, fnv1a64
from expbank.errors import (
    ChecksumMismatch,
    CorruptRecord,
    DimensionMismatch,
    ExpBankError,
    IoFailure,
    MalformedRecord,
    NonUnitNorm,
    VersionMismatch,
)
from expbank.index import ExperienceBank

FORMAT_VERSION = 1
MANIFEST = "manifest"
RECORDS = "experiences.jsonl"


def checksum(data: bytes) -> str:
    return f"{fnv1a64(data):016x}"


def _render_f32(v: np.ndarray) -> list[float]:
    out = []
    for x in v.astype(np.float32):
        short = float(str(x))
        # fall back to the exact binary value if the short form ever misses
        out.append(short if np.float32(short) == x else float(x))
    return out


def experience_to_record(e: Experience, viewpoints) -> dict:
    return {
        "id": e.id,
        "trajectory_id": e.trajectory_id,
        "step": e.step,
        "state": state_to_record(e.state),
        "action": action_to_record(e.action),
        "guidance": e.guidance,
        "q_value": e.q_value,
        "source_outcome": e.source_outcome,
        "embeddings": {vp: _render_f32(e.embeddings[vp]) for vp in viewpoints},
    }


def experience_from_record(rec: dict, dim: int, viewpoints, line: int) -> Experience:
    try:
        embs = {}
        for vp in viewpoints:
            values = rec["embeddings"][vp]
            if len(values) != dim:
                raise CorruptRecord(f"{vp} embedding has {len(values)} values, manifest dim is {dim}", line)
            arr = np.array(values, dtype=np.float32)
            arr.flags.writeable = False
            embs[vp] = check_unit(arr, dim, f"{vp} embedding")
        return Experience(
            id=rec["id"],
            trajectory_id=rec["trajectory_id"],
            step=int(rec["step"]),
            state=state_from_record(rec["state"]),
            action=action_from_record(rec["action"]),
            guidance=rec["guidance"],
            q_value=float(rec["q_value"]),
            source_outcome=bool(rec["source_outcome"]),
            embeddings=embs,
        )
    except CorruptRecord:
        raise
    except (KeyError, TypeError, ValueError, MalformedRecord, NonUnitNorm, DimensionMismatch) as exc:
        raise CorruptRecord(f"{type(exc).__name__}: {exc}", line) from exc


def save(bank: ExperienceBank, directory: str | Path) -> None:
    target = Path(directory)
    snap = bank.snapshot()
    lines = [
        json.dumps(experience_to_record(e, bank.viewpoints), ensure_ascii=False, separators=(",", ":")) + "\n"
        for e in snap.experiences
    ]
    payload = "".join(lines).encode("utf-8")
    manifest = {
        "format_version": FORMAT_VERSION,
        "dim": bank.dim,
        "provider": bank.config.provider,
        "viewpoints": list(bank.viewpoints),
        "delta": bank.config.threshold,
        "experience_count": len(snap),
        "checksum": checksum(payload),
    }
    tmp = None
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.tmp-", dir=target.parent))
        (tmp / RECORDS).write_bytes(payload)
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        for f in (RECORDS, MANIFEST):
            with open(tmp / f, "rb") as fh:
                os.fsync(fh.fileno())
        old = None
        if target.exists():
            old = target.with_name(f".{target.name}.old-{os.getpid()}")
            os.replace(target, old)
        os.replace(tmp, target)
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)
    except OSError as exc:
        if tmp is not None and tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)
        raise IoFailure(f"could not save bank to {target}: {exc}") from exc


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptRecord(f"manifest is not valid JSON: {exc}", 0) from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported bank format_version {manifest.get('format_version')!r}")
    return manifest


def load(directory: str | Path) -> ExperienceBank:
    directory = Path(directory)
    manifest = read_manifest(directory)
    try:
        payload = (directory / RECORDS).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read records: {exc}") from exc
    if checksum(payload) != manifest["checksum"]:
        raise ChecksumMismatch(f"records checksum {checksum(payload)} != manifest {manifest['checksum']}")

    dim = int(manifest["dim"])
    viewpoints = tuple(manifest["viewpoints"])
    bank = ExperienceBank(dim, float(manifest["delta"]), manifest["provider"], viewpoints)
    exps = []
    lines = payload.decode("utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptRecord(f"invalid JSON: {exc}", lineno) from exc
        exps.append(experience_from_record(rec, dim, viewpoints, lineno))
    if len(exps) != manifest["experience_count"]:
        raise CorruptRecord(f"found {len(exps)} records, manifest says {manifest['experience_count']}", len(lines))
    try:
        bank.extend(exps)
    except ExpBankError as exc:
        raise CorruptRecord(str(exc), len(lines)) from exc
    return bank
