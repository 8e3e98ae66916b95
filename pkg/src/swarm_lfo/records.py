"""Newline-delimited record files for mission logs and datasets.

Each file starts with a JSON header line (format name, version, config
hash); every following line is one JSON object. Floats are written with 17
significant digits so a parse returns the exact same doubles. Files whose
name ends in ``.gz`` are gzip-compressed with a zeroed timestamp, which keeps
the bytes reproducible.
"""

from __future__ import annotations

import gzip
import io
import json
import math
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .policy import Dataset
from .scenario import Attack, MissionLog

VERSION = 1
MISSION_FORMAT = "swarm-lfo-mission"
DATASET_FORMAT = "swarm-lfo-dataset"

INT_FIELDS = ("episode_id", "k", "true_label", "map_label", "episode", "label")
INT_VECTOR_FIELDS = ("modes", "attack_ids")
FLOAT_VECTOR_FIELDS = ("mu", "x_true", "x_est", "z", "e_true", "e_meas")


class RecordError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _num(v: float) -> str:
    v = float(v)
    if not math.isfinite(v):
        raise RecordError(f"non-finite value {v!r} cannot be serialized")
    text = format(v, ".17g")
    # keep a float marker so integral values (notably -0.0) parse back as floats
    return text if ("." in text or "e" in text) else text + ".0"


def dumps_record(rec: dict) -> str:
    """One JSON object on one line; keys keep their insertion order."""
    parts = []
    for key, val in rec.items():
        if key in FLOAT_VECTOR_FIELDS:
            body = "[" + ",".join(_num(v) for v in np.asarray(val, dtype=float).ravel().tolist()) + "]"
        elif key in INT_VECTOR_FIELDS:
            body = "[" + ",".join(str(int(v)) for v in np.asarray(val).ravel().tolist()) + "]"
        elif key in INT_FIELDS:
            body = str(int(val))
        elif isinstance(val, float):
            body = _num(val)
        else:
            body = json.dumps(val, sort_keys=True)
        parts.append(f"{json.dumps(key)}:{body}")
    return "{" + ",".join(parts) + "}"


def loads_record(line: str, lineno: int | None = None) -> dict:
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordError(f"malformed record: {exc.msg}", lineno) from None
    if not isinstance(raw, dict):
        raise RecordError("record is not an object", lineno)
    out = {}
    for key, val in raw.items():
        try:
            if key in FLOAT_VECTOR_FIELDS:
                arr = np.array(val, dtype=float)
                if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                    raise ValueError
                out[key] = arr
            elif key in INT_VECTOR_FIELDS:
                out[key] = np.array(val, dtype=np.int64).reshape(-1)
            elif key in INT_FIELDS:
                if isinstance(val, bool) or not isinstance(val, int):
                    raise ValueError
                out[key] = val
            else:
                out[key] = val
        except (TypeError, ValueError):
            raise RecordError(f"bad value for field {key!r}", lineno) from None
    return out


# ---------------------------------------------------------------------------
# file plumbing


@contextmanager
def _open_write(path: Path):
    path = Path(path)
    if path.suffix == ".gz":
        with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz, \
                io.TextIOWrapper(gz, encoding="utf-8", newline="\n") as fh:
            yield fh
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            yield fh


@contextmanager
def _open_read(path: Path):
    path = Path(path)
    with open(path, "rb") as raw:
        magic = raw.read(2)
        raw.seek(0)
        if magic == b"\x1f\x8b":
            with gzip.GzipFile(fileobj=raw, mode="rb") as gz, io.TextIOWrapper(gz, encoding="utf-8") as fh:
                yield fh
        else:
            with io.TextIOWrapper(raw, encoding="utf-8") as fh:
                yield fh


def write_records(path, header: dict, records) -> None:
    with _open_write(path) as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(dumps_record(rec) + "\n")


def read_records(path, expected_format: str) -> tuple[dict, list[dict]]:
    try:
        with _open_read(path) as fh:
            first = fh.readline()
            try:
                header = json.loads(first)
            except json.JSONDecodeError:
                raise RecordError("missing or malformed header", 1) from None
            if not isinstance(header, dict) or header.get("format") != expected_format:
                raise RecordError(f"not a {expected_format} file", 1)
            if header.get("version") != VERSION:
                raise RecordError(f"unsupported version {header.get('version')!r}", 1)
            records = [loads_record(line, n) for n, line in enumerate(fh, start=2) if line.strip()]
    except (EOFError, gzip.BadGzipFile, UnicodeDecodeError) as exc:
        raise RecordError(f"corrupt file: {exc}") from None
    return header, records


# ---------------------------------------------------------------------------
# mission logs


def mission_records(log: MissionLog):
    for k in range(log.num_steps):
        yield {
            "k": k, "episode": int(log.episode[k]), "label": int(log.labels[k]),
            "x_true": log.x_true[k], "z": log.z[k], "e_true": log.e_true[k], "e_meas": log.e_meas[k],
            "modes": log.intruder_modes[k], "attack_ids": log.intruder_attacks[k],
        }


def save_mission(path, log: MissionLog, config_hash: str) -> None:
    attacks = [{"id": a.id, "start": a.start_step, "members": list(a.members),
                "repelled": sorted(a.repelled), "outcome": a.outcome, "end": a.end_step}
               for a in log.attacks]
    header = {"format": MISSION_FORMAT, "version": VERSION, "config_hash": config_hash,
              "dt": log.dt, "num_steps": log.num_steps, "attacks": attacks}
    write_records(path, header, mission_records(log))


def load_mission(path) -> tuple[MissionLog, str]:
    header, recs = read_records(path, MISSION_FORMAT)
    if len(recs) != header.get("num_steps"):
        raise RecordError(f"expected {header.get('num_steps')} steps, found {len(recs)}")
    for n, r in enumerate(recs):
        if r.get("k") != n:
            raise RecordError(f"step index out of order (expected {n})", n + 2)
    try:
        attacks = [Attack(a["id"], a["start"], tuple(a["members"]), set(a["repelled"]), a["outcome"], a["end"])
                   for a in header["attacks"]]
        col = lambda name: np.array([r[name] for r in recs])
        log = MissionLog(
            dt=float(header["dt"]),
            x_true=col("x_true").astype(float), z=col("z").astype(float),
            e_true=col("e_true").astype(float), e_meas=col("e_meas").astype(float),
            labels=col("label").astype(np.int64),
            intruder_modes=col("modes").astype(np.int64), intruder_attacks=col("attack_ids").astype(np.int64),
            episode=col("episode").astype(np.int64), attacks=attacks,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise RecordError(f"corrupt mission log: {exc!r}") from None
    return log, header.get("config_hash", "")


# ---------------------------------------------------------------------------
# datasets


def dataset_records(ds: Dataset):
    imm = ds.variant == "IMM"
    true_label = ds.extras.get("true_label", ds.labels)
    x_true = ds.extras.get("x_true", ds.robot_state)
    e_true = ds.extras.get("e_true")
    for n in range(len(ds)):
        rec = {"episode_id": int(ds.episode[n]), "k": int(ds.step[n]), "true_label": int(true_label[n])}
        if imm:
            rec["map_label"] = int(ds.labels[n])
            rec["mu"] = ds.extras["mu"][n]
        rec["x_true"] = x_true[n]
        if imm:
            rec["x_est"] = ds.robot_state[n]
        if e_true is not None:
            rec["e_true"] = e_true[n]
        rec["e_meas"] = ds.env_meas[n]
        yield rec


def save_dataset(path, ds: Dataset, config_hash: str) -> None:
    header = {"format": DATASET_FORMAT, "version": VERSION, "config_hash": config_hash,
              "variant": ds.variant, "num_records": len(ds)}
    write_records(path, header, dataset_records(ds))


def load_dataset(path) -> tuple[Dataset, str]:
    header, recs = read_records(path, DATASET_FORMAT)
    variant = header.get("variant")
    if variant not in ("GT", "IMM"):
        raise RecordError(f"unknown dataset variant {variant!r}", 1)
    if len(recs) != header.get("num_records"):
        raise RecordError(f"expected {header.get('num_records')} records, found {len(recs)}")
    if not recs:
        raise RecordError("dataset has no records")
    need = ("episode_id", "k", "true_label", "x_true", "e_meas") + (("map_label", "mu", "x_est") if variant == "IMM" else ())
    for n, r in enumerate(recs):
        missing = [f for f in need if f not in r]
        if missing:
            raise RecordError(f"missing fields {missing}", n + 2)
    col = lambda name: np.array([r[name] for r in recs])
    extras = {"true_label": col("true_label").astype(np.int64), "x_true": col("x_true").astype(float)}
    if "e_true" in recs[0]:
        extras["e_true"] = col("e_true").astype(float)
    if variant == "IMM":
        extras["mu"] = col("mu").astype(float)
        extras["x_est"] = col("x_est").astype(float)
        labels, state = col("map_label").astype(np.int64), extras["x_est"]
    else:
        labels, state = extras["true_label"], extras["x_true"]
    ds = Dataset(col("episode_id").astype(np.int64), col("k").astype(np.int64), labels, state,
                 col("e_meas").astype(float), variant, extras)
    return ds, header.get("config_hash", "")
