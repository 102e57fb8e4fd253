"""On-disk formats for fields, regions, partitions, policies and tables.

Grid files (fields and regions) are binary: a magic line, one JSON header
line, then the raw little-endian arrays in row-major order. Everything else
is JSON. All writes go through a temporary file and an atomic rename.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .channel import LinkField, RelayRegion, Workspace
from .geometry import ConvexPartitionSet, ConvexPolygon
from .optimizer import RelayPolicy, VisitTable
from .sim import QueueTrace

FIELD_MAGIC = b"RELAYPOLL-FIELD 1\n"
REGION_MAGIC = b"RELAYPOLL-REGION 1\n"


def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _ws_dict(ws: Workspace) -> dict:
    return {"x_min": ws.x_min, "x_max": ws.x_max, "y_min": ws.y_min, "y_max": ws.y_max, "grid_step": ws.grid_step}


def _ws(d) -> Workspace:
    return Workspace(d["x_min"], d["x_max"], d["y_min"], d["y_max"], d["grid_step"])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


# --------------------------------------------------------------------------- fields


def write_field(path, field: LinkField) -> Path:
    header = {
        "workspace": _ws_dict(field.workspace),
        "base_node": list(field.base_node),
        "shape": list(field.cnr_db.shape),
        "dtype": "<f8",
        "units": "dB",
        "metadata": _jsonable(field.metadata),
    }
    body = np.ascontiguousarray(field.cnr_db, dtype="<f8").tobytes()
    return atomic_write(path, FIELD_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + body)


def _split(raw: bytes, magic: bytes, path):
    if not raw.startswith(magic):
        raise ValueError(f"{path}: not a {magic.decode().split()[0]} file")
    rest = raw[len(magic):]
    nl = rest.index(b"\n")
    return json.loads(rest[:nl]), rest[nl + 1 :]


def read_field(path) -> LinkField:
    header, body = _split(Path(path).read_bytes(), FIELD_MAGIC, path)
    shape = tuple(header["shape"])
    arr = np.frombuffer(body, dtype="<f8").reshape(shape).astype(float)
    return LinkField(_ws(header["workspace"]), tuple(header["base_node"]), arr, header.get("metadata", {}))


# --------------------------------------------------------------------------- regions


def write_region(path, region: RelayRegion) -> Path:
    header = {"workspace": _ws_dict(region.workspace), "p_th": region.p_th, "shape": list(region.mask.shape)}
    body = np.ascontiguousarray(region.p_sd, dtype="<f8").tobytes() + np.packbits(region.mask.ravel()).tobytes()
    return atomic_write(path, REGION_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + body)


def read_region(path) -> RelayRegion:
    header, body = _split(Path(path).read_bytes(), REGION_MAGIC, path)
    shape = tuple(header["shape"])
    n = shape[0] * shape[1]
    p = np.frombuffer(body[: 8 * n], dtype="<f8").reshape(shape).astype(float)
    mask = np.unpackbits(np.frombuffer(body[8 * n :], dtype=np.uint8))[:n].astype(bool).reshape(shape)
    return RelayRegion(_ws(header["workspace"]), mask, p, header["p_th"])


# --------------------------------------------------------------------------- partitions


def partition_to_dict(ps: ConvexPartitionSet) -> dict:
    return {
        "region_id": ps.source_region_id,
        "bounding_box": list(ps.bounding_box),
        "coverage": ps.coverage,
        "metadata": _jsonable(ps.metadata),
        "polygons": [
            {"vertices": p.vertices.tolist(), "A": p.A.tolist(), "b": p.b.tolist()} for p in ps.polygons
        ],
    }


def partition_from_dict(d) -> ConvexPartitionSet:
    polys = tuple(ConvexPolygon(np.array(p["vertices"], dtype=float)) for p in d["polygons"])
    return ConvexPartitionSet(polys, d["region_id"], tuple(d["bounding_box"]), d["coverage"], d.get("metadata", {}))


def write_partition(path, ps: ConvexPartitionSet) -> Path:
    return atomic_write(path, dumps(partition_to_dict(ps)))


def read_partition(path) -> ConvexPartitionSet:
    return partition_from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- policies and tables


def table_to_dict(t: VisitTable) -> dict:
    return {"period": t.K, "sequence": [q + 1 for q in t.sequence], "indexing": "1-based queue labels"}


def table_from_dict(d) -> VisitTable:
    return VisitTable(tuple(int(q) - 1 for q in d["sequence"]))


def policy_to_dict(p: RelayPolicy) -> dict:
    return _jsonable({
        "kind": p.kind,
        "positions_m": p.positions,
        "pi": p.pi,
        "S_s": p.S,
        "w_bar_s": p.w_bar,
        "assignment": [int(a) for a in p.assignment],
        "lambda_per_s": p.lam,
        "zeta_s": p.zeta,
        "v_mps": p.v,
        "table": table_to_dict(p.table) if p.table is not None else None,
        "iterations": p.log,
        "metadata": p.metadata,
    })


def policy_from_dict(d) -> RelayPolicy:
    table = table_from_dict(d["table"]) if d.get("table") else None
    return RelayPolicy(
        np.array(d["positions_m"], dtype=float), np.array(d["pi"], dtype=float), np.array(d["S_s"], dtype=float),
        float(d["w_bar_s"]), tuple(d["assignment"]), np.array(d["lambda_per_s"], dtype=float), float(d["zeta_s"]),
        float(d["v_mps"]), d["kind"], table, list(d.get("iterations", [])), dict(d.get("metadata", {})),
    )


def write_policy(path, p: RelayPolicy) -> Path:
    return atomic_write(path, dumps(policy_to_dict(p)))


def read_policy(path) -> RelayPolicy:
    return policy_from_dict(json.loads(Path(path).read_text()))


def write_table(path, t: VisitTable) -> Path:
    return atomic_write(path, dumps(table_to_dict(t)))


def read_table(path) -> VisitTable:
    return table_from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- CSV


def write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return atomic_write(path, buf.getvalue())


def read_csv(path) -> tuple[list[str], list[list]]:
    """Header and rows; numeric cells come back as int or float, others as str."""

    def cell(s):
        for conv in (int, float):
            try:
                return conv(s)
            except ValueError:
                pass
        return s

    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [[cell(c) for c in row] for row in r]


def read_trace_csv(path) -> QueueTrace:
    header, rows = read_csv(path)
    n = sum(1 for h in header if h.startswith("q"))
    a = np.array(rows, dtype=float).reshape(-1, len(header))
    return QueueTrace(a[:, 0], a[:, 1 : 1 + n].astype(int), a[:, 1 + n].astype(int), a[:, 2 + n].astype(int) - 1)
