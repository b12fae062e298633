"""Versioned binary model checkpoints.

Layout: magic "CILM", u32 version, u32 header length, canonical JSON header
(architecture, branch labels, parameter descriptors, optional fusion-head
metadata), then every parameter as little-endian float64 in declaration
order. Round-trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .backbone import ArchSpec, Block, Branch, ModelBundle
from .errors import FormatError
from .fusion import FusionHead, build_label_map
from .linalg import Param

MAGIC = b"CILM"
VERSION = 1


def _param_meta(p: Param) -> dict:
    return {"name": p.name, "rows": p.value.shape[0], "cols": p.value.shape[1], "frozen": p.frozen}


def save_model(m: ModelBundle, path, fusion: FusionHead | None = None) -> None:
    params = list(m.params())
    fusion_meta = None
    if fusion is not None:
        fusion_meta = {
            "pooler": fusion.pooler,
            "alpha": fusion.alpha,
            "beta": fusion.beta,
            "cross_keys": [[d, dp] for d, dp in fusion.cross],
            "epoch_losses": fusion.epoch_losses,
        }
        params.extend(fusion.params())
    header = {
        "arch": m.arch.to_dict(),
        "branch_ids": m.branch_ids,
        "branch_labels": {d: m.branches[d].labels for d in m.branch_ids},
        "params": [_param_meta(p) for p in params],
        "fusion": fusion_meta,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hdr)))
        fh.write(hdr)
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_model(path) -> tuple[ModelBundle, FusionHead | None]:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FormatError(f"truncated checkpoint: {len(blob)} bytes")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic at byte 0: {blob[:4]!r}")
    version, hdr_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12 : 12 + hdr_len].decode("utf-8"))
    offset = 12 + hdr_len

    values = []
    for meta in header["params"]:
        count = meta["rows"] * meta["cols"]
        end = offset + 8 * count
        if end > len(blob):
            raise FormatError(f"checkpoint ends at byte {len(blob)}, parameter {meta['name']} needs {end}")
        values.append(
            np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            .reshape(meta["rows"], meta["cols"])
            .copy()
        )
        offset = end
    if offset != len(blob):
        raise FormatError(f"trailing bytes after offset {offset}")

    arch = ArchSpec.from_dict(header["arch"])
    metas = header["params"]
    cursor = 0

    def take() -> Param:
        nonlocal cursor
        meta = metas[cursor]
        p = Param(values[cursor], frozen=meta["frozen"], name=meta["name"])
        cursor += 1
        return p

    trunk = [Block(take(), take()) for _ in arch.trunk_dims]
    branches = {}
    for d in header["branch_ids"]:
        blocks = [Block(take(), take()) for _ in arch.branch_dims]
        head = take()
        branches[d] = Branch(blocks, head, [int(c) for c in header["branch_labels"][d]])
    m = ModelBundle(arch=arch, trunk=trunk, branches=branches)

    fusion = None
    if header.get("fusion"):
        fm = header["fusion"]
        cross = {(d, dp): take() for d, dp in (tuple(k) for k in fm["cross_keys"])}
        aux = take()
        fusion = FusionHead(
            cross=cross,
            aux_router=aux,
            pooler=fm["pooler"],
            alpha=fm["alpha"],
            beta=fm["beta"],
            label_map=build_label_map(m),
            epoch_losses=list(fm["epoch_losses"]),
        )
    if cursor != len(metas):
        raise FormatError("parameter count does not match the header")
    return m, fusion
