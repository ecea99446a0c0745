"""Binary model file: little-endian, length-prefixed tagged sections.

Layout::

    b"CCCF"  u16 version
    repeated: 4-byte ASCII tag, u64 payload length, payload

Readers skip tags they do not know, so later versions can add sections.
Sections written by this version:

    HEAD  u32 m, u32 n, u16 G, u16 r, u16 rank, f64 h, u32 e,
          f64 alpha1, f64 alpha2, i64 seed, i64 mf_seed
    UCOD  G * m * W u64 words, component-major then row-major
    ICOD  G * n * W u64 words
    UWGT  u32 count, then count records (u32 row, u16 component, f64 value)
    IWGT  same, for items
    ANCH  f64 user anchors (G x rank) then item anchors (G x rank)   [optional]
    LATN  f64 user factors (m x rank) then item factors (n x rank)   [optional]
    UIDS  u32 count, then (u32 byte length, utf-8 bytes) per id       [optional]
    IIDS  same, for items                                             [optional]
    SEEN  u64 indptr (m + 1), u32 item indices                        [optional]
    CONF  utf-8 JSON object with sorted keys
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from .coding import CccfModel, PackedCodes, n_words
from .mf import LatentFactors
from .weights import AnchorSet, WeightVectors

MAGIC = b"CCCF"
VERSION = 1
_HEAD = struct.Struct("<IIHHHdIddqq")
_WEIGHT_RECORD = np.dtype([("row", "<u4"), ("comp", "<u2"), ("value", "<f8")])


class ModelFormatError(ValueError):
    pass


def _section(out: io.BufferedIOBase, tag: bytes, payload: bytes) -> None:
    out.write(tag)
    out.write(struct.pack("<Q", len(payload)))
    out.write(payload)


def _weights_payload(w: np.ndarray) -> bytes:
    rows, comps = np.nonzero(w)
    rec = np.empty(len(rows), dtype=_WEIGHT_RECORD)
    rec["row"], rec["comp"], rec["value"] = rows, comps, w[rows, comps]
    return struct.pack("<I", len(rec)) + rec.tobytes()


def _ids_payload(ids: list[str]) -> bytes:
    parts = [struct.pack("<I", len(ids))]
    for token in ids:
        raw = str(token).encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def _f64(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def dumps(model: CccfModel) -> bytes:
    cfg = dict(model.config)
    lat = model.latents
    rank = lat.user_factors.shape[1] if lat is not None else (
        model.anchors.user_anchors.shape[1] if model.anchors is not None else 0)
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<H", VERSION))
    head = _HEAD.pack(model.m, model.n, model.G, model.r, rank, float(model.weights.bandwidth),
                      int(cfg.get("e", 0)), float(cfg.get("alpha1", 0.0)), float(cfg.get("alpha2", 0.0)),
                      int(cfg.get("seed", 0)), int(cfg.get("mf_seed", 0)))
    _section(out, b"HEAD", head)
    _section(out, b"UCOD", b"".join(np.ascontiguousarray(c.words, dtype="<u8").tobytes() for c in model.user_codes))
    _section(out, b"ICOD", b"".join(np.ascontiguousarray(c.words, dtype="<u8").tobytes() for c in model.item_codes))
    _section(out, b"UWGT", _weights_payload(model.weights.user))
    _section(out, b"IWGT", _weights_payload(model.weights.item))
    if model.anchors is not None:
        _section(out, b"ANCH", _f64(model.anchors.user_anchors) + _f64(model.anchors.item_anchors))
    if lat is not None:
        _section(out, b"LATN", _f64(lat.user_factors) + _f64(lat.item_factors))
    if model.user_ids is not None:
        _section(out, b"UIDS", _ids_payload(model.user_ids))
    if model.item_ids is not None:
        _section(out, b"IIDS", _ids_payload(model.item_ids))
    if model.seen is not None:
        indptr, indices = model.seen
        _section(out, b"SEEN", np.asarray(indptr, dtype="<u8").tobytes() + np.asarray(indices, dtype="<u4").tobytes())
    _section(out, b"CONF", json.dumps(cfg, sort_keys=True).encode("utf-8"))
    return out.getvalue()


def save(model: CccfModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def _read_sections(data: bytes) -> dict[bytes, bytes]:
    if data[:4] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    if len(data) < 6:
        raise ModelFormatError("truncated header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version > VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    pos, sections = 6, {}
    while pos < len(data):
        if pos + 12 > len(data):
            raise ModelFormatError("truncated section header")
        tag = data[pos:pos + 4]
        (length,) = struct.unpack_from("<Q", data, pos + 4)
        pos += 12
        if pos + length > len(data):
            raise ModelFormatError(f"section {tag!r} runs past end of file")
        sections[tag] = data[pos:pos + length]
        pos += length
    return sections


def _weights_from(payload: bytes, rows: int, G: int) -> np.ndarray:
    (count,) = struct.unpack_from("<I", payload, 0)
    rec = np.frombuffer(payload, dtype=_WEIGHT_RECORD, count=count, offset=4)
    w = np.zeros((rows, G))
    w[rec["row"].astype(np.int64), rec["comp"].astype(np.int64)] = rec["value"]
    return w


def _ids_from(payload: bytes) -> list[str]:
    (count,) = struct.unpack_from("<I", payload, 0)
    pos, out = 4, []
    for _ in range(count):
        (length,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        out.append(payload[pos:pos + length].decode("utf-8"))
        pos += length
    return out


def loads(data: bytes) -> CccfModel:
    sec = _read_sections(data)
    for tag in (b"HEAD", b"UCOD", b"ICOD", b"UWGT", b"IWGT", b"CONF"):
        if tag not in sec:
            raise ModelFormatError(f"missing section {tag.decode()}")
    m, n, G, r, rank, h, _e, _a1, _a2, _seed, _mf_seed = _HEAD.unpack(sec[b"HEAD"])
    W = n_words(r)
    try:
        ucod = np.frombuffer(sec[b"UCOD"], dtype="<u8").reshape(G, m, W).astype(np.uint64)
        icod = np.frombuffer(sec[b"ICOD"], dtype="<u8").reshape(G, n, W).astype(np.uint64)
    except ValueError as exc:
        raise ModelFormatError(f"code section size mismatch: {exc}") from None
    weights = WeightVectors(_weights_from(sec[b"UWGT"], m, G), _weights_from(sec[b"IWGT"], n, G), h)
    anchors = latents = seen = None
    if b"ANCH" in sec:
        a = np.frombuffer(sec[b"ANCH"], dtype="<f8").reshape(2, G, rank).astype(np.float64)
        anchors = AnchorSet(a[0].copy(), a[1].copy())
    if b"LATN" in sec:
        flat = np.frombuffer(sec[b"LATN"], dtype="<f8").astype(np.float64)
        latents = LatentFactors(flat[:m * rank].reshape(m, rank).copy(), flat[m * rank:].reshape(n, rank).copy())
    if b"SEEN" in sec:
        raw = sec[b"SEEN"]
        indptr = np.frombuffer(raw, dtype="<u8", count=m + 1).astype(np.int64)
        indices = np.frombuffer(raw, dtype="<u4", offset=8 * (m + 1)).astype(np.int64)
        seen = (indptr, indices)
    return CccfModel(
        [PackedCodes(r, ucod[k].copy()) for k in range(G)],
        [PackedCodes(r, icod[k].copy()) for k in range(G)],
        weights,
        anchors=anchors,
        config=json.loads(sec[b"CONF"].decode("utf-8")),
        user_ids=_ids_from(sec[b"UIDS"]) if b"UIDS" in sec else None,
        item_ids=_ids_from(sec[b"IIDS"]) if b"IIDS" in sec else None,
        seen=seen,
        latents=latents,
    )


def load(path) -> CccfModel:
    with open(path, "rb") as fh:
        return loads(fh.read())
