"""Wire formats for the worker/coordinator exchange.

Round 1 carries one CohortSummary per worker; round 2 carries the per-source
mean scores re-evaluated at the integrated estimate.  Both travel inside a
framed message:

    magic 'QIFS' | version u32 | round u8 | payload length u64 |
    payload bytes | crc32(payload) u32

All integers and floats are little-endian; floats are 64-bit IEEE.  The
binary encoding round-trips bit-exactly.  A JSON text mode mirrors the same
fields for debugging (Python float repr round-trips exactly as well).

Round-1 payload layout:

    cohort_id i32 | n u64 | p u32 | n_blocks u32
    per block (in block order):
        j u32 | link u8 | basis u8 | s u8 | converged u8 | ridged u8 |
        iterations u32 | q f64 | dispersion f64 | theta f64[p] |
        S row-major f64[p*s, p]
    V dim u32 | V lower triangle row-major f64[d(d+1)/2]

Round-2 payload layout:

    cohort_id i32 | n u64 | n_sources u32
    per source: j u32 | k u32 | len u32 | score f64[len]

No per-participant quantity appears in either payload: for a fixed model
shape the byte size is independent of the cohort sample size, which enters
only as the integer n.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .combine import CohortSummary
from .errors import PayloadError
from .source import SourceFit

MAGIC = b"QIFS"
FORMAT_VERSION = 1

_LINKS = {"identity": 0, "logit": 1}
_BASES = {"independence": 0, "ar1": 1, "exchangeable": 2}
_LINKS_R = {v: k for k, v in _LINKS.items()}
_BASES_R = {v: k for k, v in _BASES.items()}


def _frame(round_no: int, payload: bytes) -> bytes:
    head = MAGIC + struct.pack("<IBQ", FORMAT_VERSION, round_no, len(payload))
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def _unframe(blob: bytes) -> tuple[int, bytes]:
    if len(blob) < 21 or blob[:4] != MAGIC:
        raise PayloadError("not a framed summary message")
    version, round_no, length = struct.unpack("<IBQ", blob[4:17])
    if version != FORMAT_VERSION:
        raise PayloadError(
            f"payload format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    payload = blob[17:17 + length]
    if len(payload) != length or len(blob) < 17 + length + 4:
        raise PayloadError("truncated payload")
    (crc,) = struct.unpack("<I", blob[17 + length:21 + length])
    if crc != zlib.crc32(payload):
        raise PayloadError("payload checksum mismatch")
    return round_no, payload


def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _read_f64(buf: bytes, off: int, count: int):
    end = off + 8 * count
    return np.frombuffer(buf[off:end], dtype="<f8").copy(), end


def encode_summary(summary: CohortSummary) -> bytes:
    """Round-1 binary message for one cohort."""
    p = next(iter(summary.fits.values())).theta_hat.shape[0]
    parts = [struct.pack("<iQII", summary.cohort_id, summary.n, p, len(summary.block_order))]
    for j in summary.block_order:
        f = summary.fits[j]
        s = f.S_hat.shape[0] // p
        parts.append(struct.pack(
            "<IBBBBBI",
            j,
            _LINKS[f.link_kind],
            _BASES[f.basis_family],
            s,
            int(f.converged),
            int(f.ridged),
            f.iterations,
        ))
        parts.append(struct.pack("<dd", f.q_value, f.dispersion))
        parts.append(_f64(f.theta_hat))
        parts.append(_f64(f.S_hat))
    d = summary.V.shape[0]
    parts.append(struct.pack("<I", d))
    parts.append(_f64(summary.V[np.tril_indices(d)]))
    return _frame(1, b"".join(parts))


def decode_summary(blob: bytes) -> CohortSummary:
    round_no, buf = _unframe(blob)
    if round_no != 1:
        raise PayloadError(f"expected a round-1 summary, got round {round_no}")
    try:
        cohort_id, n, p, n_blocks = struct.unpack_from("<iQII", buf, 0)
        off = struct.calcsize("<iQII")
        fits = {}
        order = []
        for _ in range(n_blocks):
            j, link_b, basis_b, s, conv, ridged, iters = struct.unpack_from("<IBBBBBI", buf, off)
            off += struct.calcsize("<IBBBBBI")
            q, dispersion = struct.unpack_from("<dd", buf, off)
            off += 16
            theta, off = _read_f64(buf, off, p)
            S_flat, off = _read_f64(buf, off, p * s * p)
            fits[j] = SourceFit(
                theta_hat=theta,
                S_hat=S_flat.reshape(p * s, p),
                psi_at_fit=None,
                C_hat=None,
                q_value=q,
                converged=bool(conv),
                iterations=iters,
                ridged=bool(ridged),
                dispersion=dispersion,
                link_kind=_LINKS_R[link_b],
                basis_family=_BASES_R[basis_b],
            )
            order.append(j)
        (d,) = struct.unpack_from("<I", buf, off)
        off += 4
        tril, off = _read_f64(buf, off, d * (d + 1) // 2)
    except (struct.error, KeyError, ValueError) as exc:
        raise PayloadError(f"malformed round-1 payload: {exc}") from exc
    if off != len(buf):
        raise PayloadError("round-1 payload has trailing bytes")
    V = np.zeros((d, d))
    V[np.tril_indices(d)] = tril
    V = V + np.tril(V, -1).T
    return CohortSummary(cohort_id=cohort_id, n=n, fits=fits, V=V, block_order=tuple(order))


def encode_scores(cohort_id: int, n: int, scores: dict) -> bytes:
    """Round-2 binary message: (j, k) -> mean score vector."""
    parts = [struct.pack("<iQI", cohort_id, n, len(scores))]
    for (j, k) in sorted(scores):
        vec = np.asarray(scores[(j, k)], dtype=float)
        parts.append(struct.pack("<III", j, k, vec.size))
        parts.append(_f64(vec))
    return _frame(2, b"".join(parts))


def decode_scores(blob: bytes) -> tuple[int, int, dict]:
    round_no, buf = _unframe(blob)
    if round_no != 2:
        raise PayloadError(f"expected a round-2 score message, got round {round_no}")
    try:
        cohort_id, n, count = struct.unpack_from("<iQI", buf, 0)
        off = struct.calcsize("<iQI")
        scores = {}
        for _ in range(count):
            j, k, size = struct.unpack_from("<III", buf, off)
            off += 12
            vec, off = _read_f64(buf, off, size)
            scores[(j, k)] = vec
    except (struct.error, ValueError) as exc:
        raise PayloadError(f"malformed round-2 payload: {exc}") from exc
    if off != len(buf):
        raise PayloadError("round-2 payload has trailing bytes")
    return cohort_id, n, scores


def summary_to_json(summary: CohortSummary) -> str:
    """Text mode of the round-1 message, for debugging."""
    p = next(iter(summary.fits.values())).theta_hat.shape[0]
    doc = {
        "format_version": FORMAT_VERSION,
        "round": 1,
        "cohort_id": summary.cohort_id,
        "n": summary.n,
        "p": p,
        "blocks": [],
    }
    for j in summary.block_order:
        f = summary.fits[j]
        doc["blocks"].append({
            "j": j,
            "link": f.link_kind,
            "basis": f.basis_family,
            "s": f.S_hat.shape[0] // p,
            "converged": f.converged,
            "ridged": f.ridged,
            "iterations": f.iterations,
            "q": f.q_value,
            "dispersion": None if np.isnan(f.dispersion) else f.dispersion,
            "theta": f.theta_hat.tolist(),
            "S": f.S_hat.tolist(),
        })
    d = summary.V.shape[0]
    doc["V_lower"] = summary.V[np.tril_indices(d)].tolist()
    doc["V_dim"] = d
    return json.dumps(doc, indent=1)


def summary_from_json(text: str) -> CohortSummary:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PayloadError(f"malformed JSON summary: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION or doc.get("round") != 1:
        raise PayloadError("unsupported JSON summary version or round")
    p = doc["p"]
    fits = {}
    order = []
    for blk in doc["blocks"]:
        j = int(blk["j"])
        disp = blk["dispersion"]
        fits[j] = SourceFit(
            theta_hat=np.asarray(blk["theta"], dtype=float),
            S_hat=np.asarray(blk["S"], dtype=float).reshape(-1, p),
            psi_at_fit=None,
            C_hat=None,
            q_value=float(blk["q"]),
            converged=bool(blk["converged"]),
            iterations=int(blk["iterations"]),
            ridged=bool(blk["ridged"]),
            dispersion=float("nan") if disp is None else float(disp),
            link_kind=blk["link"],
            basis_family=blk["basis"],
        )
        order.append(j)
    d = doc["V_dim"]
    V = np.zeros((d, d))
    V[np.tril_indices(d)] = doc["V_lower"]
    V = V + np.tril(V, -1).T
    return CohortSummary(cohort_id=int(doc["cohort_id"]), n=int(doc["n"]),
                         fits=fits, V=V, block_order=tuple(order))


def write_summary(path, summary: CohortSummary, mode: str = "binary") -> None:
    if mode == "binary":
        with open(path, "wb") as fh:
            fh.write(encode_summary(summary))
    elif mode == "json":
        with open(path, "w") as fh:
            fh.write(summary_to_json(summary))
    else:
        raise ValueError("mode must be 'binary' or 'json'")


def read_summary(path) -> CohortSummary:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] == MAGIC:
        return decode_summary(blob)
    return summary_from_json(blob.decode("utf-8"))


def write_scores(path, cohort_id: int, n: int, scores: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_scores(cohort_id, n, scores))


def read_scores(path) -> tuple[int, int, dict]:
    with open(path, "rb") as fh:
        return decode_scores(fh.read())
