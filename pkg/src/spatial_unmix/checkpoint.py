"""Resumable binary chain snapshots.

Layout (little-endian throughout)::

    offset  size        content
    0       8           magic b"SUXCHK1\\0"
    8       8 * 8       uint64: version, iteration, P, R, K, n_keep, n_stored, degenerate
    72      ...         float64 blocks, each row-major, in this order:
                        coeffs (R, P), labels (P,), s2, psi (K, R), sigma2 (K, R),
                        v2, delta, proposal_sd (R,), window_accepts (R,),
                        window_tries, accept_counts (R, P),
                        stored labels (n_stored, P), stored coeffs (n_stored, R, P),
                        stored s2 (n_stored,), stored psi (n_stored, K, R),
                        stored sigma2 (n_stored, K, R), stored v2 (n_stored,),
                        stored delta (n_stored,)

Integer-valued quantities (labels, counters) are stored as float64, exact
below 2**53.  Because every random draw is addressed by iteration number,
a chain resumed from a snapshot reproduces the uninterrupted chain bit for
bit.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"SUXCHK1\x00"
VERSION = 1
_HEADER = struct.Struct("<8Q")
_F64 = np.dtype("<f8")


def write_checkpoint(path, prog, store) -> None:
    s = prog.state
    R, P = s.coeffs.shape
    K = s.psi.shape[0]
    n = prog.n_stored
    n_keep = store["s2"].shape[0]
    blocks = [
        s.coeffs, s.labels, [s.s2], s.psi, s.sigma2, [s.v2], [s.delta],
        prog.proposal_sd, prog.window_accepts, [prog.window_tries], prog.accept_counts,
        store["labels"][:n], store["coeffs"][:n], store["s2"][:n], store["psi"][:n],
        store["sigma2"][:n], store["v2"][:n], store["delta"][:n],
    ]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(VERSION, prog.iteration, P, R, K, n_keep, n, prog.degenerate))
        for b in blocks:
            fh.write(np.ascontiguousarray(b, dtype=_F64).tobytes())
    os.replace(tmp, path)


def read_checkpoint(path, store, dims):
    """Restore chain progress into ``store`` and return the bookkeeping record."""
    from .sampler import ChainState, _Progress

    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:8]!r} at byte 0")
    version, iteration, P, R, K, n_keep, n, degenerate = _HEADER.unpack_from(raw, 8)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    if (P, R, K) != tuple(dims):
        raise ParseError(f"{path}: snapshot dimensions {(P, R, K)} do not match chain {tuple(dims)}")
    if n_keep != store["s2"].shape[0]:
        raise ParseError(f"{path}: snapshot keeps {n_keep} draws, chain keeps {store['s2'].shape[0]}")

    shapes = [
        (R, P), (P,), (1,), (K, R), (K, R), (1,), (1,), (R,), (R,), (1,), (R, P),
        (n, P), (n, R, P), (n,), (n, K, R), (n, K, R), (n,), (n,),
    ]
    expected = _HEADER.size + 8 + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(raw)}")
    offset = _HEADER.size + 8
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype=_F64, count=count, offset=offset).reshape(shape).copy())
        offset += 8 * count
    (coeffs, labels, s2, psi, sigma2, v2, delta, sd, wacc, wtries, acc,
     st_labels, st_coeffs, st_s2, st_psi, st_sigma2, st_v2, st_delta) = arrays

    store["labels"][:n] = st_labels
    store["coeffs"][:n] = st_coeffs
    store["s2"][:n] = st_s2
    store["psi"][:n] = st_psi
    store["sigma2"][:n] = st_sigma2
    store["v2"][:n] = st_v2
    store["delta"][:n] = st_delta
    state = ChainState(labels.astype(np.int64), coeffs, float(s2[0]), psi, sigma2, float(v2[0]), float(delta[0]))
    return _Progress(
        iteration, state, sd, wacc, int(wtries[0]), acc.astype(np.int64), degenerate, n,
    )
