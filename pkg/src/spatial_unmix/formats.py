"""On-disk formats: image cubes, endmember CSVs, PGM label maps and quicklooks.

Cube layout
-----------
A cube ``<stem>`` is two files.  ``<stem>.json`` is a JSON object with
exactly the keys ``width``, ``height``, ``bands``, ``dtype`` (``"f32"``),
``interleave`` (``"bsq"``) and ``byte_order`` (``"little"``).
``<stem>.bsq`` holds ``width * height * bands`` little-endian float32
values, band after band, each band stored row by row.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .model import AbundanceMatrix, EndmemberMatrix, ImageCube
from .potts import LabelField

log = logging.getLogger(__name__)

CUBE_KEYS = ("width", "height", "bands", "dtype", "interleave", "byte_order")
_F32 = np.dtype("<f4")
SUM_TOLERANCE = 1e-5  # float32 storage loses the exact sum-to-one


def cube_paths(path) -> tuple[Path, Path]:
    """Header and payload paths for a cube given its stem or either file name."""
    path = Path(path)
    if path.suffix in (".json", ".bsq"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".bsq")


def write_cube(cube: ImageCube, path) -> tuple[Path, Path]:
    header_path, payload_path = cube_paths(path)
    header = {
        "width": cube.width, "height": cube.height, "bands": cube.bands,
        "dtype": "f32", "interleave": "bsq", "byte_order": "little",
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    # (P, L) pixel-major in memory; band-sequential on disk
    payload_path.write_bytes(np.ascontiguousarray(cube.data.T, dtype=_F32).tobytes())
    return header_path, payload_path


def _read_header(header_path: Path) -> dict:
    try:
        header = json.loads(header_path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{header_path}: not a JSON header ({exc})") from exc
    if not isinstance(header, dict):
        raise ParseError(f"{header_path}: header must be a JSON object")
    for key in sorted(set(header) - set(CUBE_KEYS)):
        log.warning("%s: ignoring unknown header key %r", header_path, key)
    missing = [k for k in CUBE_KEYS if k not in header]
    if missing:
        raise ParseError(f"{header_path}: missing header keys {missing}")
    expected = {"dtype": "f32", "interleave": "bsq", "byte_order": "little"}
    for key, value in expected.items():
        if header[key] != value:
            raise ParseError(f"{header_path}: unsupported {key} {header[key]!r}, expected {value!r}")
    for key in ("width", "height", "bands"):
        v = header[key]
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ParseError(f"{header_path}: {key} must be a positive integer, got {v!r}")
    return header


def read_cube(path) -> ImageCube:
    header_path, payload_path = cube_paths(path)
    h = _read_header(header_path)
    W, H, L = h["width"], h["height"], h["bands"]
    raw = payload_path.read_bytes()
    expected = W * H * L * _F32.itemsize
    if len(raw) != expected:
        raise ParseError(f"{payload_path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype=_F32)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise ParseError(
            f"{payload_path}: non-finite value {values[bad[0]]} at byte offset {bad[0] * _F32.itemsize}"
        )
    data = values.reshape(L, H * W).T.astype(np.float64)
    return ImageCube(W, H, data)


# --------------------------------------------------------------------------
# endmember CSV


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def read_endmembers(path) -> EndmemberMatrix:
    """Endmember spectra from a CSV with one row per band and one column per endmember.

    A first row containing any non-numeric cell is taken as the endmember
    names.  Blank lines are skipped.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [(i, row) for i, row in enumerate(csv.reader(fh), start=1)
                if any(cell.strip() for cell in row)]
    if not rows:
        raise ParseError(f"{path}: empty endmember file")
    names = None
    first_line, first = rows[0]
    if not all(_is_number(c) for c in first):
        names = [c.strip() for c in first]
        rows = rows[1:]
        if not rows:
            raise ParseError(f"{path}: header row but no spectra")
    width = len(names) if names is not None else len(rows[0][1])
    values = []
    for line, row in rows:
        if len(row) != width:
            raise ParseError(f"{path}: line {line} has {len(row)} columns, expected {width}")
        try:
            values.append([float(c) for c in row])
        except ValueError:
            cell = next(c for c in row if not _is_number(c))
            raise ParseError(f"{path}: line {line}: non-numeric cell {cell!r}") from None
    spectra = np.array(values)
    if not np.all(np.isfinite(spectra)):
        line = rows[int(np.flatnonzero(~np.isfinite(spectra).all(axis=1))[0])][0]
        raise ParseError(f"{path}: line {line}: non-finite value")
    try:
        return EndmemberMatrix(spectra, names)
    except InvalidArgumentError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def write_endmembers(M: EndmemberMatrix, path) -> None:
    names = M.names or [f"endmember_{r + 1}" for r in range(M.spectra.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in M.spectra:
            w.writerow([repr(float(v)) for v in row])


# --------------------------------------------------------------------------
# PGM


def write_pgm(path, gray: np.ndarray, comments=()) -> None:
    """Binary 8-bit PGM (P5) of an ``(height, width)`` array."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise InvalidArgumentError("PGM data must be two-dimensional")
    if gray.min(initial=0) < 0 or gray.max(initial=0) > 255:
        raise InvalidArgumentError("PGM gray levels must lie in [0, 255]")
    H, W = gray.shape
    head = "P5\n" + "".join(f"# {c}\n" for c in comments) + f"{W} {H}\n255\n"
    Path(path).write_bytes(head.encode("ascii") + gray.astype(np.uint8).tobytes())


def read_pgm(path) -> tuple[np.ndarray, list[str]]:
    """Read a binary 8-bit PGM; returns the ``(height, width)`` array and its comments."""
    path = Path(path)
    raw = path.read_bytes()
    tokens = []
    comments = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(raw):
            raise ParseError(f"{path}: truncated PGM header at byte {pos}")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            end = raw.find(b"\n", pos)
            end = len(raw) if end < 0 else end
            comments.append(raw[pos + 1:end].decode("ascii", "replace").strip())
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            m = re.compile(rb"\S+").match(raw, pos)
            tokens.append(m.group().decode("ascii", "replace"))
            pos = m.end()
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != "P5":
        raise ParseError(f"{path}: bad magic {tokens[0]!r} at byte 0, expected 'P5'")
    try:
        W, H, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(f"{path}: malformed PGM header {tokens[1:]}") from None
    if maxval != 255:
        raise ParseError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    if len(raw) - pos != W * H:
        raise ParseError(f"{path}: expected {W * H} raster bytes at byte offset {pos}, found {len(raw) - pos}")
    gray = np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(H, W).copy()
    return gray, comments


def label_gray_levels(n_classes: int) -> np.ndarray:
    """Gray level of each 0-based class: ``floor(255 k / (K - 1))``, all 0 when ``K = 1``."""
    if n_classes > 256:
        raise InvalidArgumentError(f"label maps support at most 256 classes, got {n_classes}")
    if n_classes == 1:
        return np.zeros(1, dtype=np.int64)
    return (255 * np.arange(n_classes)) // (n_classes - 1)


def write_label_map(z: LabelField, path) -> None:
    """8-bit PGM of a label field; the class count is kept in a comment."""
    levels = label_gray_levels(z.n_classes)
    write_pgm(path, levels[z.grid], comments=[f"classes {z.n_classes}"])


def read_label_map(path, n_classes: int | None = None) -> LabelField:
    gray, comments = read_pgm(path)
    for c in comments:
        m = re.fullmatch(r"classes\s+(\d+)", c)
        if m and n_classes is None:
            n_classes = int(m.group(1))
    if n_classes is None:
        raise ParseError(f"{path}: class count not recorded in the file and not given")
    levels = label_gray_levels(n_classes)
    lookup = np.full(256, -1, dtype=np.int64)
    lookup[levels] = np.arange(n_classes)
    labels = lookup[gray]
    if np.any(labels < 0):
        bad = int(gray.reshape(-1)[np.flatnonzero(labels.reshape(-1) < 0)[0]])
        raise ParseError(f"{path}: gray level {bad} does not encode any of {n_classes} classes")
    H, W = gray.shape
    return LabelField(W, H, labels.reshape(-1), n_classes)


def quicklook_gray(a: np.ndarray) -> np.ndarray:
    """8-bit quantization ``floor(a * 255 + 0.5)`` of values in [0, 1] (round half up)."""
    return np.clip(np.floor(np.asarray(a, dtype=float) * 255 + 0.5), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# abundance maps


def _abundance_stem(directory: Path, r: int) -> Path:
    return directory / f"abundance_{r + 1}"


def write_abundance_maps(A, width: int, height: int, directory) -> list[Path]:
    """One single-band float32 cube and one PGM quicklook per endmember."""
    values = A.values if isinstance(A, AbundanceMatrix) else np.asarray(A, dtype=float)
    if values.shape[1] != width * height:
        raise InvalidArgumentError(f"{values.shape[1]} pixels for a {width}x{height} map")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for r, row in enumerate(values):
        stem = _abundance_stem(directory, r)
        written.extend(write_cube(ImageCube(width, height, row[:, None]), stem))
        pgm = stem.with_name(stem.name + ".pgm")
        write_pgm(pgm, quicklook_gray(row).reshape(height, width), comments=[f"abundance {r + 1}"])
        written.append(pgm)
    return written


def read_abundance_maps(directory) -> tuple[AbundanceMatrix, int, int]:
    """Abundance maps written by :func:`write_abundance_maps`.

    Columns are renormalized to sum to one after checking that float32
    storage moved their sums by less than ``SUM_TOLERANCE``.
    """
    directory = Path(directory)
    rows = []
    r = 0
    geometry = None
    while cube_paths(_abundance_stem(directory, r))[0].exists():
        cube = read_cube(_abundance_stem(directory, r))
        if cube.bands != 1:
            raise ParseError(f"{directory}: abundance map {r + 1} has {cube.bands} bands")
        if geometry is None:
            geometry = (cube.width, cube.height)
        elif geometry != (cube.width, cube.height):
            raise ParseError(f"{directory}: abundance map {r + 1} size differs from map 1")
        rows.append(cube.data[:, 0])
        r += 1
    if not rows:
        raise FileNotFoundError(f"no abundance maps in {directory}")
    values = np.array(rows)
    sums = values.sum(axis=0)
    worst = float(np.max(np.abs(sums - 1.0)))
    if worst > SUM_TOLERANCE or np.any(values < 0):
        raise ParseError(f"{directory}: abundance maps are not on the simplex (sum error {worst:.3g})")
    return AbundanceMatrix(values / sums), geometry[0], geometry[1]


def write_histogram_csv(path, centers, counts) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center", "count"])
        for c, n in zip(centers, counts):
            w.writerow([repr(float(c)), int(n)])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
