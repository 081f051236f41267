"""File formats: binary/CSV matrices, raw tensors, PGM/PPM images, key-value text.

Matrix binary layout (little-endian)::

    b"SSLAB001" | uint64 P | uint64 M | P*M float64, column-major

Tensor binary layout::

    b"SSIMG001" | uint64 ndim | ndim * uint64 dims | float64 data, C order
"""

import csv
import struct
from pathlib import Path

import numpy as np

from .core import SparseCode

MATRIX_MAGIC = b"SSLAB001"
TENSOR_MAGIC = b"SSIMG001"


def fmt(x):
    """Format a float with 17 significant digits (round-trips float64)."""
    return "%.17g" % x


def write_matrix(path, a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"expected a vector or matrix, got shape {a.shape}")
    p, m = a.shape
    with open(path, "wb") as f:
        f.write(MATRIX_MAGIC)
        f.write(struct.pack("<QQ", p, m))
        f.write(np.asfortranarray(a).astype("<f8").tobytes(order="F"))


def read_matrix(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MATRIX_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:8]!r}")
    p, m = struct.unpack("<QQ", data[8:24])
    body = data[24:]
    if len(body) != 8 * p * m:
        raise ValueError(f"{path}: expected {8 * p * m} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape((p, m), order="F").astype(np.float64, order="C")


def read_vector(path):
    a = read_matrix(path)
    if a.shape[1] != 1:
        raise ValueError(f"{path}: expected a single column, got {a.shape}")
    return a[:, 0]


def write_matrix_csv(path, a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"atom_{m}" for m in range(a.shape[1])])
        for row in a:
            w.writerow([fmt(x) for x in row])


def read_matrix_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    if not all(h.strip() == f"atom_{m}" for m, h in enumerate(header)):
        raise ValueError(f"{path}: header must be atom_0,...,atom_{len(header) - 1}")
    return np.array([[float(x) for x in r] for r in body], dtype=np.float64).reshape(
        len(body), len(header)
    )


def write_tensor(path, t):
    t = np.ascontiguousarray(t, dtype="<f8")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<Q", t.ndim))
        f.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        f.write(t.tobytes(order="C"))


def read_tensor(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:8]!r}")
    (ndim,) = struct.unpack("<Q", data[8:16])
    dims = struct.unpack(f"<{ndim}Q", data[16 : 16 + 8 * ndim])
    body = data[16 + 8 * ndim :]
    if len(body) != 8 * int(np.prod(dims, dtype=np.int64)):
        raise ValueError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(body, dtype="<f8").reshape(dims).astype(np.float64)


def _pnm_tokens(data, count):
    # header tokens are whitespace separated, '#' starts a comment
    tokens, i = [], 2
    while len(tokens) < count:
        while data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while not data[j : j + 1].isspace():
            j += 1
        tokens.append(int(data[i:j]))
        i = j
    return tokens, i + 1


def read_pnm(path):
    """Read a binary PGM (P5) or PPM (P6) image.

    Returns a float64 array scaled to ``[0, 1]``: shape ``(H, W)`` for
    grayscale, ``(3, H, W)`` for color.
    """
    data = Path(path).read_bytes()
    kind = data[:2]
    if kind not in (b"P5", b"P6"):
        raise ValueError(f"{path}: only binary P5/P6 images are supported")
    (width, height, maxval), off = _pnm_tokens(data, 3)
    chans = 1 if kind == b"P5" else 3
    dtype = ">u1" if maxval < 256 else ">u2"
    n = width * height * chans
    px = np.frombuffer(data, dtype=dtype, count=n, offset=off).astype(np.float64) / maxval
    px = px.reshape(height, width, chans)
    return px[:, :, 0] if chans == 1 else np.moveaxis(px, -1, 0)


def write_pnm(path, img, maxval=255):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        kind, px = b"P5", img[:, :, None]
    elif img.ndim == 3 and img.shape[0] == 3:
        kind, px = b"P6", np.moveaxis(img, 0, -1)
    else:
        raise ValueError(f"unsupported image shape {img.shape}")
    h, w = px.shape[:2]
    q = np.clip(np.rint(px * maxval), 0, maxval)
    q = q.astype(">u1" if maxval < 256 else ">u2")
    with open(path, "wb") as f:
        f.write(kind + f"\n{w} {h}\n{maxval}\n".encode())
        f.write(q.tobytes())


def write_keyvalue(path, items):
    """Write ``key = value`` lines in the given order."""
    with open(path, "w") as f:
        for k, v in items:
            if isinstance(v, float):
                v = fmt(v)
            f.write(f"{k} = {v}\n")


def read_keyvalue(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_code(path, code):
    values = code.values if isinstance(code, SparseCode) else np.asarray(code)
    write_matrix(path, values)
