"""File formats: PPM/PGM images, raw float32 dumps with sidecars, and the
canonical key=value config text used everywhere a config goes to disk."""

from __future__ import annotations

import os

import numpy as np


# ---------------------------------------------------------------------------
# key = value config documents

def dump_kv(entries: dict) -> str:
    """Canonical text: sorted keys, one `key = value` per line."""
    lines = [f"{k} = {entries[k]}" for k in sorted(entries)]
    return "\n".join(lines) + "\n"


def parse_kv(text: str, schema: dict) -> dict:
    """Parse a key=value document; keys outside ``schema`` are rejected.

    ``schema`` maps key -> converter (e.g. int, float, str).
    """
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in schema:
            raise ValueError(f"line {ln}: unknown key {key!r}")
        if key in out:
            raise ValueError(f"line {ln}: duplicate key {key!r}")
        out[key] = schema[key](value.strip())
    return out


def int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def fmt_int_tuple(vals) -> str:
    return ",".join(str(int(v)) for v in vals)


# ---------------------------------------------------------------------------
# images

def write_ppm(path: str, img: np.ndarray) -> None:
    """Binary P6, maxval 255; img is [3,h,w] float in [0,1]."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM wants [3,h,w], got {img.shape}")
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape[1], img.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(q.transpose(1, 2, 0).tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    magic, w, h, maxval, payload = _parse_pnm_header(data, b"P6")
    img = np.frombuffer(payload, dtype=np.uint8, count=h * w * 3)
    return img.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def write_pgm16(path: str, gray: np.ndarray) -> None:
    """Binary P5, maxval 65535, most significant byte first; gray is uint16 [h,w]."""
    if gray.dtype != np.uint16 or gray.ndim != 2:
        raise ValueError("PGM16 wants a uint16 [h,w] array")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(gray.astype(">u2").tobytes())


def read_pgm16(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    magic, w, h, maxval, payload = _parse_pnm_header(data, b"P5")
    return np.frombuffer(payload, dtype=">u2", count=h * w).reshape(h, w).astype(np.uint16)


def _parse_pnm_header(data: bytes, magic: bytes):
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != magic:
        raise ValueError(f"expected {magic.decode()} file, got {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    return fields[0], w, h, maxval, data[pos:]


def gray16_quantize(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Affine map [lo, hi] -> [0, 65535]; callers record lo/hi in a sidecar."""
    if hi <= lo:
        raise ValueError("need hi > lo for gray quantization")
    scaled = (np.clip(values, lo, hi) - lo) / (hi - lo)
    return np.rint(scaled * 65535.0).astype(np.uint16)


# ---------------------------------------------------------------------------
# raw dumps

def write_raw(path: str, arr: np.ndarray, meta: dict | None = None) -> None:
    """Little-endian float32, row-major, plus a `<path>.txt` sidecar."""
    a = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(a.tobytes())
    entries = {"shape": fmt_int_tuple(arr.shape), "dtype": "float32"}
    entries.update(meta or {})
    with open(path + ".txt", "w") as f:
        f.write(dump_kv(entries))


def read_raw(path: str) -> tuple[np.ndarray, dict]:
    with open(path + ".txt") as f:
        text = f.read()
    entries = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or "=" not in line:
            continue
        k, _, v = line.partition("=")
        entries[k.strip()] = v.strip()
    shape = int_tuple(entries["shape"])
    if entries.get("dtype", "float32") != "float32":
        raise ValueError(f"unsupported raw dtype {entries.get('dtype')!r}")
    data = np.fromfile(path, dtype="<f4", count=int(np.prod(shape)))
    return data.reshape(shape).astype(np.float64), entries


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
