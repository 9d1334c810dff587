"""
File handling utilities: VTFT feature files and binary PGM/PPM rasters
"""

import struct

import numpy as np
from PIL import Image

from utils.errors import FormatError

VTFT_MAGIC = b"VTFT"
VTFT_VERSION = 1
VTFT_DTYPE_F32 = 0
VTFT_HEADER = struct.Struct("<4sHBB3I")  # magic, version, dtype, reserved, C, H, W

NETPBM_CHANNELS = {b"P5": 1, b"P6": 3}


# ── VTFT ───────────────────────────────────────────────────────────────────────

def write_vtft(array, path):
    """Write a C×H×W array as little-endian float32 with a 20-byte header."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 3:
        raise FormatError(f"VTFT payload must be C×H×W, got shape {array.shape}", path)
    channels, height, width = array.shape
    header = VTFT_HEADER.pack(VTFT_MAGIC, VTFT_VERSION, VTFT_DTYPE_F32, 0, channels, height, width)
    with open(path, "wb") as handle:
        handle.write(header + array.astype("<f4").tobytes(order="C"))


def read_vtft(path) -> np.ndarray:
    """Read a VTFT file into a float64 C×H×W array."""
    with open(path, "rb") as handle:
        raw = handle.read()
    if len(raw) < VTFT_HEADER.size:
        raise FormatError("file shorter than the VTFT header", path)
    magic, version, dtype, _reserved, channels, height, width = VTFT_HEADER.unpack_from(raw)
    if magic != VTFT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", path)
    if version != VTFT_VERSION:
        raise FormatError(f"unsupported VTFT version {version}", path)
    if dtype != VTFT_DTYPE_F32:
        raise FormatError(f"unsupported VTFT dtype {dtype}", path)
    expected = 4 * channels * height * width
    payload = raw[VTFT_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, header implies {expected}", path)
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return values.reshape(channels, height, width)


# ── PGM / PPM ──────────────────────────────────────────────────────────────────

def _netpbm_header(raw, path):
    """Parse magic, width, height, maxval; return them with the payload offset."""
    magic = raw[:2]
    if magic not in NETPBM_CHANNELS:
        raise FormatError(f"not a binary PGM/PPM file (magic {magic!r})", path)
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header", path)
        fields.append(int(raw[start:pos]))
    # exactly one whitespace byte separates the header from the samples
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError("malformed header", path)
    width, height, maxval = fields
    return magic, width, height, maxval, pos + 1


def read_netpbm(path, magic=None) -> np.ndarray:
    """Read a maxval-255 P5/P6 file into a uint8 array (H×W or H×W×3)."""
    with open(path, "rb") as handle:
        raw = handle.read()
    found, width, height, maxval, offset = _netpbm_header(raw, path)
    if magic is not None and found != magic:
        raise FormatError(f"expected {magic.decode()} raster, found {found.decode()}", path)
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}", path)
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid raster size {width}×{height}", path)
    expected = width * height * NETPBM_CHANNELS[found]
    if len(raw) - offset < expected:
        raise FormatError(f"truncated payload: {len(raw) - offset} of {expected} bytes", path)
    with Image.open(path) as image:
        samples = np.asarray(image, dtype=np.uint8)
    return samples.copy()


def write_netpbm(samples, path):
    """Write uint8 H×W (PGM) or H×W×3 (PPM) samples."""
    samples = np.ascontiguousarray(samples, dtype=np.uint8)
    if samples.ndim == 3 and samples.shape[2] == 1:
        samples = samples[:, :, 0]
    if samples.ndim not in (2, 3):
        raise FormatError(f"cannot write raster of shape {samples.shape}", path)
    Image.fromarray(samples).save(path, format="PPM")
