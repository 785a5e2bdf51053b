"""Binary PPM (P6) and PGM (P5) reading and writing, maxval 255.

Arrays are float in [0, 1]: (3, H, W) for PPM, (H, W) for PGM.
"""
from __future__ import annotations

import numpy as np


class NetpbmError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last one.
    """
    toks: list[bytes] = []
    i, n = 0, len(buf)
    while len(toks) < count:
        while i < n and buf[i] in b" \t\r\n":
            i += 1
        if i < n and buf[i] == ord("#"):
            while i < n and buf[i] not in b"\r\n":
                i += 1
            continue
        if i >= n:
            raise NetpbmError("truncated header", i)
        start = i
        while i < n and buf[i] not in b" \t\r\n#":
            i += 1
        toks.append(buf[start:i])
    if i >= n or buf[i] not in b" \t\r\n":
        raise NetpbmError("header must end with a single whitespace byte", i)
    return toks, i + 1


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {buf[:2]!r}, expected P5 or P6", 0)
    channels = 3 if buf[:2] == b"P6" else 1
    toks, off = _tokens(buf, 4)
    try:
        width, height, maxval = (int(t) for t in toks[1:4])
    except ValueError:
        raise NetpbmError(f"non-integer header field in {toks[1:4]!r}", 2) from None
    if width <= 0 or height <= 0:
        raise NetpbmError(f"degenerate dimensions {width}x{height}", 2)
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, got {maxval}", 2)
    need = width * height * channels
    payload = buf[off:off + need]
    if len(payload) < need:
        raise NetpbmError(f"truncated payload: need {need} bytes, have {len(payload)}", off + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        return arr.reshape(height, width)
    return arr.reshape(height, width, 3).transpose(2, 0, 1).copy()


def encode(arr) -> bytes:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        magic, body = b"P5", a
    elif a.ndim == 3 and a.shape[0] == 3:
        magic, body = b"P6", a.transpose(1, 2, 0)
    else:
        raise ValueError(f"expected (H, W) or (3, H, W), got {a.shape}")
    h, w = body.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("cannot encode an empty image")
    q = np.rint(np.clip(body, 0.0, 1.0) * 255.0).astype(np.uint8)
    return magic + f"\n{w} {h}\n255\n".encode() + q.tobytes()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        a = decode(fh.read())
    if a.ndim != 3:
        raise NetpbmError("expected a P6 colour image", 0)
    return a


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        a = decode(fh.read())
    if a.ndim != 2:
        raise NetpbmError("expected a P5 grayscale image", 0)
    return a


def write_ppm(path, rgb) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(rgb))


def write_pgm(path, gray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(gray))
