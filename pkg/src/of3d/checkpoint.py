"""Parameter checkpoint file: a flat container of named float64 tensors.

Layout: a text header line ``OF3D-CKPT v1``, then for each tensor (sorted by
name) a name line, a space-separated shape line, a payload byte count line,
and the raw little-endian float64 payload followed by a newline.
"""

from __future__ import annotations

import re

import numpy as np

from .autodiff import Tensor
from .errors import SceneFormatError

HEADER = b"OF3D-CKPT v1"
_NAME_RE = re.compile(r"^[A-Za-z0-9._-]+$")


def save_checkpoint(path, tensors: dict) -> None:
    """Write named tensors (Tensor or ndarray values) to ``path``."""
    with open(path, "wb") as fh:
        fh.write(HEADER + b"\n")
        for name in sorted(tensors):
            if not _NAME_RE.match(name):
                raise SceneFormatError(f"invalid tensor name {name!r}")
            value = tensors[name]
            data = value.data if isinstance(value, Tensor) else np.asarray(value)
            data = np.ascontiguousarray(data, dtype=np.float64)
            if data.ndim == 0:
                data = data.reshape(1)
            payload = data.astype("<f8").tobytes()
            fh.write(name.encode() + b"\n")
            fh.write(" ".join(str(d) for d in data.shape).encode() + b"\n")
            fh.write(str(len(payload)).encode() + b"\n")
            fh.write(payload + b"\n")


def load_checkpoint(path) -> dict:
    """Read a checkpoint back into a name -> ndarray dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(HEADER + b"\n"):
        raise SceneFormatError("bad checkpoint header", line=1)
    pos = len(HEADER) + 1
    out: dict[str, np.ndarray] = {}
    line_no = 1
    while pos < len(blob):
        name, pos, line_no = _read_line(blob, pos, line_no)
        shape_line, pos, line_no = _read_line(blob, pos, line_no)
        count_line, pos, line_no = _read_line(blob, pos, line_no)
        try:
            shape = tuple(int(tok) for tok in shape_line.split())
            nbytes = int(count_line)
        except ValueError as exc:
            raise SceneFormatError(f"bad tensor record: {exc}", line=line_no)
        if pos + nbytes + 1 > len(blob):
            raise SceneFormatError(f"truncated payload for {name!r}", line=line_no)
        data = np.frombuffer(blob[pos : pos + nbytes], dtype="<f8").astype(np.float64)
        pos += nbytes
        if blob[pos : pos + 1] != b"\n":
            raise SceneFormatError(f"missing newline after payload of {name!r}")
        pos += 1
        line_no += 1
        if data.size != int(np.prod(shape)):
            raise SceneFormatError(
                f"payload size {data.size} does not match shape {shape} for {name!r}"
            )
        if name in out:
            raise SceneFormatError(f"duplicate tensor name {name!r}")
        out[name] = data.reshape(shape)
    return out


def _read_line(blob: bytes, pos: int, line_no: int):
    end = blob.find(b"\n", pos)
    if end < 0:
        raise SceneFormatError("unexpected end of file", line=line_no + 1)
    return blob[pos:end].decode(), end + 1, line_no + 1
