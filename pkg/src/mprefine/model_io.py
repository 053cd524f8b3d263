"""Model file format: text header, binary little-endian payload, CRC32.

The header echoes the full config (the same key=value lines as the config
file format) plus the dimensions fingerprint, so any command can verify it
against a dataset before doing work.  The payload holds float64 parameter
blocks per step in declared order (alpha, beta, w_phi, w_psi); the trailing
4-byte CRC32 of the payload is validated on load, making round trips
bitwise-exact and corruption detectable.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from ._fileio import atomic_write_bytes
from .config import ModelConfig, dimensions_fingerprint, config_lines, parse_config_text
from .network import NetworkParams, param_items, zero_network_params

MODEL_MAGIC = "MPMF1"
_HEADER_END = "END_HEADER"


class ModelFormatError(ValueError):
    """Malformed model file or a header that does not match expectations."""


class ChecksumError(ModelFormatError):
    """Payload bytes do not match the stored checksum."""


def save_model(path, params: NetworkParams, cfg: ModelConfig) -> None:
    blocks = [np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in param_items(params)]
    payload = b"".join(blocks)
    header_lines = [
        MODEL_MAGIC,
        *config_lines(cfg),
        f"fingerprint={dimensions_fingerprint(cfg)}",
        f"payload_bytes={len(payload)}",
        _HEADER_END,
    ]
    header = ("\n".join(header_lines) + "\n").encode("ascii")
    atomic_write_bytes(path, header + payload + struct.pack("<I", zlib.crc32(payload)))


def load_model(path, expected_cfg: ModelConfig | None = None):
    """Read (params, cfg) back; every parameter is bitwise what was saved.

    Raises ModelFormatError on structural problems, ChecksumError when the
    payload fails CRC validation, and a fingerprint mismatch error when
    ``expected_cfg`` has different dimensions.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = (_HEADER_END + "\n").encode("ascii")
    split = blob.find(marker)
    if split < 0 or not blob.startswith((MODEL_MAGIC + "\n").encode("ascii")):
        raise ModelFormatError("not a model file (bad magic or missing header terminator)")
    header_text = blob[: split].decode("ascii")
    body = blob[split + len(marker):]

    lines = header_text.splitlines()
    kv_lines = []
    fingerprint = None
    payload_bytes = None
    for line in lines[1:]:
        if line.startswith("fingerprint="):
            fingerprint = line.split("=", 1)[1]
        elif line.startswith("payload_bytes="):
            try:
                payload_bytes = int(line.split("=", 1)[1])
            except ValueError:
                raise ModelFormatError("malformed payload_bytes header") from None
        else:
            kv_lines.append(line)
    if fingerprint is None or payload_bytes is None:
        raise ModelFormatError("header missing fingerprint or payload_bytes")

    cfg = parse_config_text("\n".join(kv_lines))
    if dimensions_fingerprint(cfg) != fingerprint:
        raise ModelFormatError("header fingerprint does not match its own dimensions")
    if expected_cfg is not None and dimensions_fingerprint(expected_cfg) != fingerprint:
        raise ModelFormatError(
            f"model fingerprint {fingerprint} does not match "
            f"expected {dimensions_fingerprint(expected_cfg)}"
        )

    if len(body) != payload_bytes + 4:
        raise ModelFormatError(
            f"payload is {len(body) - 4} bytes, header declares {payload_bytes}"
        )
    payload, crc_raw = body[:-4], body[-4:]
    (stored_crc,) = struct.unpack("<I", crc_raw)
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumError("payload checksum mismatch (file corrupted?)")

    params = zero_network_params(cfg)
    offset = 0
    for name, arr in param_items(params):
        nbytes = arr.size * 8
        if offset + nbytes > len(payload):
            raise ModelFormatError(f"payload truncated in block {name}")
        arr[...] = np.frombuffer(payload[offset : offset + nbytes], dtype="<f8").reshape(arr.shape)
        offset += nbytes
    if offset != len(payload):
        raise ModelFormatError(f"payload has {len(payload) - offset} trailing bytes")
    return params, cfg
