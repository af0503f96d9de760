"""Deterministic artifact containers and the fingerprint chain between them."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class ArtifactError(RuntimeError):
    """A pipeline artifact is missing, malformed, or fingerprint-mismatched."""


def canon_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(meta: dict, arrays: dict[str, np.ndarray] | None = None) -> str:
    """Stable 16-hex digest of a metadata dict plus named arrays."""
    h = hashlib.sha256(canon_json(meta).encode())
    for name in sorted(arrays or {}):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def save_npz(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """np.load-compatible zip with fixed entry timestamps.

    np.savez stamps wall-clock time into each zip member, which breaks
    byte-identical reruns; this writer pins the dates instead.
    """
    payload = {name: np.ascontiguousarray(a) for name, a in arrays.items()}
    payload["__meta__"] = np.frombuffer(canon_json(meta).encode(), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(payload):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, payload[name])
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_npz(path) -> tuple[dict, dict[str, np.ndarray]]:
    if not Path(path).exists():
        raise ArtifactError(f"missing artifact: {path}")
    try:
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
    except Exception as e:  # zip damage, pickle refusal, truncation
        raise ArtifactError(f"unreadable artifact {path}: {e}") from None
    raw = arrays.pop("__meta__", None)
    if raw is None:
        raise ArtifactError(f"{path}: no __meta__ entry; not a pipeline artifact")
    return json.loads(raw.tobytes().decode()), arrays


def expect_format(meta: dict, fmt: str, path) -> None:
    if meta.get("format") != fmt:
        raise ArtifactError(f"{path}: expected {fmt!r} artifact, found {meta.get('format')!r}")
    if meta.get("version") != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported version {meta.get('version')!r}")


def require_match(kind: str, expected: str, actual: str) -> None:
    """Fingerprint check between an artifact and the upstream it claims."""
    if expected != actual:
        raise ArtifactError(f"{kind} fingerprint mismatch: artifact built against {expected}, got {actual}")


def save_json(path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def load_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ArtifactError(f"missing artifact: {path}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ArtifactError(f"unreadable artifact {path}: {e}") from None
    if not isinstance(obj, dict):
        raise ArtifactError(f"{path}: expected a JSON object")
    return obj
