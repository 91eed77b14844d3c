"""Versioned array containers with byte-reproducible output.

A container is a zip archive of ``.npy`` members (readable with ``np.load``)
plus a ``__meta__.json`` member. Every zip entry gets a fixed timestamp so
saving the same content twice yields identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_FIXED_TIME = (1980, 1, 1, 0, 0, 0)
_META = "__meta__.json"


class ContainerError(ValueError):
    """Raised for corrupt, foreign or version-mismatched files."""


def write_container(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": "polarsim", "kind": kind, "version": FORMAT_VERSION, **(meta or {})}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo(_META, date_time=_FIXED_TIME)
        zf.writestr(info, json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_FIXED_TIME), member.getvalue())
    path.write_bytes(buf.getvalue())
    return path


def read_container(path, kind: str) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read(_META))
            arrays = {}
            for name in zf.namelist():
                if name == _META:
                    continue
                with zf.open(name) as fh:
                    arrays[name[: -len(".npy")]] = np.lib.format.read_array(
                        io.BytesIO(fh.read()), allow_pickle=False
                    )
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError, OSError) as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from exc
    if header.get("format") != "polarsim":
        raise ContainerError(f"{path} is not a polarsim container")
    if header.get("version") != FORMAT_VERSION:
        raise ContainerError(
            f"{path} has format version {header.get('version')}, expected {FORMAT_VERSION}"
        )
    if header.get("kind") != kind:
        raise ContainerError(f"{path} holds a {header.get('kind')!r}, expected {kind!r}")
    return arrays, header
