"""Run manifests: enough resolved state to reproduce a run bit-exactly."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np

__all__ = ["sha256_file", "sha256_array", "build_manifest",
           "write_manifest", "read_manifest"]


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def sha256_array(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(str(arr.dtype).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def build_manifest(command: str, parameters: dict, inputs: dict[str, str | Path],
                   outputs: dict[str, str | Path],
                   metrics: dict | None = None,
                   timings: dict | None = None) -> dict:
    return {
        "command": command,
        "parameters": parameters,
        "inputs": {name: {"path": str(p), "sha256": sha256_file(p)}
                   for name, p in inputs.items() if p is not None},
        "outputs": {name: {"path": str(p), "sha256": sha256_file(p)}
                    for name, p in outputs.items()},
        "metrics": metrics,
        "timings": timings,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }


def write_manifest(manifest: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
