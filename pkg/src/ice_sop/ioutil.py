"""Small IO helpers shared across the package.

All persisted JSON goes through :func:`dump_json` so artifacts are
byte-stable across runs and platforms (sorted keys, UTF-8, trailing
newline).  Writes are atomic: temp file in the target directory, then
``os.replace``.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path


def dump_json(obj) -> str:
    """Serialize to deterministic, human-diffable JSON."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


def canonical_json_bytes(obj) -> bytes:
    """Compact canonical encoding used for hashing."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write_text(path: Path, text: str) -> None:
    """Write text to ``path`` via a same-directory temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def read_json(path: Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
