"""Shared plumbing: seed derivation and atomic file writes."""

from __future__ import annotations

import hashlib
import os
import tempfile


def derive_seed(seed: int, label: str) -> int:
    """Derive a named sub-seed from a base seed.

    Stages (baseline, falsifier, minibatch, init, ...) each hash the base
    seed with their own label so that reseeding one stage never shifts the
    random stream of another.
    """
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def atomic_write_text(path: str, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
