from __future__ import annotations

import hashlib
import json
from typing import Any


def derive_seed(master_seed: int, *labels: Any) -> int:
    payload = "|".join(str(part) for part in (master_seed, *labels)).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "big")


def config_digest(payload: Any) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def format_float(value: float) -> str:
    # repr round-trips bit-exactly
    return repr(float(value))
