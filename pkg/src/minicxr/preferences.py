"""Preference records and the file-queue plumbing of the feedback loop.

Records are append-only line-delimited JSON; pair files sit in a queue
directory until a rater answers them through the feedback service.
"""

from __future__ import annotations

import base64
import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path


@dataclass(frozen=True)
class PreferenceRecord:
    study_id: str
    prompt: str
    report_a: str
    report_b: str
    choice: str          # "A" | "B" | "skip"
    rater_id: str
    timestamp_ms: int

    def __post_init__(self):
        if self.choice not in ("A", "B", "skip"):
            raise ValueError(f"choice must be A, B or skip, got {self.choice!r}")


def append_record(path, record: PreferenceRecord) -> None:
    """Atomic single-line append; the line is durable before returning."""
    line = json.dumps(asdict(record), sort_keys=True) + "\n"
    fd = os.open(str(path), os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
    try:
        os.write(fd, line.encode("utf-8"))
        os.fsync(fd)
    finally:
        os.close(fd)


def read_records(path) -> list[PreferenceRecord]:
    p = Path(path)
    if not p.exists():
        return []
    out = []
    for line in p.read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(PreferenceRecord(**json.loads(line)))
    return out


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass(frozen=True)
class PendingPair:
    pair_id: str
    study_id: str
    prompt: str
    image_pgm_b64: str
    report_a: str
    report_b: str


def write_pair_file(queue_dir, pair: PendingPair) -> Path:
    queue_dir = Path(queue_dir)
    queue_dir.mkdir(parents=True, exist_ok=True)
    path = queue_dir / f"{pair.pair_id}.json"
    path.write_text(json.dumps(asdict(pair), sort_keys=True), encoding="utf-8")
    return path


def read_pair_file(path) -> PendingPair:
    return PendingPair(**json.loads(Path(path).read_text(encoding="utf-8")))


def list_pending_pairs(queue_dir) -> list[Path]:
    queue_dir = Path(queue_dir)
    if not queue_dir.exists():
        return []
    return sorted(queue_dir.glob("*.json"))


def encode_image_b64(image) -> str:
    """Pack a StudyImage as a base64 P5 graymap."""
    import numpy as np
    levels = np.round(image.pixels * 255.0).astype(np.uint8)
    header = f"P5\n{levels.shape[1]} {levels.shape[0]}\n255\n".encode("ascii")
    return base64.b64encode(header + levels.tobytes()).decode("ascii")
