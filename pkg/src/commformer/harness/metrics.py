"""JSON-lines streams for per-iteration metrics and adjacency snapshots."""

from __future__ import annotations

import json
from pathlib import Path

METRIC_FIELDS = ("iteration", "stage", "env_steps", "episodes", "mean_return", "success_rate", "mean_steps_taken",
                 "encoder_loss", "decoder_loss", "entropy", "val_loss", "grad_norms", "gate_open_fraction",
                 "alpha_snapshot_ref")


def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=False)


class JsonlWriter:
    """Append-only writer; each record is flushed as one line."""

    def __init__(self, path: str | Path, mode: str = "w"):
        self.path = Path(path)
        self.lines = 0
        if mode == "a" and self.path.exists():
            self.lines = len(read_jsonl(self.path))
        self._fh = open(self.path, mode, encoding="utf-8")

    def write(self, record: dict) -> int:
        """Write ``record`` and return its 1-based line number."""
        self._fh.write(dumps_record(record) + "\n")
        self._fh.flush()
        self.lines += 1
        return self.lines

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def truncate_jsonl(path: str | Path, keep) -> None:
    """Rewrite ``path`` keeping only records for which ``keep(record)`` holds."""
    path = Path(path)
    if not path.exists():
        return
    records = [r for r in read_jsonl(path) if keep(r)]
    path.write_text("".join(dumps_record(r) + "\n" for r in records), encoding="utf-8")


def snapshot_ref(line: int, name: str = "alpha.jsonl") -> str:
    return f"{name}:{line}"


def resolve_snapshot(metrics_path: str | Path, ref: str) -> dict:
    """Look up the snapshot record that ``ref`` (``file:line``) points at."""
    name, _, line = ref.rpartition(":")
    records = read_jsonl(Path(metrics_path).parent / name)
    return records[int(line) - 1]
