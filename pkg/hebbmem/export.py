#=========================================================
# write_csv, MetricsLog
#=========================================================

from __future__ import annotations

#-----------------Standard Library-------------------
import csv
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

METRICS_HEADER = ("iteration", "loss", "reg_loss", "accuracy", "lr", "wall_ms")
FLIP_HISTORY_HEADER = ("game_index", "n_flips", "total_reward")
FLIP_COUNTS_HEADER = ("game_index", "n_flips")
OOD_HEADER = ("n_test", "accuracy")


#-----------------write_csv-------------------
def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Comma separated, header row, floats written with repr so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


#-----------------MetricsLog-------------------
class MetricsLog:
    """Append-only CSV; the header is written once when the file is created."""

    def __init__(self, path: Path, header: Sequence[str] = METRICS_HEADER):
        self.path = Path(path)
        self.header = tuple(header)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(self.header)

    def append(self, row: Mapping[str, Any]) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow([row[key] for key in self.header])
