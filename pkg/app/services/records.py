"""
Run records and the best-known-solution registry
"""
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union
import json

from pydantic import BaseModel, Field

from app.config import settings
from app.services.errors import EdgeSelectorError, MissingBksError
from app.services.solution import compute_gap


class TrajectoryPoint(BaseModel):
    """One improvement of the best-so-far cost"""
    elapsed: float
    iteration: int
    cost: float
    gap: Optional[float] = None


class RunRecord(BaseModel):
    instance: str
    variant: str
    seed: int
    final_cost: float
    best_cost: float
    gap: Optional[float] = None
    elapsed: float
    iterations: int = 0
    n_routes: int = 0
    n_customers: int = 0
    customer_distribution: str = "unknown"
    trajectory: List[TrajectoryPoint] = Field(default_factory=list)


class BksRegistry:
    """Instance name -> best-known cost"""

    def __init__(self, entries: Optional[Dict[str, float]] = None):
        self.entries: Dict[str, float] = {}
        for name, cost in (entries or {}).items():
            self.add(name, cost)

    @classmethod
    def load(cls, path: Union[str, Path, None] = None) -> "BksRegistry":
        """Read "name cost" lines; blank lines and # comments are ignored"""
        path = Path(path or settings.BKS_FILE)
        registry = cls()
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise EdgeSelectorError(f"{path}:{lineno}: expected 'name cost'")
            try:
                registry.add(parts[0], float(parts[1]))
            except ValueError:
                raise EdgeSelectorError(f"{path}:{lineno}: cost '{parts[1]}' is not a number")
        return registry

    def add(self, name: str, cost: float):
        if cost <= 0:
            raise EdgeSelectorError(f"best-known cost of {name} must be positive, got {cost}")
        self.entries[name] = float(cost)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, name: str) -> float:
        if name not in self.entries:
            raise MissingBksError(name)
        return self.entries[name]

    def gap(self, name: str, cost: float) -> float:
        return compute_gap(cost, self.get(name))


def save_records(records: Iterable[RunRecord], path: Union[str, Path], append: bool = False) -> Path:
    """Write records as JSON lines"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a" if append else "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.model_dump_json() + "\n")
    return path


def load_records(path: Union[str, Path]) -> List[RunRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(RunRecord.model_validate(json.loads(line)))
    return records
