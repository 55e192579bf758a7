"""
Benchmark Service
Instance x variant x seed grids, gap tables and the one-tailed Wilcoxon
signed-rank comparison.
"""
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import norm, rankdata

from app.config import SolverDefaults, settings, solver_defaults
from app.services.errors import EdgeSelectorError, MissingBksError
from app.services.instance import Instance, load_instance
from app.services.labeling import Selector
from app.services.metaheuristics import VariantConfig, lookup_variant, run_variant
from app.services.records import BksRegistry, RunRecord
from app.utils.logging import logger

EXACT_WILCOXON_MAX = 20
SIZE_BAND_EDGES = (200, 500)
GROUP_KEYS = ("size", "distribution", "variant", "instance")


# ---------------------------------------------------------------------------
# Benchmark grid
# ---------------------------------------------------------------------------

class BenchSuite(BaseModel):
    """TOML benchmark manifest"""
    model_config = ConfigDict(extra="forbid")

    instances: List[str]
    variants: List[str] = Field(default_factory=lambda: ["ils-baseline"])
    runs: int = Field(default=5, ge=1)
    time_limit: Optional[float] = Field(default=None, gt=0)
    max_iterations: Optional[int] = Field(default=None, ge=0)
    bks: Optional[str] = None
    output: Optional[str] = None
    solver: Dict[str, Any] = Field(default_factory=dict)


def load_suite(path: Union[str, Path]) -> BenchSuite:
    """Read a manifest; instance and bks paths are relative to the manifest"""
    path = Path(path)
    with path.open("rb") as fh:
        raw = tomllib.load(fh)
    suite = BenchSuite.model_validate(raw)
    base = path.parent
    suite.instances = [str((base / p) if not Path(p).is_absolute() else Path(p)) for p in suite.instances]
    if suite.bks is not None and not Path(suite.bks).is_absolute():
        suite.bks = str(base / suite.bks)
    return suite


def _run_cell(args) -> RunRecord:
    instance, cfg, bks, selector, defaults = args
    _, record = run_variant(instance, cfg, selector=selector, bks=bks, defaults=defaults)
    logger.info("benchmark_cell_complete", instance=instance.name, variant=cfg.name, seed=cfg.seed,
                cost=record.best_cost, gap=record.gap)
    return record


def run_benchmark(
    suite: Sequence[Instance],
    variants: Sequence[VariantConfig],
    runs: int = 5,
    registry: Optional[BksRegistry] = None,
    selectors: Optional[Dict[str, Selector]] = None,
    threads: Optional[int] = None,
    defaults: Optional[SolverDefaults] = None
) -> List[RunRecord]:
    """
    Full factorial instance x variant x seed grid, seeds 0..runs-1

    Args:
        suite: Instances; each needs a best-known cost
        variants: Variant presets (time limit and iteration budget taken from each)
        runs: Seeds per cell
        registry: Best-known costs; defaults to the shipped registry
        selectors: Pre-built selectors by variant name
        threads: Worker processes (defaults to the THREADS setting)
        defaults: Solver constants shared by every run

    Returns:
        Records ordered by instance, variant and seed
    """
    registry = registry if registry is not None else BksRegistry.load()
    missing = [inst.name for inst in suite if inst.name not in registry]
    if missing:
        raise MissingBksError(missing[0])
    selectors = selectors or {}
    defaults = defaults or solver_defaults
    cells = [
        (inst, variant.with_overrides(seed=seed), registry.get(inst.name), selectors.get(variant.name), defaults)
        for inst in suite
        for variant in variants
        for seed in range(runs)
    ]
    threads = threads or settings.THREADS
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_run_cell, cells))
    else:
        records = [_run_cell(cell) for cell in cells]
    return records


def run_suite(suite: BenchSuite, threads: Optional[int] = None,
              defaults: Optional[SolverDefaults] = None) -> List[RunRecord]:
    """Run a manifest; its [solver] table overrides the given solver constants"""
    base = defaults or solver_defaults
    defaults = SolverDefaults(**{**base.model_dump(), **suite.solver})
    instances = [load_instance(p) for p in suite.instances]
    variants = [
        lookup_variant(name).with_overrides(time_limit=suite.time_limit, max_iterations=suite.max_iterations)
        for name in suite.variants
    ]
    registry = BksRegistry.load(suite.bks) if suite.bks else BksRegistry.load()
    return run_benchmark(instances, variants, suite.runs, registry, threads=threads, defaults=defaults)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

def _signed_ranks(differences: np.ndarray) -> Tuple[np.ndarray, float]:
    """Average ranks of |d| and the positive rank sum"""
    ranks = rankdata(np.abs(differences))
    return ranks, float(ranks[differences > 0].sum())


def wilcoxon_exact_p(differences: Sequence[float]) -> float:
    """
    P(W+ >= observed) over all 2^n sign assignments of the ranked |d|.
    Average ranks are doubled so the subset-sum table stays integral.
    """
    d = np.asarray(differences, dtype=np.float64)
    d = d[d != 0]
    ranks, w_plus = _signed_ranks(d)
    doubled = np.rint(ranks * 2).astype(int)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        counts[r:] = counts[r:] + counts[:total + 1 - r].copy()
    observed = int(round(w_plus * 2))
    return float(counts[observed:].sum() / 2.0 ** len(d))


def wilcoxon_normal_p(differences: Sequence[float]) -> float:
    """Normal approximation with tie correction and continuity correction"""
    d = np.asarray(differences, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    ranks, w_plus = _signed_ranks(d)
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_sizes ** 3) - tie_sizes).sum()) / 48.0
    if variance <= 0:
        return 1.0
    z = (w_plus - mean - 0.5) / math.sqrt(variance)
    return float(norm.sf(z))


def wilcoxon_one_tailed(paired_a: Sequence[float], paired_b: Sequence[float],
                        alpha: float = 0.05) -> Tuple[Optional[float], bool]:
    """
    Test whether b improves on a (smaller costs). Zero differences are
    dropped; exact enumeration up to 20 pairs, normal approximation above.

    Returns:
        (p_value, reject); p_value is None when every difference is zero
    """
    a = np.asarray(paired_a, dtype=np.float64)
    b = np.asarray(paired_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EdgeSelectorError("paired samples must be one-dimensional and of equal length")
    if len(a) < 5:
        raise EdgeSelectorError(f"the signed-rank test needs at least 5 pairs, got {len(a)}")
    differences = a - b
    nonzero = differences[differences != 0]
    if len(nonzero) == 0:
        return None, False
    if len(nonzero) <= EXACT_WILCOXON_MAX:
        p = wilcoxon_exact_p(nonzero)
    else:
        p = wilcoxon_normal_p(nonzero)
    p = min(1.0, p)
    return p, p <= alpha


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _band_index(n_customers: int) -> int:
    return sum(n_customers > edge for edge in SIZE_BAND_EDGES)


def records_frame(records: Sequence[RunRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([r.model_dump(exclude={"trajectory"}) for r in records])
    if frame["gap"].isna().any():
        raise EdgeSelectorError("every record needs a gap; run with best-known costs")
    return frame


def report_tables(records: Sequence[RunRecord], group_by: str = "size",
                  csv_path: Optional[Union[str, Path]] = None) -> Tuple[pd.DataFrame, str]:
    """
    Average gap, median gap and average time per group

    Args:
        records: Non-empty run records with gaps
        group_by: size, distribution, variant or instance
        csv_path: Also write the table as CSV

    Returns:
        (table, formatted text)
    """
    if not records:
        raise EdgeSelectorError("no records to report")
    if group_by not in GROUP_KEYS:
        raise EdgeSelectorError(f"unknown grouping '{group_by}', expected one of {GROUP_KEYS}")
    frame = records_frame(records)
    if group_by == "size":
        frame["band"] = frame["n_customers"].map(_band_index)
        limits = frame.groupby("band")["n_customers"].agg(["min", "max"])
        labels = {band: f"{row['min']} - {row['max']}" for band, row in limits.iterrows()}
        frame["group"] = frame["band"].map(labels)
        order_key = "band"
    else:
        column = {"distribution": "customer_distribution", "variant": "variant", "instance": "instance"}[group_by]
        frame["group"] = frame[column].astype(str)
        order_key = "group"
    table = (
        frame.groupby(["group", order_key] if order_key != "group" else ["group"])
        .agg(runs=("gap", "size"), avg_gap=("gap", "mean"), median_gap=("gap", "median"),
             avg_time=("elapsed", "mean"))
        .reset_index()
        .sort_values([order_key, "group"] if order_key != "group" else ["group"])
        .reset_index(drop=True)
    )
    if order_key != "group":
        table = table.drop(columns=[order_key])
    if csv_path is not None:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(csv_path, index=False)
    text = table.to_string(index=False, float_format=lambda v: f"{v:.3f}")
    return table, text
