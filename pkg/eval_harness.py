"""
Multi-seed benchmark runs: metrics, the grid sweep and aggregation.

Results are appended to a JSON-lines file as each seed finishes, so an
interrupted sweep resumes by skipping (seed, fingerprint) pairs already on disk.
"""

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Set, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError

from dataset import SyntheticConfig, generate_synthetic, split, standardize
from errors import DomainError, OarError
from krr import KernelConfig, fit_krr_oar, predict_krr
from nuisance import TrainingConfig, fit_nuisance, oracle_nuisance, select_training_config
from second_stage import SecondStageSpec, fit_target, predict

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ['name', 'n', 'mean', 'sd', 'se', 'delta', 'delta_se']
# nu below this counts as low overlap (pi outside roughly [0.1, 0.9])
LOW_OVERLAP_NU = 0.09


@dataclass(frozen=True)
class Cell:
    name: str
    stage: SecondStageSpec = field(default_factory=SecondStageSpec)
    target: str = 'mlp'
    nuisance: str = 'estimated'
    kernel: KernelConfig = field(default_factory=KernelConfig)
    b: float = 2.0

    def __post_init__(self):
        if self.target not in ('mlp', 'krr'):
            raise DomainError(f"cell {self.name}: target must be 'mlp' or 'krr'")
        if self.nuisance not in ('estimated', 'oracle'):
            raise DomainError(f"cell {self.name}: nuisance must be 'estimated' or 'oracle'")


@dataclass(frozen=True)
class GridConfig:
    cells: Tuple[Cell, ...]
    n_train: int = 250
    n_test: int = 1000
    stage1: TrainingConfig = field(default_factory=TrainingConfig)
    trim_lo: float = 0.05
    n_folds: int = 1
    standardize: bool = False
    tune: bool = False
    tune_folds: int = 5
    tune_samples: int = 50
    base_seed: int = 0

    def __post_init__(self):
        names = [cell.name for cell in self.cells]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise DomainError(f"cell names must be unique, repeated: {duplicates}")


@dataclass
class RunResult:
    fingerprint: str
    name: str
    seed: int
    rpehe_out: Optional[float] = None
    rpehe_in: Optional[float] = None
    rpehe_low_overlap: Optional[float] = None
    wall_time: float = 0.0
    error: Optional[str] = None


@dataclass
class SummaryRow:
    name: str
    n: int
    mean: float
    sd: float
    se: float
    delta: float
    delta_se: float


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def fingerprint(cell: Cell, grid: Optional[GridConfig] = None) -> str:
    """Stable hash of everything that determines a cell's result except the run seed"""
    content = _plain(asdict(cell))
    if grid is not None:
        shared = {k: v for k, v in _plain(asdict(grid)).items() if k not in ('cells', 'base_seed')}
        content = {'cell': content, 'grid': shared}
    return hashlib.sha1(json.dumps(content, sort_keys=True).encode('utf-8')).hexdigest()[:16]


def stage_seed(seed: int, offset: int) -> int:
    """Stage-2 seed from the run seed and the cell's configured seed, independent of execution order"""
    return int(np.random.SeedSequence([seed, offset]).generate_state(1)[0])


def rpehe(estimates, oracle_cate) -> float:
    if oracle_cate is None:
        raise DomainError("rPEHE needs the oracle CATE")
    estimates = np.asarray(estimates, dtype=float)
    oracle_cate = np.asarray(oracle_cate, dtype=float)
    if estimates.shape != oracle_cate.shape:
        raise DomainError(f"estimates {estimates.shape} and oracle {oracle_cate.shape} differ in length")
    return float(np.sqrt(np.mean((estimates - oracle_cate) ** 2)))


def rpehe_by_overlap(estimates, oracle_cate, pi, threshold: float = LOW_OVERLAP_NU) -> Dict[str, float]:
    """rPEHE on rows with nu < threshold and on the rest; nan for an empty group"""
    estimates = np.asarray(estimates, dtype=float)
    oracle_cate = np.asarray(oracle_cate, dtype=float)
    nu = np.asarray(pi, dtype=float) * (1.0 - np.asarray(pi, dtype=float))
    low = nu < threshold
    out = {}
    for key, mask in (('low', low), ('high', ~low)):
        out[key] = rpehe(estimates[mask], oracle_cate[mask]) if np.any(mask) else float('nan')
    return out


def _fit_and_score(cell: Cell, fp: str, seed: int, train, test, nuis) -> RunResult:
    started = time.perf_counter()
    if cell.target == 'krr':
        model = fit_krr_oar(train, nuis, cell.stage.learner, cell.stage.reg, cell.kernel)
        est_out, est_in = predict_krr(model, test.x), predict_krr(model, train.x)
    else:
        stage = replace(cell.stage, seed=stage_seed(seed, cell.stage.seed))
        target = fit_target(stage, train, nuis)
        est_out, est_in = predict(target, test.x), predict(target, train.x)
    low = rpehe_by_overlap(est_out, test.oracle_cate, test.oracle_pi)['low'] if test.oracle_pi is not None else None
    return RunResult(fp, cell.name, seed, rpehe(est_out, test.oracle_cate),
                     rpehe(est_in, train.oracle_cate), low, time.perf_counter() - started)


def run_seed(grid: GridConfig, seed: int, cells: List[Cell]) -> List[RunResult]:
    """Every pending cell for one seed; stage 1 is fitted once per overlap level"""
    results = []
    for b in sorted({cell.b for cell in cells}):
        block = [cell for cell in cells if cell.b == b]
        total = grid.n_train + grid.n_test
        data = generate_synthetic(SyntheticConfig(total, b, seed))
        train, test = split(data, grid.n_test / total, seed)
        if grid.standardize:
            train, test = standardize(train, test)
        nuisances = {}
        cfg = grid.stage1
        try:
            if any(cell.nuisance == 'estimated' for cell in block):
                prop_cfg = cfg
                if grid.tune:
                    tuned = select_training_config(train, cfg, grid.tune_folds, seed, grid.tune_samples)
                    cfg, prop_cfg = tuned.outcome, tuned.propensity
                fit = fit_nuisance(train, cfg, seed, grid.trim_lo, grid.n_folds, propensity_cfg=prop_cfg)
                nuisances['estimated'] = fit.estimates
            if any(cell.nuisance == 'oracle' for cell in block):
                nuisances['oracle'] = oracle_nuisance(train, grid.trim_lo)
        except (OarError, FloatingPointError, LinAlgError) as e:
            logger.error("stage 1 failed for seed %d, b=%s: %s", seed, b, e)
            results.extend(RunResult(fingerprint(c, grid), c.name, seed, error=f"stage 1: {e}") for c in block)
            continue
        units = cfg.target_units(train.d)
        for cell in block:
            try:
                fp = fingerprint(cell, grid)
                sized = replace(cell, stage=cell.stage.with_units(units))
                results.append(_fit_and_score(sized, fp, seed, train, test, nuisances[cell.nuisance]))
            except (OarError, FloatingPointError, LinAlgError) as e:
                logger.error("cell %s failed for seed %d: %s", cell.name, seed, e)
                results.append(RunResult(fingerprint(cell, grid), cell.name, seed, error=str(e)))
    logger.info("seed %d done (%d cells)", seed, len(results))
    return results


def load_results(path: str) -> List[RunResult]:
    """Read a JSON-lines results file; a truncated last line is ignored"""
    results = []
    if not os.path.exists(path):
        return results
    with open(path, 'r', encoding='utf-8') as file:
        for line_number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            try:
                results.append(RunResult(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as e:
                logger.warning("skipping unreadable results line %d in %s: %s", line_number, path, e)
    return results


def append_results(path: str, results: Iterable[RunResult]) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'a', encoding='utf-8') as file:
        for result in results:
            file.write(json.dumps(asdict(result)) + '\n')


def run_experiment(grid: GridConfig, n_seeds: int, jobs: int = 1,
                   results_path: Optional[str] = None) -> List[RunResult]:
    """Every cell for every seed, resuming from results_path when it exists"""
    seeds = [grid.base_seed + i for i in range(n_seeds)]
    existing = load_results(results_path) if results_path else []
    done: Set[Tuple[int, str]] = {(r.seed, r.fingerprint) for r in existing if r.error is None}
    wanted = {(s, fingerprint(c, grid)) for s in seeds for c in grid.cells}
    kept = [r for r in existing if (r.seed, r.fingerprint) in wanted and r.error is None]

    pending = []
    for seed in seeds:
        cells = [c for c in grid.cells if (seed, fingerprint(c, grid)) not in done]
        if cells:
            pending.append((seed, cells))
    if kept:
        logger.info("resuming: %d results already on disk, %d seeds pending", len(kept), len(pending))

    fresh: List[RunResult] = []
    if pending:
        batches = Parallel(n_jobs=jobs, return_as='generator')(
            delayed(run_seed)(grid, seed, cells) for seed, cells in pending
        )
        for batch in batches:
            if results_path:
                append_results(results_path, batch)
            fresh.extend(batch)

    order = {c.name: i for i, c in enumerate(grid.cells)}
    return sorted(kept + fresh, key=lambda r: (order.get(r.name, len(order)), r.seed))


def _sample_sd(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if values.size >= 2 else float('nan')


def summarize(results: List[RunResult], baseline: str) -> List[SummaryRow]:
    """Mean, sd and se per configuration with the paired difference to baseline"""
    by_name: Dict[str, Dict[int, float]] = {}
    for r in results:
        if r.error is None and r.rpehe_out is not None:
            by_name.setdefault(r.name, {})[r.seed] = r.rpehe_out
    if baseline not in by_name:
        raise DomainError(f"baseline '{baseline}' not found among {sorted(by_name)}")

    base = by_name[baseline]
    rows = []
    for name, per_seed in by_name.items():
        values = np.array(list(per_seed.values()))
        sd = _sample_sd(values)
        shared = sorted(set(per_seed) & set(base))
        diffs = np.array([per_seed[s] - base[s] for s in shared])
        delta_sd = _sample_sd(diffs)
        rows.append(SummaryRow(
            name=name, n=int(values.size), mean=float(values.mean()), sd=sd,
            se=sd / np.sqrt(values.size), delta=float(values.mean() - np.mean(list(base.values()))),
            delta_se=delta_sd / np.sqrt(diffs.size) if diffs.size else float('nan'),
        ))
    return rows


def format_summary(rows: List[SummaryRow], baseline: str) -> str:
    """Aligned text table"""
    lines = [
        f"{'config':<40} {'n':>4} {'mean':>8} {'sd':>8} {'se':>8} {'delta':>9} {'delta_se':>9}",
        "-" * 90,
    ]
    for r in rows:
        marker = ' *' if r.name == baseline else ''
        lines.append(f"{r.name + marker:<40} {r.n:>4} {r.mean:>8.4f} {r.sd:>8.4f} {r.se:>8.4f} "
                     f"{r.delta:>+9.4f} {r.delta_se:>9.4f}")
    return "\n".join(lines)


def write_summary_csv(rows: List[SummaryRow], path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as file:
        writer = csv.DictWriter(file, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow(asdict(r))
