"""
Datasets: the synthetic low-overlap generator, CSV ingestion and splits.

Random streams come from numpy's Philox counter-based generator seeded with
the dataset seed, so a seed reproduces the same rows on every platform.
"""

import csv
import json
import logging
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from errors import DatasetParseError, DomainError, ShapeMismatchError

logger = logging.getLogger(__name__)

GENERATOR_NAME = 'numpy.random.Philox'
FLOAT_FORMAT = '.17g'
# Stream key for train/test splits, apart from the generator's own stream
SPLIT_STREAM = 606


def make_rng(*seed_words: int) -> np.random.Generator:
    """Counter-based generator keyed by one or more integers"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(seed_words))))


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    oracle_cate: Optional[np.ndarray] = None
    oracle_pi: Optional[np.ndarray] = None
    oracle_mu0: Optional[np.ndarray] = None
    oracle_mu1: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape[1] < 1:
            raise ShapeMismatchError(f"covariates must be an n x d matrix, got shape {self.x.shape}")
        n = self.x.shape[0]
        for name in ('a', 'y', 'oracle_cate', 'oracle_pi', 'oracle_mu0', 'oracle_mu1'):
            column = getattr(self, name)
            if column is not None and column.shape != (n,):
                raise ShapeMismatchError(f"column {name} has shape {column.shape}, expected ({n},)")
        if not np.all((self.a == 0) | (self.a == 1)):
            raise DomainError("treatment must be binary")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, index: np.ndarray) -> 'Dataset':
        """Rows at index, oracle columns included"""
        def take(column):
            return None if column is None else column[index]

        return Dataset(
            x=self.x[index], a=self.a[index], y=self.y[index],
            oracle_cate=take(self.oracle_cate), oracle_pi=take(self.oracle_pi),
            oracle_mu0=take(self.oracle_mu0), oracle_mu1=take(self.oracle_mu1),
            seed=self.seed,
        )


@dataclass(frozen=True)
class SyntheticConfig:
    n: int = 250
    b: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise DomainError(f"synthetic datasets need n >= 2, got {self.n}")


@dataclass(frozen=True)
class CsvSchema:
    x_cols: Tuple[str, ...] = ()
    a_col: str = 'a'
    y_col: str = 'y'
    oracle_cate_col: Optional[str] = 'cate'
    oracle_pi_col: Optional[str] = 'pi'


def synthetic_pi(x: np.ndarray, b: float) -> np.ndarray:
    """N(x;0,1) / (N(x;0,1) + N(x;b,1)) as a logistic function of x"""
    return expit(0.5 * b ** 2 - b * x)


def synthetic_mu(x: np.ndarray) -> np.ndarray:
    """Outcome mean shared by both arms"""
    z = 3.0 * x ** 2 - 2.0 * x + 0.5
    return 3.0 * np.cos(z) - 2.5 * np.sin(z)


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """One covariate, two-component mixture, zero treatment effect"""
    rng = make_rng(cfg.seed)
    component = rng.random(cfg.n) < 0.5
    x = rng.standard_normal(cfg.n) + cfg.b * component
    pi = synthetic_pi(x, cfg.b)
    a = (rng.random(cfg.n) < pi).astype(float)
    mu = synthetic_mu(x)
    y = mu + rng.standard_normal(cfg.n)
    return Dataset(
        x=x.reshape(-1, 1), a=a, y=y,
        oracle_cate=np.zeros(cfg.n), oracle_pi=pi,
        oracle_mu0=mu.copy(), oracle_mu1=mu.copy(),
        seed=cfg.seed,
    )


def split(ds: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Deterministic disjoint train/test split"""
    n_test = int(round(ds.n * test_fraction))
    if not 0.0 < test_fraction < 1.0 or n_test < 1 or n_test > ds.n - 1:
        raise DomainError(f"test fraction {test_fraction} leaves an empty split for n={ds.n}")
    order = make_rng(seed, SPLIT_STREAM).permutation(ds.n)
    test_index = np.sort(order[:n_test])
    train_index = np.sort(order[n_test:])
    return ds.subset(train_index), ds.subset(test_index)


def standardize(train: Dataset, *others: Dataset) -> List[Dataset]:
    """Center and scale covariates with the training mean and sd"""
    mean = train.x.mean(axis=0)
    sd = train.x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return [replace(ds, x=(ds.x - mean) / sd) for ds in (train,) + others]


def _column_names(ds: Dataset, schema: CsvSchema) -> List[str]:
    x_cols = list(schema.x_cols) or [f"x{j}" for j in range(ds.d)]
    if len(x_cols) != ds.d:
        raise ShapeMismatchError(f"schema names {len(x_cols)} covariates, dataset has {ds.d}")
    return x_cols


def save_csv(ds: Dataset, path: str, schema: Optional[CsvSchema] = None,
             config: Optional[Dict] = None) -> str:
    """Write the dataset as CSV plus a JSON sidecar; returns the sidecar path"""
    schema = schema or CsvSchema()
    x_cols = _column_names(ds, schema)
    columns = {name: ds.x[:, j] for j, name in enumerate(x_cols)}
    columns[schema.a_col] = ds.a
    columns[schema.y_col] = ds.y
    if ds.oracle_cate is not None and schema.oracle_cate_col:
        columns[schema.oracle_cate_col] = ds.oracle_cate
    if ds.oracle_pi is not None and schema.oracle_pi_col:
        columns[schema.oracle_pi_col] = ds.oracle_pi
    if ds.oracle_mu0 is not None:
        columns['mu0'] = ds.oracle_mu0
    if ds.oracle_mu1 is not None:
        columns['mu1'] = ds.oracle_mu1

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as file:
        writer = csv.DictWriter(file, fieldnames=list(columns))
        writer.writeheader()
        for i in range(ds.n):
            row = {}
            for name, values in columns.items():
                row[name] = str(int(values[i])) if name == schema.a_col else format(values[i], FLOAT_FORMAT)
            writer.writerow(row)

    sidecar = os.path.splitext(path)[0] + '.json'
    with open(sidecar, 'w', encoding='utf-8') as file:
        json.dump({
            'seed': ds.seed,
            'generator': GENERATOR_NAME,
            'config': config or {},
            'columns': list(columns),
            'x_cols': x_cols,
        }, file, indent=2)
    logger.info("wrote %d rows to %s", ds.n, path)
    return sidecar


def _parse_float(value: Optional[str], path: str, row: int, column: str) -> float:
    if value is None or not value.strip():
        raise DatasetParseError("empty cell", path, row, column)
    try:
        parsed = float(value)
    except ValueError:
        raise DatasetParseError(f"cannot parse '{value}' as a number", path, row, column)
    if not np.isfinite(parsed):
        raise DatasetParseError(f"non-finite value '{value}'", path, row, column)
    return parsed


def load_csv(path: str, schema: CsvSchema) -> Dataset:
    """Read a dataset; treatment cells must be the literals 0 or 1"""
    if not os.path.exists(path):
        raise DatasetParseError("file not found", path)

    with open(path, 'r', encoding='utf-8', newline='') as file:
        reader = csv.DictReader(file)
        header = reader.fieldnames or []
        x_cols = list(schema.x_cols) or [c for c in header if c.startswith('x')]
        if not x_cols:
            raise DatasetParseError("no covariate columns", path, column='x*')
        optional = [c for c in (schema.oracle_cate_col, schema.oracle_pi_col, 'mu0', 'mu1') if c]
        for column in x_cols + [schema.a_col, schema.y_col]:
            if column not in header:
                raise DatasetParseError("missing column", path, column=column)
        present = [c for c in optional if c in header]

        x_rows, a_rows, y_rows = [], [], []
        extra_rows: Dict[str, List[float]] = {c: [] for c in present}
        for row_number, row in enumerate(reader, start=1):
            x_rows.append([_parse_float(row.get(c), path, row_number, c) for c in x_cols])
            a_value = (row.get(schema.a_col) or '').strip()
            if a_value not in ('0', '1'):
                raise DatasetParseError(f"treatment must be 0 or 1, got '{a_value}'",
                                        path, row_number, schema.a_col)
            a_rows.append(float(a_value))
            y_rows.append(_parse_float(row.get(schema.y_col), path, row_number, schema.y_col))
            for c in present:
                extra_rows[c].append(_parse_float(row.get(c), path, row_number, c))

    if not x_rows:
        raise DatasetParseError("no data rows", path)

    seed = 0
    sidecar = os.path.splitext(path)[0] + '.json'
    if os.path.exists(sidecar):
        with open(sidecar, 'r', encoding='utf-8') as file:
            seed = int(json.load(file).get('seed', 0))

    def optional_column(name: Optional[str]) -> Optional[np.ndarray]:
        return np.array(extra_rows[name]) if name in extra_rows else None

    ds = Dataset(
        x=np.array(x_rows, dtype=float), a=np.array(a_rows), y=np.array(y_rows),
        oracle_cate=optional_column(schema.oracle_cate_col),
        oracle_pi=optional_column(schema.oracle_pi_col),
        oracle_mu0=optional_column('mu0'), oracle_mu1=optional_column('mu1'),
        seed=seed,
    )
    logger.info("read %d rows from %s", ds.n, path)
    return ds


def treatment_rate_by_bin(ds: Dataset, edges: Sequence[float]) -> List[Dict]:
    """Empirical P(A=1) against the mean oracle propensity per covariate bin"""
    if ds.oracle_pi is None:
        raise DomainError("dataset has no oracle propensity column")
    x = ds.x[:, 0]
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (x >= lo) & (x < hi)
        count = int(mask.sum())
        if count == 0:
            continue
        rate = float(ds.a[mask].mean())
        rows.append({
            'lo': lo, 'hi': hi, 'n': count, 'rate': rate,
            'oracle': float(ds.oracle_pi[mask].mean()),
            'se': float(np.sqrt(max(rate * (1.0 - rate), 1e-12) / count)),
        })
    return rows
