"""Connectivity matrices, synthetic cohorts with planted effects, and cohort I/O."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .phenotext import PhenotypeRecord, SENSITIVE_CHOICES, ADULT_AGE


class ConfigError(ValueError):
    pass


class CohortParseError(ValueError):
    def __init__(self, path, line: int | None, msg: str):
        where = f"{path}" if line is None else f"{path}:{line}"
        super().__init__(f"{where}: {msg}")
        self.path, self.line = path, line


def pearson_connectivity(ts: np.ndarray) -> np.ndarray:
    """N x N Pearson correlation of the rows of an N x T series.

    Rows with zero variance correlate 0 with everything else. The diagonal is exactly 1.
    """
    ts = np.asarray(ts, dtype=np.float64)
    if ts.ndim != 2 or ts.shape[1] < 3:
        raise ValueError(f"expected an N x T array with T >= 3, got shape {ts.shape}")
    if not np.all(np.isfinite(ts)):
        raise ValueError("time series contains non-finite values")
    xc = ts - ts.mean(axis=1, keepdims=True)
    ss = np.sqrt((xc * xc).sum(axis=1))
    # relative threshold: a constant row leaves only rounding noise after centring
    flat = ss <= 1e-12 * (1.0 + np.abs(ts).max(axis=1)) * np.sqrt(ts.shape[1])
    z = np.where(flat[:, None], 0.0, xc / np.where(flat, 1.0, ss)[:, None])
    corr = z @ z.T
    corr = np.clip(0.5 * (corr + corr.T), -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def validate_connectivity(m: np.ndarray, tol: float = 1e-12) -> None:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"connectivity must be square, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("connectivity has non-finite entries")
    if np.abs(m - m.T).max() > tol:
        raise ValueError("connectivity is not symmetric")
    if np.abs(np.diag(m) - 1).max() > tol:
        raise ValueError("connectivity diagonal is not 1")
    if np.abs(m).max() > 1 + tol:
        raise ValueError("connectivity entries outside [-1, 1]")


@dataclass
class Subject:
    id: str
    matrix: np.ndarray
    record: PhenotypeRecord

    def __eq__(self, other):
        return (isinstance(other, Subject) and self.id == other.id and self.record == other.record
                and self.matrix.shape == other.matrix.shape
                and np.array_equal(self.matrix, other.matrix))


@dataclass
class SynthConfig:
    n_rois: int = 32
    n_timepoints: int = 120
    n_subjects: int = 400
    disease_effect: float = 1.0
    sensitive_effect: float = 1.0
    confound: float = 0.6
    prevalence: float = 0.5
    block_size: int = 8
    disease_block_start: int = 0
    sensitive_block_start: int = 8
    sensitive_attribute: str = "sex"
    dx_name: str = "asd"
    seed: int = 0

    @property
    def disease_block(self) -> range:
        return range(self.disease_block_start, self.disease_block_start + self.block_size)

    @property
    def sensitive_block(self) -> range:
        return range(self.sensitive_block_start, self.sensitive_block_start + self.block_size)

    def validate(self) -> None:
        if self.n_rois < 2 or self.n_timepoints < 3 or self.n_subjects < 1:
            raise ConfigError("need n_rois >= 2, n_timepoints >= 3, n_subjects >= 1")
        if not 0 <= self.confound <= 1:
            raise ConfigError(f"confound must lie in [0, 1], got {self.confound}")
        if not 0 < self.prevalence < 1:
            raise ConfigError(f"prevalence must lie in (0, 1), got {self.prevalence}")
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        for blk in (self.disease_block, self.sensitive_block):
            if blk.start < 0 or blk.stop > self.n_rois:
                raise ConfigError(f"block {blk} outside 0..{self.n_rois}")
        if set(self.disease_block) & set(self.sensitive_block):
            raise ConfigError("disease and sensitive blocks overlap")
        if self.sensitive_attribute not in SENSITIVE_CHOICES:
            raise ConfigError(f"sensitive attribute must be one of {SENSITIVE_CHOICES}")
        if self.disease_effect < 0 or self.sensitive_effect < 0:
            raise ConfigError("effect sizes must be non-negative")


def sensitive_group(rec: PhenotypeRecord, attr: str) -> int:
    """Binary group id used for fairness metrics (age is bucketed at the adult threshold)."""
    if attr == "sex":
        return int(rec.sex == "female")
    if attr in ("srs", "age"):
        return int(rec.age >= ADULT_AGE)
    raise KeyError(f"unknown sensitive attribute {attr!r}")


def synth_cohort(cfg: SynthConfig) -> list[Subject]:
    """Gaussian ROI series with a shared latent added to the disease / sensitive blocks.

    P(sensitive group = 1 | positive) = confound and P(group = 1 | control) = 1 - confound.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, t = cfg.n_rois, cfg.n_timepoints
    dblk, sblk = list(cfg.disease_block), list(cfg.sensitive_block)
    width = len(str(cfg.n_subjects - 1))
    subjects = []
    for k in range(cfg.n_subjects):
        positive = bool(rng.random() < cfg.prevalence)
        p_group = cfg.confound if positive else 1.0 - cfg.confound
        group = int(rng.random() < p_group)
        ts = rng.standard_normal((n, t))
        latent = rng.standard_normal((2, t))
        if positive:
            ts[dblk] += cfg.disease_effect * latent[0]
        if group:
            ts[sblk] += cfg.sensitive_effect * latent[1]
        u_sex, u_age = rng.random(2)
        if cfg.sensitive_attribute == "sex":
            sex = "female" if group else "male"
            age = 6.0 + 34.0 * u_age
        else:
            sex = "female" if u_sex < 0.5 else "male"
            age = ADULT_AGE + 22.0 * u_age if group else 6.0 + (ADULT_AGE - 6.0) * u_age
        rec = PhenotypeRecord(positive, sex, round(age, 1), dx_name=cfg.dx_name,
                              sensitive_attribute=cfg.sensitive_attribute)
        subjects.append(Subject(f"sub{k:0{width}d}", pearson_connectivity(ts), rec))
    return subjects


# cohort directory ---------------------------------------------------------------

PHENO_HEADER = ["id", "dx_group", "sex", "age", "srs"]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_cohort(subjects, directory) -> None:
    directory = Path(directory)
    (directory / "matrices").mkdir(parents=True, exist_ok=True)
    ids = [s.id for s in subjects]
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    with open(directory / "phenotypes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PHENO_HEADER)
        for s in subjects:
            r = s.record
            w.writerow([s.id, r.dx_group, r.sex, _fmt(r.age), r.srs])
    for s in subjects:
        with open(directory / "matrices" / f"{s.id}.csv", "w") as fh:
            for row in s.matrix:
                fh.write(",".join(_fmt(v) for v in row) + "\n")


def _read_matrix(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                raise CohortParseError(path, lineno, f"row {lineno - 1}: non-numeric value") from None
    if not rows:
        raise CohortParseError(path, None, "empty matrix")
    n = len(rows)
    for i, row in enumerate(rows):
        if len(row) != n:
            raise CohortParseError(path, i + 1, f"row {i} has {len(row)} values, expected {n}")
    return np.array(rows)


def read_cohort(directory, sensitive_attribute: str = "sex", dx_name: str | None = None) -> list[Subject]:
    directory = Path(directory)
    pheno = directory / "phenotypes.csv"
    if not pheno.is_file():
        raise CohortParseError(pheno, None, "missing phenotype file")
    with open(pheno, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != PHENO_HEADER:
        raise CohortParseError(pheno, 1, f"header must be {','.join(PHENO_HEADER)}")
    if dx_name is None:
        names = {r[1] for r in rows[1:] if len(r) > 1 and r[1] != "control"}
        dx_name = names.pop() if len(names) == 1 else "asd"
    subjects = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(PHENO_HEADER):
            raise CohortParseError(pheno, lineno, f"expected {len(PHENO_HEADER)} fields")
        sid, dx, sex, age, srs = row
        try:
            rec = PhenotypeRecord(dx != "control", sex, float(age), srs, dx_name=dx_name,
                                  sensitive_attribute=sensitive_attribute)
        except ValueError as exc:
            raise CohortParseError(pheno, lineno, str(exc)) from None
        mpath = directory / "matrices" / f"{sid}.csv"
        if not mpath.is_file():
            raise CohortParseError(mpath, None, "missing matrix file")
        subjects.append(Subject(sid, _read_matrix(mpath), rec))
    return subjects


def cohort_hash(directory) -> str:
    """Content hash over phenotypes and matrices (file names and bytes, sorted)."""
    directory = Path(directory)
    h = hashlib.sha256()
    files = [directory / "phenotypes.csv"] + sorted((directory / "matrices").glob("*.csv"))
    for f in files:
        h.update(f.relative_to(directory).as_posix().encode() + b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def synth_config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
