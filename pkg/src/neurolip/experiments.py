"""Held-out evaluation runs and the attention-loss x negative-gradient ablation grid."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .connectome import SynthConfig, synth_cohort
from .metrics import METRIC_NAMES, mean_report
from .trainer import TrainConfig, _labels, evaluate, stratified_holdout, train_fold

log = logging.getLogger(__name__)

# (attn_loss, neg_grad) in the row order of the component table
ABLATION_GRID = ((False, False), (True, False), (False, True), (True, True))
TEST_FRACTION = 0.2


def holdout(subjects, seed: int, test_fraction: float = TEST_FRACTION):
    train_idx, test_idx = stratified_holdout(_labels(subjects), test_fraction, seed)
    return [subjects[i] for i in train_idx], [subjects[i] for i in test_idx]


def train_and_evaluate(train, test, cfg: TrainConfig) -> dict:
    res = train_fold(train, cfg)
    return evaluate(res.model, test, cfg.sensitive)


@dataclass
class AblationRow:
    attn_loss: bool
    neg_grad: bool
    per_seed: list

    @property
    def mean(self) -> dict:
        return mean_report(self.per_seed)

    @property
    def median(self) -> dict:
        return {k: float(np.median([r[k] for r in self.per_seed])) for k in METRIC_NAMES}


def ablation(subjects_for_seed, base: TrainConfig, seeds, grid=ABLATION_GRID) -> list[AblationRow]:
    """Train/evaluate every grid cell for every seed on a stratified 80/20 split.

    ``subjects_for_seed(seed)`` returns the cohort used for that seed, so callers can
    either reuse one cohort or draw a fresh one per seed.
    """
    rows = [AblationRow(a, n, []) for a, n in grid]
    for seed in seeds:
        train, test = holdout(subjects_for_seed(seed), seed)
        for row in rows:
            cfg = dataclasses.replace(base, seed=seed, attn_loss=row.attn_loss, neg_grad=row.neg_grad)
            rep = train_and_evaluate(train, test, cfg)
            log.info("seed %d attn=%s neg=%s %s", seed, row.attn_loss, row.neg_grad,
                     {k: round(v, 4) for k, v in rep.items()})
            row.per_seed.append(rep)
    return rows


def synthetic_cohorts(synth: SynthConfig):
    """Per-seed cohort factory: the generator seed follows the run seed."""
    return lambda seed: synth_cohort(dataclasses.replace(synth, seed=seed))


def format_table(rows: list[AblationRow], stat: str = "mean") -> list[list[str]]:
    out = [["attn_loss", "neg_grad", *METRIC_NAMES]]
    for row in rows:
        vals = getattr(row, stat)
        out.append(["on" if row.attn_loss else "off", "on" if row.neg_grad else "off",
                    *(f"{vals[k]:.6f}" for k in METRIC_NAMES)])
    return out
