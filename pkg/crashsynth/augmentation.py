"""
Oversampling of non-zero target rows with the trained generator.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from .config import PROVENANCE_COLUMN
from .data_schema import ROW_ID, Table, concat_tables, decode_encoded
from .diffusion import DiffusionModel, sample
from .errors import DataError, GenerationError
from .vae import VaeModel

log = logging.getLogger(__name__)

RowFilter = Callable[[Table], np.ndarray]


@dataclass(frozen=True)
class RebalancePlan:
    """
    Class counts before and after rebalancing.

    ``to_generate = round(existing_zero * ratio) - existing_nonzero``, never negative.
    """
    existing_zero: int
    existing_nonzero: int
    ratio: float
    to_generate: int

    @property
    def target_nonzero(self) -> int:
        return self.existing_nonzero + self.to_generate

    def to_dict(self) -> dict:
        return asdict(self)


def plan_counts(existing_zero: int, existing_nonzero: int, ratio: float = 1.0) -> RebalancePlan:
    if ratio <= 0:
        raise ValueError(f"ratio must be positive, got {ratio}")
    to_generate = max(int(round(existing_zero * ratio)) - existing_nonzero, 0)
    return RebalancePlan(int(existing_zero), int(existing_nonzero), float(ratio), to_generate)


def plan_rebalance(table: Table, ratio: float = 1.0) -> RebalancePlan:
    """
    Count zero and non-zero target rows and derive how many rows to generate.

    Raises:
        DataError: If the table has no non-zero target rows
    """
    zero, nonzero = _class_counts(table)
    if nonzero == 0:
        raise DataError("No non-zero target rows to learn from")
    plan = plan_counts(zero, nonzero, ratio)
    log.info("Rebalance plan: %d zero, %d non-zero, generate %d",
             plan.existing_zero, plan.existing_nonzero, plan.to_generate)
    return plan


def minority_rows(table: Table) -> Table:
    """Rows whose target is not zero."""
    return table.where(table.target_values() != 0)


def nonzero_target(table: Table) -> np.ndarray:
    return table.target_values() != 0


def _renumber(table: Table, start: int = 0) -> Table:
    frame = table.frame.copy()
    frame.index = pd.Index(np.arange(start, start + len(frame)), name=ROW_ID)
    return Table(table.schema, frame)


def generate_synthetic_rows(vae: VaeModel, diffusion: DiffusionModel, n: int, seed: int,
                            filters: Sequence[RowFilter] = (nonzero_target,), steps: Optional[int] = None,
                            deterministic: bool = False, attempts_factor: int = 10,
                            min_acceptance: float = 0.5) -> Table:
    """
    Sample latents, decode them to rows and keep the rows passing every filter.

    Candidates are drawn in rounds sized from the running acceptance rate. Generation
    fails when ``attempts_factor * n`` candidates do not yield n rows, or when the
    overall acceptance rate ends below ``min_acceptance``.

    Args:
        vae: Trained VAE
        diffusion: Diffusion model trained on the VAE's latents
        n: Rows wanted
        seed: Random seed
        filters: Callables returning a keep-mask for a decoded table
        steps: Reverse-integration steps (the diffusion config's default when None)
        deterministic: Use the probability-flow sampler
        attempts_factor: At most ``attempts_factor * n`` rows are drawn
        min_acceptance: Lowest acceptable share of candidates passing the filters

    Returns:
        Table of n rows with ids 0..n-1

    Raises:
        DataError: If n is negative
        GenerationError: Budget exhausted or acceptance below ``min_acceptance``, reporting the rate
    """
    if n < 0:
        raise DataError(f"Cannot generate a negative number of rows ({n})")
    schema = vae.schema
    if n == 0:
        return Table.empty(schema)
    steps = steps or diffusion.config.steps
    rng = np.random.default_rng(seed)
    budget = attempts_factor * n
    kept, n_kept, attempts = [], 0, 0
    while n_kept < n:
        remaining = budget - attempts
        if remaining <= 0:
            rate = n_kept / max(attempts, 1)
            raise GenerationError(
                f"Generated {n_kept}/{n} acceptable rows in {attempts} attempts "
                f"(acceptance rate {rate:.1%}); the generator rarely produces rows passing the filters"
            )
        rate = n_kept / attempts if attempts else 1.0
        draw = min(remaining, math.ceil((n - n_kept) / max(rate, 0.1)))
        latents = sample(diffusion, draw, steps, int(rng.integers(2 ** 63 - 1)), deterministic)
        decoded = decode_encoded(vae.decode_latents(latents), schema)
        mask = np.ones(len(decoded), dtype=bool)
        for keep in filters:
            mask &= np.asarray(keep(decoded), dtype=bool)
        attempts += draw
        accepted = decoded.where(mask)
        kept.append(accepted)
        n_kept += len(accepted)
    rate = n_kept / attempts
    if rate < min_acceptance:
        raise GenerationError(
            f"Generated {n_kept} acceptable rows in {attempts} attempts (acceptance rate {rate:.1%}), "
            f"below the required {min_acceptance:.0%}"
        )
    log.info("Generated %d rows, acceptance rate %.1f%%", n, 100.0 * rate)
    return _renumber(concat_tables(kept, schema).take(np.arange(n)))


def assemble_balanced(training: Table, synthetic: Table) -> Table:
    """
    Training rows followed by synthetic rows, with a provenance column.

    Synthetic rows receive ids after the largest training id.
    """
    schema = training.schema.with_provenance()
    original = training.frame.copy()
    original[PROVENANCE_COLUMN] = 0
    start = int(np.max(training.row_ids)) + 1 if len(training) else 0
    extra = _renumber(synthetic.with_schema(training.schema.without_provenance()), start).frame.copy()
    extra[PROVENANCE_COLUMN] = 1
    frame = pd.concat([original[schema.names], extra[schema.names]], axis=0)
    frame.index.name = ROW_ID
    return Table(schema, frame)


def rebalance(training_table: Table, vae: VaeModel, diffusion: DiffusionModel, plan: RebalancePlan,
              seed: int, attempts_factor: int = 10, deterministic: bool = False,
              min_acceptance: float = 0.5) -> Table:
    """
    Add generated non-zero rows until the class counts match the plan.

    Raises:
        DataError: If the plan was computed from a different table
        GenerationError: Propagated from generation
    """
    check = plan_counts(*_class_counts(training_table), plan.ratio)
    if check != plan:
        raise DataError(f"Plan {plan.to_dict()} does not match the training table ({check.to_dict()})")
    synthetic = generate_synthetic_rows(vae, diffusion, plan.to_generate, seed,
                                        attempts_factor=attempts_factor, deterministic=deterministic,
                                        min_acceptance=min_acceptance)
    return assemble_balanced(training_table, synthetic)


def _class_counts(table: Table):
    target = table.target_values()
    nonzero = int(np.count_nonzero(target))
    return len(target) - nonzero, nonzero
