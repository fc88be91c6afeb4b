"""
Reference oversamplers used to put the generator's output in context.
"""

import numpy as np
import pandas as pd

from .data_schema import ROW_ID, Table


def random_oversample(minority: Table, n: int, seed: int) -> Table:
    """Duplicate randomly chosen minority rows (with replacement)."""
    rng = np.random.default_rng(seed)
    picked = minority.frame.iloc[rng.integers(0, len(minority), size=n)].copy() if n else minority.frame.iloc[:0].copy()
    picked.index = pd.Index(np.arange(n), name=ROW_ID)
    return Table(minority.schema, picked)


def marginal_shuffle(minority: Table, n: int, seed: int) -> Table:
    """
    Rows whose columns are drawn independently from each column's empirical marginal.

    Keeps every marginal and destroys every dependence between columns.
    """
    rng = np.random.default_rng(seed)
    columns = {}
    for name in minority.schema.names:
        values = minority.frame[name].to_numpy()
        columns[name] = values[rng.integers(0, len(values), size=n)] if n else values[:0]
    frame = pd.DataFrame(columns, columns=minority.schema.names)
    frame.index = pd.Index(np.arange(n), name=ROW_ID)
    return Table(minority.schema, frame)


BASELINES = {
    "random": random_oversample,
    "marginal": marginal_shuffle,
}
