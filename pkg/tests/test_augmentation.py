import numpy as np
import pandas as pd
import pytest

from crashsynth.augmentation import (assemble_balanced, generate_synthetic_rows, minority_rows, plan_counts,
                                     plan_rebalance, rebalance)
from crashsynth.baselines import BASELINES, marginal_shuffle, random_oversample
from crashsynth.config import PROVENANCE_COLUMN
from crashsynth.diffusion import train_diffusion
from crashsynth.errors import DataError, GenerationError
from crashsynth.vae import extract_latents, train_vae


@pytest.fixture
def generator(table, tiny_vae_config, tiny_diffusion_config):
    vae, _ = train_vae(table, tiny_vae_config, seed=0)
    diffusion, _ = train_diffusion(extract_latents(vae, table), tiny_diffusion_config, seed=0)
    return vae, diffusion


def every_other_row(decoded):
    return np.arange(len(decoded)) % 2 == 0


def every_third_row(decoded):
    return np.arange(len(decoded)) % 3 == 0


def reject_all(decoded):
    return np.zeros(len(decoded), dtype=bool)


class TestPlan:
    def test_full_dataset_counts(self):
        assert plan_counts(15142, 2714).to_generate == 12428

    def test_training_split_counts(self):
        plan = plan_counts(10599, 1899)
        assert plan.to_generate == 8700
        assert plan.target_nonzero == 10599

    def test_balanced_needs_nothing(self):
        assert plan_counts(50, 50).to_generate == 0
        assert plan_counts(10, 40).to_generate == 0

    def test_partial_ratio(self):
        assert plan_counts(100, 20, ratio=0.5).to_generate == 30

    def test_invalid_ratio(self):
        with pytest.raises(ValueError):
            plan_counts(10, 2, ratio=0.0)

    def test_from_table(self, table):
        zero = int(np.sum(table.target_values() == 0))
        plan = plan_rebalance(table)
        assert (plan.existing_zero, plan.existing_nonzero) == (zero, len(table) - zero)

    def test_no_minority(self, table):
        with pytest.raises(DataError):
            plan_rebalance(table.where(table.target_values() == 0))


def test_minority_rows(table):
    assert np.all(minority_rows(table).target_values() > 0)


class TestGeneration:
    def test_zero_rows_gives_empty_table(self, generator):
        vae, diffusion = generator
        assert len(generate_synthetic_rows(vae, diffusion, 0, seed=0)) == 0

    def test_row_count_and_ids(self, generator):
        vae, diffusion = generator
        rows = generate_synthetic_rows(vae, diffusion, 15, seed=1, filters=(every_other_row,))
        assert len(rows) == 15
        assert rows.row_ids.tolist() == list(range(15))
        assert rows.schema.names == vae.schema.names

    def test_seeded(self, generator):
        vae, diffusion = generator
        first = generate_synthetic_rows(vae, diffusion, 6, seed=3, filters=())
        second = generate_synthetic_rows(vae, diffusion, 6, seed=3, filters=())
        pd.testing.assert_frame_equal(first.frame, second.frame)

    def test_budget_exhaustion_reports_acceptance(self, generator):
        vae, diffusion = generator
        with pytest.raises(GenerationError, match="acceptance rate 0.0%"):
            generate_synthetic_rows(vae, diffusion, 4, seed=0, filters=(reject_all,), attempts_factor=2)

    def test_low_acceptance_is_rejected(self, generator):
        vae, diffusion = generator
        with pytest.raises(GenerationError, match="below the required 50%"):
            generate_synthetic_rows(vae, diffusion, 6, seed=0, filters=(every_third_row,))

    def test_acceptance_floor_is_configurable(self, generator):
        vae, diffusion = generator
        rows = generate_synthetic_rows(vae, diffusion, 6, seed=0, filters=(every_third_row,), min_acceptance=0.0)
        assert len(rows) == 6

    def test_negative_count(self, generator):
        vae, diffusion = generator
        with pytest.raises(DataError):
            generate_synthetic_rows(vae, diffusion, -1, seed=0)


def test_assemble_marks_provenance(table):
    synthetic = random_oversample(minority_rows(table), 5, seed=0)
    balanced = assemble_balanced(table, synthetic)
    assert len(balanced) == len(table) + 5
    assert balanced.schema.has_provenance
    assert balanced.frame[PROVENANCE_COLUMN].tolist() == [0] * len(table) + [1] * 5
    assert balanced.row_ids[len(table):].tolist() == list(range(40, 45))


def test_rebalance_equalizes_classes(table, generator, monkeypatch):
    vae, diffusion = generator
    plan = plan_rebalance(table)
    synthetic = random_oversample(minority_rows(table), plan.to_generate, seed=0)
    monkeypatch.setattr("crashsynth.augmentation.generate_synthetic_rows", lambda *args, **kwargs: synthetic)

    balanced = rebalance(table, vae, diffusion, plan, seed=0)

    target = balanced.target_values()
    assert np.sum(target == 0) == plan.existing_zero
    assert np.sum(target != 0) == plan.target_nonzero


def test_rebalance_rejects_foreign_plan(table, generator):
    vae, diffusion = generator
    with pytest.raises(DataError):
        rebalance(table, vae, diffusion, plan_counts(1, 1), seed=0)


class TestBaselines:
    def test_random_oversample_draws_existing_rows(self, table):
        minority = minority_rows(table)
        rows = random_oversample(minority, 12, seed=0)
        assert len(rows) == 12
        originals = set(map(tuple, minority.frame.to_numpy().tolist()))
        assert set(map(tuple, rows.frame.to_numpy().tolist())) <= originals

    def test_marginal_shuffle_keeps_marginal_support(self, table):
        minority = minority_rows(table)
        rows = marginal_shuffle(minority, 30, seed=0)
        for name in minority.schema.names:
            assert set(rows.frame[name]) <= set(minority.frame[name])

    @pytest.mark.parametrize("name", sorted(BASELINES))
    def test_empty_request(self, table, name):
        assert len(BASELINES[name](minority_rows(table), 0, seed=0)) == 0
