import numpy as np
import pytest

from conftest import small_process, small_spec
from crashsynth.autodiff import Tensor, grad_check, parameter
from crashsynth.config import VaeConfig
from crashsynth.data_schema import ColumnSchema, TableSchema, decode_encoded, encode
from crashsynth.errors import ConfigError, DataError, SchemaError, ShapeError
from crashsynth.simulator import simulate_zip_table
from crashsynth.tokenizer import FeatureTokenizer
from crashsynth.vae import (VaeModel, encode_for, extract_latents, flatten, kl_divergence, load_vae, reparameterize,
                            save_vae, train_vae, unflatten, vae_loss)


class TestKl:
    def test_standard_normal_posterior_is_free(self):
        assert kl_divergence(np.zeros((3, 2)), np.ones((3, 2))).item() == pytest.approx(0.0)

    def test_unit_shift(self):
        assert kl_divergence(np.array([1.0]), np.array([1.0])).item() == pytest.approx(0.5)

    def test_closed_form(self):
        mu, sigma = np.array([0.3, -1.2]), np.array([0.5, 2.0])
        expected = 0.5 * np.sum(mu ** 2 + sigma ** 2 - 2.0 * np.log(sigma) - 1.0)
        assert kl_divergence(mu, sigma).item() == pytest.approx(expected)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        mu = parameter(rng.normal(size=(2, 3)))
        sigma = parameter(rng.uniform(0.3, 2.0, size=(2, 3)))
        assert grad_check(lambda: kl_divergence(mu, sigma), [mu, sigma]).passed


def test_reparameterize_is_seeded():
    mu, sigma = Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3)))
    np.testing.assert_array_equal(reparameterize(mu, sigma, 4).values, reparameterize(mu, sigma, 4).values)
    with pytest.raises(ShapeError):
        reparameterize(mu, Tensor(np.ones(3)), 0)


def test_zero_sigma_collapses_to_mean():
    mu = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(reparameterize(mu, Tensor(np.zeros((2, 3))), 0).values, mu.values)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient_through_detokenizer(schema, table, seed):
    rng = np.random.default_rng(seed)
    tokenizer = FeatureTokenizer(schema, d=4, rng=rng)
    encoded = encode(table.take(range(3)))
    embedding = parameter(rng.normal(size=(3, 5, 4)))
    mu = parameter(rng.normal(size=(3, 5, 4)))
    sigma = parameter(rng.uniform(0.5, 1.5, size=(3, 5, 4)))

    def loss():
        return vae_loss(encoded, tokenizer.detokenize(embedding), mu, sigma, beta=0.1).total

    assert grad_check(loss, [embedding, mu, sigma]).passed


def test_model_loss_gradient_for_output_layer(schema, table, tiny_vae_config):
    model = VaeModel(schema, tiny_vae_config, seed=0)
    encoded = encode(table.take(range(4)))

    def loss():
        output = model.forward(encoded, 9)
        return vae_loss(encoded, output.reconstruction, output.mu, output.sigma, beta=0.01).total

    tok = model.tokenizer
    params = [tok.out_con_weight, tok.out_con_bias] + tok.out_dis_weights + tok.out_dis_biases
    assert grad_check(loss, params).passed


def test_shapes(schema, table, tiny_vae_config):
    model = VaeModel(schema, tiny_vae_config, seed=0)
    mu, sigma = model.encode(encode(table))
    assert mu.shape == sigma.shape == (len(table), 5, 4)
    assert np.all(sigma.values > 0)
    single_mu, _ = model.encode(encode(table).values[0])
    assert single_mu.shape == (5, 4)
    assert model.decode(mu).shape == (len(table), 5, 4)
    assert model.latent_dim == 20
    assert len(model.attention_weights()) == 4


def test_decode_rejects_wrong_grid(schema, tiny_vae_config):
    model = VaeModel(schema, tiny_vae_config)
    with pytest.raises(ShapeError):
        model.decode(np.zeros((2, 4, 4)))
    with pytest.raises(ShapeError):
        model.decode_latents(np.zeros((2, 19)))


def test_heads_must_divide_width(schema):
    with pytest.raises(ConfigError):
        VaeModel(schema, VaeConfig(d=5, heads=2))


def test_training_records_every_epoch(table, tiny_vae_config):
    model, history = train_vae(table, tiny_vae_config, seed=1)
    assert len(history) == tiny_vae_config.epochs
    assert all(np.isfinite(history.losses))
    assert extract_latents(model, table).shape == (len(table), model.latent_dim)


def test_training_is_seeded(table, tiny_vae_config):
    first, _ = train_vae(table, tiny_vae_config, seed=2)
    second, _ = train_vae(table, tiny_vae_config, seed=2)
    np.testing.assert_array_equal(extract_latents(first, table), extract_latents(second, table))


def test_training_lowers_loss(table):
    config = VaeConfig(d=4, heads=2, epochs=40, batch_size=8, lr=5e-3, beta_schedule="constant")
    _, history = train_vae(table, config, seed=0)
    assert history.losses[-1] < history.losses[0]


def test_adaptive_beta_never_drops_below_floor(table):
    config = VaeConfig(d=4, heads=2, epochs=12, batch_size=40, lr=1e-5, beta=1e-2, beta_min=5e-3, beta_patience=1)
    model, history = train_vae(table, config, seed=0)
    assert min(r.beta for r in history.records) >= 5e-3
    assert model.beta >= 5e-3


def test_empty_table(table, tiny_vae_config):
    with pytest.raises(DataError):
        train_vae(table.take([]), tiny_vae_config, seed=0)


def test_decoded_latents_are_valid_rows(table, tiny_vae_config):
    model, _ = train_vae(table, tiny_vae_config, seed=0)
    encoded_rows = model.decode_latents(extract_latents(model, table))
    decoded = decode_encoded(encoded_rows, model.schema)
    assert len(decoded) == len(table)
    assert set(decoded.frame["Hour"]) <= {0, 1, 2}


def test_flatten_round_trip():
    grid = np.arange(24.0).reshape(2, 3, 4)
    np.testing.assert_array_equal(unflatten(flatten(grid), 3, 4), grid)


def test_checkpoint_round_trip(table, tiny_vae_config, tmp_path):
    model, history = train_vae(table, tiny_vae_config, seed=0)
    path = save_vae(model, tmp_path / "vae.ckpt", history)
    restored = load_vae(path, schema=table.schema)
    np.testing.assert_array_equal(extract_latents(model, table), extract_latents(restored, table))
    assert restored.beta == model.beta


def test_checkpoint_refuses_other_schema(table, tiny_vae_config, tmp_path):
    model, _ = train_vae(table, tiny_vae_config, seed=0)
    path = save_vae(model, tmp_path / "vae.ckpt")
    changed = TableSchema(table.schema.columns + (ColumnSchema("Extra", "nominal", (0, 1)),))
    with pytest.raises(SchemaError):
        load_vae(path, schema=changed)


@pytest.mark.slow
def test_overfits_sixteen_rows():
    rows = simulate_zip_table(16, small_spec(), small_process(), seed=11)
    config = VaeConfig(d=8, heads=2, epochs=2000, batch_size=16, lr=3e-3, beta_schedule="constant", beta=0.0)
    model, _ = train_vae(rows, config, seed=0)

    encoded = encode_for(model, rows)
    reconstruction = model.reconstruct(encoded)
    decoded = decode_encoded(reconstruction, model.schema, row_ids=rows.row_ids)

    for c in model.schema.discrete_columns:
        np.testing.assert_array_equal(decoded.frame[c.name].to_numpy(), rows.frame[c.name].to_numpy(), err_msg=c.name)
    for c in model.schema.continuous_columns:
        s = encoded.span(c.name)
        error = np.mean(np.abs(reconstruction[:, s.start] - encoded.values[:, s.start]))
        assert error <= 0.05, f"{c.name}: standardized error {error:.3f}"
