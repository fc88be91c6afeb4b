import numpy as np
import pytest

from conftest import make_schema, make_table
from crashsynth.checkpoint import read_checkpoint, write_checkpoint
from crashsynth.data_schema import ColumnSchema, TableSchema
from crashsynth.errors import ArtifactError, SchemaError


@pytest.fixture
def tensors():
    return {
        "weight": np.arange(6.0).reshape(2, 3),
        "scalar": np.array(2.5),
        "empty": np.zeros((0, 4)),
    }


def test_round_trip(schema, tensors, tmp_path):
    path = write_checkpoint(tmp_path / "model.ckpt", "vae", schema, tensors, config={"d": 4}, extras={"epochs": 3})
    restored = read_checkpoint(path, expected_kind="vae")
    assert list(restored.tensors) == ["weight", "scalar", "empty"]
    for name, values in tensors.items():
        np.testing.assert_array_equal(restored.tensors[name], values)
        assert restored.tensors[name].shape == values.shape
    assert restored.config == {"d": 4}
    assert restored.extras == {"epochs": 3}
    assert restored.schema.fingerprint() == schema.fingerprint()
    restored.require_schema(schema)


def test_file_starts_with_magic(schema, tensors, tmp_path):
    path = write_checkpoint(tmp_path / "model.ckpt", "vae", schema, tensors)
    assert path.read_bytes()[:8] == b"CSYNCKPT"


def test_schema_mismatch(schema, tensors, tmp_path):
    path = write_checkpoint(tmp_path / "model.ckpt", "vae", schema, tensors)
    other = TableSchema(schema.columns + (ColumnSchema("Lane_Width", "real_valued"),))
    with pytest.raises(SchemaError):
        read_checkpoint(path).require_schema(other)


def test_fingerprint_ignores_standardization(schema, tensors, tmp_path):
    path = write_checkpoint(tmp_path / "model.ckpt", "vae", schema, tensors)
    refitted = make_schema().fit(make_table(seed=5, fitted=False).frame)
    read_checkpoint(path).require_schema(refitted)


def test_wrong_kind(schema, tensors, tmp_path):
    path = write_checkpoint(tmp_path / "model.ckpt", "vae", schema, tensors)
    with pytest.raises(ArtifactError, match="expected 'diffusion'"):
        read_checkpoint(path, expected_kind="diffusion")


def test_missing_file(tmp_path):
    with pytest.raises(ArtifactError, match="does not exist"):
        read_checkpoint(tmp_path / "absent.ckpt")


def test_foreign_file(tmp_path):
    path = tmp_path / "notes.ckpt"
    path.write_bytes(b"hello world, not a model")
    with pytest.raises(ArtifactError, match="not a crashsynth checkpoint"):
        read_checkpoint(path)


def test_truncated_file(schema, tensors, tmp_path):
    path = write_checkpoint(tmp_path / "model.ckpt", "vae", schema, tensors)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ArtifactError, match="truncated"):
        read_checkpoint(path)
