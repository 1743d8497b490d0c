import json

import numpy as np
import pytest

from xaicanon.dataio import MAGIC_F32, Sample, decode_tensor, encode_tensor, load_dataset, save_dataset
from xaicanon.errors import DatasetError
from xaicanon.fixtures import corner_dataset


def test_tensor_round_trip():
    a = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    raw = encode_tensor(a)
    assert raw[:8] == MAGIC_F32
    assert decode_tensor(raw).tobytes() == a.tobytes()
    m = np.eye(4, dtype=bool)
    np.testing.assert_array_equal(decode_tensor(encode_tensor(m, mask=True)), m.astype(np.uint8))


def test_tensor_header_layout():
    raw = encode_tensor(np.zeros((2, 3), np.float32))
    assert raw[8:20] == bytes([2, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0])
    assert len(raw) == 20 + 6 * 4


def test_tensor_bad_input():
    with pytest.raises(ValueError):
        decode_tensor(b"NOTATNSR" + bytes(8))
    with pytest.raises(ValueError):
        decode_tensor(encode_tensor(np.zeros(4, np.float32))[:-1])


def test_dataset_round_trip(tmp_path):
    samples = corner_dataset(3, n=5)
    save_dataset(samples, tmp_path / "ds.json")
    again = load_dataset(tmp_path / "ds.json")
    assert [s.id for s in again] == [s.id for s in samples]
    for a, b in zip(samples, again):
        assert a.image.tobytes() == b.image.tobytes() and a.label == b.label
        np.testing.assert_array_equal(a.mask, b.mask)


def test_mask_shape_mismatch_names_sample():
    with pytest.raises(DatasetError, match="'bad'") as info:
        Sample("bad", np.zeros((1, 4, 4)), 0, np.ones((5, 5)))
    assert info.value.sample_id == "bad"


def test_mismatched_mask_on_disk(tmp_path):
    save_dataset([Sample("a", np.zeros((1, 4, 4)), 0, np.ones((4, 4)))], tmp_path / "ds.json")
    (tmp_path / "ds.a.mask.tnsr").write_bytes(encode_tensor(np.ones((5, 5)), mask=True))
    with pytest.raises(DatasetError) as info:
        load_dataset(tmp_path / "ds.json")
    assert info.value.sample_id == "a"


def test_missing_file_and_null_mask(tmp_path):
    save_dataset([Sample("a", np.zeros((1, 2, 2)), 1)], tmp_path / "ds.json")
    doc = json.loads((tmp_path / "ds.json").read_text())
    assert doc["samples"][0]["mask"] is None
    assert load_dataset(tmp_path / "ds.json")[0].mask is None
    doc["samples"][0]["image"] = "gone.tnsr"
    (tmp_path / "ds.json").write_text(json.dumps(doc))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "ds.json")
