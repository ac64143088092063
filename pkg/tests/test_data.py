import struct

import numpy as np
import pytest

from ddclass.data import (
    LabeledDataset,
    decode_container,
    decode_params,
    encode_container,
    encode_params,
    gen_synthetic,
    load_container,
    load_dataset,
    read_header,
    save_container,
    save_dataset,
    split_train_val,
)
from ddclass.decomposition import extract_tiles, plan_grid
from ddclass.errors import ContractError, FormatError
from ddclass.lda import DatasetView, fit_lda, predict_proba


def test_container_layout_rank4():
    a = np.zeros((8, 3, 32, 32), np.float32)
    buf = encode_container(a)
    assert buf[:4] == b"DTEN" and buf[4] == 1 and buf[5] == 1 and buf[6] == 4
    assert struct.unpack("<4I", buf[7:23]) == (8, 3, 32, 32)
    assert len(buf) - 23 == 8 * 3 * 32 * 32 * 4


def test_container_roundtrip_bytes(tmp_path):
    a = np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32)
    p = tmp_path / "a.dten"
    save_container(p, a)
    b = load_container(p)
    assert b.dtype == np.float32 and b.tobytes() == a.tobytes()
    assert encode_container(b) == p.read_bytes()
    labels = np.array([0, 7, 2**32 - 1], np.uint32)
    out, end = decode_container(encode_container(labels))
    np.testing.assert_array_equal(out, labels)
    assert read_header(p)["extents"] == [3, 5]


@pytest.mark.parametrize("pos,value,offset", [(0, ord("X"), 0), (4, 2, 4), (5, 9, 5), (6, 0, 6)])
def test_corrupt_header_positions(pos, value, offset):
    buf = bytearray(encode_container(np.ones((2, 2), np.float32)))
    buf[pos] = value
    with pytest.raises(FormatError) as err:
        decode_container(bytes(buf))
    assert err.value.offset == offset and f"at byte {offset}" in str(err.value)


def test_truncated_and_trailing(tmp_path):
    buf = encode_container(np.ones((2, 2), np.float32))
    with pytest.raises(FormatError):
        decode_container(buf[:-1])
    with pytest.raises(FormatError):
        decode_container(buf[:9])
    p = tmp_path / "t.dten"
    p.write_bytes(buf + b"\0")
    with pytest.raises(FormatError) as err:
        load_container(p)
    assert err.value.offset == len(buf)


def test_params_roundtrip_and_corruption():
    params = {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3), "é": np.ones(1, np.float32)}
    buf = encode_params(params)
    out = decode_params(buf)
    assert list(out) == list(params)
    assert encode_params(out) == buf
    with pytest.raises(FormatError):
        decode_params(b"DPRX" + buf[4:])
    with pytest.raises(FormatError):
        decode_params(buf[:-2])
    with pytest.raises(ContractError):
        encode_params({"x": np.ones(2, np.float64)})


def test_dataset_roundtrip(tmp_path):
    ds = gen_synthetic("gaussian-classes", 20, (4, 4), 3, seed=1)
    save_dataset(tmp_path / "d", ds)
    back = load_dataset(tmp_path / "d")
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.labels.tobytes() == ds.labels.tobytes()
    assert back.meta == ds.meta and back.num_classes == 3
    with pytest.raises(ContractError):
        LabeledDataset(np.zeros((2, 1, 2, 2)), np.array([0, 3]), 3)


def test_split_examples():
    ds = gen_synthetic("gaussian-classes", 100, (4, 4), 2, seed=0)
    tr, va = split_train_val(ds, 0.8, seed=3)
    assert (len(tr), len(va)) == (80, 20)
    tr2, _ = split_train_val(ds, 0.8, seed=3)
    assert tr.images.tobytes() == tr2.images.tobytes()
    with pytest.raises(ContractError):
        split_train_val(ds, 1.0)


def test_split_stratified_counts():
    labels = np.array([0] * 7 + [1] * 13 + [2] * 31)
    ds = LabeledDataset(np.zeros((51, 1, 2, 2)), labels, 3)
    tr, va = split_train_val(ds, 0.7, seed=1)
    for j, nj in enumerate((7, 13, 31)):
        assert abs(np.sum(tr.labels == j) - 0.7 * nj) <= 1
        assert np.sum(va.labels == j) >= 1
    with pytest.raises(ContractError):
        split_train_val(LabeledDataset(np.zeros((3, 1, 2, 2)), [0, 1, 1], 2), 0.4)


def test_generators_are_deterministic_and_in_unit_range():
    for kind, shape, k in (("gaussian-classes", (8, 8), 3), ("tile-separable", (8, 8), 4),
                           ("striped-vs-checker", (8, 8), 2), ("volumetric-blob", (16, 16, 8), 2)):
        a = gen_synthetic(kind, 12, shape, k, seed=5)
        b = gen_synthetic(kind, 12, shape, k, seed=5)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.images.min() >= 0 and a.images.max() <= 1
        assert a.images.shape == (12, 1) + shape and a.meta["kind"] == kind
    with pytest.raises(ContractError):
        gen_synthetic("nope", 4, (4, 4), 2)
    with pytest.raises(ContractError):
        gen_synthetic("striped-vs-checker", 4, (4, 4), 3)


def test_gaussian_classes_is_separable_by_lda():
    ds = gen_synthetic("gaussian-classes", 400, (6, 6), 2, seed=2, separation=0.4, noise=0.05)
    tr, va = split_train_val(ds, 0.8, seed=0)
    model = fit_lda(DatasetView.from_rows(tr.images, tr.labels, 2), 1)
    acc = np.mean(predict_proba(model, va.images).argmax(1) == va.labels)
    assert acc >= 0.99


def test_signal_tile_beats_noise_tile():
    ds = gen_synthetic("tile-separable", 600, (16, 16), 2, seed=4, signal_tile=0)
    tr, va = split_train_val(ds, 0.8, seed=0)
    plan = plan_grid((16, 16), (2, 2))
    accs = []
    for i in (0, 3):
        t_tr = extract_tiles(tr.images, plan)[i]
        t_va = extract_tiles(va.images, plan)[i]
        model = fit_lda(DatasetView.from_rows(t_tr, tr.labels, 2), 1)
        accs.append(np.mean(predict_proba(model, t_va).argmax(1) == va.labels))
    assert accs[0] > accs[1] + 0.2
