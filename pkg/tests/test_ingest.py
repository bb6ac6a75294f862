from __future__ import annotations

import json
import logging

import numpy as np
import pytest

from sml_sim.ingest import (
    DatasetManifest,
    ImageLoader,
    encode_idx,
    load_manifest,
    parse_idx,
    read_idx,
    read_labeled_csv,
    save_manifest,
    verify_manifest,
    write_idx,
    write_labeled_csv,
)
from sml_sim.util import file_sha256


@pytest.mark.parametrize("dtype", [np.uint8, np.int8, np.int16, np.int32, np.float32, np.float64])
def test_idx_preserves_values_and_shape(dtype):
    array = (np.arange(24).reshape(2, 3, 4) - 5).astype(dtype)
    if np.dtype(dtype).kind == "u":
        array = np.arange(24, dtype=dtype).reshape(2, 3, 4)
    parsed = parse_idx(encode_idx(array))
    assert parsed.shape == (2, 3, 4)
    np.testing.assert_array_equal(parsed, array)


def test_idx_header_is_big_endian():
    data = encode_idx(np.array([1, 2, 3], dtype=np.uint8))
    assert data[:4] == bytes([0, 0, 0x08, 1])
    assert data[4:8] == (3).to_bytes(4, "big")
    assert data[8:] == bytes([1, 2, 3])


def test_idx_rejects_malformed_data():
    good = encode_idx(np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ValueError, match="bad IDX magic"):
        parse_idx(b"\x01" + good[1:])
    with pytest.raises(ValueError, match="truncated IDX magic"):
        parse_idx(good[:3])
    with pytest.raises(ValueError, match="truncated IDX dimensions"):
        parse_idx(good[:6])
    with pytest.raises(ValueError, match="truncated IDX payload"):
        parse_idx(good[:-1])
    with pytest.raises(ValueError, match="trailing"):
        parse_idx(good + b"\x00")
    with pytest.raises(ValueError, match="dtype code"):
        parse_idx(bytes([0, 0, 0x07, 0]))
    with pytest.raises(ValueError, match="no IDX type code"):
        encode_idx(np.zeros(2, dtype=np.uint16))


def test_idx_file_io(tmp_path):
    path = tmp_path / "images.idx"
    images = np.arange(2 * 28 * 28, dtype=np.uint8).reshape(2, 28, 28)
    write_idx(str(path), images)
    np.testing.assert_array_equal(read_idx(str(path)), images)


def test_labeled_csv_with_and_without_header(tmp_path):
    images = np.array([[[0, 255], [10, 20]], [[1, 2], [3, 4]]], dtype=np.uint8)
    path = tmp_path / "digits.csv"
    write_labeled_csv(str(path), images, np.array([7, 3]))
    pixels, labels = read_labeled_csv(str(path), (2, 2))
    np.testing.assert_array_equal(pixels, images)
    assert labels.tolist() == [7, 3]

    bare = tmp_path / "bare.csv"
    bare.write_text("5,1,2,3,4\n")
    pixels, labels = read_labeled_csv(str(bare))
    assert pixels.shape == (1, 4) and labels.tolist() == [5]


def test_labeled_csv_rejects_bad_rows(tmp_path):
    out_of_range = tmp_path / "range.csv"
    out_of_range.write_text("1,300,0\n")
    with pytest.raises(ValueError, match="outside"):
        read_labeled_csv(str(out_of_range))
    wrong_shape = tmp_path / "shape.csv"
    wrong_shape.write_text("1,0,0,0\n")
    with pytest.raises(ValueError, match="image shape"):
        read_labeled_csv(str(wrong_shape), (2, 2))


def _write_dataset(tmp_path, with_idx=True, with_csv=True):
    images = np.random.default_rng(0).integers(0, 256, size=(6, 4, 4), dtype=np.uint8)
    labels = np.array([0, 1, 0, 1, 2, 2], dtype=np.uint8)
    manifest = DatasetManifest(path=str(tmp_path / "manifest.json"), image_shape=(4, 4))
    if with_idx:
        write_idx(str(tmp_path / "images.idx"), images)
        write_idx(str(tmp_path / "labels.idx"), labels)
        manifest.idx_images, manifest.idx_labels = "images.idx", "labels.idx"
    if with_csv:
        write_labeled_csv(str(tmp_path / "images.csv"), images, labels)
        manifest.csv = "images.csv"
    manifest.sha256 = {name: file_sha256(manifest.resolve(name)) for name in manifest.files()}
    save_manifest(manifest)
    return images, labels


def test_manifest_round_trip_and_verification(tmp_path):
    _write_dataset(tmp_path)
    manifest = load_manifest(str(tmp_path / "manifest.json"))
    assert manifest.image_shape == (4, 4)
    assert manifest.files() == ["images.idx", "labels.idx", "images.csv"]
    checks = verify_manifest(manifest)
    assert all(check.ok for check in checks)

    (tmp_path / "images.csv").write_text("0,1\n")
    (tmp_path / "labels.idx").unlink()
    by_name = {check.name: check for check in verify_manifest(manifest)}
    assert not by_name["images.csv"].ok and by_name["images.csv"].exists
    assert not by_name["labels.idx"].exists
    assert by_name["images.idx"].ok


def test_manifest_without_files_is_rejected(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"image_shape": [28, 28]}))
    with pytest.raises(ValueError, match="neither IDX nor CSV"):
        load_manifest(str(path))


def test_loader_prefers_idx(tmp_path):
    images, labels = _write_dataset(tmp_path)
    loaded, loaded_labels = ImageLoader(load_manifest(str(tmp_path / "manifest.json"))).load()
    np.testing.assert_array_equal(loaded, images)
    assert loaded_labels.tolist() == labels.tolist()


def test_loader_falls_back_to_csv(tmp_path, caplog):
    images, labels = _write_dataset(tmp_path)
    (tmp_path / "images.idx").write_bytes(b"\x00\x00")
    with caplog.at_level(logging.WARNING, logger="sml_sim.ingest.loader"):
        loaded, loaded_labels = ImageLoader(load_manifest(str(tmp_path / "manifest.json"))).load()
    np.testing.assert_array_equal(loaded, images)
    assert loaded_labels.tolist() == labels.tolist()
    assert "Image source idx failed" in caplog.text


def test_loader_reraises_last_failure(tmp_path):
    _write_dataset(tmp_path)
    (tmp_path / "images.idx").unlink()
    (tmp_path / "images.csv").write_text("0,999\n")
    with pytest.raises(ValueError, match="outside"):
        ImageLoader(load_manifest(str(tmp_path / "manifest.json"))).load()


def test_loader_checks_idx_shape_against_manifest(tmp_path):
    _write_dataset(tmp_path, with_csv=False)
    manifest = load_manifest(str(tmp_path / "manifest.json"))
    manifest.image_shape = (2, 8)
    with pytest.raises(ValueError, match="manifest says"):
        ImageLoader(manifest).load()
