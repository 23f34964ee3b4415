"""Synthetic benchmark generator and netpbm round trips."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from raad.data import (Dataset, DefectSpec, Manifest, SceneSpec,
                       generate_dataset, inject_defect, load_dataset,
                       load_image, render_normal, verify_checksums)
from raad.errors import (DatasetContractError, ImageParseError, ParameterError)
from raad.ppm import (from_unit_float, read_netpbm, to_unit_float, write_pgm,
                      write_ppm)
from raad.rng import Rng


SMALL = SceneSpec(image_size=32)
DEFECT = DefectSpec(size_min=2, size_max=4, margin=1)


def test_render_normal_range_and_shape():
    img = render_normal(SMALL, Rng(0))
    assert img.shape == (3, 32, 32)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_render_normal_deterministic_per_seed():
    a = render_normal(SMALL, Rng(7))
    b = render_normal(SMALL, Rng(7))
    c = render_normal(SMALL, Rng(8))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_object_region_invariant_across_images():
    mask = SMALL.object_mask()
    a = render_normal(SMALL, Rng(1))
    b = render_normal(SMALL, Rng(2))
    assert np.array_equal(a[:, mask], b[:, mask])
    assert not np.array_equal(a[:, ~mask], b[:, ~mask])


def test_variable_mask_is_background():
    assert np.array_equal(SMALL.variable_mask(), ~SMALL.object_mask())


def test_scene_spec_validation():
    with pytest.raises(ParameterError):
        SceneSpec(object_radius=0.05)
    with pytest.raises(ParameterError):
        SceneSpec(image_size=8)
    with pytest.raises(ParameterError):
        DefectSpec(kinds=("glitter",))
    with pytest.raises(ParameterError):
        DefectSpec(size_min=5, size_max=3)


def test_defect_inside_object_with_margin():
    obj = SMALL.object_mask()
    for seed in range(30):
        rng = Rng(seed)
        base = render_normal(SMALL, rng)
        img, mask = inject_defect(base, SMALL, DEFECT, rng)
        assert mask.any()
        assert not (mask & ~obj).any()  # strictly inside the invariant region
        assert img.shape == base.shape


def test_defect_changes_only_masked_pixels():
    rng = Rng(123)
    base = render_normal(SMALL, rng)
    img, mask = inject_defect(base, SMALL, DEFECT, rng)
    assert np.array_equal(img[:, ~mask], base[:, ~mask])
    assert not np.array_equal(img[:, mask], base[:, mask])


def test_defect_all_kinds_reachable():
    kinds_seen = set()
    for seed in range(60):
        rng = Rng(seed)
        base = render_normal(SMALL, rng)
        single = [DefectSpec(kinds=(k,), size_min=2, size_max=4, margin=1)
                  for k in ("patch", "scratch", "hole")]
        for ds in single:
            _, mask = inject_defect(base, SMALL, ds, rng)
            kinds_seen.add(ds.kinds[0])
            assert mask.any()
    assert kinds_seen == {"patch", "scratch", "hole"}


def test_oversized_defect_rejected():
    big = DefectSpec(size_min=20, size_max=30, margin=2)
    rng = Rng(0)
    base = render_normal(SMALL, rng)
    with pytest.raises(ParameterError, match="exceeds"):
        inject_defect(base, SMALL, big, rng)


def test_generate_dataset_layout_and_reload(tmp_path):
    root = str(tmp_path / "ds")
    manifest = generate_dataset(root, seed=11, spec=SMALL, defect=DEFECT,
                                n_train=8, n_test_normal=3, n_test_anom=3)
    assert len(manifest.entries) == 14
    ds = load_dataset(root)
    assert len(ds.train_images) == 8
    assert len(ds.test_images) == 6
    assert ds.test_labels.count("anomalous") == 3
    assert all(lbl == "normal" for lbl in ds.train_labels)
    assert ds.variable_mask.shape == (32, 32)
    for img, lbl, mask in zip(ds.test_images, ds.test_labels, ds.test_masks):
        assert img.shape == (3, 32, 32)
        assert mask.shape == (32, 32)
        assert mask.any() == (lbl == "anomalous")


def test_generate_dataset_byte_identical_reruns(tmp_path):
    m1 = generate_dataset(str(tmp_path / "a"), seed=3, spec=SMALL, defect=DEFECT,
                          n_train=6, n_test_normal=2, n_test_anom=2)
    m2 = generate_dataset(str(tmp_path / "b"), seed=3, spec=SMALL, defect=DEFECT,
                          n_train=6, n_test_normal=2, n_test_anom=2)
    assert m1.lines() == m2.lines()
    for e in m1.entries:
        a = (tmp_path / "a" / e.path).read_bytes()
        b = (tmp_path / "b" / e.path).read_bytes()
        assert a == b
    assert ((tmp_path / "a" / "checksums.txt").read_text()
            == (tmp_path / "b" / "checksums.txt").read_text())


def test_generate_dataset_seed_changes_content(tmp_path):
    generate_dataset(str(tmp_path / "a"), seed=1, spec=SMALL, defect=DEFECT,
                     n_train=4, n_test_normal=1, n_test_anom=1)
    generate_dataset(str(tmp_path / "b"), seed=2, spec=SMALL, defect=DEFECT,
                     n_train=4, n_test_normal=1, n_test_anom=1)
    a = (tmp_path / "a" / "train" / "0000.ppm").read_bytes()
    b = (tmp_path / "b" / "train" / "0000.ppm").read_bytes()
    assert a != b


def test_checksums_verify_and_detect_tamper(tmp_path):
    root = tmp_path / "ds"
    generate_dataset(str(root), seed=5, spec=SMALL, defect=DEFECT,
                     n_train=4, n_test_normal=1, n_test_anom=1)
    verify_checksums(str(root))
    victim = root / "train" / "0001.ppm"
    raw = bytearray(victim.read_bytes())
    raw[-1] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(DatasetContractError, match="checksum"):
        verify_checksums(str(root))


def test_manifest_round_trip_and_header():
    text = ("split,path,label,mask_path_or_dash,subseed\n"
            "train,train/0000.ppm,normal,-,42\n"
            "test,test/anom_0000.ppm,anomalous,masks/anom_0000.pgm,77\n")
    m = Manifest.parse(text)
    assert len(m.entries) == 2
    assert m.entries[1].mask_path == "masks/anom_0000.pgm"
    assert m.entries[0].subseed == 42
    assert m.lines() == text


def test_manifest_rejects_bad_shape():
    with pytest.raises(DatasetContractError):
        Manifest.parse("wrong,header\n")
    with pytest.raises(DatasetContractError):
        Manifest.parse("split,path,label,mask_path_or_dash,subseed\nonly,three,fields\n")


def test_variance_contract_enforced(tmp_path):
    flat = SceneSpec(image_size=32, background_amplitude=0.0, channel_jitter=0.0)
    with pytest.raises(DatasetContractError, match="variance"):
        generate_dataset(str(tmp_path / "flat"), seed=0, spec=flat, defect=DEFECT,
                         n_train=4, n_test_normal=1, n_test_anom=1)


# ---- netpbm I/O ----


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    path = str(tmp_path / "x.ppm")
    write_ppm(path, img)
    back = read_netpbm(path)
    assert np.array_equal(back, img)


def test_pgm_round_trip_and_gray_promotion(tmp_path):
    img = np.arange(20, dtype=np.uint8).reshape(4, 5)
    path = str(tmp_path / "x.pgm")
    write_pgm(path, img)
    back = read_netpbm(path)
    assert back.shape == (4, 5)
    unit = to_unit_float(back)
    assert unit.shape == (3, 4, 5)  # gray promoted to 3 channels
    assert np.array_equal(unit[0], unit[1])


def test_unit_float_round_trip_exact_on_u8_lattice():
    img = np.arange(256, dtype=np.uint8).reshape(16, 16)[:, :, None].repeat(3, axis=2)
    assert np.array_equal(from_unit_float(to_unit_float(img)), img)


def test_truncated_ppm_reports_offset(tmp_path):
    path = tmp_path / "trunc.ppm"
    img = np.full((4, 4, 3), 9, dtype=np.uint8)
    write_ppm(str(path), img)
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(ImageParseError, match="byte"):
        read_netpbm(str(path))


def test_trailing_ppm_payload_rejected(tmp_path):
    path = tmp_path / "extra.ppm"
    write_ppm(str(path), np.zeros((2, 2, 3), dtype=np.uint8))
    path.write_bytes(path.read_bytes() + b"\x01\x02")
    with pytest.raises(ImageParseError):
        read_netpbm(str(path))


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P7\n2 2\n255\n" + b"\x00" * 12)
    with pytest.raises(ImageParseError):
        read_netpbm(str(path))


def test_nonexistent_image_error():
    with pytest.raises(ImageParseError):
        load_image("/nonexistent/nowhere.ppm")


def test_load_image_unit_tensor(tmp_path):
    path = str(tmp_path / "img.ppm")
    write_ppm(path, np.full((4, 4, 3), 255, dtype=np.uint8))
    t = load_image(path)
    assert t.data.shape == (3, 4, 4)
    assert np.all(t.data == 1.0)
