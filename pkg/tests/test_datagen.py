import numpy as np
import pytest
from PIL import Image

from glss import datagen as dg
from glss.errors import InvalidInputError, MalformedDatasetError


def small_cfg(**kw):
    base = dict(n_source_train=12, n_source_test=6, n_target_test=6, image_size=32)
    base.update(kw)
    return dg.SynthConfig(**base)


@pytest.fixture(scope="module")
def bench():
    return dg.build_benchmark(small_cfg())


def test_scene_has_both_classes_and_range():
    cfg = dg.SynthConfig()
    rng = np.random.default_rng(0)
    for _ in range(50):
        img, mask = dg.generate_scene(cfg, rng)
        assert img.shape == (64, 64, 1) and mask.shape == (64, 64)
        assert 0 < mask.sum() < mask.size
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert set(np.unique(mask)) <= {0, 1}


def test_scene_is_deterministic():
    cfg = dg.SynthConfig()
    a = dg.generate_scene(cfg, np.random.default_rng(5))
    b = dg.generate_scene(cfg, np.random.default_rng(5))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_skin_brighter_than_background_in_source():
    cfg = dg.SynthConfig(image_size=32)
    rng = np.random.default_rng(1)
    brighter = 0
    for _ in range(1000):
        img, mask = dg.generate_scene(cfg, rng)
        m = mask.astype(bool)
        brighter += img[m, 0].mean() > img[~m, 0].mean()
    assert brighter >= 900


def test_config_validation():
    with pytest.raises(InvalidInputError):
        dg.SynthConfig(shapes=())
    with pytest.raises(InvalidInputError):
        dg.SynthConfig(shapes=("star",))
    with pytest.raises(InvalidInputError):
        dg.SynthConfig(skin_intensity=(0.7, 0.9), background_intensity=(0.1, 0.3))
    with pytest.raises(InvalidInputError):
        dg.SynthConfig(target_shift=dg.DomainShift())
    with pytest.raises(InvalidInputError):
        dg.DomainShift(gamma=0.0)


def test_identity_shift_is_bit_exact():
    img = np.random.default_rng(2).random((16, 16, 1))
    out = dg.apply_domain_shift(img, dg.DomainShift(), np.random.default_rng(0))
    assert np.array_equal(out, img)


def test_gamma_shift_constant():
    out = dg.apply_domain_shift(np.full((8, 8, 1), 0.5), dg.DomainShift(gamma=2.0))
    assert np.allclose(out, 0.25, atol=1e-15)


def test_noise_shift_energy():
    img = np.full((64, 64, 1), 0.5)
    out = dg.apply_domain_shift(img, dg.DomainShift(noise_std=0.05), np.random.default_rng(4))
    assert abs(np.mean((out - img) ** 2) - 0.0025) < 0.2 * 0.0025


def test_benchmark_sizes_ids_and_domains(bench):
    cfg = small_cfg()
    assert [len(bench[k]) for k in ("source_train", "source_test", "target_test")] == [
        cfg.n_source_train, cfg.n_source_test, cfg.n_target_test]
    ids = [set(bench[k].ids) for k in bench]
    assert all(not (a & b) for i, a in enumerate(ids) for b in ids[i + 1:])
    assert bench["target_test"].domain == "target" and bench["source_train"].split == "train"


def test_benchmark_is_deterministic(bench):
    again = dg.build_benchmark(small_cfg())
    assert all(bench[k].equals(again[k]) for k in bench)
    other = dg.build_benchmark(small_cfg(seed=1))
    assert not bench["source_train"].equals(other["source_train"])


def test_class_balance_on_default_benchmark():
    cfg = dg.SynthConfig(n_source_train=200, n_source_test=0, n_target_test=0)
    frac = dg.build_benchmark(cfg)["source_train"].mask_stack().mean()
    assert 0.05 <= frac <= 0.6


def test_target_images_are_shifted_versions_of_scenes():
    cfg = small_cfg()
    b = dg.build_benchmark(cfg)
    src, tgt = b["source_test"].image_stack(), b["target_test"].image_stack()
    # the shift darkens on average (gamma > 1 dominates the offset)
    assert tgt.mean() < src.mean()


def test_read_counters_and_content_hash(bench):
    ds = dg.build_benchmark(small_cfg())["source_test"]
    h = ds.content_hash()
    assert ds.reads["image"] == 0 and ds.reads["mask"] == 0
    ds.image_stack()
    ds.mask(0)
    assert ds.reads["image"] == len(ds) and ds.reads["mask"] == 1
    assert h == bench["source_test"].content_hash()


def test_dataset_validation():
    img = np.zeros((4, 4, 1))
    with pytest.raises(InvalidInputError):
        dg.DomainDataset([img], [np.zeros((3, 4), np.uint8)], ["a"])
    with pytest.raises(InvalidInputError):
        dg.DomainDataset([img, img], [np.zeros((4, 4), np.uint8)] * 2, ["a", "a"])
    with pytest.raises(InvalidInputError):
        dg.DomainDataset([img], [np.zeros((4, 4), np.uint8)], ["a"], domain="nir")


def test_save_load_round_trip(tmp_path, bench):
    ds = bench["target_test"]
    dg.save_dataset(ds, tmp_path / "t")
    back = dg.load_dataset(tmp_path / "t")
    assert back.equals(ds)
    assert (tmp_path / "t" / "manifest.tsv").exists()


def test_load_empty_dir_warns(tmp_path, caplog):
    (tmp_path / "images").mkdir()
    with caplog.at_level("WARNING"):
        ds = dg.load_dataset(tmp_path)
    assert len(ds) == 0
    assert caplog.records


def _write(path, arr, mode="L"):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode=mode).save(path)


def test_load_rejects_bad_mask_values(tmp_path):
    _write(tmp_path / "images" / "x.png", np.zeros((8, 8), np.uint8))
    m = np.zeros((8, 8), np.uint8)
    m[0, 0] = 128
    _write(tmp_path / "masks" / "x.png", m)
    with pytest.raises(MalformedDatasetError):
        dg.load_dataset(tmp_path)


def test_load_missing_mask_names_file(tmp_path):
    _write(tmp_path / "images" / "lonely.png", np.zeros((8, 8), np.uint8))
    with pytest.raises(MalformedDatasetError, match="lonely"):
        dg.load_dataset(tmp_path)


def test_load_rejects_color_image(tmp_path):
    _write(tmp_path / "images" / "c.png", np.zeros((8, 8, 3), np.uint8), mode="RGB")
    _write(tmp_path / "masks" / "c.png", np.zeros((8, 8), np.uint8))
    with pytest.raises(InvalidInputError):
        dg.load_dataset(tmp_path)
