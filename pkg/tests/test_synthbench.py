import filecmp
import itertools

import numpy as np
import pytest

from minmaxcam._pnm import read_pnm, write_pnm
from minmaxcam.exceptions import IntegrityError, InvalidArgumentError, LoadError
from minmaxcam.synthbench import (
    SynthConfig,
    class_identity,
    generate_dataset,
    load_dataset,
    render_sample,
)
from minmaxcam.wsoleval import tight_box

SMALL = dict(num_classes=8, train_per_class=4, test_per_class=2, image_size=32)


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    rows = generate_dataset(SynthConfig(**SMALL, marker_mode=True, seed=3), root)
    return root, rows


def same_class_bg_correlation(cfg):
    """Mean Pearson correlation of shared background pixels over same-class pairs."""
    corrs = []
    for c in range(cfg.num_classes):
        samples = [
            render_sample(cfg, c, np.random.default_rng([cfg.seed, 0, c, i]), bg)
            for i, bg in zip(range(5), itertools.repeat(_class_bg(cfg, c)))
        ]
        for (a, ma), (b, mb) in itertools.combinations(samples, 2):
            keep = ~(ma | mb)
            x, y = a[keep].ravel(), b[keep].ravel()
            corrs.append(np.corrcoef(x, y)[0, 1])
    return float(np.mean(corrs))


def _class_bg(cfg, c):
    from minmaxcam.synthbench import _texture_params

    if cfg.bg_mode != "common":
        return None
    return _texture_params(np.random.default_rng(np.random.SeedSequence([cfg.seed, 99, c])))


class TestGenerate:
    def test_deterministic(self, small_set, tmp_path):
        root, _ = small_set
        generate_dataset(SynthConfig(**SMALL, marker_mode=True, seed=3), tmp_path)
        for rel in ["manifest.csv", "dataset.cfg"]:
            assert filecmp.cmp(root / rel, tmp_path / rel, shallow=False)
        for sub in ["images", "masks"]:
            names = sorted(p.name for p in (root / sub).iterdir())
            assert names == sorted(p.name for p in (tmp_path / sub).iterdir())
            _, mismatch, errors = filecmp.cmpfiles(root / sub, tmp_path / sub, names, shallow=False)
            assert not mismatch and not errors

    def test_seed_changes_output(self, small_set, tmp_path):
        root, _ = small_set
        generate_dataset(SynthConfig(**SMALL, marker_mode=True, seed=4), tmp_path)
        assert not filecmp.cmp(root / "images" / "train_000_0000.ppm", tmp_path / "images" / "train_000_0000.ppm", shallow=False)

    def test_layout(self, small_set):
        root, rows = small_set
        header = (root / "manifest.csv").read_text().splitlines()[0]
        assert header == "image_id,split,class_id,x0,y0,x1,y1"
        assert len(rows) == 8 * (4 + 2)
        for r in rows:
            assert (root / "images" / f"{r['image_id']}.ppm").is_file()
            assert (root / "masks" / f"{r['image_id']}.pgm").is_file()

    def test_boxes_are_tight_and_interior(self, small_set):
        root, rows = small_set
        for r in rows:
            mask, _ = read_pnm(root / "masks" / f"{r['image_id']}.pgm")
            assert tight_box(mask > 0).as_tuple() == (r["x0"], r["y0"], r["x1"], r["y1"])
            assert r["x0"] >= 2 and r["y0"] >= 2 and r["x1"] <= 30 and r["y1"] <= 30

    def test_class_balance(self, small_set):
        _, rows = small_set
        for split, n in [("train", 4), ("test", 2)]:
            counts = np.bincount([r["class_id"] for r in rows if r["split"] == split], minlength=8)
            assert (counts == n).all()

    def test_classes_are_distinct(self):
        cfg = SynthConfig()
        assert len({class_identity(cfg, c) for c in range(cfg.num_classes)}) == cfg.num_classes

    def test_marker_inside_object(self):
        cfg = SynthConfig(num_classes=8, image_size=48, marker_mode=True)
        plain = SynthConfig(num_classes=8, image_size=48)
        for c in range(8):
            for i in range(3):
                img, mask = render_sample(cfg, c, np.random.default_rng([1, c, i]), None)
                ref, mask2 = render_sample(plain, c, np.random.default_rng([1, c, i]), None)
                changed = np.any(img != ref, axis=-1)
                assert (mask == mask2).all()
                assert changed.any()
                assert not (changed & ~mask).any()
                assert changed.sum() <= 0.10 * mask.sum()

    def test_varied_backgrounds_decorrelate(self):
        base = dict(num_classes=8, image_size=32, seed=5)
        varied = same_class_bg_correlation(SynthConfig(**base, bg_mode="varied"))
        common = same_class_bg_correlation(SynthConfig(**base, bg_mode="common"))
        assert common > 0.9
        assert varied < 0.3
        assert common - varied > 0.5

    @pytest.mark.parametrize(
        "bad",
        [dict(num_classes=1), dict(image_size=8), dict(scale_min=0.0), dict(scale_max=1.0),
         dict(bg_mode="plain"), dict(train_per_class=0)],
    )
    def test_invalid_config(self, bad):
        with pytest.raises(InvalidArgumentError):
            SynthConfig(**bad).validate()

    def test_config_text_round_trip(self):
        cfg = SynthConfig(num_classes=5, marker_mode=True, scale_min=0.3, bg_mode="common", seed=11)
        assert SynthConfig.from_text(cfg.to_text()) == cfg

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            generate_dataset(SynthConfig(**SMALL), blocker / "sub")


class TestLoad:
    def test_round_trip_boxes(self, small_set):
        root, rows = small_set
        ds = load_dataset(root)
        assert ds.num_classes == 8
        want = {r["image_id"]: (r["x0"], r["y0"], r["x1"], r["y1"]) for r in rows}
        for split in ("train", "test"):
            s = ds.split(split)
            for iid, boxes in zip(s.image_ids, s.boxes):
                assert [b.as_tuple() for b in boxes] == [want[iid]]

    def test_pixel_grid(self, small_set):
        s = load_dataset(small_set[0]).split("train")
        assert s.images.shape == (32, 3, 32, 32)
        assert s.images.min() >= 0.0 and s.images.max() <= 1.0
        k = s.images * 255
        np.testing.assert_array_equal(k, np.round(k))

    def test_corrupted_mask(self, tmp_path):
        generate_dataset(SynthConfig(**SMALL), tmp_path)
        path = tmp_path / "masks" / "train_002_0001.pgm"
        mask, maxval = read_pnm(path)
        mask[0, 0] = maxval
        write_pnm(path, mask.astype(np.uint8), maxval)
        with pytest.raises(IntegrityError, match="train_002_0001"):
            load_dataset(tmp_path).split("train")

    def test_truncated_mask(self, tmp_path):
        generate_dataset(SynthConfig(**SMALL), tmp_path)
        path = tmp_path / "masks" / "test_001_0000.pgm"
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(LoadError):
            load_dataset(tmp_path).split("test")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(LoadError):
            load_dataset(tmp_path)

    def test_bad_header(self, tmp_path):
        (tmp_path / "manifest.csv").write_text("id,split\n")
        with pytest.raises(LoadError):
            load_dataset(tmp_path)

    def test_missing_image(self, tmp_path):
        generate_dataset(SynthConfig(**SMALL), tmp_path)
        (tmp_path / "images" / "test_000_0000.ppm").unlink()
        with pytest.raises(LoadError):
            load_dataset(tmp_path).split("test")
