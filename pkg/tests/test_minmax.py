"""Set batches, regularizers, both training stages and the trainer loop."""

import numpy as np
import pytest

from minmaxcam.exceptions import InvalidArgumentError
from minmaxcam.gradcheck import check_gradients
from minmaxcam.minmax import (
    FeaturePair,
    SetBatch,
    StageTwoConfig,
    TrainConfig,
    batched_frr,
    crr,
    frr,
    grouped_crr,
    sample_set_batch,
    stage1_step,
    stage2_loss,
    stage2_step,
    train,
    write_log_csv,
)
from minmaxcam.ndtensor import Tape, Tensor, backward
from minmaxcam.nets import BackboneSpec, ConvLayer, build_model, default_backbone


class ToySplit:
    def __init__(self, images, labels):
        self.images = images
        self.labels = np.asarray(labels)


def toy_split(n_classes=3, per_class=6, size=16, seed=0):
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(n_classes):
        for _ in range(per_class):
            img = rng.random((3, size, size)) * 0.3
            y, x = rng.integers(2, size - 8, 2)
            img[c % 3, y : y + 6, x : x + 6] = 1.0
            images.append(img)
            labels.append(c)
    return ToySplit(np.stack(images), labels)


def tiny_model(seed=0, n_classes=3, k=4):
    return build_model(default_backbone(channels=(4,), k=k), n_classes, seed)


def micro_model(seed):
    spec = BackboneSpec((ConvLayer(3, 2, 3, 1, 1),), min_input=4)
    return build_model(spec, 3, seed)


class TestSetBatch:
    def test_two_images(self):
        split = ToySplit(np.arange(2 * 3 * 4 * 4, dtype=float).reshape(2, 3, 4, 4), [0, 0])
        b = sample_set_batch(split, 1, 2, np.random.default_rng(0))
        assert sorted(b.indices.tolist()) == [0, 1]

    def test_replacement_fallback(self):
        split = ToySplit(np.zeros((3, 3, 4, 4)), [0, 1, 1])
        for seed in range(5):
            b = sample_set_batch(split, 2, 3, np.random.default_rng(seed))
            g = b.labels.reshape(2, 3)
            row = int(np.flatnonzero(g[:, 0] == 0)[0])
            assert b.indices.reshape(2, 3)[row].tolist() == [0, 0, 0]

    def test_layout_and_determinism(self):
        split = toy_split(4, 5)
        a = [sample_set_batch(split, 3, 2, np.random.default_rng(9)).indices for _ in range(2)]
        np.testing.assert_array_equal(a[0], a[1])
        b = sample_set_batch(split, 3, 4, np.random.default_rng(1))
        groups = b.labels.reshape(3, 4)
        assert (groups == groups[:, :1]).all() and len(set(groups[:, 0])) == 3
        for row in b.indices.reshape(3, 4):
            assert len(set(row.tolist())) == 4

    def test_too_few_classes(self):
        with pytest.raises(InvalidArgumentError):
            sample_set_batch(toy_split(2, 3), 3, 2, np.random.default_rng(0))

    def test_invalid_layout(self):
        with pytest.raises(InvalidArgumentError):
            SetBatch(np.zeros((4, 3, 4, 4)), np.array([0, 1, 1, 1]), 2, 2)
        with pytest.raises(InvalidArgumentError):
            SetBatch(np.zeros((4, 3, 4, 4)), np.array([0, 0, 0, 0]), 2, 2)


class TestRegularizers:
    def test_crr_values(self):
        assert crr([Tensor([1.0, 2.0])] * 3).item() == 0.0
        assert crr([Tensor([0.0, 0.0]), Tensor([1.0, 1.0])]).item() == 2.0
        assert crr(np.array([[0.0], [1.0], [2.0]])).item() == 2.0
        with pytest.raises(InvalidArgumentError):
            crr([Tensor([1.0])])

    def test_crr_symmetry(self):
        f = np.random.default_rng(0).normal(size=(5, 3))
        perm = np.random.default_rng(1).permutation(5)
        assert crr(f).item() == pytest.approx(crr(f[perm]).item(), rel=1e-14)
        assert crr(f).item() > 0

    def test_grouped_crr_is_mean_of_groups(self):
        f = np.random.default_rng(2).normal(size=(3 * 4, 5))
        want = np.mean([crr(f[g * 4 : (g + 1) * 4]).item() for g in range(3)])
        assert grouped_crr(Tensor(f), 3, 4).item() == pytest.approx(want, rel=1e-13)

    def test_frr_values(self):
        z = Tensor([1.0, 2.0])
        assert frr([FeaturePair(z, z)]).item() == 0.0
        assert frr([FeaturePair(Tensor([0.0, 0.0]), Tensor([3.0, 4.0]))]).item() == 25.0
        pairs = [FeaturePair(Tensor([0.0, 0.0]), Tensor([3.0, 4.0])), FeaturePair(z, z)]
        assert frr(pairs).item() == 12.5
        assert batched_frr(Tensor([[0.0, 0.0], [1.0, 2.0]]), np.array([[3.0, 4.0], [1.0, 2.0]])).item() == 12.5


class TestStageOne:
    def test_zero_lr(self):
        m = tiny_model()
        before = {n: t.data.copy() for n, t in m.params.items()}
        b = sample_set_batch(toy_split(), 3, 2, np.random.default_rng(0))
        loss = stage1_step(m, b, 0.0)
        assert np.isfinite(loss)
        for n, t in m.params.items():
            assert t.data.tobytes() == before[n].tobytes()

    def test_loss_decreases_on_separable_toy(self):
        split = toy_split(2, 4, seed=3)
        batch = SetBatch(split.images, split.labels, 2, 4)
        m = build_model(default_backbone(channels=(4,), k=4), 2, 1)
        losses = [stage1_step(m, batch, 0.02, 0.9) for _ in range(50)]
        assert losses[-1] < losses[0]
        for t in range(len(losses) - 5):
            assert min(losses[t + 1 : t + 6]) < losses[t]

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            m = tiny_model(4)
            rng = np.random.default_rng(0)
            split = toy_split()
            runs.append([stage1_step(m, sample_set_batch(split, 3, 2, rng), 0.05) for _ in range(5)])
        assert runs[0] == runs[1]


class TestStageTwo:
    def _batch(self, seed=0, size=16):
        return sample_set_batch(toy_split(size=size, seed=seed), 3, 2, np.random.default_rng(seed))

    def test_zero_lambdas(self):
        m = tiny_model(1)
        before = {n: t.data.copy() for n, t in m.params.items()}
        c, r = stage2_step(m, self._batch(), StageTwoConfig(0.0, 0.0), lr2=0.1)
        assert np.isfinite(c) and np.isfinite(r) and r > 0
        for n, t in m.params.items():
            assert t.data.tobytes() == before[n].tobytes()

    @pytest.mark.parametrize("variant", ["input", "feature"])
    def test_backbone_frozen(self, variant):
        m = tiny_model(2)
        before = {n: t.data.copy() for n, t in m.params.items()}
        for i in range(3):
            stage2_step(m, self._batch(i), StageTwoConfig(3.0, 2.0), variant, lr2=0.1)
        for n in m.backbone_names + ["head.b"]:
            assert m.params[n].data.tobytes() == before[n].tobytes()
        assert not np.array_equal(m.head_w.data, before["head.w"])
        assert all(t.requires_grad for _, t in m.params.items())

    def test_s1_needs_no_crr(self):
        split = toy_split()
        b = sample_set_batch(split, 3, 1, np.random.default_rng(0))
        with pytest.raises(InvalidArgumentError):
            stage2_step(tiny_model(), b, StageTwoConfig(1.0, 1.0), lr2=0.1)
        stage2_step(tiny_model(), b, StageTwoConfig(0.0, 1.0), lr2=0.1)

    @pytest.mark.parametrize("variant", ["input", "feature"])
    @pytest.mark.parametrize("seed", range(5))
    def test_head_gradient_matches_finite_differences(self, seed, variant):
        m = micro_model(seed)
        rng = np.random.default_rng(seed)
        images = rng.random((4, 3, 4, 4))
        batch = SetBatch(images, np.array([0, 0, 2, 2]), 2, 2)
        cfg = StageTwoConfig(0.7, 1.3)
        for n in m.backbone_names:
            m.params[n].requires_grad = False
        err = check_gradients(lambda: stage2_loss(m, batch, cfg, variant)[0], [m.head_w])[0]
        assert err <= 1e-4

    def test_frr_gradient_nonzero(self):
        for seed in range(3):
            m = tiny_model(seed)
            b = self._batch(seed)
            m.head_w.grad = None
            with Tape() as tape:
                loss = stage2_loss(m, b, StageTwoConfig(0.0, 1.0))[0]
            backward(tape, loss)
            assert np.linalg.norm(m.head_w.grad) > 0

    def test_doubling_lambdas_doubles_loss(self):
        m = tiny_model(3)
        b = self._batch(1)
        one = stage2_loss(m, b, StageTwoConfig(0.4, 1.7))[0].item()
        two = stage2_loss(m, b, StageTwoConfig(0.8, 3.4))[0].item()
        assert two == pytest.approx(2 * one, rel=1e-14)

    def test_ones_map_zeroes_frr(self):
        from minmaxcam.cam import mask_image
        from minmaxcam.minmax import _features_untracked
        from minmaxcam.ndtensor import gap
        from minmaxcam.nets import forward_features

        m = tiny_model(5)
        b = self._batch(2)
        f = gap(forward_features(m, mask_image(b.images, np.ones((len(b.images), 16, 16)))))
        f_o = _features_untracked(m, b.images).mean(axis=(2, 3))
        assert batched_frr(f, f_o).item() == 0.0


class TestTrain:
    def _cfg(self, **kw):
        base = dict(epochs=1, lr1=0.05, S=2, N=3, batches_per_epoch=3, channels=(4,), K=4, seed=5)
        base.update(kw)
        return TrainConfig(**base)

    def test_baseline_reduction(self):
        split = toy_split()
        res = train(self._cfg(stage2=StageTwoConfig(0.0, 0.0)), split)
        cfg = self._cfg()
        from minmaxcam.minmax import make_rngs

        m = build_model(cfg.backbone(), 3, rng_seed=cfg.seed)
        rng = make_rngs(cfg.seed)["sample"]
        for _ in range(3):
            stage1_step(m, sample_set_batch(split, 3, 2, rng), cfg.lr1, cfg.momentum)
        for (_, a), (_, b) in zip(res.model.params.items(), m.params.items()):
            assert a.data.tobytes() == b.data.tobytes()
        assert all(np.isnan(r["crr"]) for r in res.log)

    def test_deterministic(self):
        split = toy_split()
        a = train(self._cfg(stage2=StageTwoConfig(1.0, 1.0)), split)
        b = train(self._cfg(stage2=StageTwoConfig(1.0, 1.0)), split)
        for (_, x), (_, y) in zip(a.model.params.items(), b.model.params.items()):
            assert x.data.tobytes() == y.data.tobytes()
        assert [r["ce"] for r in a.log] == [r["ce"] for r in b.log]

    def test_intensity_aug_changes_training(self):
        split = toy_split()
        a = train(self._cfg(stage2=StageTwoConfig(0.0, 0.0)), split)
        b = train(self._cfg(stage2=StageTwoConfig(0.0, 0.0), intensity_aug=(0.5, 1.5)), split)
        assert a.model.head_w.data.tobytes() != b.model.head_w.data.tobytes()

    def test_invalid_configs(self):
        with pytest.raises(InvalidArgumentError):
            self._cfg(intensity_aug=(1.2, 1.5)).validate()
        with pytest.raises(InvalidArgumentError):
            self._cfg(mask_variant="pixels").validate()
        with pytest.raises(InvalidArgumentError):
            StageTwoConfig(-1.0, 0.0).validate()
        with pytest.raises(InvalidArgumentError):
            StageTwoConfig(1.0, 1.0, lr2=0.0).validate()

    def test_log_csv(self, tmp_path):
        res = train(self._cfg(), toy_split())
        p = tmp_path / "log.csv"
        write_log_csv(res.log, p)
        lines = p.read_text().splitlines()
        assert lines[0] == "epoch,batch,ce,crr,frr,wall_ms" and len(lines) == 4
