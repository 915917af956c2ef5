import json
import math

import numpy as np
import pytest

from coopdet import tensor as T
from coopdet.enhance import Enhancer
from coopdet.errors import DimensionError, DomainError, NonFiniteError, ParseError
from coopdet.fusion import baseline_fuse
from coopdet.geometry import PointCloud, Pose
from coopdet.nn import Linear, make_rng
from coopdet.runtime import (
    AdamState,
    ModelConfig,
    TrainConfig,
    adam_step,
    bench_attention,
    build_and_forward,
    build_model,
    forward_batch,
    load_checkpoint,
    load_config,
    multistep_lr,
    overfit_losses,
    param_count,
    prepare_scene,
    rows_to_csv,
    save_checkpoint,
    train_toy,
)
from coopdet.runtime.checkpoint import Checkpoint
from coopdet.runtime.micro import end_to_end_gradcheck, micro_config, micro_scene
from coopdet.runtime.model import encode_pillars, fuse_scenes
from coopdet.runtime.train import train_step
from coopdet.enhance import enhance_forward
from coopdet.simulator import Scene
from coopdet.tensor import Tensor


def _outputs(model, scenes):
    with T.precision(np.float64):
        return [o.numpy() for o in forward_batch(model, [prepare_scene(s, model.config) for s in scenes])]


def _one_agent(scene):
    return Scene(scene.seed, 0, [scene.agents[0]], scene.gt)


# ------------------------------------------------------------------ config


class TestConfig:
    def test_dict_round_trip(self):
        cfg = micro_config(m2=False, fusion="avg")
        again = ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg
        assert again.fingerprint() == cfg.fingerprint()

    def test_file_round_trip(self, tmp_path):
        cfg = micro_config()
        train = TrainConfig(epochs=3, milestones=(1, 2))
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"model": cfg.to_dict(), "train": train.to_dict()}))
        m, t, _ = load_config(path)
        assert m == cfg and t == train

    def test_fingerprint_tracks_switches(self):
        assert micro_config().fingerprint() != micro_config(m3=False).fingerprint()

    @pytest.mark.parametrize("bad", [{"fusion": "sum"}, {"widths": (16, 16), "strides": (1,)},
                                     {"se_reduction": 5}, {"max_agents": 5}, {"nms_threshold": 1.5}])
    def test_invalid_model_config(self, bad):
        with pytest.raises(DomainError):
            micro_config(**bad)

    def test_unknown_field(self):
        with pytest.raises(DomainError):
            ModelConfig.from_dict({"widths": [8], "strides": [1], "colour": 3})

    @pytest.mark.parametrize("bad", [{"milestones": (50, 10)}, {"lr": 0.0}, {"gamma": 0.0},
                                     {"precision": "float16"}])
    def test_invalid_train_config(self, bad):
        with pytest.raises(DomainError):
            TrainConfig(**bad)

    def test_shipped_defaults(self):
        m, t, e = load_config()
        assert m.nms_threshold == 0.15
        assert (e.x_range, e.y_range) == ((-100.0, 100.0), (-40.0, 40.0))
        assert (t.lr, t.weight_decay, t.eps, t.batch_size, t.milestones, t.gamma) == \
            (1e-3, 1e-4, 1e-10, 2, (10, 50), 0.1)
        assert m.grid.cell == 0.4 and m.strides == (2, 2, 2) and m.dim == 256
        assert (m.max_points, m.max_pillars_train, m.max_pillars_test) == (32, 64000, 70000)


# ------------------------------------------------------------------- model


class TestModel:
    def test_default_feature_shape(self):
        cfg = ModelConfig()
        assert (cfg.grid.H, cfg.grid.W) == (128, 32)
        assert cfg.feature_shape == (256, 128 // 8, 32 // 8)
        with T.precision(np.float32):
            model = build_model(cfg)
            scene = micro_scene()
            bev = encode_pillars(model, [prepare_scene(scene, cfg)])
            assert bev.shape == (2, cfg.pfn_dim, 128, 32)
            assert model.backbone(bev).shape == (2,) + cfg.feature_shape
        assert len(model.anchors.boxes) == 16 * 4 * 6

    def test_output_shapes(self):
        cfg = micro_config()
        model = build_model(cfg)
        cls, reg, dr = _outputs(model, [micro_scene(0), micro_scene(1)])
        a = 8 * 8 * cfg.anchors.per_location
        assert cls.shape == (2, a) and reg.shape == (2, a, 7) and dr.shape == (2, a, 2)

    def test_batch_composition_does_not_leak(self):
        model = build_model(micro_config())
        alone = _outputs(model, [micro_scene(0)])
        paired = _outputs(model, [micro_scene(0), micro_scene(3)])
        for x, y in zip(alone, paired):
            np.testing.assert_allclose(x[0], y[0], rtol=0, atol=1e-12)

    def test_single_agent_fusers_agree(self):
        scene = _one_agent(micro_scene())
        outs = [_outputs(build_model(micro_config(m1=False, fusion=mode)), [scene]) for mode in ("max", "avg")]
        for x, y in zip(*outs):
            np.testing.assert_array_equal(x, y)

    def test_single_agent_runs_with_attention(self):
        scene = _one_agent(micro_scene())
        with T.precision(np.float64):
            dets = build_and_forward(scene, build_model(micro_config()))
        assert isinstance(dets, list)

    def test_empty_clouds_give_no_detections(self):
        empty = Scene(0, 0, [(Pose(), PointCloud()), (Pose(1.0, 0.0, 0.0, 0.5), PointCloud())], [])
        for cfg in (micro_config(), ModelConfig()):
            with T.precision(np.float32):
                assert build_and_forward(empty, build_model(cfg)) == []

    def test_too_many_agents(self):
        scene = micro_scene()
        crowd = Scene(0, 0, scene.agents * 2, scene.gt)
        with pytest.raises(DomainError):
            prepare_scene(crowd, micro_config())

    def test_m2_off_is_identity(self):
        on, off = build_model(micro_config()), build_model(micro_config(m2=False))
        inputs = [prepare_scene(micro_scene(), on.config)]
        with T.precision(np.float64):
            fused = fuse_scenes(on, on.backbone(encode_pillars(on, inputs)), [2])
            expect = [o.numpy() for o in on.head(fused)]
            got = [o.numpy() for o in forward_batch(off, inputs)]
            enhanced = enhance_forward(fused, on.enhancer).numpy()
        for x, y in zip(expect, got):
            np.testing.assert_array_equal(x, y)
        assert not np.array_equal(enhanced, fused.numpy())

    def test_m1_off_routes_through_baseline(self):
        off = build_model(micro_config(m1=False, fusion="avg"))
        inputs = [prepare_scene(micro_scene(), off.config)]
        with T.precision(np.float64):
            feats = off.backbone(encode_pillars(off, inputs))
            fused = T.stack([baseline_fuse(feats, "avg", 0)], axis=0)
            expect = [o.numpy() for o in off.head(enhance_forward(fused, off.enhancer))]
            got = [o.numpy() for o in forward_batch(off, inputs)]
        for x, y in zip(expect, got):
            np.testing.assert_array_equal(x, y)
        assert off.msa is None and off.fusion is None

    def test_m3_off_weights_are_uniform(self):
        w = micro_config(m3=False).loss_weights()
        assert all(v == 1.0 for table in (w.cls, w.reg, w.dir) for v in table.values())
        assert w.lambdas == micro_config().loss.lambdas

    def test_shared_components_survive_switches(self):
        base = dict(build_model(micro_config()).named_parameters())
        other = dict(build_model(micro_config(m2=False, m3=False)).named_parameters())
        for name, p in other.items():
            np.testing.assert_array_equal(p.data, base[name].data)

    def test_deterministic_forward(self):
        a = _outputs(build_model(micro_config()), [micro_scene()])
        b = _outputs(build_model(micro_config()), [micro_scene()])
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


def test_end_to_end_gradients():
    report = end_to_end_gradcheck()
    assert report.max_rel_error < 1e-4, report.worst()
    groups = {name.split(".")[0] for name in report.by_param()}
    assert groups == {"pfn", "backbone", "msa", "fusion", "enhancer", "head"}


# ------------------------------------------------------------ param counts


class TestParamCount:
    def test_linear(self):
        assert param_count(Linear(4, 8, make_rng(0)))["total"] == 40

    def test_se_block(self):
        se = Enhancer(256, make_rng(0)).se
        assert param_count(se)["total"] == 256 * 16 + 16 + 16 * 256 + 256 == 8464

    def test_model_breakdown(self):
        model = build_model(micro_config())
        counts = param_count(model)
        assert counts["total"] == sum(p.data.size for _, p in model.named_parameters())
        assert sum(counts["modules"].values()) == counts["total"]
        assert "enhancer" not in param_count(build_model(micro_config(m2=False)))["modules"]


# --------------------------------------------------------------- optimizer


def _adam_oracle(p, grads, lr, b1, b2, eps, wd):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * ((m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps) + wd * p)
    return p


class TestAdam:
    def test_zero_gradient_no_decay(self):
        cfg = TrainConfig(weight_decay=0.0)
        p = Tensor(np.array([0.3, -1.2]), requires_grad=True)
        adam_step({"p": p}, {"p": np.zeros(2)}, AdamState(), cfg)
        np.testing.assert_array_equal(p.data, [0.3, -1.2])

    def test_first_step_is_sign_step(self):
        cfg = TrainConfig(weight_decay=0.0)
        p = Tensor(np.zeros(3), requires_grad=True)
        adam_step({"p": p}, {"p": np.array([1.0, -4.0, 0.01])}, AdamState(), cfg)
        np.testing.assert_allclose(p.data, [-1e-3, 1e-3, -1e-3], rtol=1e-6)

    def test_decoupled_decay(self):
        cfg = TrainConfig(weight_decay=0.1)
        p = Tensor(np.array([2.0]), requires_grad=True)
        adam_step({"p": p}, {"p": np.zeros(1)}, AdamState(), cfg)
        assert p.data[0] == pytest.approx(2.0 - 1e-3 * 0.1 * 2.0, abs=1e-15)

    def test_matches_scalar_oracle(self):
        cfg = TrainConfig(lr=0.01, weight_decay=1e-2)
        grads = list(make_rng(5).normal(size=12))
        p = Tensor(np.array([0.7]), requires_grad=True)
        state = AdamState()
        for g in grads:
            adam_step({"p": p}, {"p": np.array([g])}, state, cfg)
        expect = _adam_oracle(0.7, grads, 0.01, *cfg.betas, cfg.eps, 1e-2)
        assert p.data[0] == pytest.approx(expect, rel=1e-12)
        assert state.step == 12

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(DimensionError):
            adam_step({"p": p}, {"p": np.zeros(2)}, AdamState(), TrainConfig())


@pytest.mark.parametrize("epoch,lr", [(0, 1e-3), (9, 1e-3), (10, 1e-4), (49, 1e-4), (50, 1e-5), (79, 1e-5)])
def test_multistep_schedule(epoch, lr):
    assert multistep_lr(epoch, TrainConfig()) == pytest.approx(lr, rel=1e-12)


def test_schedule_rejects_negative_epoch():
    with pytest.raises(ValueError):
        multistep_lr(-1, TrainConfig())


# ---------------------------------------------------------------- training


_TINY_TRAIN = TrainConfig(epochs=2, milestones=(1,), lr=1e-3, batch_size=2, precision="float64")


class TestTraining:
    def test_overfit_strictly_decreases(self):
        losses = overfit_losses(micro_scene(), micro_config(), TrainConfig(augment=False))
        assert len(losses) == 10
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_history_and_schedule(self):
        scenes = [micro_scene(s) for s in range(3)]
        result = train_toy(scenes, micro_config(), _TINY_TRAIN, val_scenes=scenes[:1])
        assert [h["epoch"] for h in result.history] == [0, 1]
        assert [h["lr"] for h in result.history] == pytest.approx([1e-3, 1e-4])
        assert set(result.history[0]["terms"]) == {"pedestrian", "car", "truck"}
        assert "map" in result.history[0]["val"]
        assert result.checkpoint.state.step == 4

    def test_training_is_deterministic(self):
        scenes = [micro_scene(s) for s in range(2)]
        a = train_toy(scenes, micro_config(), _TINY_TRAIN).checkpoint.model
        b = train_toy(scenes, micro_config(), _TINY_TRAIN).checkpoint.model
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_rejects_empty_dataset(self):
        with pytest.raises(ValueError):
            train_toy([], micro_config(), _TINY_TRAIN)

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_non_finite_loss_names_term(self):
        model = build_model(micro_config())
        model.head.reg.bias.data[:] = 1e308
        with pytest.raises(NonFiniteError, match="reg loss"):
            with T.precision(np.float64):
                train_step(model, [prepare_scene(micro_scene(), model.config, train=True)],
                           AdamState(), _TINY_TRAIN, 1e-3)

    def test_overflowing_moments_abort(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        with pytest.raises(NonFiniteError, match="moments for p"):
            adam_step({"p": p}, {"p": np.array([1e200])}, AdamState(), TrainConfig())


# -------------------------------------------------------------- checkpoint


class TestCheckpoint:
    def _trained(self):
        return train_toy([micro_scene(0), micro_scene(1)], micro_config(), _TINY_TRAIN).checkpoint

    def test_round_trip_forward_identical(self, tmp_path):
        ckpt = self._trained()
        save_checkpoint(tmp_path / "a.ckpt", ckpt)
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        assert loaded.epoch == ckpt.epoch and loaded.state.step == ckpt.state.step
        assert loaded.train_config == ckpt.train_config
        for x, y in zip(_outputs(ckpt.model, [micro_scene(4)]), _outputs(loaded.model, [micro_scene(4)])):
            np.testing.assert_array_equal(x, y)
        for name in ckpt.state.m:
            np.testing.assert_array_equal(ckpt.state.m[name], loaded.state.m[name])
            np.testing.assert_array_equal(ckpt.state.v[name], loaded.state.v[name])

    def test_bytes_are_deterministic(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", self._trained())
        save_checkpoint(tmp_path / "b.ckpt", self._trained())
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_resave_is_identical(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", self._trained())
        save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt"))
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_float32_precision_survives(self, tmp_path):
        with T.precision(np.float32):
            model = build_model(micro_config())
        save_checkpoint(tmp_path / "a.ckpt", Checkpoint(model, AdamState(), 0, TrainConfig()))
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        assert all(p.dtype == np.float32 for _, p in loaded.model.named_parameters())

    def test_corrupt_file(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a zip")
        with pytest.raises(ParseError):
            load_checkpoint(bad)


# ------------------------------------------------------------------- bench


def test_bench_mac_counts_and_csv():
    rows = bench_attention((8, 16), window=4, dim=16, repeats=1)
    by = {(r["size"], r["mode"]): r["macs"] for r in rows}
    for s in (8, 16):
        assert by[(s, "windowed")] == 16 * s * s * 16
        assert by[(s, "global")] == (s * s) ** 2 * 16
    assert by[(16, "windowed")] == 4 * by[(8, "windowed")]
    assert by[(16, "global")] == 16 * by[(8, "global")]
    lines = rows_to_csv(rows).splitlines()
    assert lines[0] == "size,mode,macs,median_ms" and len(lines) == 5
