import dataclasses

import numpy as np
import pytest

from mvecho import models as M
from mvecho.engine import Tensor
from mvecho.errors import CheckpointError, ConfigError, DataError, DimensionError
from mvecho.preprocess import MultiViewStack

TABLE2 = [
    ((128, 128, 5), "conv", 2, 32, (3, 3, 5)),
    ((64, 64, 32), "dw", 1, 32, (3, 3)),
    ((64, 64, 32), "pw", 1, 64, (1, 1, 32)),
    ((64, 64, 64), "dw", 2, 64, (3, 3)),
    ((32, 32, 64), "pw", 1, 128, (1, 1, 64)),
    ((32, 32, 128), "dw", 2, 128, (3, 3)),
    ((16, 16, 128), "pw", 1, 128, (1, 1, 128)),
    ((16, 16, 128), "dw", 2, 128, (3, 3)),
    ((8, 8, 128), "pw", 1, 128, (1, 1, 128)),
    ((8, 8, 128), "flatten", None, None, None),
    ((8192,), "fc1", None, 1024, None),
    ((1024,), "fc2", None, 128, None),
]


def small_cfg(**kw):
    base = dict(input_size=16, conv_layers=3, width_multiplier=0.25, fc1_units=16, fc2_units=8)
    base.update(kw)
    return M.ArchitectureConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        M.ArchitectureConfig(conv_layers=9)
    with pytest.raises(ConfigError):
        M.ArchitectureConfig(width_multiplier=0.0)
    with pytest.raises(ConfigError):
        M.ArchitectureConfig(input_size=100)
    with pytest.raises(ConfigError):
        M.ArchitectureConfig(width_multiplier=1.5)
    with pytest.raises(ConfigError):
        M.ArchitectureConfig.preset("alexnet")


def test_default_shape_ledger_multi_channel():
    params = M.build_model(M.ArchitectureConfig())
    rows = M.shape_ledger(params)
    assert [r[:5] for r in rows[: len(TABLE2)]] == TABLE2
    assert rows[-2][:4] == ((128,), "head", None, 1)


def test_fc_dimensions_from_config():
    mc = M.ArchitectureConfig()
    mb = M.ArchitectureConfig.preset("mb-dsc")
    assert (mc.fc1_in, mc.fc1_out, mc.fc2_units) == (8192, 1024, 128)
    assert (mb.fc1_in, mb.fc1_out) == (40960, 5120)


def test_fifth_width_kernel_counts():
    cfg = M.ArchitectureConfig.preset("mb-dsc-fifth")
    assert [s.output_channels for s in M.encoder_specs(cfg)] == [7, 7, 14, 14, 28, 28, 28, 28, 28]
    assert cfg.fc1_out == 1024


@pytest.mark.parametrize("layers,last_side", [(2, 64), (3, 32), (4, 16), (5, 8), (6, 8), (8, 8)])
def test_conv_layer_ablation_extents(layers, last_side):
    cfg = M.ArchitectureConfig(conv_layers=layers)
    assert cfg.feature_shape[:2] == (last_side, last_side)
    assert len(cfg.stage_plan) == layers


def test_first_layer_params():
    counts = M.count_params(M.ArchitectureConfig())
    assert counts.by_name("stage1.conv").total == 3 * 3 * 5 * 32 + 32 == 1472


def test_multi_branch_stage_ratio_is_five():
    mc = M.count_params(M.ArchitectureConfig()).stage_totals()
    mb = M.count_params(M.ArchitectureConfig.preset("mb-dsc")).stage_totals()
    for stage in mc:
        if stage == "stage1":
            assert mb[stage] == 5 * (3 * 3 * 1 * 32 + 32)
            continue
        assert mb[stage] == 5 * mc[stage]


def test_dsc_vs_standard_ratio_closed_form():
    dsc = M.count_params(M.ArchitectureConfig()).stage_totals(weights_only=True)
    std = M.count_params(M.ArchitectureConfig(conv_kind="standard")).stage_totals(weights_only=True)
    dflops = M.count_flops(M.ArchitectureConfig())
    sflops = M.count_flops(M.ArchitectureConfig(conv_kind="standard"))
    for idx, spec in enumerate(M.encoder_specs(M.ArchitectureConfig(conv_kind="standard"))[1:], start=2):
        stage = f"stage{idx}"
        expected = 1.0 / spec.output_channels + 1.0 / 9
        assert dsc[stage] / std[stage] == pytest.approx(expected, rel=1e-15)
        dsc_macs = dflops[f"{stage}.dw"] + dflops[f"{stage}.pw"]
        # the dw layer carries the stride in both variants so areas agree
        assert dsc_macs / sflops[f"{stage}.conv"] == pytest.approx(expected, rel=1e-15)


def test_pointwise_macs_definition():
    flops = M.count_flops(M.ArchitectureConfig())
    assert flops["stage2.pw"] == 64 * 64 * 32 * 64


def test_stride_two_quarter_macs():
    a = M.LayerSpec("x", "depthwise_conv", (3, 3), 1, 16, 16, (32, 32))
    b = dataclasses.replace(a, stride=2)
    assert b.macs * 4 == a.macs


@pytest.mark.parametrize("arch", ["mc-dsc", "mb-dsc-fifth", "mc-standard"])
def test_counter_matches_tensor_walk(arch):
    params = M.build_model(M.ArchitectureConfig.preset(arch, input_size=32))
    walk = sum(int(np.prod(t.shape)) for t in params.tensors.values())
    assert M.count_params(params).total == walk


def test_layer_spec_invariants():
    with pytest.raises(ConfigError):
        M.LayerSpec("d", "depthwise_conv", (3, 3), 1, 4, 8)
    with pytest.raises(ConfigError):
        M.LayerSpec("p", "pointwise_conv", (3, 3), 1, 4, 8)


def zero_head(params):
    params.tensors["head.w"].data[...] = 0
    params.tensors["head.b"].data[...] = 0
    return params


@pytest.mark.parametrize("topology", ["multi_channel", "multi_branch"])
def test_zero_head_binary_is_half(topology):
    params = zero_head(M.build_model(small_cfg(topology=topology), seed=1, dtype=np.float64))
    x = np.random.default_rng(0).random((16, 16, 5))
    pred = M.forward(params, MultiViewStack(x))
    assert pred.probabilities[1] == 0.5
    assert pred.label == 1


def test_zero_head_three_class_is_uniform():
    params = zero_head(M.build_model(small_cfg(head="three_class"), dtype=np.float64))
    preds = M.forward(params, np.random.default_rng(0).random((3, 16, 16, 5)))
    for p in preds:
        np.testing.assert_array_equal(p.probabilities, np.full(3, 1.0 / 3.0))
        assert abs(p.probabilities.sum() - 1.0) <= 1e-9


def test_forward_extent_mismatch():
    params = M.build_model(small_cfg())
    with pytest.raises(DimensionError):
        M.forward(params, np.zeros((32, 32, 5)))


def test_forward_is_deterministic():
    params = M.build_model(small_cfg(), seed=3, dtype=np.float64)
    x = np.random.default_rng(1).random((4, 16, 16, 5))
    a = [p.logits for p in M.forward(params, x)]
    b = [p.logits for p in M.forward(params, x)]
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("view", range(5))
def test_branch_isolation_features(view):
    params = M.build_model(small_cfg(topology="multi_branch"), seed=view, dtype=np.float64)
    x = np.random.default_rng(view).random((2, 16, 16, 5))
    y = x.copy()
    y[..., view] = 0.0
    fa, fb = [], []
    M.features(params, x, branch_features=fa)
    M.features(params, y, branch_features=fb)
    for v in range(5):
        if v == view:
            assert not np.array_equal(fa[v].data, fb[v].data)
        else:
            np.testing.assert_array_equal(fa[v].data, fb[v].data)


@pytest.mark.parametrize("view", range(5))
def test_branch_isolation_gradients(view):
    params = M.build_model(small_cfg(topology="multi_branch"), seed=view, dtype=np.float64)
    x = np.random.default_rng(view).random((4, 16, 16, 5))
    x[..., view] = 0.0
    loss = M.loss_for_head(M.logits(params, x), np.array([0, 1, 0, 1]), "binary")
    loss.backward()
    for name, t in params.items():
        if name.startswith(f"branch{view}."):
            assert t.grad is None or not np.any(t.grad), name
    assert np.any(params[f"branch{(view + 1) % 5}.stage1.conv.w"].grad)


def test_head_swap():
    params = M.build_model(small_cfg(fc2_units=128), seed=2, dtype=np.float64)
    swapped = M.swap_head_binary_to_three(params, seed=5)
    delta = M.count_params(swapped).total - M.count_params(params).total
    assert delta == (128 * 3 + 3) - (128 * 1 + 1)
    for name, t in params.items():
        if not name.startswith("head."):
            np.testing.assert_array_equal(t.data, swapped[name].data)
            assert t.data is not swapped[name].data
    assert swapped.fingerprint != params.fingerprint
    x = np.random.default_rng(0).random((3, 16, 16, 5))
    np.testing.assert_array_equal(M.features(params, x).data, M.features(swapped, x).data)
    with pytest.raises(ConfigError):
        M.swap_head_binary_to_three(swapped)


def toy_dataset(n, size=16, seed=0, shuffle_labels=False):
    """Defect = bright square in channel 2 on positives."""
    rng = np.random.default_rng(seed)
    x = rng.random((n, size, size, 5)) * 0.3
    y = rng.integers(0, 2, n)
    for i in np.flatnonzero(y):
        r, c = rng.integers(2, size - 6, 2)
        x[i, r : r + 4, c : c + 4, 2] = 1.0
    if shuffle_labels:
        y = rng.permutation(y)
    return x, y


@pytest.mark.slow
def test_learnability_toy_set():
    x, y = toy_dataset(96)
    params = M.build_model(small_cfg(fc1_units=32, fc2_units=16, width_multiplier=0.5), seed=0)
    report = M.train_keyframe(
        params, M.KeyframeDataset(x, y), M.Schedule(epochs=50, batch_size=16, target_train_accuracy=0.99)
    )
    assert len(report.rows) <= 50
    assert M.accuracy(params, x, y) >= 0.99


@pytest.mark.parametrize("seed", range(5))
def test_losses_finite(seed):
    x, y = toy_dataset(32, seed=seed)
    params = M.build_model(small_cfg(), seed=seed)
    report = M.train_keyframe(params, M.KeyframeDataset(x, y), M.Schedule(epochs=3, batch_size=8, seed=seed))
    assert np.all(np.isfinite(report.step_losses))


@pytest.mark.slow
def test_shuffled_labels_do_not_generalise():
    x, y = toy_dataset(400, seed=4, shuffle_labels=True)
    params = M.build_model(small_cfg(fc1_units=32), seed=0)
    ds = M.KeyframeDataset(x[:200], y[:200], x[200:], y[200:])
    report = M.train_keyframe(params, ds, M.Schedule(epochs=10, batch_size=16, patience=100))
    assert all(0.4 <= acc <= 0.6 for _, _, acc in report.rows)


def test_training_is_bitwise_deterministic():
    x, y = toy_dataset(24)
    runs = []
    for _ in range(2):
        params = M.build_model(small_cfg(), seed=7, dtype=np.float64)
        runs.append(M.train_keyframe(params, M.KeyframeDataset(x, y), M.Schedule(epochs=2, batch_size=8)).step_losses)
    assert runs[0] == runs[1]


def test_training_errors():
    params = M.build_model(small_cfg())
    with pytest.raises(DataError):
        M.train_keyframe(params, M.KeyframeDataset(np.zeros((0, 16, 16, 5)), np.zeros(0)))
    with pytest.raises(DataError):
        M.train_keyframe(params, M.KeyframeDataset(np.zeros((2, 16, 16, 5)), np.array([0, 2])))


def test_head_only_freezes_backbone():
    x, y = toy_dataset(16)
    params = M.build_model(small_cfg(), seed=1)
    before = params.copy()
    M.train_keyframe(params, M.KeyframeDataset(x, y), M.Schedule(epochs=1, batch_size=8, head_only=True))
    for name, t in params.items():
        changed = not np.array_equal(t.data, before[name].data)
        assert changed == name.startswith("head."), name


def test_report_csv(tmp_path):
    x, y = toy_dataset(16)
    params = M.build_model(small_cfg())
    report = M.train_keyframe(params, M.KeyframeDataset(x, y, x, y), M.Schedule(epochs=2, batch_size=8))
    report.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_acc"
    assert len(lines) == 3


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip(tmp_path, dtype):
    params = M.build_model(small_cfg(batch_norm=True), seed=4, dtype=dtype)
    M.save_model(tmp_path / "m.ckpt", params)
    loaded, opt, _ = M.load_model(tmp_path / "m.ckpt", expected=params.config)
    assert opt is None
    assert loaded.buffers == params.buffers
    for name, t in params.items():
        np.testing.assert_array_equal(loaded[name].data, t.data)
        assert loaded[name].dtype == dtype


def test_checkpoint_fingerprint_mismatch(tmp_path):
    params = M.build_model(small_cfg())
    M.save_model(tmp_path / "m.ckpt", params)
    with pytest.raises(CheckpointError):
        M.load_model(tmp_path / "m.ckpt", expected=small_cfg(fc1_units=17))
    migrated, _, _ = M.load_model(tmp_path / "m.ckpt", expected=small_cfg(head="three_class"), migrate_head=True)
    assert migrated.config.head == "three_class"
    with pytest.raises(CheckpointError):
        M.load_model(tmp_path / "m.ckpt", expected=small_cfg(head="three_class"))


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError):
        M.load_model(path)
    params = M.build_model(small_cfg())
    M.save_model(tmp_path / "m.ckpt", params)
    raw = (tmp_path / "m.ckpt").read_bytes()
    path.write_bytes(raw[:-64])
    with pytest.raises(CheckpointError):
        M.load_model(path)


def test_resume_keeps_step_counter(tmp_path):
    x, y = toy_dataset(16)
    params = M.build_model(small_cfg(), seed=0)
    sched = M.Schedule(epochs=1, batch_size=8, checkpoint_dir=str(tmp_path))
    M.train_keyframe(params, M.KeyframeDataset(x, y), sched)
    loaded, opt, meta = M.load_model(tmp_path / "last.ckpt")
    assert opt.step_count == 2 and meta["epoch"] == 0
    report = M.train_keyframe(loaded, M.KeyframeDataset(x, y), sched, optimizer_state=opt, start_epoch=1)
    assert report.optimizer_state.step_count == 4
    assert report.rows[0][0] == 1


def test_prediction_thresholds():
    probs = M.probabilities_from_logits(np.array([[0.0], [-1e-9], [3.0]]), "binary")
    assert list(M.labels_from_probabilities(probs, "binary")) == [1, 0, 1]
    assert np.all((probs >= 0) & (probs <= 1))


def test_tensor_input_accepted():
    params = M.build_model(small_cfg(), dtype=np.float64)
    x = np.random.default_rng(0).random((2, 16, 16, 5))
    np.testing.assert_array_equal(M.logits(params, Tensor(x)).data, M.logits(params, x).data)
