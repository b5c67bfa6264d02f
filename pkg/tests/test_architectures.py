import numpy as np
import pytest

from emmaseg.architectures.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from emmaseg.architectures.network import forward, init_network
from emmaseg.architectures.spec import (
    SPEC_IDS,
    Layer,
    NetworkSpec,
    Pathway,
    build_deepmedic,
    build_fcn,
    build_spec,
    build_unet,
    infer_shapes,
    parameter_count,
    receptive_field,
)
from emmaseg.errors import (
    CheckpointError,
    ChecksumError,
    DimensionError,
    FormatError,
    ParameterError,
    TruncatedError,
)
from emmaseg.validation import check_probability_map


def small_forward_input(spec, rng, output=None):
    out = output or spec.granularity * (2 if spec.family != "deepmedic" else 1)
    return {name: rng.normal(size=(4,) + ext) for name, ext in spec.input_extents(out).items()}


@pytest.mark.parametrize("spec_id", SPEC_IDS)
def test_every_builder_validates(spec_id):
    spec = build_spec(spec_id)
    shapes = infer_shapes(spec, spec.train_input_extents)
    channels, ext = shapes[spec.layers[-1].name]
    assert channels == 4
    assert ext == (spec.train_output,) * 3


def test_deepmedic_base_pathway_arithmetic():
    spec = build_deepmedic("base")
    assert spec.train_input_extents == {"normal": (25,) * 3, "low": (19,) * 3}
    shapes = infer_shapes(spec, spec.train_input_extents)
    assert shapes["normal.res8"][1] == (9, 9, 9)
    assert shapes["low.res8"][1] == (3, 3, 3)
    assert shapes["low.up"][1] == (9, 9, 9)


def test_deepmedic_wide_pathway_arithmetic():
    spec = build_deepmedic("wide")
    assert spec.train_input_extents == {"normal": (34,) * 3, "low": (22,) * 3}
    shapes = infer_shapes(spec, spec.train_input_extents)
    assert shapes["normal.res8"][1] == (18, 18, 18)
    assert shapes["low.up"][1] == (18, 18, 18)


def test_deepmedic_widths_and_head():
    base, wide = build_deepmedic("base"), build_deepmedic("wide")
    widths = [base.layer(f"normal.conv{i}").channels for i in range(1, 9)]
    assert widths == [30, 30, 40, 40, 40, 40, 50, 50]
    assert [wide.layer(f"low.conv{i}").channels for i in range(1, 9)] == [2 * w for w in widths]
    assert base.layer("fc1").channels == 150 and base.layer("fc1").kernel == 1
    assert base.layer("classifier").channels == 4


def test_wide_conv_parameters_quadruple():
    base, wide = init_network(build_deepmedic("base")), init_network(build_deepmedic("wide"))
    for name in ("normal.conv2.weight", "low.conv5.weight", "fc2.weight"):
        assert wide.params[name].size == 4 * base.params[name].size


def test_fcn_concat_widths():
    vgg = infer_shapes(build_fcn("vgg"), {"normal": (64,) * 3})
    assert vgg["merge"] == (496, (64, 64, 64))
    res = build_fcn("residual")
    assert infer_shapes(res, res.train_input_extents)["merge"][0] == 16 + 32 + 64 + 512 + 256


def test_fcn_residual_shallow_drops_deepest_scale():
    spec = build_fcn("residual_shallow")
    assert not any(l.name.startswith("s5") for l in spec.layers)
    assert infer_shapes(spec, spec.train_input_extents)["merge"][0] == 16 + 32 + 64 + 512


@pytest.mark.parametrize("spec_id", ["fcn/vgg", "fcn/residual", "fcn/residual_shallow",
                                     "unet/sum_skip", "unet/concat_skip"])
def test_same_padded_families_preserve_extents(spec_id):
    spec = build_spec(spec_id)
    assert infer_shapes(spec, {"normal": (64, 64, 64)})[spec.layers[-1].name] == (4, (64, 64, 64))


def test_unet_dropout_layers():
    for variant in ("sum_skip", "concat_skip"):
        drops = [l for l in build_unet(variant).layers if l.op == "dropout"]
        assert [l.name for l in drops] == ["bottom.dropout", "dec3.dropout", "dec2.dropout"]
        assert all(l.rate == 0.5 for l in drops)


def test_unet_skip_topology():
    s = infer_shapes(build_unet("sum_skip"), {"normal": (64,) * 3})
    c = infer_shapes(build_unet("concat_skip"), {"normal": (64,) * 3})
    assert s["dec1.merge"][0] == 16
    assert c["dec1.merge"][0] == 32
    assert build_unet("concat_skip").layer("enc2.down").stride == 2


@pytest.mark.parametrize("spec_id", SPEC_IDS)
def test_parameter_count_formula_matches_instance(spec_id):
    spec = build_spec(spec_id)
    assert init_network(spec).n_parameters() == parameter_count(spec)


def test_residual_adds_get_projection_when_widths_differ():
    spec = build_fcn("residual")
    shapes = infer_shapes(spec, spec.train_input_extents)
    for layer in spec.layers:
        if layer.op == "add":
            assert len({shapes[n][0] for n in layer.inputs}) == 1
    assert "s4.block0.proj" in {l.name for l in spec.layers}
    assert "s4.block1.proj" not in {l.name for l in spec.layers}


def test_receptive_fields():
    dm = receptive_field(build_deepmedic("base"))
    assert dm["normal"] == (17, 17, 17)
    assert dm["low"] == (51, 51, 51)
    single = NetworkSpec("toy", "one", 2, (
        Layer("normal", "input", channels=4),
        Layer("c", "conv", ("normal",), channels=2, kernel=3, padding="zero_same"),
        Layer("p", "softmax", ("c",)),
    ), (Pathway("normal"),), train_output=4, granularity=1)
    assert receptive_field(single)["normal"] == (3, 3, 3)
    unet = receptive_field(build_unet("sum_skip"))["normal"][0]
    assert unet >= 8 * 3


def test_builder_errors():
    with pytest.raises(ParameterError):
        build_spec("deepmedic/huge")
    with pytest.raises(ParameterError):
        build_unet("sum_skip", n_classes=1)
    with pytest.raises(ParameterError):
        build_fcn("vgg", width_scale=0)


@pytest.mark.parametrize("spec_id", SPEC_IDS)
def test_forward_is_simplex_and_deterministic(spec_id):
    spec = build_spec(spec_id, width_scale=0.125)
    inst = init_network(spec, 0, np.float64)
    rng = np.random.default_rng(0)
    x = small_forward_input(spec, rng)
    a = forward(inst, x).data
    b = forward(inst, x).data
    assert np.array_equal(a, b)
    assert a.shape[0] == 4
    check_probability_map(a, atol=1e-9)


def test_deepmedic_forward_output_grid():
    spec = build_deepmedic("base", width_scale=0.1)
    inst = init_network(spec)
    rng = np.random.default_rng(1)
    out = forward(inst, small_forward_input(spec, rng, output=9))
    assert out.shape == (4, 9, 9, 9)


def test_unet_forward_full_size():
    spec = build_unet("sum_skip", width_scale=0.125)
    out = forward(init_network(spec), np.zeros((4, 64, 64, 64), np.float32))
    assert out.shape == (4, 64, 64, 64)
    check_probability_map(out.data)


def test_misaligned_pathways_name_both():
    spec = build_deepmedic("base", width_scale=0.1)
    inst = init_network(spec)
    with pytest.raises(DimensionError, match="normal.*low"):
        forward(inst, {"normal": np.zeros((4, 25, 25, 25)), "low": np.zeros((4, 20, 20, 20))})


def test_dropout_only_in_training():
    spec = build_unet("sum_skip", width_scale=0.25)
    inst = init_network(spec, 3, np.float64)
    x = np.random.default_rng(2).normal(size=(2, 4, 16, 16, 16))
    train_a = forward(inst, x, training=True, rng=np.random.default_rng(0)).data
    train_b = forward(inst, x, training=True, rng=np.random.default_rng(1)).data
    assert not np.array_equal(train_a, train_b)
    assert np.array_equal(forward(inst, x).data, forward(inst, x).data)


class TestCheckpoint:
    @pytest.fixture
    def saved(self, tmp_path):
        inst = init_network(build_unet("sum_skip", width_scale=0.125), 7)
        inst.meta = {"seed": 7, "loss": {"kind": "soft_dice"}}
        path = tmp_path / "net.ckpt"
        save_checkpoint(inst, path)
        return inst, path

    def test_round_trip(self, saved):
        inst, path = saved
        back = load_checkpoint(path)
        assert back.spec == inst.spec
        assert back.meta == inst.meta
        assert set(back.params) == set(inst.params)
        for k in inst.params:
            assert np.array_equal(back.params[k].data, inst.params[k].data)
        for k in inst.buffers:
            assert np.array_equal(back.buffers[k], inst.buffers[k])
        assert path.read_bytes().startswith(MAGIC)

    def test_save_is_byte_stable(self, saved, tmp_path):
        inst, path = saved
        save_checkpoint(inst, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_truncated(self, saved):
        _, path = saved
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(TruncatedError):
            load_checkpoint(path)

    def test_checksum(self, saved):
        _, path = saved
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_bad_magic(self, saved):
        _, path = saved
        path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_shape_mismatch(self, saved, tmp_path):
        inst, _ = saved
        name = "enc1.conv1.weight"
        inst.params[name].data = inst.params[name].data[:, :2]
        path = tmp_path / "bad.ckpt"
        save_checkpoint(inst, path)
        with pytest.raises(CheckpointError, match=name):
            load_checkpoint(path)
