import json
import struct

import numpy as np
import pytest
from conftest import SMALL

import emmaseg.training as training
from emmaseg.cli import main
from emmaseg.config import RunConfig
from emmaseg.errors import (
    ChecksumError,
    ConfigError,
    FormatError,
    NonFiniteError,
    ParameterError,
    TruncatedError,
)
from emmaseg.metrics import merge_regions
from emmaseg.phantom import make_phantom, phantom_generate
from emmaseg.preprocessing import brain_mask
from emmaseg.training import train_network
from emmaseg.volume_io import (
    MAGIC,
    VolumeContainer,
    decode_volume,
    encode_volume,
    read_case,
    read_volume,
    write_case,
    write_volume,
)

FACES = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def neighbour_labels(labels, value):
    """Labels found face-adjacent to any voxel holding ``value``."""
    padded = np.pad(labels, 1, constant_values=255)
    idx = np.argwhere(labels == value) + 1
    found = set()
    for off in FACES:
        found |= set(np.unique(padded[tuple((idx + off).T)]).tolist())
    return found


def small_config(tmp_path, **over):
    doc = {
        "seed": 5,
        "architecture": "unet/sum_skip",
        "width_scale": 0.125,
        "iterations": 4,
        "batch_size": 1,
        "checkpoint_every": 2,
        "sampling": {"patch_output": 16},
        "data": {"phantoms": {"seed": 1, "count": 2, "extents": list(SMALL)}},
        "output": {"checkpoint": "net.ckpt", "log": "train.log"},
    }
    doc.update(over)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return path


class TestVolumeContainer:
    @pytest.fixture
    def vol(self):
        data = np.random.default_rng(0).normal(size=(2, 3, 4, 5)).astype(np.float32)
        return VolumeContainer(data, (1.0, 0.5, 2.0), ("a", "b"))

    def test_round_trip_bit_exact(self, vol, tmp_path):
        write_volume(tmp_path / "v.emv", vol)
        back = read_volume(tmp_path / "v.emv")
        assert back.data.dtype == vol.data.dtype
        assert back.data.tobytes() == vol.data.tobytes()
        assert back.spacing == vol.spacing and back.channel_names == vol.channel_names
        assert encode_volume(back) == (tmp_path / "v.emv").read_bytes()

    def test_header_layout(self, vol):
        data = encode_volume(vol)
        assert data[:8] == MAGIC
        version, C, D, H, W = struct.unpack("<II3Q", data[8:40])
        assert (version, C, D, H, W) == (1, 2, 3, 4, 5)
        assert struct.unpack("<3d", data[40:64]) == (1.0, 0.5, 2.0)

    def test_flipped_payload_byte(self, vol):
        data = bytearray(encode_volume(vol))
        data[-20] ^= 0x10
        with pytest.raises(ChecksumError):
            decode_volume(bytes(data))

    def test_wrong_magic_is_format_not_checksum(self, vol):
        data = b"EMMAVOL2" + encode_volume(vol)[8:]
        with pytest.raises(FormatError) as info:
            decode_volume(data)
        assert not isinstance(info.value, ChecksumError)

    def test_truncated(self, vol):
        with pytest.raises(TruncatedError):
            decode_volume(encode_volume(vol)[:-30])

    def test_case_round_trip(self, phantom, tmp_path):
        write_case(tmp_path / "p7.emv", phantom)
        back = read_case(tmp_path / "p7.emv")
        assert back.case_id == "p7"
        assert np.array_equal(back.images, phantom.images)
        assert np.array_equal(back.labels, phantom.labels)


class TestPhantom:
    def test_deterministic(self):
        a, b = make_phantom(9, 2, SMALL), make_phantom(9, 2, SMALL)
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.images, make_phantom(9, 3, SMALL).images)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_nested_geometry(self, seed):
        labels = make_phantom(seed, 0, SMALL).labels
        assert set(np.unique(labels).tolist()) == {0, 1, 2, 4}
        assert neighbour_labels(labels, 1) <= {1, 4}
        assert neighbour_labels(labels, 4) <= {1, 2, 4}
        assert 1 not in neighbour_labels(labels, 2)
        r = merge_regions(labels)
        assert np.all(r.enhancing <= r.core) and np.all(r.core <= r.whole)

    def test_background_is_zero_and_tumour_inside_head(self, phantom):
        mask = brain_mask(phantom)
        assert np.all(phantom.images[:, ~mask] == 0)
        assert np.all(mask[phantom.labels > 0])

    def test_bias_field_is_the_only_difference(self):
        a, b = make_phantom(4, 1, SMALL), make_phantom(4, 1, SMALL, bias_field=True)
        mask = brain_mask(a)
        ratio = b.images[:, mask] / a.images[:, mask]
        np.testing.assert_allclose(ratio, np.broadcast_to(ratio[:1], ratio.shape), rtol=1e-5)

    def test_too_small(self):
        with pytest.raises(ParameterError):
            make_phantom(0, 0, (32, 48, 48))
        with pytest.raises(ParameterError):
            phantom_generate(0, 0, SMALL)


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="learning_rate"):
            RunConfig.load(small_config(tmp_path, learning_rate=0.1))

    def test_unknown_nested_key(self, tmp_path):
        with pytest.raises(ConfigError, match="sampling"):
            RunConfig.load(small_config(tmp_path, sampling={"patch": 16}))

    def test_unknown_hyperparameter(self, tmp_path):
        with pytest.raises(ConfigError, match="momentum"):
            RunConfig.load(small_config(tmp_path, optimizer={"algorithm": "adam",
                                                             "hyperparameters": {"momentum": 0.9}}))

    def test_missing_and_malformed(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "absent.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "bad.json")

    def test_defaults_and_paths(self, tmp_path):
        cfg = RunConfig.load(small_config(tmp_path))
        assert cfg.checkpoint_path == tmp_path / "net.ckpt"
        assert cfg.optimizer == ("adam", {})
        assert cfg.loss.kind == "cross_entropy"
        assert cfg.normalization.version == "v1_zscore"


class TestTraining:
    def test_loss_decreases(self):
        cases = phantom_generate(8, 8, SMALL)
        cfg = RunConfig.from_dict({
            "seed": 0, "architecture": "unet/sum_skip", "width_scale": 0.25, "iterations": 200,
            "optimizer": {"algorithm": "adam", "hyperparameters": {"lr": 0.003}},
            "sampling": {"patch_output": 16}, "data": {"cases": ["unused"]},
            "output": {"checkpoint": "unused"},
        })
        losses = train_network(cfg, cases, save=False).losses
        assert len(losses) == 200
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_bit_identical_checkpoints(self, tmp_path):
        for name in ("a", "b"):
            (tmp_path / name).mkdir()
            assert main(["train", str(small_config(tmp_path / name))]) == 0
        a, b = (tmp_path / "a" / "net.ckpt").read_bytes(), (tmp_path / "b" / "net.ckpt").read_bytes()
        assert a == b
        log = [json.loads(l) for l in (tmp_path / "a" / "train.log").read_text().splitlines()]
        assert log[0]["iteration"] == 1 and log[-1]["iteration"] == 4

    def test_nan_loss_keeps_last_checkpoint(self, tmp_path, monkeypatch):
        real = training.forward
        calls = {"n": 0}

        def poisoned(*args, **kw):
            calls["n"] += 1
            out = real(*args, **kw)
            return out * np.nan if calls["n"] == 3 else out

        monkeypatch.setattr(training, "forward", poisoned)
        cfg = RunConfig.load(small_config(tmp_path))
        with pytest.raises(NonFiniteError, match="net.ckpt"):
            train_network(cfg)
        assert (tmp_path / "net.ckpt").is_file()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Phantoms plus one trained checkpoint, produced through the command line."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["--seed", "3", "phantom", "--count", "2", "--extents", "48", "48", "48",
                 "--out", str(root / "cases")]) == 0
    assert main(["train", str(small_config(root))]) == 0
    return root


class TestCommandLine:
    def test_phantom_files(self, workspace):
        files = sorted((workspace / "cases").iterdir())
        assert [f.name for f in files] == ["phantom_3_000.emv", "phantom_3_001.emv"]

    def test_normalize(self, workspace, tmp_path):
        cases = [str(p) for p in sorted((workspace / "cases").iterdir())]
        assert main(["normalize", *cases, "--version", "v3_bfc_pwl_zscore", "--bias-correction",
                     "none", "--out-dir", str(tmp_path)]) == 0
        spec = json.loads((tmp_path / "normalization.json").read_text())
        assert spec["version"] == "v3_bfc_pwl_zscore" and len(spec["landmarks"]) == 4
        out = read_case(tmp_path / "phantom_3_000.emv")
        mask = out.images.any(axis=0)
        assert abs(out.images[0][mask].mean()) < 1e-5

    def test_single_member_ensemble_equals_predict(self, workspace, tmp_path):
        case = workspace / "cases" / "phantom_3_000.emv"
        ckpt = workspace / "net.ckpt"
        (tmp_path / "m.json").write_text(json.dumps([{
            "checkpoint": str(ckpt), "spec_id": "unet/sum_skip",
            "normalization": {"version": "v1_zscore"}}]))
        assert main(["predict", str(ckpt), str(case), str(tmp_path / "p.emv"),
                     "--labels-out", str(tmp_path / "pl.emv")]) == 0
        assert main(["ensemble", str(tmp_path / "m.json"), str(case), str(tmp_path / "e.emv"),
                     "--labels-out", str(tmp_path / "el.emv")]) == 0
        assert (tmp_path / "p.emv").read_bytes() == (tmp_path / "e.emv").read_bytes()
        assert (tmp_path / "pl.emv").read_bytes() == (tmp_path / "el.emv").read_bytes()
        probs = read_volume(tmp_path / "p.emv")
        assert probs.channel_names == ("p0", "p1", "p2", "p4")

    def test_evaluate_identical(self, workspace, tmp_path, capsys):
        case = str(workspace / "cases" / "phantom_3_001.emv")
        assert main(["evaluate", case, case, "--out", str(tmp_path / "r.json")]) == 0
        report = json.loads((tmp_path / "r.json").read_text())
        for score in report["regions"].values():
            assert score["dsc"] == 1.0 and score["hd95"] == 0.0
        assert "Hausdorff95" in capsys.readouterr().out

    def test_gradcheck_and_toy(self, tmp_path, capsys):
        assert main(["gradcheck", "--scope", "soft_iou", "--instances", "3"]) == 0
        assert "3/3 checks passed" in capsys.readouterr().out
        assert main(["--seed", "1", "toy-demo", "--out", str(tmp_path / "toy.json")]) == 0
        assert json.loads((tmp_path / "toy.json").read_text())["between_centers"]

    @pytest.mark.parametrize("argv, code", [
        (["train", "/nonexistent/run.json"], "config"),
        (["gradcheck", "--scope", "nothing"], "config"),
    ])
    def test_error_lines(self, argv, code, capsys):
        assert main(argv) == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith(f"emma: error[{code}]: ")

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["frobnicate"])
        assert info.value.code == 2
        assert capsys.readouterr().err.startswith("emma: error[usage]: ")

    def test_bad_magic_exit_status(self, tmp_path, capsys):
        (tmp_path / "x.emv").write_bytes(b"GARBAGE!" + bytes(64))
        assert main(["evaluate", str(tmp_path / "x.emv"), str(tmp_path / "x.emv")]) == 6
        assert capsys.readouterr().err.startswith("emma: error[format]: ")

    def test_missing_input_file(self, tmp_path, capsys):
        assert main(["evaluate", str(tmp_path / "a.emv"), str(tmp_path / "b.emv")]) == 10
        assert capsys.readouterr().err.startswith("emma: error[io]: ")

