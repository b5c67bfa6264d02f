import json

import numpy as np
import pytest
from conftest import SMALL
from hypothesis import given, settings
from hypothesis import strategies as st

from emmaseg.architectures.checkpoint import load_checkpoint, save_checkpoint
from emmaseg.architectures.network import forward, init_network
from emmaseg.architectures.spec import build_spec
from emmaseg.ensemble import (
    ConfidenceMap,
    EMMAEnsemble,
    EnsembleManifest,
    EnsembleMember,
    TilingSpec,
    argmax_segment,
    average_confidences,
    coverage_map,
    full_configuration,
    predict_full_volume,
    run_emma,
    shared_argmax_agrees,
    tile_plan,
)
from emmaseg.errors import CheckpointError, ConfigError, DimensionError, FormatError
from emmaseg.phantom import make_phantom
from emmaseg.preprocessing import NormalizationSpec, apply_normalization
from emmaseg.toy import MEMBERS, crossing, toy_demo
from emmaseg.validation import check_probability_map


def random_maps(rng, n, K=4, ext=(3, 4, 5)):
    out = []
    for i in range(n):
        logits = rng.normal(scale=2.0, size=(K,) + ext)
        e = np.exp(logits - logits.max(axis=0))
        out.append(ConfidenceMap(e / e.sum(axis=0), f"m{i}"))
    return out


class TestAverage:
    def test_voxel_example(self):
        a = ConfidenceMap(np.array([0.8, 0.2]).reshape(2, 1, 1, 1))
        b = ConfidenceMap(np.array([0.4, 0.6]).reshape(2, 1, 1, 1))
        np.testing.assert_allclose(average_confidences([a, b]).probs.ravel(), [0.6, 0.4], rtol=1e-15)

    def test_single_map_unchanged(self):
        m = random_maps(np.random.default_rng(0), 1)[0]
        assert np.array_equal(average_confidences([m]).probs, m.probs)

    def test_duplicates_are_exact(self):
        rng = np.random.default_rng(1)
        maps = random_maps(rng, 3)
        once = average_confidences(maps).probs
        twice = average_confidences([m for m in maps for _ in range(2)]).probs
        assert np.array_equal(average_confidences([maps[0], maps[0]]).probs, maps[0].probs)
        np.testing.assert_allclose(twice, once, rtol=0, atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 8))
    def test_permutation_invariance_and_simplex(self, seed, n):
        rng = np.random.default_rng(seed)
        maps = random_maps(rng, n)
        a = average_confidences(maps).probs
        b = average_confidences([maps[i] for i in rng.permutation(n)]).probs
        assert np.max(np.abs(a - b)) <= 1e-9
        np.testing.assert_allclose(a.sum(axis=0), 1.0, atol=1e-6)
        assert a.min() >= 0 and a.max() <= 1

    def test_shape_mismatch_names_offender(self):
        maps = random_maps(np.random.default_rng(2), 2)
        odd = ConfidenceMap(np.full((4, 3, 4, 6), 0.25), "oddball")
        with pytest.raises(DimensionError, match="oddball"):
            average_confidences(maps + [odd])
        with pytest.raises(DimensionError):
            average_confidences([])

    def test_shared_argmax_preserved(self):
        rng = np.random.default_rng(3)
        maps = [m.probs for m in random_maps(rng, 5, ext=(10_000, 1, 1))]
        # force agreement on a third of the voxels
        agree = rng.random(10_000) < 1 / 3
        for m in maps:
            m[:, agree, 0, 0] *= 0.2
            m[2, agree, 0, 0] += 0.8
        avg = average_confidences([ConfidenceMap(m) for m in maps]).probs
        assert shared_argmax_agrees(maps, avg)
        assert np.all(np.argmax(avg, axis=0)[agree] == 2)


class TestArgmax:
    def test_one_hot(self):
        probs = np.zeros((4, 2, 2, 2))
        probs[2] = 1.0
        assert np.all(argmax_segment(probs) == 2)
        probs = np.zeros((4, 2, 2, 2))
        probs[3] = 1.0
        assert np.all(argmax_segment(probs) == 4)

    def test_tie_goes_to_lower_label(self):
        probs = np.array([0.5, 0.5, 0.0, 0.0]).reshape(4, 1, 1, 1)
        assert argmax_segment(probs).item() == 0
        probs = np.array([0.0, 0.4, 0.2, 0.4]).reshape(4, 1, 1, 1)
        assert argmax_segment(probs).item() == 1

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from(["exp", "cube", "affine", "log1p"]))
    def test_invariant_under_monotone_maps(self, seed, kind):
        rng = np.random.default_rng(seed)
        p = random_maps(rng, 1, ext=(6, 6, 6))[0].probs
        f = {"exp": np.exp, "cube": lambda v: v ** 3, "affine": lambda v: 7.5 * v - 2.0,
             "log1p": np.log1p}[kind]
        assert np.array_equal(argmax_segment(p), argmax_segment(f(p)))

    def test_label_value_errors(self):
        with pytest.raises(DimensionError):
            argmax_segment(np.full((3, 1, 1, 1), 1 / 3))
        with pytest.raises(ConfigError):
            argmax_segment(np.full((2, 1, 1, 1), 0.5), (1, 0))


class TestTiling:
    @pytest.mark.parametrize("spec_id", ["unet/sum_skip", "fcn/vgg", "fcn/residual", "deepmedic/base",
                                         "deepmedic/wide"])
    @pytest.mark.parametrize("extents", [(48, 48, 48), (128, 128, 128), (130, 71, 50), (17, 24, 64)])
    def test_coverage_is_exactly_one(self, spec_id, extents):
        spec = build_spec(spec_id)
        cov = coverage_map(spec, extents, TilingSpec(64))
        assert cov.shape == extents
        assert np.all(cov == 1)

    def test_small_tile_still_covers(self):
        spec = build_spec("unet/sum_skip")
        assert np.all(coverage_map(spec, (40, 33, 25), TilingSpec(16, margin=2)) == 1)

    def test_too_small_volume(self):
        with pytest.raises(DimensionError):
            tile_plan(build_spec("fcn/vgg"), (64, 64, 12))

    def test_bad_tiling(self):
        with pytest.raises(ConfigError):
            tile_plan(build_spec("unet/sum_skip"), (64, 64, 64), TilingSpec(4))
        with pytest.raises(ConfigError):
            tile_plan(build_spec("unet/sum_skip"), (200, 64, 64), TilingSpec(16, margin=8))

    def test_single_tile_equals_direct_forward(self):
        inst = init_network(build_spec("unet/sum_skip", width_scale=0.125), 0, np.float64)
        x = np.random.default_rng(0).normal(size=(4, 32, 24, 40))
        full = predict_full_volume(inst, x, TilingSpec(64)).probs
        assert np.array_equal(full, forward(inst, x[None]).data[0])

    def test_multi_tile_prediction_is_simplex(self):
        inst = init_network(build_spec("unet/sum_skip", width_scale=0.125), 1, np.float64)
        x = np.random.default_rng(1).normal(size=(4, 40, 40, 40))
        tiled = predict_full_volume(inst, x, TilingSpec(32)).probs
        check_probability_map(tiled, atol=1e-9)
        assert tiled.shape == (4, 40, 40, 40)

    def test_deepmedic_tiles_abut(self):
        inst = init_network(build_spec("deepmedic/base", width_scale=0.1), 2, np.float64)
        x = np.random.default_rng(2).normal(size=(4, 20, 16, 13))
        cmap = predict_full_volume(inst, x, TilingSpec(9))
        check_probability_map(cmap.probs, atol=1e-9)
        plan = tile_plan(inst.spec, x.shape[1:], TilingSpec(9))
        assert all(t.in_size == (9, 9, 9) for t in plan)


@pytest.fixture(scope="module")
def members(tmp_path_factory):
    """Three small untrained members on disk with differing normalisations."""
    root = tmp_path_factory.mktemp("members")
    case = make_phantom(11, 0, SMALL)
    specs = [("unet/sum_skip", NormalizationSpec("v1_zscore")),
             ("fcn/vgg", NormalizationSpec("v2_bfc_zscore", "none")),
             ("deepmedic/base", NormalizationSpec("v1_zscore"))]
    out = []
    for i, (sid, norm) in enumerate(specs):
        inst = init_network(build_spec(sid, width_scale=0.125), i)
        inst.meta = {"normalization": norm.to_json()}
        path = root / f"m{i}.ckpt"
        save_checkpoint(inst, path)
        out.append(EnsembleMember(path, sid, norm))
    return root, case, out


class TestRunEmma:
    def test_one_member_equals_member_prediction(self, members):
        _, case, ms = members
        emma, labels = run_emma(EnsembleManifest([ms[0]]), case)
        direct = predict_full_volume(load_checkpoint(ms[0].checkpoint),
                                     apply_normalization(case, ms[0].normalization))
        assert np.array_equal(emma.probs, direct.probs)
        assert np.array_equal(labels, argmax_segment(direct))

    def test_duplicate_member_is_idempotent(self, members):
        _, case, ms = members
        once = run_emma(EnsembleManifest([ms[1]]), case)
        twice = run_emma(EnsembleManifest([ms[1], ms[1]]), case)
        assert np.array_equal(once[0].probs, twice[0].probs)
        assert np.array_equal(once[1], twice[1])

    def test_permutation_and_determinism(self, members):
        _, case, ms = members
        a = run_emma(EnsembleManifest(ms), case)
        b = run_emma(EnsembleManifest(ms[::-1]), case)
        c = run_emma(EnsembleManifest(ms), case)
        assert np.max(np.abs(a[0].probs - b[0].probs)) <= 1e-9
        assert np.array_equal(a[1], c[1]) and np.array_equal(a[0].probs, c[0].probs)
        check_probability_map(a[0].probs, atol=1e-6)

    def test_corrupt_member_aborts(self, members, tmp_path):
        _, case, ms = members
        bad = tmp_path / "bad.ckpt"
        data = bytearray(ms[0].checkpoint.read_bytes())
        data[100] ^= 0xFF
        bad.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            run_emma(EnsembleManifest([ms[1], EnsembleMember(bad, ms[0].spec_id, ms[0].normalization)]), case)

    def test_spec_mismatch(self, members):
        _, case, ms = members
        wrong = EnsembleMember(ms[0].checkpoint, "fcn/vgg", ms[0].normalization)
        with pytest.raises(CheckpointError, match="unet/sum_skip"):
            run_emma(EnsembleManifest([wrong]), case)

    def test_missing_checkpoint(self, members, tmp_path):
        _, case, ms = members
        with pytest.raises(CheckpointError):
            run_emma(EnsembleManifest([EnsembleMember(tmp_path / "nope", "fcn/vgg",
                                                      NormalizationSpec())]), case)

    def test_estimator_matches_run_emma(self, members):
        _, case, ms = members
        est = EMMAEnsemble([(load_checkpoint(m.checkpoint), m.normalization) for m in ms]).fit()
        emma, labels = run_emma(EnsembleManifest(ms), case)
        assert np.array_equal(est.predict_proba(case), emma.probs)
        assert np.array_equal(est.predict(case), labels)


class TestManifest:
    def test_round_trip_with_relative_paths(self, members):
        root, _, ms = members
        EnsembleManifest(ms).save(root / "manifest.json")
        doc = json.loads((root / "manifest.json").read_text())
        assert doc[0]["checkpoint"] == "m0.ckpt"
        back = EnsembleManifest.load(root / "manifest.json")
        assert [m.checkpoint for m in back.members] == [m.checkpoint for m in ms]
        assert [m.normalization.to_json() for m in back.members] == [m.normalization.to_json() for m in ms]

    @pytest.mark.parametrize("doc", [
        {}, [], [{"checkpoint": "a", "spec_id": "fcn/vgg"}],
        [{"checkpoint": "a", "spec_id": "fcn/vgg", "normalization": {"version": "v1_zscore"}, "x": 1}],
        [{"checkpoint": "a", "spec_id": "fcn/huge", "normalization": {"version": "v1_zscore"}}],
    ])
    def test_invalid_manifests(self, doc):
        with pytest.raises(ConfigError):
            EnsembleManifest.from_json(doc)

    def test_invalid_json(self, tmp_path):
        (tmp_path / "m.json").write_text("[{")
        with pytest.raises(ConfigError):
            EnsembleManifest.load(tmp_path / "m.json")

    def test_full_configuration(self):
        pairs = full_configuration()
        assert len(pairs) == 21 == len(set(pairs))


@pytest.fixture(scope="module")
def report():
    return toy_demo(0)


class TestToyDemo:
    def test_member_count_and_diversity(self, report):
        assert len(report["members"]) >= 6
        assert len({(m["loss"], m["weight_decay"], m["label_noise"]) for m in report["members"]}) == len(MEMBERS)
        assert len({m["loss"] for m in report["members"]}) == 3

    def test_curves_are_probabilities(self, report):
        curves = np.asarray(report["member_curves"])
        assert curves.min() >= 0 and curves.max() <= 1
        assert np.asarray(report["average"]).min() >= 0

    def test_crossing_near_midpoint(self, report):
        assert report["between_centers"]
        assert abs(report["crossing"] - report["midpoint"]) <= 1.0

    def test_strong_decay_member_is_flat_but_harmless(self, report):
        i = next(k for k, m in enumerate(MEMBERS) if m.weight_decay >= 1.0)
        flat = np.asarray(report["member_curves"][i])
        sharp = np.asarray(report["member_curves"][0])
        assert np.ptp(flat) < np.ptp(sharp)
        without = np.delete(np.asarray(report["member_curves"]), i, axis=0).mean(axis=0)
        assert not np.array_equal(without, np.asarray(report["average"]))
        shifted = crossing(np.asarray(report["grid"]), without)
        assert abs(shifted) <= 1.0 and abs(report["crossing"]) <= 1.0
