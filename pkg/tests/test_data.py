"""Manifest I/O, scene-grouped splitting, and the synthetic generator."""

import math

import numpy as np
import pytest

from max360iq.data import (ManifestEntry, ManifestError, MOS_SCALE, SynthSpec,
                           generate_synthetic, load_manifest,
                           split_train_test)
from max360iq.sphere import ViewingCondition


@pytest.fixture(scope="module")
def uniform_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("uniform")
    spec = SynthSpec(n_scenes=4, levels=2, mode="uniform", seed=7)
    return load_manifest(generate_synthetic(spec, out))


@pytest.fixture(scope="module")
def nonuniform_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("nonuniform")
    spec = SynthSpec(n_scenes=3, levels=2, mode="nonuniform", seed=7)
    return load_manifest(generate_synthetic(spec, out))


class TestLoadManifest:
    def test_header_and_shape(self, uniform_set):
        header, entries = uniform_set
        assert header["mos_scale"] == list(MOS_SCALE)
        assert header["mode"] == "uniform"
        # 4 scenes x 2 distortions x 2 levels
        assert len(entries) == 16
        assert all(isinstance(e, ManifestEntry) for e in entries)

    def test_empty_body_valid_header(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text('{"mos_scale": [1, 5]}\n'
                     "image_id,scene_id,erp_path,mos,distortion_tag,scanpath_path\n")
        header, entries = load_manifest(p)
        assert entries == []

    def test_missing_header_field(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text('{"schema": 1}\n'
                     "image_id,scene_id,erp_path,mos,distortion_tag,scanpath_path\n")
        with pytest.raises(ManifestError, match="mos_scale"):
            load_manifest(p)

    def test_bad_json_header(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("not json\nimage_id\n")
        with pytest.raises(ManifestError, match="header"):
            load_manifest(p)

    def test_wrong_columns(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text('{"mos_scale": [1, 5]}\nfoo,bar\n')
        with pytest.raises(ManifestError, match="columns"):
            load_manifest(p)

    def test_duplicate_image_id_named(self, uniform_set, tmp_path):
        _, entries = uniform_set
        src = entries[0]
        p = tmp_path / "m.csv"
        rel = src.erp_path
        p.write_text(
            '{"mos_scale": [1, 5]}\n'
            "image_id,scene_id,erp_path,mos,distortion_tag,scanpath_path\n"
            f"dup,s0,{rel},3.0,blur,\n"
            f"dup,s0,{rel},3.0,blur,\n")
        with pytest.raises(ManifestError, match="dup"):
            load_manifest(p)

    def test_missing_image_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(
            '{"mos_scale": [1, 5]}\n'
            "image_id,scene_id,erp_path,mos,distortion_tag,scanpath_path\n"
            "a,s0,images/nope.ppm,3.0,blur,\n")
        with pytest.raises(ManifestError, match="missing image"):
            load_manifest(p)

    def test_non_finite_mos_rejected(self, uniform_set, tmp_path):
        _, entries = uniform_set
        p = tmp_path / "m.csv"
        p.write_text(
            '{"mos_scale": [1, 5]}\n'
            "image_id,scene_id,erp_path,mos,distortion_tag,scanpath_path\n"
            f"a,s0,{entries[0].erp_path},nan,blur,\n")
        with pytest.raises(ManifestError, match="non-finite"):
            load_manifest(p)

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("")
        with pytest.raises(ManifestError, match="empty"):
            load_manifest(p)

    def test_nonuniform_has_four_scanpaths(self, nonuniform_set):
        header, entries = nonuniform_set
        assert len(header["conditions"]) == 4
        for e in entries:
            assert set(e.scanpaths) == set(ViewingCondition)
            assert set(e.condition_mos) == set(ViewingCondition)


class TestSplit:
    def test_ratio_and_grouping(self, uniform_set):
        _, entries = uniform_set
        train, test = split_train_test(entries, ratio=0.75, seed=0)
        tr_scenes = {e.scene_id for e in train}
        te_scenes = {e.scene_id for e in test}
        assert len(tr_scenes) == 3 and len(te_scenes) == 1
        assert not (tr_scenes & te_scenes)

    def test_deterministic(self, uniform_set):
        _, entries = uniform_set
        a = split_train_test(entries, seed=42)
        b = split_train_test(entries, seed=42)
        assert [e.image_id for e in a[0]] == [e.image_id for e in b[0]]
        assert [e.image_id for e in a[1]] == [e.image_id for e in b[1]]

    def test_partition(self, uniform_set):
        _, entries = uniform_set
        train, test = split_train_test(entries, seed=1)
        ids = sorted(e.image_id for e in train) + sorted(e.image_id
                                                         for e in test)
        assert sorted(ids) == sorted(e.image_id for e in entries)
        assert not (set(e.image_id for e in train)
                    & set(e.image_id for e in test))

    def test_ten_scene_default_is_eight_two(self, tmp_path):
        spec = SynthSpec(n_scenes=10, levels=0, mode="uniform", seed=1)
        _, entries = load_manifest(generate_synthetic(spec, tmp_path))
        train, test = split_train_test(entries)
        assert len({e.scene_id for e in train}) == 8
        assert len({e.scene_id for e in test}) == 2

    def test_single_scene_rejected(self, uniform_set):
        _, entries = uniform_set
        one = [e for e in entries if e.scene_id == entries[0].scene_id]
        with pytest.raises(ManifestError):
            split_train_test(one)


class TestSyntheticGenerator:
    def test_same_seed_bit_identical(self, tmp_path):
        spec = SynthSpec(n_scenes=2, levels=1, mode="nonuniform", seed=3)
        m1 = generate_synthetic(spec, tmp_path / "a")
        m2 = generate_synthetic(spec, tmp_path / "b")
        assert m1.read_text() == m2.read_text()
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*") if p.is_file()):
            assert (tmp_path / "a" / rel).read_bytes() == \
                (tmp_path / "b" / rel).read_bytes()

    def test_mos_monotone_in_level(self, tmp_path):
        spec = SynthSpec(n_scenes=2, levels=3, mode="uniform", seed=4)
        _, entries = load_manifest(generate_synthetic(spec, tmp_path))
        by_key = {}
        for e in entries:
            scene, kind, level = e.image_id.rsplit("_", 2)
            by_key.setdefault((scene, kind), []).append((int(level[1:]), e.mos))
        for series in by_key.values():
            series.sort()
            mos = [m for _, m in series]
            assert all(a >= b for a, b in zip(mos, mos[1:]))

    def test_level_zero_max_mos(self, tmp_path):
        spec = SynthSpec(n_scenes=2, levels=0, mode="uniform", seed=5)
        _, entries = load_manifest(generate_synthetic(spec, tmp_path))
        assert all(e.mos == MOS_SCALE[1] for e in entries)

    def test_bad_never_exceeds_good(self, nonuniform_set):
        """Short paths dwell in one hemisphere, so Bad stays at or below Good.
        The 15s paths cross hemispheres and may invert under recency
        weighting, which is the signal the GRU ablation relies on."""
        _, entries = nonuniform_set
        for e in entries:
            assert (e.condition_mos[ViewingCondition.BAD_5S]
                    <= e.condition_mos[ViewingCondition.GOOD_5S] + 1e-12)

    def test_scanpath_coords_valid(self, nonuniform_set):
        _, entries = nonuniform_set
        for e in entries:
            for sp in e.scanpaths.values():
                assert len(sp.coords) == 300
                for c in sp.coords:
                    assert -math.pi <= c.lon < math.pi
                    assert -math.pi / 2 <= c.lat <= math.pi / 2

    def test_condition_labels_within_scale(self, nonuniform_set):
        _, entries = nonuniform_set
        for e in entries:
            for v in e.condition_mos.values():
                assert MOS_SCALE[0] <= v <= MOS_SCALE[1]

    def test_sidecar_mos_matches_manifest_mean(self, nonuniform_set, tmp_path):
        """The per-image mos column is the mean of the condition labels."""
        _, entries = nonuniform_set
        for e in entries:
            mean = np.mean(list(e.condition_mos.values()))
            np.testing.assert_allclose(e.mos, mean, atol=1e-12)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SynthSpec(levels=-1)
        with pytest.raises(ValueError):
            SynthSpec(erp_width=127)
        with pytest.raises(ValueError):
            SynthSpec(mode="weird")
