import json
import logging

import numpy as np
import pytest

from shipdet.synth import (
    PGM_SCALE,
    Annotation,
    SceneSpec,
    cluster_pairs_within_gap,
    generate_scene,
    load_dataset,
    read_annotations,
    read_pgm,
    render_scene,
    size_bucket,
    to_pgm_values,
    write_dataset,
    write_pgm,
)

from oracles import gamma_moments


def test_same_seed_and_index_bitwise_identical():
    spec = SceneSpec(seed=3)
    a, b = render_scene(spec, 5), render_scene(spec, 5)
    assert np.array_equal(a.image, b.image)
    assert a.annotation == b.annotation
    assert not np.array_equal(a.image, render_scene(spec, 6).image)
    assert not np.array_equal(a.image, render_scene(SceneSpec(seed=4), 5).image)


def test_generate_scene_shape():
    img, ann = generate_scene(SceneSpec(size=64), 0)
    assert img.shape == (1, 1, 64, 64)
    assert ann.image_id == render_scene(SceneSpec(size=64), 0).annotation.image_id


def test_zero_ships_is_pure_speckle():
    spec = SceneSpec(seed=1, n_ships=(0, 0), size=256)
    sc = render_scene(spec, 0)
    assert sc.annotation.boxes == []
    assert sc.sea_mask.all()
    mean, cov = gamma_moments(spec.speckle_looks)
    assert abs(sc.image.mean() - mean) < 0.02


@pytest.mark.parametrize("looks", [1, 4, 9])
def test_speckle_moments_at_512(looks):
    spec = SceneSpec(seed=11, size=512, speckle_looks=looks, sea_mean=2.5)
    sc = render_scene(spec, 0)
    sea = sc.image[sc.sea_mask]
    mean, cov = gamma_moments(looks)
    assert abs(sea.mean() / spec.sea_mean - mean) <= 0.02 * mean
    assert abs(sea.std() / sea.mean() - cov) <= 0.05 * cov


def test_box_invariants_over_many_scenes():
    spec = SceneSpec(seed=2, land_band=0.2, land_prob=0.5)
    seen_cluster = False
    for i in range(40):
        ann = render_scene(spec, i).annotation
        assert len(ann.boxes) == len(ann.size_buckets) == len(ann.clusters)
        for b, bucket in zip(ann.boxes, ann.size_buckets):
            assert b.area >= 4
            assert 0 <= b.x1 < b.x2 <= spec.size and 0 <= b.y1 < b.y2 <= spec.size
            assert bucket == size_bucket(b.area)
        ids = {c for c in ann.clusters if c >= 0}
        for cid in ids:
            members = Annotation(ann.image_id, [b for b, c in zip(ann.boxes, ann.clusters) if c == cid])
            assert len(members.boxes) >= 2
            assert cluster_pairs_within_gap(members, spec.cluster_gap) >= 1
            seen_cluster = True
    assert seen_cluster


def test_ships_are_bright():
    spec = SceneSpec(seed=5, n_ships=(3, 3), dense_cluster_prob=0.0)
    sc = render_scene(spec, 0)
    for b in sc.annotation.boxes:
        cx, cy = int((b.x1 + b.x2) / 2), int((b.y1 + b.y2) / 2)
        patch = sc.image[cy - 1:cy + 2, cx - 1:cx + 2]
        assert patch.mean() > 2 * spec.sea_mean


def test_placement_failure_is_logged(caplog):
    spec = SceneSpec(seed=0, size=32, n_ships=(20, 20), length=(30.0, 40.0))
    with caplog.at_level(logging.INFO, logger="shipdet.synth"):
        sc = render_scene(spec, 0)
    assert len(sc.annotation.boxes) < 20
    assert "placed" in caplog.text


@pytest.mark.parametrize("bad", [
    {"size": 100}, {"n_ships": (3, 1)}, {"length": (0, 5)}, {"ship_contrast": (2.0, 3.0)},
    {"cluster_size": (1, 3)}, {"dense_cluster_prob": 1.5}, {"land_band": 0.7}, {"speckle_looks": 0},
])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        SceneSpec(**bad)


def test_spec_dict_roundtrip():
    spec = SceneSpec(seed=9, land_band=0.25)
    assert SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    with pytest.raises(ValueError):
        SceneSpec.from_dict({"sead": 1})


def test_pgm_roundtrip(tmp_path, rng):
    values = rng.integers(0, 65536, (7, 5)).astype(np.uint16)
    write_pgm(tmp_path / "a.pgm", values)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n5 7\n65535\n")
    assert raw[-2:] == int(values[-1, -1]).to_bytes(2, "big")
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), values)


def test_pgm_comment_and_8bit(tmp_path):
    (tmp_path / "b.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x07\xff")
    assert read_pgm(tmp_path / "b.pgm").tolist() == [[7, 255]]
    (tmp_path / "c.pgm").write_bytes(b"P2\n1 1\n255\n7")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "c.pgm")


def test_to_pgm_values_scale():
    v = to_pgm_values(np.array([[0.0, 1.0, 1e9]]))
    assert v.tolist() == [[0, int(PGM_SCALE), 65535]]


def test_write_dataset_layout_and_checksum(tmp_path):
    spec = SceneSpec(seed=4, size=64)
    m1 = write_dataset(spec, 3, tmp_path / "a")
    m2 = write_dataset(spec, 3, tmp_path / "b")
    assert m1["checksum"] == m2["checksum"]
    assert len(list((tmp_path / "a" / "images").glob("*.pgm"))) == 3
    anns = read_annotations(tmp_path / "a" / "annotations.jsonl")
    assert len(anns) == 3
    assert anns[0] == render_scene(spec, 0).annotation
    assert write_dataset(SceneSpec(seed=5, size=64), 3, tmp_path / "c")["checksum"] != m1["checksum"]
    pix = read_pgm(tmp_path / "a" / m1["images"][1]["file"])
    assert np.array_equal(pix, to_pgm_values(render_scene(spec, 1).image))


def test_load_dataset_normalizes(tmp_path):
    write_dataset(SceneSpec(seed=4, size=64), 2, tmp_path)
    samples = load_dataset(tmp_path)
    assert len(samples) == 2
    for s in samples:
        assert abs(s.image.mean()) < 1e-12 and abs(s.image.std() - 1) < 1e-12
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
