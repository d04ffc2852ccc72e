import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from fractoseg import dataset as D

from oracles import point_in_polygon


def via_doc(regions, filename="img.png"):
    return json.dumps({
        f"{filename}123": {"filename": filename, "size": 123, "regions": regions, "file_attributes": {}}
    })


def poly(xs, ys, label):
    return {"shape_attributes": {"name": "polygon", "all_points_x": xs, "all_points_y": ys},
            "region_attributes": {"label": label}}


def square(x0, y0, x1, y1, label):
    return poly([x0, x1, x1, x0], [y0, y0, y1, y1], label)


def oracle_mask(regions, h, w):
    mask = np.full((h, w), 255, np.uint8)
    for reg in regions:
        for i in range(h):
            for j in range(w):
                if point_in_polygon(j + 0.5, i + 0.5, reg.xs, reg.ys):
                    mask[i, j] = reg.class_id
    return mask


# ---------------------------------------------------------------- VIA parsing


def test_parse_minimal_triangle():
    project = D.parse_via_json(via_doc([poly([0, 4, 0], [0, 0, 4], "intergranular")]))
    assert list(project.entries) == ["img.png"]
    (reg,) = project.entries["img.png"]
    assert reg.label == "intergranular" and reg.class_id == 1
    assert project.warnings == []


def test_unknown_label_is_hard_error():
    with pytest.raises(D.AnnotationError, match="dimple"):
        D.parse_via_json(via_doc([poly([0, 4, 0], [0, 0, 4], "dimple")]))


def test_circle_is_skipped_with_warning():
    circle = {"shape_attributes": {"name": "circle", "cx": 5, "cy": 5, "r": 2},
              "region_attributes": {"label": "transgranular"}}
    project = D.parse_via_json(via_doc([circle, poly([0, 4, 0], [0, 0, 4], "transgranular")]))
    assert len(project.warnings) == 1
    assert len(project.entries["img.png"]) == 1


def test_malformed_json_reports_location():
    with pytest.raises(D.AnnotationError, match="line 1, column"):
        D.parse_via_json('{"a": ')


def test_via2_project_and_dict_regions():
    doc = {"_via_settings": {}, "_via_img_metadata": {
        "a.png1": {"filename": "a.png", "size": 1, "regions": {
            "0": {"shape_attributes": {"name": "polygon", "all_points_x": [0, 2, 2], "all_points_y": [0, 0, 2]},
                  "region_attributes": {"fracture": "Transgranular"}}}}}}
    project = D.parse_via_json(json.dumps(doc))
    assert project.entries["a.png"][0].class_id == 2


# ---------------------------------------------------------------- rasterization


def test_square_fills_sixteen_pixels():
    project = D.parse_via_json(via_doc([square(0, 0, 4, 4, "intergranular")]))
    regions = project.entries["img.png"]
    mask = D.rasterize(regions, (8, 8))
    assert (mask == 1).sum() == 16
    assert (mask[:4, :4] == 1).all()
    assert (mask[mask != 1] == 255).all()
    assert np.array_equal(mask, oracle_mask(regions, 8, 8))


def test_empty_regions_all_void():
    assert (D.rasterize([], (5, 6)) == 255).all()


def test_overlap_last_wins():
    project = D.parse_via_json(via_doc([square(0, 0, 5, 5, "intergranular"), square(3, 3, 8, 8, "transgranular")]))
    regions = project.entries["img.png"]
    mask = D.rasterize(regions, (8, 8))
    assert (mask[3:5, 3:5] == 2).all()
    assert mask[0, 0] == 1
    assert np.array_equal(mask, oracle_mask(regions, 8, 8))


def test_degenerate_polygon_skipped_with_warning():
    regions = [D.Region("intergranular", np.array([1.0, 3.0, 5.0]), np.array([1.0, 1.0, 1.0]))]
    with pytest.warns(D.RasterWarning, match="zero area"):
        mask = D.rasterize(regions, (4, 4))
    assert (mask == 255).all()


coords = st.floats(-3, 19, allow_nan=False).map(lambda v: round(v * 4) / 4)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(coords, coords), min_size=3, max_size=7))
def test_scanline_matches_point_in_polygon(points):
    xs = np.clip(np.array([p[0] for p in points]), 0, 16)
    ys = np.clip(np.array([p[1] for p in points]), 0, 16)
    reg = D.Region("transgranular", xs, ys)
    if D.polygon_area(xs, ys) == 0:
        return
    mask = D.rasterize([reg], (16, 16))
    assert np.array_equal(mask, oracle_mask([reg], 16, 16))
    assert np.array_equal(mask, D.rasterize([reg], (16, 16)))


def test_clamping_out_of_bounds_vertices():
    reg = D.Region("intergranular", np.array([-5.0, 20.0, 20.0, -5.0]), np.array([-5.0, -5.0, 2.0, 2.0]))
    mask = D.rasterize([reg], (6, 6))
    assert (mask[:2] == 1).all() and (mask[2:] == 255).all()


# ---------------------------------------------------------------- tiling


def test_tile_counts():
    img = np.zeros((2560, 2560), np.uint8)
    assert len(D.tile(img, img, 640)) == 16
    assert len(D.tile(np.zeros((1280, 1280), np.uint8), None, 640)) == 4
    tiles = D.tile(np.zeros((1000, 1000), np.uint8), None, 640, 640)
    assert [t.origin for t in tiles] == [(0, 0)]


def test_tile_larger_than_image_warns():
    with pytest.warns(D.RasterWarning):
        assert D.tile(np.zeros((100, 100), np.uint8), None, 128) == []


def test_tile_size_must_be_multiple_of_32():
    with pytest.raises(ValueError):
        D.tile(np.zeros((100, 100), np.uint8), None, 50)


@settings(max_examples=25, deadline=None)
@given(st.integers(64, 200), st.integers(64, 200), st.sampled_from([32, 64]), st.integers(0, 2**31))
def test_untile_reconstructs_covered_region(h, w, size, seed):
    img = np.random.default_rng(seed).integers(0, 256, (h, w), dtype=np.uint8)
    tiles = D.tile(img, img, size)
    back = D.untile(tiles, img.shape)
    ch, cw = (h // size) * size, (w // size) * size
    assert np.array_equal(back[:ch, :cw], img[:ch, :cw])


def test_pad_to_multiple_reflect():
    img = np.arange(630 * 630, dtype=np.uint32).reshape(630, 630) % 251
    p = D.pad_to_multiple(img.astype(np.uint8), 32)
    assert p.shape == (640, 640)
    assert np.array_equal(p[:630, :630], img)
    assert np.array_equal(p[630, :630], img[628, :])


# ---------------------------------------------------------------- brightness


def test_brightness_threshold_is_strict():
    img = np.array([[220, 221], [0, 255]], np.uint8)
    assert D.brightness_mask(img).tolist() == [[True, False], [True, False]]
    assert D.brightness_mask(np.zeros((3, 3), np.uint8)).all()


# ---------------------------------------------------------------- splits, manifest, batches


def test_assign_splits_seeded_and_disjoint():
    sources = [f"s{i}.png" for i in range(20)]
    a = D.assign_splits(sources, (0.6, 0.2, 0.2), seed=3)
    assert a == D.assign_splits(sources, (0.6, 0.2, 0.2), seed=3)
    assert [len(a[k]) for k in D.SPLITS] == [12, 4, 4]
    assert sorted(sum(a.values(), [])) == sorted(sources)


def test_assign_splits_rejects_bad_ratios():
    with pytest.raises(ValueError, match="sum"):
        D.assign_splits(["a"], (0.5, 0.2, 0.2), 0)


def write_fixture(tmp_path, n_images=3, size=128):
    images = tmp_path / "raw"
    images.mkdir()
    regions = {}
    r = np.random.default_rng(0)
    for i in range(n_images):
        name = f"im{i}.png"
        Image.fromarray(r.integers(0, 256, (size, size), dtype=np.uint8)).save(images / name)
        regions[name + "1"] = {"filename": name, "size": 1, "file_attributes": {},
                               "regions": [square(0, 0, 40, 50, "intergranular"),
                                           square(60, 60, 128, 100, "transgranular")]}
    via = tmp_path / "via.json"
    via.write_text(json.dumps(regions))
    return via, images


def test_build_dataset_and_batches(tmp_path):
    via, images = write_fixture(tmp_path)
    manifest = D.build_dataset(via, images, tmp_path / "ds", tile_size=64, ratios=(1, 0, 0), seed=0)
    assert len(manifest.splits["train"]) == 3 * 4
    loaded = D.DatasetManifest.load(tmp_path / "ds" / "manifest.json")
    assert loaded.to_json() == manifest.to_json()
    doc = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert set(doc) == {"tile_size", "splits"}
    entry = doc["splits"]["train"][0]
    assert {"image", "mask", "source", "origin"} <= set(entry)
    mask = D.read_mask(loaded.resolve(entry["mask"]))
    assert set(np.unique(mask)) <= {0, 1, 2, 255}

    a = D.batch_iterator(loaded, "train", 4, seed=5)
    b = D.batch_iterator(loaded, "train", 4, seed=5)
    for _ in range(5):
        (xa, ta), (xb, tb) = next(a), next(b)
        assert np.array_equal(xa, xb) and np.array_equal(ta, tb)
        assert xa.shape == (4, 1, 64, 64) and xa.dtype == np.float32
        assert 0 <= xa.min() and xa.max() <= 1
        assert set(np.unique(ta)) <= {0, 1, 2}


def test_split_disjoint_by_source(tmp_path):
    via, images = write_fixture(tmp_path, n_images=6)
    manifest = D.build_dataset(via, images, tmp_path / "ds", tile_size=64, ratios=(0.5, 0.25, 0.25), seed=1)
    sources = {k: {e.source for e in v} for k, v in manifest.splits.items()}
    assert not (sources["train"] & sources["val"]) and not (sources["train"] & sources["test"])
    assert not (sources["val"] & sources["test"])


def test_missing_image_is_data_error(tmp_path):
    via, images = write_fixture(tmp_path, n_images=1)
    (images / "im0.png").unlink()
    with pytest.raises(D.DataError, match="im0.png"):
        D.build_dataset(via, images, tmp_path / "ds", tile_size=64, ratios=(1, 0, 0))


def test_unreadable_pair_names_path(tmp_path):
    via, images = write_fixture(tmp_path, n_images=1)
    manifest = D.build_dataset(via, images, tmp_path / "ds", tile_size=64, ratios=(1, 0, 0))
    bad = manifest.resolve(manifest.splits["train"][0].mask)
    bad.write_bytes(b"not a png")
    with pytest.raises(D.DataError, match=bad.name):
        D.TileSet.from_manifest(manifest, "train")


def test_pixel_scaling_and_void_mapping():
    x = D.to_input(np.array([[[0, 255]]], np.uint8))
    assert x[0, 0, 0].tolist() == [0.0, 1.0]
    t = D.training_target(np.array([[1, 255, 2, 0]], np.uint8))
    assert t.tolist() == [[1, 0, 2, 0]]
    assert D.training_target(np.array([[255]], np.uint8), "ignore").tolist() == [[255]]


def test_epoch_reshuffle_covers_every_tile():
    ts = D.TileSet([np.full((32, 32), i, np.uint8) for i in range(6)], [np.zeros((32, 32), np.uint8)] * 6)
    it = ts.batches(3, seed=0)
    seen = [int(v) for _ in range(2) for v in (next(it)[0][:, 0, 0, 0] * 255).round()]
    assert sorted(seen) == list(range(6))


def test_samples_drawn_per_epoch():
    ts = D.TileSet([np.zeros((32, 32), np.uint8)] * 605, [np.zeros((32, 32), np.uint8)] * 605)
    it = ts.batches(4, seed=0)
    drawn = sum(next(it)[0].shape[0] for _ in range(200))
    assert drawn == 800


def test_rgb_image_converted_with_warning(tmp_path):
    path = tmp_path / "rgb.png"
    Image.fromarray(np.full((4, 4, 3), (255, 0, 0), np.uint8)).save(path)
    with pytest.warns(D.RasterWarning, match="Rec.601"):
        g = D.read_gray(path)
    assert g.shape == (4, 4) and g[0, 0] == 76
