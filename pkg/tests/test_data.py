import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy import ndimage

from t2icount.data import (CountingSample, as_samples, augment, load_carpk, load_fsc147, load_fsc147s,
                           pool_density, rasterize_density, synth_dataset, write_corpus)
from t2icount.data.augment import AugmentParams, apply_geometry, reflect_pad
from t2icount.data.loaders import FSC147_SPLIT_SIZES, box_centers
from t2icount.data.synth import SYNTH_FILES, render
from t2icount.errors import DimensionError, IngestionError, InputError

SYNTH = {"image_size": 64, "n_train": 6, "n_val": 3, "n_test": 3, "minority_range": [1, 5],
         "majority_range": [10, 14], "object_size": 8, "seed": 3}


# density -----------------------------------------------------------------

def test_empty_and_single_point():
    assert (rasterize_density([], (32, 32)) == 0).all()
    for sigma in (0.5, 4.0, 20.0):
        assert rasterize_density([[3.0, 30.0]], (32, 32), sigma).sum() == pytest.approx(1.0, abs=1e-3)


def test_fifty_points_on_384():
    pts = np.random.default_rng(0).uniform(0, 383, size=(50, 2))
    assert rasterize_density(pts, (384, 384)).sum() == pytest.approx(50, abs=0.05)


@given(st.lists(st.tuples(st.floats(-5, 70), st.floats(-5, 70)), max_size=40), st.floats(0.5, 8))
@settings(max_examples=40, deadline=None)
def test_mass_conservation_property(points, sigma):
    D = rasterize_density(points, (64, 64), sigma)
    n = len(points)
    assert abs(D.sum() - n) <= 1e-3 * max(n, 1)
    assert abs(pool_density(D, 8).sum() - D.sum()) <= 1e-6 * max(n, 1)
    assert (D >= 0).all()


def test_density_peak_at_point():
    D = rasterize_density([[10.0, 20.0]], (32, 32), 2.0)
    assert np.unravel_index(D.argmax(), D.shape) == (20, 10)


def test_pool_examples():
    D = np.ones((16, 24))
    P = pool_density(D, 8)
    assert P.shape == (2, 3) and (P == 64).all()
    delta = np.zeros((32, 32))
    delta[8, 8] = 1
    assert pool_density(delta, 8)[1, 1] == 1
    t = torch.rand(2, 16, 16)
    assert torch.allclose(pool_density(t, 4).sum((1, 2)), t.sum((1, 2)))
    with pytest.raises(DimensionError):
        pool_density(np.ones((10, 16)), 8)


# augmentation ------------------------------------------------------------

def sample_with(points, size=64):
    img = torch.rand(3, size, size)
    return CountingSample("s", "dots", points, "train", "test", image_tensor=img, size=(size, size))


def test_identity_geometry():
    pts = np.array([[3.0, 5.0], [40.0, 60.0]])
    img = torch.rand(3, 64, 64)
    out, moved = apply_geometry(img, pts, AugmentParams(1.0, 0, 0, False), 64)
    assert torch.equal(out, img)
    assert np.allclose(moved, pts)


def test_flip_maps_x():
    img = torch.rand(3, 64, 64)
    out, moved = apply_geometry(img, np.array([[3.0, 5.0]]), AugmentParams(1.0, 0, 0, True), 64)
    assert np.allclose(moved, [[60.0, 5.0]])
    assert torch.equal(out, img.flip(-1))


def test_rescale_two():
    img = torch.rand(3, 32, 32)
    out, moved = apply_geometry(img, np.array([[3.0, 5.0]]), AugmentParams(2.0, 0, 0, False), 64)
    assert out.shape == (3, 64, 64)
    assert np.allclose(moved, [[6.0, 10.0]])


def test_small_image_is_padded_then_cropped():
    s = sample_with([[5.0, 5.0]], size=40)
    out = augment(s, np.random.default_rng(0), crop_size=128)
    assert out.image.shape == (3, 128, 128)


def test_crop_must_be_multiple_of_eight():
    with pytest.raises(DimensionError):
        augment(sample_with([]), np.random.default_rng(0), crop_size=60)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_augmentation_moves_density_with_points(seed):
    rng = np.random.default_rng(seed)
    img = torch.zeros(3, 64, 64)
    pts = rng.uniform(4, 59, size=(6, 2)).round()
    for x, y in pts.astype(int):
        img[:, y, x] = 1.0
    out = augment(sample_with(pts).with_image(img, pts), np.random.default_rng(seed), crop_size=64)
    assert out.image.shape == (3, 64, 64)
    assert out.count <= 6
    # every surviving point lands within a pixel of a bright spot in the transformed image
    bright = out.image.sum(0) > out.image.sum(0).mean() + 1e-6
    ys, xs = np.nonzero(bright.numpy())
    for x, y in out.points:
        assert np.min(np.hypot(xs - x, ys - y)) <= 1.5


def test_augment_is_deterministic_given_rng():
    s = sample_with([[10.0, 10.0], [30.0, 50.0]])
    a = augment(s, np.random.default_rng([1, 2, 3]), 64)
    b = augment(s, np.random.default_rng([1, 2, 3]), 64)
    assert torch.equal(a.image, b.image) and np.array_equal(a.points, b.points)


def test_reflect_pad():
    img = torch.arange(6.0).reshape(1, 2, 3)
    out = reflect_pad(img, 3, 4)
    assert out.shape == (1, 3, 4)
    assert torch.equal(out[:, :2, :3], img)


# synthetic corpus --------------------------------------------------------

def test_synth_deterministic():
    a, b = synth_dataset(SYNTH), synth_dataset(SYNTH)
    for split in ("train", "val", "test"):
        for x, y in zip(a[split], b[split]):
            assert torch.equal(x.image, y.image)
            assert all(np.array_equal(x.points[c], y.points[c]) for c in x.points)


def test_synth_counts_and_imbalance():
    corpus = synth_dataset(SYNTH)
    assert [len(corpus[s]) for s in ("train", "val", "test")] == [6, 3, 3]
    for im in corpus["train"]:
        assert 1 <= len(im.points[im.minority]) <= 5
        assert 10 <= len(im.points[im.majority]) <= 14


def test_rendered_objects_match_annotations():
    rng = np.random.default_rng(0)
    corpus = synth_dataset(SYNTH)
    for im in corpus["val"]:
        _, labels = render(64, im.points, 8, rng)
        for k, cls in enumerate(("dots", "boxes"), start=1):
            _, n = ndimage.label(labels == k)
            assert n == len(im.points[cls])


def test_as_samples_prompts():
    corpus = synth_dataset(SYNTH)
    both = as_samples(corpus["val"])
    assert len(both) == 6
    mino = as_samples(corpus["val"], "minority")
    assert all(s.meta["minority"] for s in mino)
    assert all(s.meta["other_count"] > s.count for s in mino)


# loaders -----------------------------------------------------------------

def write_fsc_layout(root, sizes):
    images = root / "images_384_VarV2"
    images.mkdir(parents=True)
    annotations, splits, lines = {}, {}, []
    k = 0
    for split, n in sizes.items():
        splits[split] = []
        for _ in range(n):
            name = f"{k}.jpg"
            k += 1
            splits[split].append(name)
            annotations[name] = {"points": [[1, 2], [5, 6]]}
            lines.append(f"{name}\tsea shells")
    tiny = Image.new("RGB", (16, 8))
    for split in splits.values():
        for name in split:
            tiny.save(images / name)
    (root / "annotation_FSC147_384.json").write_text(json.dumps(annotations))
    (root / "Train_Test_Val_FSC_147.json").write_text(json.dumps(splits))
    (root / "ImageClasses_FSC147.txt").write_text("\n".join(lines) + "\n")


@pytest.mark.slow
def test_fsc147_public_split_sizes(tmp_path, caplog):
    write_fsc_layout(tmp_path, FSC147_SPLIT_SIZES)
    for split, n in FSC147_SPLIT_SIZES.items():
        samples = load_fsc147(tmp_path, split)
        assert len(samples) == n
    assert "public release" not in caplog.text


def test_fsc147_small_layout(tmp_path, caplog):
    write_fsc_layout(tmp_path, {"train": 3, "val": 2, "test": 1})
    samples = load_fsc147(tmp_path, "train")
    assert [s.image_id for s in samples] == sorted(s.image_id for s in samples)
    assert samples[0].class_name == "sea shells" and samples[0].count == 2
    assert samples[0].image.shape == (3, 8, 16)
    assert "public release" in caplog.text
    assert [s.image_id for s in load_fsc147(tmp_path, "train")] == [s.image_id for s in samples]
    with pytest.raises(InputError):
        load_fsc147(tmp_path, "holdout")


def test_fsc147_out_of_bounds_points_clamped(tmp_path, caplog):
    write_fsc_layout(tmp_path, {"train": 1, "val": 0, "test": 0})
    ann = json.loads((tmp_path / "annotation_FSC147_384.json").read_text())
    ann["0.jpg"]["points"] = [[100, 3], [2, -4]]
    (tmp_path / "annotation_FSC147_384.json").write_text(json.dumps(ann))
    s = load_fsc147(tmp_path, "train")[0]
    assert s.points.tolist() == [[15, 3], [2, 0]]
    assert "clamped" in caplog.text


def test_fsc147_missing_file_names_path(tmp_path):
    write_fsc_layout(tmp_path, {"train": 1, "val": 0, "test": 0})
    (tmp_path / "Train_Test_Val_FSC_147.json").unlink()
    with pytest.raises(IngestionError, match="Train_Test_Val_FSC_147.json"):
        load_fsc147(tmp_path, "train")


def test_fsc147s(tmp_path, caplog):
    write_fsc_layout(tmp_path, {"train": 0, "val": 0, "test": 3})
    recs = [{"image_id": f"{i}.jpg", "minority_class": "keys", "points": [[1, 1]] * (i + 4)} for i in range(3)]
    f = tmp_path / "fsc147s.json"
    f.write_text(json.dumps(recs))
    samples = load_fsc147s(f, tmp_path)
    assert len(samples) == 3
    assert all(s.class_name == "keys" for s in samples)
    assert np.mean([s.count for s in samples]) == pytest.approx(5.0)
    f.write_text("")
    assert load_fsc147s(f, tmp_path) == []
    assert "no minority" in caplog.text
    f.write_text(json.dumps([{"image_id": "missing.jpg", "minority_class": "keys", "points": [[1, 1]]}]))
    with pytest.raises(IngestionError):
        load_fsc147s(f, tmp_path)


def test_box_centers():
    assert box_centers([[10, 10, 30, 30]]).tolist() == [[20.0, 20.0]]


def test_carpk(tmp_path, caplog):
    data = tmp_path / "CARPK_devkit" / "data"
    for d in ("Images", "Annotations", "ImageSets"):
        (data / d).mkdir(parents=True)
    for split, names in {"train": ["a", "b"], "test": ["c"]}.items():
        (data / "ImageSets" / f"{split}.txt").write_text("\n".join(names) + "\n")
        for n in names:
            Image.new("RGB", (64, 48)).save(data / "Images" / f"{n}.png")
            (data / "Annotations" / f"{n}.txt").write_text("10 10 30 30 1\n1 2 3\n40 5 44 9 1\n")
    test = load_carpk(tmp_path, "test")
    assert len(test) == 1 and test[0].class_name == "cars"
    assert test[0].points.tolist() == [[20.0, 20.0], [42.0, 7.0]]
    assert "malformed" in caplog.text
    assert len(load_carpk(tmp_path, "all")) == 3
    with pytest.raises(IngestionError):
        load_carpk(tmp_path / "nowhere")


def test_synth_corpus_round_trips_through_loaders(tmp_path):
    corpus = synth_dataset(SYNTH)
    write_corpus(corpus, tmp_path)
    val = load_fsc147(tmp_path, "val", files=SYNTH_FILES, source="synth")
    assert [s.count for s in val] == [len(im.points[im.majority]) for im in corpus["val"]]
    mino = load_fsc147s(tmp_path / "minority.json", tmp_path, files=SYNTH_FILES)
    assert len(mino) == 12
    loaded = {s.image_id: s for s in val}
    im = corpus["val"][0]
    assert torch.allclose(loaded[f"{im.image_id}.png"].image, im.image, atol=1 / 255)
