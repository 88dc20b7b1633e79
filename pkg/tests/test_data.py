import json

import numpy as np
import pytest

from oracles import moment_features
from vipformer.data import (FAMILIES, DatasetManifest, PairedDataset, batch_iter, generate_synthetic,
                            inside_test, load_points, normalize_points, random_params, read_ppm, read_vpts,
                            read_xyz, render_silhouette, sample_surface, write_ppm, write_vpts, write_xyz)
from vipformer.errors import ContractError, DataError, FormatError, ParameterError
from vipformer.rng import RngStream


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return generate_synthetic(root, class_count=8, per_class=16, n_points=512, image_size=24, views=2, rng=3)


# -- surfaces and rendering ---------------------------------------------------------

def test_sphere_points_on_unit_sphere():
    pts = sample_surface("sphere", {"radius": 1.0}, 2000, np.random.default_rng(0))
    assert np.abs(np.linalg.norm(pts, axis=1) - 1).max() < 1e-12


@pytest.mark.parametrize("family", [f for f in FAMILIES if f != "torus"])
def test_surface_points_lie_on_boundary(family):
    rng = np.random.default_rng(1)
    p = random_params(family, rng)
    pts = sample_surface(family, p, 400, rng)
    inside = inside_test(family, p)
    # slightly shrunk points are inside, slightly grown points mostly outside
    c = pts.mean(axis=0)
    assert inside(c + (pts - c) * 0.999).mean() > 0.9
    assert inside(c + (pts - c) * 1.05).mean() < 0.5


def test_torus_points_satisfy_implicit_equation():
    p = {"major": 0.7, "minor": 0.2}
    pts = sample_surface("torus", p, 1000, np.random.default_rng(0))
    resid = (np.hypot(pts[:, 0], pts[:, 1]) - 0.7) ** 2 + pts[:, 2] ** 2 - 0.04
    assert np.abs(resid).max() < 1e-12


def test_cube_silhouette_fraction():
    # face-on orthographic view of the cube [-.5, .5]^3 covers a quarter of [-1, 1]^2
    inside = inside_test("cube", {"half": [0.5, 0.5, 0.5]})
    img = render_silhouette(inside, 64, azimuth=0.0, elevation=0.0)
    assert img.shape == (64, 64, 3)
    assert abs((img[:, :, 0] > 0).mean() - 0.25) < 0.02
    assert img.min() == 0.0 and img.max() <= 1.0


def test_normalization_idempotent_and_unit():
    pts = np.random.default_rng(2).normal(size=(300, 3)) * 5 + 3
    n1, c, s = normalize_points(pts)
    assert np.abs(n1.mean(0)).max() < 1e-12
    assert abs(np.linalg.norm(n1, axis=1).max() - 1) < 1e-12
    n2, c2, s2 = normalize_points(n1)
    assert np.abs(n2 - n1).max() < 1e-12 and abs(s2 - 1) < 1e-12
    assert np.allclose(n1 * s + c, pts)


# -- file formats --------------------------------------------------------------------

def test_vpts_roundtrip_and_errors(tmp_path):
    pts = np.random.default_rng(3).normal(size=(17, 3)).astype(np.float32)
    path = tmp_path / "a.vpts"
    write_vpts(path, pts)
    assert path.stat().st_size == 8 + 17 * 12
    assert np.array_equal(read_vpts(path), pts)
    raw = path.read_bytes()
    (tmp_path / "b.vpts").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        read_vpts(tmp_path / "b.vpts")
    (tmp_path / "c.vpts").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        read_vpts(tmp_path / "c.vpts")


def test_xyz_roundtrip_and_errors(tmp_path):
    pts = np.random.default_rng(4).normal(size=(9, 3))
    path = tmp_path / "a.xyz"
    write_xyz(path, pts)
    assert np.array_equal(read_xyz(path), pts)
    (tmp_path / "b.xyz").write_text("# comment\n\n1 2 3\n4,5,6\n")
    assert read_xyz(tmp_path / "b.xyz").tolist() == [[1, 2, 3], [4, 5, 6]]
    (tmp_path / "c.xyz").write_text("1 2\n")
    with pytest.raises(FormatError, match=":1:"):
        read_xyz(tmp_path / "c.xyz")
    (tmp_path / "d.xyz").write_text("# nothing\n")
    with pytest.raises(FormatError):
        read_xyz(tmp_path / "d.xyz")


def test_ppm_roundtrip_and_errors(tmp_path):
    img = np.random.default_rng(5).integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    path = tmp_path / "a.ppm"
    write_ppm(path, img)
    assert np.array_equal(read_ppm(path), img)
    (tmp_path / "b.ppm").write_bytes(b"P6\n# c\n2 1\n255\n" + bytes(6))
    assert read_ppm(tmp_path / "b.ppm").shape == (1, 2, 3)
    (tmp_path / "c.ppm").write_bytes(b"P6\n2 1\n255\n" + bytes(5))
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "c.ppm")
    (tmp_path / "d.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "d.ppm")


def test_load_points_subsamples_and_normalizes(tmp_path):
    pts = np.random.default_rng(6).normal(size=(2048, 3)) * 4 + 1
    write_xyz(tmp_path / "a.xyz", pts)
    out = load_points(tmp_path / "a.xyz", 1024, np.random.default_rng(0))
    assert out.shape == (1024, 3) and out.dtype == np.float32
    assert np.linalg.norm(out, axis=1).max() <= 1 + 1e-6
    with pytest.raises(ParameterError):
        load_points(tmp_path / "a.xyz", 1024)
    assert load_points(tmp_path / "a.xyz").shape == (2048, 3)


# -- corpus and manifest ----------------------------------------------------------

def test_manifest_counts(corpus):
    assert corpus.num_classes == 8
    assert len(corpus.entries) == 8 * 16
    for name, per in (("train", 10), ("val", 3), ("test", 3)):
        split = corpus.split(name)
        assert len(split) == 8 * per
        assert np.bincount([e.class_id for e in split], minlength=8).tolist() == [per] * 8
    assert all(len(e.image_files) == 2 for e in corpus.entries)
    assert read_ppm(corpus.root / corpus.entries[0].image_files[0]).shape == (24, 24, 3)
    assert read_vpts(corpus.root / corpus.entries[0].points_file).shape == (512, 3)


def test_manifest_reload_and_verification(corpus, tmp_path):
    again = DatasetManifest.load(corpus.root)
    assert [vars(e) for e in again.entries] == [vars(e) for e in corpus.entries]
    doc = json.loads((corpus.root / "manifest.json").read_text())
    doc["entries"][0]["class_id"] = 99
    bad = tmp_path / "manifest.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(DataError):
        DatasetManifest.load(bad)
    with pytest.raises(DataError):
        DatasetManifest.load(tmp_path / "missing")


def test_generation_is_deterministic(tmp_path):
    a = generate_synthetic(tmp_path / "a", class_count=2, per_class=3, n_points=64, image_size=12, views=1, rng=9)
    b = generate_synthetic(tmp_path / "b", class_count=2, per_class=3, n_points=64, image_size=12, views=1, rng=9)
    for ea, eb in zip(a.entries, b.entries):
        assert (a.root / ea.points_file).read_bytes() == (b.root / eb.points_file).read_bytes()
        assert (a.root / ea.image_files[0]).read_bytes() == (b.root / eb.image_files[0]).read_bytes()


def test_generation_rejects_bad_arguments(tmp_path):
    with pytest.raises(ParameterError):
        generate_synthetic(tmp_path, class_count=9)
    with pytest.raises(ParameterError):
        generate_synthetic(tmp_path, class_count=1, families=["blob"])


def test_handcrafted_features_separate_the_classes(tmp_path):
    # a fixed descriptor with a 1-nearest-neighbour rule shows the classes are geometrically distinct
    corpus = generate_synthetic(tmp_path, class_count=8, per_class=32, n_points=1024, image_size=8, views=1, rng=3)

    def feats(split):
        es = corpus.split(split)
        x = np.stack([moment_features(read_vpts(corpus.root / e.points_file)) for e in es])
        return x, np.array([e.class_id for e in es])

    xtr, ytr = feats("train")
    xte, yte = feats("test")
    mu, sd = xtr.mean(0), xtr.std(0) + 1e-9
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    pred = ytr[np.argmin(((xte[:, None] - xtr[None]) ** 2).sum(-1), axis=1)]
    assert (pred == yte).mean() >= 0.9


# -- datasets and batching -----------------------------------------------------------

def test_paired_dataset(corpus):
    ds = PairedDataset(corpus, "train", sample_size=256, rng=RngStream(0))
    assert len(ds) == 80 and ds.num_classes == 8
    assert ds.points[0].shape == (256, 3)
    assert len(ds.images[0]) == 2
    again = PairedDataset(corpus, "train", sample_size=256, rng=RngStream(0))
    assert all(np.array_equal(a, b) for a, b in zip(ds.points, again.points))
    small = PairedDataset(corpus, "val", image_size=12, load_images=True)
    assert small.images[0][0].shape == (12, 12, 3)


def test_batch_iter_drop_and_keep():
    ds = PairedDataset.from_arrays([np.zeros((4, 3))] * 10, np.arange(10) % 2)
    sizes = [len(b) for b in batch_iter(ds, 4, RngStream(0))]
    assert sizes == [4, 4]
    sizes = [len(b) for b in batch_iter(ds, 4, RngStream(0), drop_last=False)]
    assert sizes == [4, 4, 2]
    seen = np.concatenate([b.indices for b in batch_iter(ds, 3, RngStream(1), drop_last=False)])
    assert sorted(seen) == list(range(10))
    plain = [b.indices.tolist() for b in batch_iter(ds, 5, shuffle=False)]
    assert plain == [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]]


def test_batch_iter_determinism_and_images(corpus):
    ds = PairedDataset(corpus, "val", sample_size=128)
    a = list(batch_iter(ds, 8, RngStream(5)))
    b = list(batch_iter(ds, 8, RngStream(5)))
    c = list(batch_iter(ds, 8, RngStream(6)))
    assert all(np.array_equal(x.indices, y.indices) and np.array_equal(x.images, y.images) for x, y in zip(a, b))
    assert any(not np.array_equal(x.indices, y.indices) for x, y in zip(a, c))
    assert a[0].images.shape == (8, 24, 24, 3) and a[0].images.dtype == np.float32
    assert 0.0 <= a[0].images.min() and a[0].images.max() <= 1.0


def test_batch_iter_errors():
    ds = PairedDataset.from_arrays([np.zeros((4, 3))] * 3, [0, 1, 0])
    with pytest.raises(ParameterError):
        list(batch_iter(ds, 0, RngStream(0)))
    with pytest.raises(ParameterError):
        list(batch_iter(ds, 2))
    with pytest.raises(ContractError):
        list(batch_iter(PairedDataset.from_arrays([], np.zeros(0, dtype=int), num_classes=1), 2, RngStream(0)))
