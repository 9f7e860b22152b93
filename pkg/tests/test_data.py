import hashlib

import numpy as np
import pytest
from PIL import Image

from e2caps.attention import attention_from_landmarks, normalize_landmarks, read_landmarks
from e2caps import data as D
from e2caps.data import DataError, SyntheticFaceParams


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generation_is_byte_identical(tmp_path):
    params = SyntheticFaceParams(samples_per_class=3, image_size=32)
    D.generate_synthetic_dataset(params, 5, tmp_path / "a")
    D.generate_synthetic_dataset(params, 5, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    D.generate_synthetic_dataset(params, 6, tmp_path / "c")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_noise_free_same_geometry_same_image():
    params = SyntheticFaceParams(noise=0.0)
    g = D.sample_geometry(params, 1, np.random.default_rng(0))
    np.testing.assert_array_equal(D.render_face(g, 64), D.render_face(dict(g), 64))


def test_default_manifest_size(default_dataset):
    assert len(default_dataset) == 1000
    assert default_dataset.classes == ["neutral", "smile", "frown", "surprise"]
    assert np.bincount(default_dataset.labels).tolist() == [250] * 4


def test_manifest_round_trip(small_dataset):
    again = D.read_manifest(small_dataset.root)
    assert again.records == small_dataset.records
    assert again.classes == small_dataset.classes
    text = (small_dataset.root / "manifest.csv").read_text().splitlines()
    assert text[0] == "# classes=neutral,smile,frown,surprise"
    assert text[2] == "id,image_path,landmark_path,label"


def test_manifest_missing_file_rejected(tmp_path, small_dataset):
    m = D.DatasetManifest(tmp_path, small_dataset.classes,
                          [D.Record("x", "nope.png", "nope.txt", 0)])
    D.write_manifest(m)
    with pytest.raises(DataError, match="record x"):
        D.read_manifest(tmp_path)


def test_landmark_files_parse_and_give_attention(small_dataset):
    for i in range(len(small_dataset)):
        s = D.load_sample(small_dataset, i)
        assert len(s.landmarks.points) == 13
        amap = attention_from_landmarks(s.landmarks)
        assert amap.grid.max() == 1.0 and not amap.dropped


def test_sample_landmarks_match_stored(small_dataset):
    r = small_dataset.records[2]
    pts, il, ir = read_landmarks(small_dataset.root / r.landmarks)
    s = D.load_sample(small_dataset, 2)
    np.testing.assert_allclose(s.landmarks.points, normalize_landmarks(pts, 32, 32, il, ir).points)
    assert (s.landmarks.inner_left, s.landmarks.inner_right) == (1, 2)
    assert s.image.shape == (3, 32, 32) and s.image.dtype == np.float32
    assert s.id == r.id and s.label == r.label


def test_pixel_scaling_and_resize(tmp_path):
    Image.fromarray(np.full((64, 64, 3), 255, np.uint8)).save(tmp_path / "w.png")
    img = D.load_image(tmp_path / "w.png", 32)
    assert img.shape == (3, 32, 32) and np.all(img == 1.0)
    Image.fromarray(np.full((64, 64, 3), 100, np.uint8)).save(tmp_path / "g.png")
    np.testing.assert_allclose(D.load_image(tmp_path / "g.png", 32), 100 / 255, atol=1e-7)


def test_corrupt_image_names_record(tmp_path, small_dataset):
    import shutil
    root = tmp_path / "copy"
    shutil.copytree(small_dataset.root, root)
    m = D.read_manifest(root)
    (root / m.records[1].image).write_bytes(b"not a png")
    with pytest.raises(DataError, match=m.records[1].id):
        D.load_sample(m, 1)


def test_split_stratified_800_200(default_dataset):
    tr, te = D.split(default_dataset, 0.8, 0)
    assert len(tr) == 800 and len(te) == 200
    lab = {r.id: r.label for r in default_dataset.records}
    assert np.bincount([lab[i] for i in te]).tolist() == [50] * 4


@pytest.mark.parametrize("seed", range(5))
def test_split_disjoint_exhaustive_deterministic(small_dataset, seed):
    tr, te = D.split(small_dataset, 0.5, seed)
    assert not set(tr) & set(te)
    assert set(tr) | set(te) == {r.id for r in small_dataset.records}
    assert (tr, te) == D.split(small_dataset, 0.5, seed)


def test_split_seed_changes_split(default_dataset):
    assert D.split(default_dataset, 0.8, 0) != D.split(default_dataset, 0.8, 1)


def test_split_errors(small_dataset):
    with pytest.raises(DataError):
        D.split(small_dataset, 1.0, 0)
    tiny = D.DatasetManifest(small_dataset.root, ["a", "b"],
                             [D.Record("1", "", "", 0), D.Record("2", "", "", 0),
                              D.Record("3", "", "", 1)])
    with pytest.raises(DataError, match="'b'"):
        D.split(tiny, 0.5, 0)


def test_grayscale_target_shapes(rng):
    imgs = rng.uniform(0, 1, (2, 3, 64, 64)).astype(np.float32)
    assert D.grayscale_target(imgs, 64).shape == (2, 4096)
    small = D.grayscale_target(np.full((1, 3, 64, 64), 0.4, np.float32), 32)
    assert small.shape == (1, 1024)
    np.testing.assert_allclose(small, 0.4, atol=1e-6)


def test_classes_differ_in_geometry():
    p = SyntheticFaceParams()
    curv = {k: v for k, v in p.mouth_curvature.items()}
    assert curv["smile"][0] > curv["neutral"][1] and curv["frown"][1] < curv["neutral"][0]
    assert p.eye_openness["surprise"][0] > p.eye_openness["neutral"][1]


def test_raw_pixel_linear_classifier_is_not_perfect(default_arrays):
    """Ridge regression on raw pixels: learnable but not trivially separable."""
    ds, (tr, te) = default_arrays
    X = ds.images.reshape(len(ds), -1).astype(np.float64)
    X = np.hstack([X, np.ones((len(X), 1))])
    Y = np.eye(4)[ds.labels]
    A = X[tr]
    W = np.linalg.solve(A.T @ A + 10.0 * np.eye(A.shape[1]), A.T @ Y[tr])
    acc = (np.argmax(X[te] @ W, axis=1) == ds.labels[te]).mean()
    assert 0.4 < acc < 1.0


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError):
        D.generate_synthetic_dataset(SyntheticFaceParams(samples_per_class=1), 0, blocker / "sub")
