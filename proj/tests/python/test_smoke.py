import json
import math

import numpy as np
import pytest

import ddrvlad


def write_dataset(root, name, seed, classes=4, per_class=4, shape=(4, 4, 32)):
    rng = np.random.default_rng(seed)
    (root / "maps").mkdir(parents=True)
    entries = []
    for c in range(classes):
        source = rng.normal(size=shape)
        for i in range(per_class):
            image_id = f"{name}_c{c}_i{i}"
            fmap = (source + 0.1 * rng.normal(size=shape)).astype(np.float32)
            ddrvlad.write_tensor(str(root / "maps" / f"{image_id}.fmap"), fmap)
            entries.append(
                {"image_id": image_id, "class_id": f"c{c}", "is_query": i == 0,
                 "tensor_path": f"maps/{image_id}.fmap"}
            )
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({"dataset_name": name, "entries": entries}))
    return manifest


def test_tensor_round_trip(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    ddrvlad.write_tensor(str(tmp_path / "a.fmap"), a)
    raw = (tmp_path / "a.fmap").read_bytes()
    assert raw[:8] == b"FMAP\x01\x03\x00\x00"
    assert len(raw) == 8 + 3 * 4 + 24 * 4
    np.testing.assert_array_equal(ddrvlad.read_tensor(str(tmp_path / "a.fmap")), a)


def test_ddr_split_counts_and_root_square():
    fmap = np.random.default_rng(0).normal(size=(8, 8, 1280)).astype(np.float32)
    rows, origin = ddrvlad.ddr_split(fmap, 128, root_square=False)
    assert rows.shape == (640, 128)
    assert origin.shape == (640, 2)
    np.testing.assert_array_equal(rows[11], fmap[0, 1, 128:256])
    normed = ddrvlad.root_square_normalize(rows)
    np.testing.assert_allclose(np.linalg.norm(normed, axis=1), 1.0, atol=1e-12)


def test_kmeans_quantize_vlad():
    rng = np.random.default_rng(1)
    points = rng.normal(size=(500, 4))
    result = ddrvlad.kmeans(points, k=5, seed=2)
    centroids = result["centroids"]
    assert centroids.shape == (5, 4)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(result["objective"], result["objective"][1:]))
    labels = ddrvlad.quantize(centroids, points)
    brute = np.argmin(((points[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(labels, brute)
    v = ddrvlad.vlad_encode(points[:50], centroids)
    assert v["values"].shape == (20,)
    assert math.isclose(np.linalg.norm(v["values"]), 1.0, abs_tol=1e-12)
    assert v["stage"] == "l2_final"


def test_locvlad_full_window_equals_vlad():
    rng = np.random.default_rng(3)
    fmap = rng.normal(size=(4, 4, 16)).astype(np.float32)
    rows, _ = ddrvlad.ddr_split(fmap, 8)
    centroids = ddrvlad.kmeans(rows, k=3, seed=0)["centroids"]
    full = ddrvlad.locvlad_encode(fmap, centroids, split_factor=8, central_fraction=1.0)
    np.testing.assert_allclose(full["values"], ddrvlad.vlad_encode(rows, centroids)["values"], atol=1e-15)


def test_whitening_and_index():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(200, 16)) * np.linspace(0.5, 3.0, 16)
    w = ddrvlad.Whitening.fit(x, 8, ridge=0.0)
    y = np.stack([w.project(row) for row in x])
    np.testing.assert_allclose(np.cov(y, rowvar=False, bias=True), np.eye(8), atol=1e-8)
    db = rng.normal(size=(30, 8))
    db /= np.linalg.norm(db, axis=1, keepdims=True)
    ids = [f"d{i}" for i in range(30)]
    index = ddrvlad.Index(db, ids)
    assert len(index) == 30
    hits = index.search(db[5], top_k=3)
    assert hits[0] == ("d5", 0.0)
    assert [h[0] for h in index.search(db[5], exclude_id="d5")].count("d5") == 0
    with pytest.raises(ddrvlad.Error):
        ddrvlad.Index(db * 2, ids)


def test_metrics():
    assert math.isclose(ddrvlad.average_precision(["a", "x", "b", "y"], {"a", "b"}), 5 / 6, abs_tol=1e-12)
    value, per_query = ddrvlad.mean_ap({"q1": ["a", "b"], "q2": ["a", "b"]}, {"q1": {"a"}, "q2": {"b"}})
    assert value == 0.75
    assert per_query == [("q1", 1.0), ("q2", 0.5)]
    assert ddrvlad.ukb_score({"q": ["q", "o", "s", "t"]}, {"q": {"q", "s", "t", "u"}}) == 3.0


def test_pipeline_end_to_end(tmp_path):
    vocab = write_dataset(tmp_path / "vocab", "vocab", 1)
    evaluation = write_dataset(tmp_path / "eval", "eval", 2)
    cfg = ddrvlad.make_config(split_factor=8, k=8, pca_dim=12, vocabulary_manifest=str(vocab),
                              eval_manifest=str(evaluation), run_dir=str(tmp_path / "run"))
    first = ddrvlad.run_pipeline(cfg)
    assert first["report"]["dataset"] == "eval"
    assert first["report"]["mAP"] > 0.9
    second = ddrvlad.run_pipeline(cfg)
    assert second["cache_misses"] == 0
    assert second["report"] == first["report"]
    assert "pca_dim" in ddrvlad.describe_config(cfg)

    cfg.vocabulary_manifest = str(evaluation)
    with pytest.raises(ddrvlad.StageError, match="allow-same-dataset"):
        ddrvlad.run_pipeline(cfg)
