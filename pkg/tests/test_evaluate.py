import numpy as np
import pytest

from mapvae import evaluate as ev
from mapvae.config import desk_config
from mapvae.errors import ConfigError, MapVaeError, SizeError
from mapvae.geometry import PointCloud, load_point_cloud, normalize, synth_shape
from mapvae.model import EncoderParams, MapVae
from mapvae.pipeline import SplitCache
from mapvae.transport import chamfer, emd_exact

SMALL = desk_config(N=16, D_f=16, D_h=16, Z=4, encoder_widths="16", point_channels=8, k=6)


@pytest.fixture(scope="module")
def small_model():
    return MapVae(SMALL, seed=1), EncoderParams.init(SMALL, 0).freeze(), SplitCache()


def small_cloud(kind="box", seed=0, labels=False):
    c = normalize(synth_shape(kind, None, 32, seed))
    return c if labels else PointCloud(c.points)


# ---------------------------------------------------------------- embeddings

def test_embedding_is_max_of_angles(small_model):
    model, enc, cache = small_model
    e = ev.embed_shape(small_cloud(), model, enc, cache=cache)
    assert e.per_angle.shape == (12, 16)
    np.testing.assert_array_equal(e.H, e.per_angle.max(axis=0))
    perm = np.random.default_rng(0).permutation(12)
    np.testing.assert_array_equal(ev.pool_angles(e.per_angle[perm]), e.H)


def test_embedding_single_angle():
    cfg = SMALL.replace(V=1, W=1)
    e = ev.embed_shape(small_cloud(), MapVae(cfg), EncoderParams.init(cfg).freeze(), cfg,
                       SplitCache())
    np.testing.assert_array_equal(e.H, e.per_angle[0])


def test_duplicate_clouds_embed_identically(small_model):
    model, enc, cache = small_model
    c = small_cloud()
    X = ev.embed_dataset([c, PointCloud(c.points.copy())], model, enc, cache=cache)
    np.testing.assert_array_equal(X[0], X[1])


# ---------------------------------------------------------------- probe

def test_probe_separable_toy():
    r = np.random.default_rng(0)
    X = np.concatenate([r.normal(size=(20, 2)) + [4, 0], r.normal(size=(20, 2)) - [4, 0]])
    y = np.repeat([0, 1], 20)
    probe = ev.train_probe(X, y)
    assert ev.accuracy(probe.predict(X), y) == 1.0
    assert ev.classify(probe, [5.0, 0.0]) == 0


def test_hinge_zero_for_confident_points():
    X = np.array([[2.0], [-2.0]])
    T = np.array([[1.0], [-1.0]])
    assert ev.hinge_objective(np.array([[1.0]]), np.zeros(1), X, T, lam=0.0) == 0.0
    assert ev.hinge_objective(np.array([[0.25]]), np.zeros(1), X, T, lam=0.0) == pytest.approx(0.5)


def test_probe_single_class_and_determinism():
    with pytest.raises(ConfigError):
        ev.train_probe(np.zeros((3, 2)), [1, 1, 1])
    X = np.random.default_rng(1).normal(size=(30, 4))
    y = (X[:, 0] > 0).astype(int)
    a, b = ev.train_probe(X, y, seed=3), ev.train_probe(X, y, seed=3)
    assert np.array_equal(a.W, b.W)


# ---------------------------------------------------------------- segmentation pieces

def test_vote_examples():
    assert ev.vote([0, 0, 1, 0, 2]) == 0
    assert ev.vote([2, 0, 0, 1, 1]) == 2       # tie between 0 and 1: nearest label wins
    assert ev.vote([1, 0, 0, 1, 2]) == 1


def test_transfer_coincident_point_votes_own_label():
    gt = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0], [4, 0, 0.]])
    labels = np.array([1, 0, 0, 1, 1])
    out = ev.transfer_labels(gt[:1], gt, labels, k=1)
    assert out.tolist() == [1]
    # k=5 covers every point: majority 1
    assert ev.transfer_labels(gt[:1], gt, labels, k=5).tolist() == [1]


def test_transfer_all_same_labels():
    r = np.random.default_rng(0)
    out = ev.transfer_labels(r.normal(size=(20, 3)), r.normal(size=(30, 3)), np.full(30, 4))
    assert np.all(out == 4)


def test_transfer_deterministic_and_length_check():
    r = np.random.default_rng(2)
    pts, gt, lab = r.normal(size=(10, 3)), r.normal(size=(15, 3)), r.integers(0, 3, 15)
    assert ev.transfer_labels(pts, gt, lab).tolist() == ev.transfer_labels(pts, gt, lab).tolist()
    with pytest.raises(SizeError):
        ev.transfer_labels(pts, gt, lab[:3])


def test_shape_ious():
    pred, truth = np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1])
    np.testing.assert_allclose(ev.shape_ious(pred, truth, [0, 1, 2]), [0.5, 2 / 3, 1.0])


def test_softmax_classifier_separable():
    r = np.random.default_rng(0)
    X = np.concatenate([r.normal(size=(50, 3)) + 3, r.normal(size=(50, 3)) - 3])
    y = np.repeat([0, 1], 50)
    assert ev.accuracy(ev.train_softmax(X, y).predict(X), y) == 1.0


def test_segment_requires_labels(small_model):
    model, enc, cache = small_model
    with pytest.raises(MapVaeError):
        ev.segment([small_cloud()], [small_cloud()], model, enc, cache=cache)


def test_segment_runs_and_bounds(small_model):
    model, enc, cache = small_model
    tr = [small_cloud("two-part-chair", s, labels=True) for s in range(4)]
    te = [small_cloud("two-part-chair", s, labels=True) for s in range(4, 6)]
    rep = ev.segment(tr, te, model, enc, cache=cache)
    for v in (rep.accuracy, rep.miou, rep.baseline_accuracy):
        assert 0 <= v <= 1
    assert len(rep.predictions) == 2 and len(rep.predictions[0]) == 32


# ---------------------------------------------------------------- generation

def test_generate_and_interpolate(small_model):
    model, _, _ = small_model
    z_a, z_b = np.ones(4), -np.ones(4)
    a, b = ev.generate(model, z_a), ev.generate(model, z_a)
    assert len(a) == 32 and np.array_equal(a.points, b.points)
    frames = ev.interpolate(model, z_a, z_b, 5)
    assert frames[0].points.tobytes() == a.points.tobytes()
    assert frames[-1].points.tobytes() == ev.generate(model, z_b).points.tobytes()
    mid = ev.generate(model, 0.5 * z_a + 0.5 * z_b)
    np.testing.assert_allclose(frames[2].points, mid.points, atol=1e-12)
    two = ev.interpolate(model, z_a, z_b, 2)
    assert len(two) == 2 and two[1].points.tobytes() == ev.generate(model, z_b).points.tobytes()
    with pytest.raises(ConfigError):
        ev.interpolate(model, z_a, z_b, 1)
    with pytest.raises(SizeError):
        ev.generate(model, np.zeros(5))
    assert len(ev.generate(model, seed=3)) == 32


# ---------------------------------------------------------------- export

@pytest.mark.parametrize("name", ["c.xyz", "c.ply"])
def test_export_roundtrip(tmp_path, name):
    r = np.random.default_rng(0)
    cloud = PointCloud(r.normal(size=(40, 3)) * 1e-3, r.integers(0, 2, 40))
    ev.export_cloud(cloud, tmp_path / name)
    back = load_point_cloud(tmp_path / name)
    np.testing.assert_allclose(back.points, cloud.points, atol=1e-9, rtol=0)
    assert back.labels.tolist() == cloud.labels.tolist()


def test_export_empty_and_bad_format(tmp_path):
    with pytest.raises(SizeError):
        ev.export_cloud(PointCloud(np.zeros((0, 3))), tmp_path / "e.xyz")
    with pytest.raises(SizeError):
        ev.export_projection(PointCloud(np.zeros((0, 3))), tmp_path / "e.svg")
    with pytest.raises(ConfigError):
        ev.export_cloud(PointCloud(np.zeros((2, 3))), tmp_path / "e.obj", "obj")


def test_projection_of_sphere(tmp_path):
    sphere = normalize(synth_shape("sphere", None, 500, 0))
    xy = ev.project(sphere, "y")
    r = np.linalg.norm(xy, axis=1)
    assert r.max() <= 1 + 1e-9 and r.max() > 0.95
    assert np.mean(r < 0.5) > 0.05   # filled disk, not a ring
    ev.export_projection(sphere, tmp_path / "s.svg")
    text = (tmp_path / "s.svg").read_text()
    assert text.startswith("<svg") and text.count("<circle") == 500


def test_metrics_csv(tmp_path):
    ev.write_metrics_csv([{"a": 1, "b": 2.5}], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines() == ["a,b", "1,2.5"]


# ---------------------------------------------------------------- trained desk model

def test_pretrained_encoder_separates_classes(desk_run):
    enc = desk_run.pretrain.encoders
    data = desk_run.train_set
    F = np.stack([enc.global_encoder.features(c.points) for c in data.inputs])
    D = np.linalg.norm(F[:, None] - F[None], axis=-1)
    same = data.labels[:, None] == data.labels[None]
    off = ~np.eye(len(F), dtype=bool)
    assert D[~same].mean() > D[same & off].mean()


def test_front_and_back_features_differ(desk_run):
    enc, cfg = desk_run.pretrain.encoders, desk_run.cfg
    cloud = desk_run.train_set.inputs[0]
    f, fronts, backs = ev.sample_features(cloud, enc, cfg)
    assert not np.allclose(fronts, backs)
    f2, fronts2, _ = ev.sample_features(cloud, enc, cfg)
    assert np.array_equal(fronts, fronts2)


def class_medoid(clouds):
    """The member with the smallest mean Chamfer distance to the rest of its class."""
    D = np.array([[chamfer(a, b) for b in clouds] for a in clouds])
    return clouds[int(D.mean(axis=1).argmin())]


def test_class_mean_generation(desk_run):
    model, enc, cfg = desk_run.checkpoint.model, desk_run.pretrain.encoders, desk_run.cfg
    data = desk_run.train_set
    classes = np.unique(data.labels)
    latents = np.stack([ev.latent_mean(c, model, enc, cfg) for c in data.inputs])
    medoids = [class_medoid([s.points for s, l in zip(data.inputs, data.labels) if l == k])
               for k in classes]
    for c in classes:
        gen = ev.generate(model, latents[data.labels == c].mean(axis=0)).points
        dist = [chamfer(gen, m) for m in medoids]
        assert int(np.argmin(dist)) == c, dist


def test_completion_of_complete_cloud_is_reconstruction(desk_run):
    model, enc, cfg = desk_run.checkpoint.model, desk_run.pretrain.encoders, desk_run.cfg
    cloud = desk_run.train_set.inputs[0]
    res = ev.complete(model, enc, cloud, cloud, cfg)
    assert res.baseline_per_point == 0.0
    pts, _ = ev.reconstruct_shape(cloud, model, enc, 1, cfg)
    assert res.emd_per_point == pytest.approx(emd_exact(pts, cloud).cost / len(cloud))
