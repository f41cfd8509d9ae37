import numpy as np
import pytest

from pose6d.geometry import CameraIntrinsics, ObjectModel, project_points
from pose6d.gridcodec import CONF, GridSpec, decode_slot_points, encode_targets
from pose6d.pipeline import dataset_anchors
from pose6d.synth import (
    FrustumError, NoiseModel, PlyError, SceneConfig, default_models, frame_rng, generate_dataset,
    load_ply, random_rotation, read_frames_jsonl, read_models_json, sample_pose,
    simulate_prediction, write_frames_jsonl, write_models_json,
)

CUBE_PLY = """ply
format ascii 1.0
comment unit cube
element vertex 8
property float x
property float y
property float z
element face 6
property list uchar int vertex_indices
end_header
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
4 0 3 2 1
4 4 5 6 7
4 0 1 5 4
4 1 2 6 5
4 2 3 7 6
4 3 0 4 7
"""


def config(seed=7, n=20, max_objects=1, K=None):
    K = K or CameraIntrinsics(500.0, 500.0, 208.0, 208.0, 416, 416)
    return SceneConfig(seed=seed, n_frames=n, models=tuple(default_models()), K=K,
                       max_objects=max_objects)


def models_dict():
    return {m.model_id: m for m in default_models()}


class TestSampling:
    def test_seed_determinism(self, K416):
        a = sample_pose(np.random.default_rng(3), K416)
        b = sample_pose(np.random.default_rng(3), K416)
        assert a == b

    def test_rotation_mean(self):
        rng = np.random.default_rng(0)
        n = 10_000
        mean = sum(random_rotation(rng) for _ in range(n)) / n
        # each entry of a uniform rotation has variance 1/3
        assert np.all(np.abs(mean) < 5 * np.sqrt(1 / 3 / n))

    def test_in_frame(self, K416):
        rng = np.random.default_rng(1)
        model = default_models()[0]
        for _ in range(100):
            px = project_points(model.control_points, sample_pose(rng, K416, model=model), K416)
            assert np.all((px >= 0) & (px < 416))

    def test_empty_frustum(self, K416):
        V = np.array([[x, y, z] for x in (-50, 50) for y in (-50, 50) for z in (-50, 50)], dtype=float)
        huge = ObjectModel.from_vertices("huge", 0, V)
        with pytest.raises(FrustumError):
            sample_pose(np.random.default_rng(0), K416, (0.5, 1.5), huge)

    def test_bad_depth_range(self, K416):
        with pytest.raises(ValueError):
            sample_pose(np.random.default_rng(0), K416, (1.0, 0.5))


class TestDataset:
    def test_determinism(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_frames_jsonl(a, generate_dataset(config()))
        write_frames_jsonl(b, generate_dataset(config()))
        assert a.read_bytes() == b.read_bytes()
        write_frames_jsonl(b, generate_dataset(config(seed=8)))
        assert a.read_bytes() != b.read_bytes()

    def test_prefix_stable(self):
        short = generate_dataset(config(n=5))
        long = generate_dataset(config(n=20))
        assert all(s.objects[0].pose == l.objects[0].pose for s, l in zip(short, long))

    def test_single_object(self):
        assert all(len(f.objects) == 1 for f in generate_dataset(config()))

    def test_separation(self):
        cfg = config(n=40, max_objects=3)
        models = models_dict()
        multi = 0
        for f in generate_dataset(cfg):
            c = np.array([p[8] for p in f.points2d(models)])
            multi += len(c) > 1
            for i in range(len(c)):
                for j in range(i):
                    assert np.linalg.norm(c[i] - c[j]) >= cfg.min_separation_px
        assert multi > 0

    def test_round_trip(self, tmp_path):
        frames = generate_dataset(config(n=5, max_objects=2))
        path = tmp_path / "f.jsonl"
        write_frames_jsonl(path, frames)
        back = read_frames_jsonl(path)
        assert [[o.pose for o in f.objects] for f in back] == [[o.pose for o in f.objects] for f in frames]

    def test_models_round_trip(self, tmp_path):
        path = tmp_path / "m.json"
        write_models_json(path, default_models())
        back = read_models_json(path)
        for m in default_models():
            np.testing.assert_array_equal(back[m.model_id].control_points, m.control_points)
            assert back[m.model_id].symmetric == m.symmetric

    def test_bad_frame_line(self, tmp_path):
        path = tmp_path / "f.jsonl"
        path.write_text('{"camera": {}}\n')
        with pytest.raises(ValueError, match=":1:"):
            read_frames_jsonl(path)


class TestSimulation:
    @pytest.fixture
    def setup(self):
        frames = generate_dataset(config(n=30, max_objects=2))
        models = models_dict()
        spec = GridSpec(S=13, A=5, C=3)
        return frames, models, spec, dataset_anchors(frames, models, 5)

    def test_sigma_zero_equals_target(self, setup):
        frames, models, spec, anchors = setup
        for i, f in enumerate(frames):
            sim = simulate_prediction(f, models, spec, anchors, NoiseModel(), frame_rng(0, i))
            target, mask = encode_targets(f, models, spec, anchors)
            np.testing.assert_array_equal(sim.data, target.data)
            assert np.all(sim.data[mask, CONF] == 1.0)

    def test_huge_sigma_zero_confidence(self, setup):
        frames, models, spec, anchors = setup
        checked = 0
        for i, f in enumerate(frames):
            sim = simulate_prediction(f, models, spec, anchors, NoiseModel(sigma_px=1e5), frame_rng(0, i))
            _, mask = encode_targets(f, models, spec, anchors)
            for slot in zip(*np.nonzero(mask)):
                truth = decode_slot_points(encode_targets(f, models, spec, anchors)[0].data[slot],
                                           slot[:2], spec.stride)
                pred = decode_slot_points(sim.data[slot], slot[:2], spec.stride)
                if np.all(np.linalg.norm(pred - truth, axis=1) >= spec.d_th):
                    assert sim.data[slot + (CONF,)] == 0.0
                    checked += 1
                else:
                    # only the clipped centroid can stay within the cutoff
                    assert sim.data[slot + (CONF,)] <= 1 / 9
        assert checked > 0

    def test_neighbor_votes(self, setup):
        frames, models, spec, anchors = setup
        f = frames[0]
        sim = simulate_prediction(f, models, spec, anchors, NoiseModel(sigma_px=1.0, neighbor_votes=3),
                                  frame_rng(0, 0))
        n_votes = int(np.count_nonzero(sim.data[..., CONF] > 0))
        assert len(f.objects) < n_votes <= 4 * len(f.objects)

    def test_frame_rng_reproducible(self, setup):
        frames, models, spec, anchors = setup
        noise = NoiseModel(sigma_px=2.0, class_flip_prob=0.2, neighbor_votes=2)
        a = simulate_prediction(frames[3], models, spec, anchors, noise, frame_rng(9, 3))
        b = simulate_prediction(frames[3], models, spec, anchors, noise, frame_rng(9, 3))
        np.testing.assert_array_equal(a.data, b.data)

    def test_noise_validation(self):
        with pytest.raises(ValueError):
            NoiseModel(sigma_px=-1)
        with pytest.raises(ValueError):
            NoiseModel(conf_mode="magic")


class TestPly:
    def test_cube(self, tmp_path):
        p = tmp_path / "cube.ply"
        p.write_text(CUBE_PLY)
        V, F = load_ply(p)
        assert V.shape == (8, 3) and F.shape == (12, 3)
        V2, _ = load_ply(p, scale=0.001)
        np.testing.assert_allclose(V2, V * 0.001)
        model = ObjectModel.from_vertices("cube", 0, V, F)
        assert model.diameter == pytest.approx(np.sqrt(3))

    def test_binary(self, tmp_path):
        p = tmp_path / "b.ply"
        p.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n")
        with pytest.raises(PlyError, match=":2:"):
            load_ply(p)

    def test_missing_z(self, tmp_path):
        p = tmp_path / "z.ply"
        p.write_text(CUBE_PLY.replace("property float z\n", ""))
        with pytest.raises(PlyError, match="z"):
            load_ply(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.ply"
        p.write_text("\n".join(CUBE_PLY.splitlines()[:15]))
        with pytest.raises(PlyError, match="end of file"):
            load_ply(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.ply"
        p.write_text("off\n")
        with pytest.raises(PlyError, match=":1:"):
            load_ply(p)
