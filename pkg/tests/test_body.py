import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from hoikit.body import (
    ALL_PARTS, BodyFormatError, JointCountError, PartName, Pose, SkinnedBody, WeightNormalizationError,
    animate_scene, attach_object_joint, body_from_dict, body_to_dict, bundled_body_path, load_body,
    load_pose_sequence, pose_body, posed_joints, save_body, save_pose_sequence, transfer_weights,
)
from hoikit.fixtures import make_sphere, make_test_body, random_pose, random_rotation
from hoikit.mesh import TriMesh
from hoikit.registration import Similarity7DoF, apply_similarity
from conftest import validate
from oracles import brute_nearest, chain_transforms, lbs_loop


@pytest.fixture(scope="module")
def body():
    return load_body(bundled_body_path())


def two_joint_body():
    # one vertex fully on joint 1, pivot at (1, 0, 0)
    return SkinnedBody([[2.0, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2]], [[0, 0, 0], [1, 0, 0]], [-1, 0],
                       [[0, 1], [1, 0], [1, 0]], ["right_hand", "torso", "torso"])


class TestTemplate:
    def test_bundled(self, body):
        assert body.n_joints == 16 and body.n_vertices == 400
        assert set(body.part_labels) == set(ALL_PARTS)
        assert np.abs(body.weights.sum(axis=1) - 1).max() <= 1e-6
        validate(json.loads(bundled_body_path().read_text()), "body")

    def test_bundled_matches_generator(self, body):
        fresh = make_test_body()
        assert np.array_equal(fresh.rest_vertices, body.rest_vertices)
        assert np.allclose(fresh.weights, body.weights, atol=1e-12)

    def test_unnormalized_row(self, body):
        d = body_to_dict(body)
        d["weights"][5] = [[0, 0.8]]
        with pytest.raises(WeightNormalizationError):
            body_from_dict(d)

    def test_small_drift_renormalized(self, body):
        d = body_to_dict(body)
        d["weights"][5] = [[0, 1.00005]]
        assert body_from_dict(d).weights[5].sum() == pytest.approx(1.0, abs=1e-12)

    def test_round_trip(self, tmp_path, body):
        posed = body.with_pose(random_pose(16, np.random.default_rng(0)))
        save_body(posed, tmp_path / "b.json")
        back = load_body(tmp_path / "b.json")
        assert np.abs(back.rest_vertices - posed.rest_vertices).max() <= 1e-6
        assert np.abs(back.weights - posed.weights).max() <= 1e-6
        assert np.allclose(back.pose_theta.rotations, posed.pose_theta.rotations)
        validate(json.loads((tmp_path / "b.json").read_text()), "body")

    @pytest.mark.parametrize("parents", [[0, 0], [-1, 5], [-1, 2, 1]])
    def test_bad_tree(self, parents):
        n = len(parents)
        with pytest.raises(BodyFormatError):
            SkinnedBody([[0, 0, 0]], [], np.zeros((n, 3)), parents, [[1] + [0] * (n - 1)], ["torso"])

    def test_negative_weight(self):
        with pytest.raises(BodyFormatError):
            SkinnedBody([[0, 0, 0]], [], np.zeros((2, 3)), [-1, 0], [[1.5, -0.5]], ["torso"])

    def test_unknown_part(self):
        with pytest.raises(BodyFormatError):
            SkinnedBody([[0, 0, 0]], [], np.zeros((1, 3)), [-1], [[1.0]], ["tail"])

    def test_pose_sequence_file(self, tmp_path):
        poses = [Pose.identity(16), random_pose(16, np.random.default_rng(1))]
        save_pose_sequence(poses, tmp_path / "p.json")
        validate(json.loads((tmp_path / "p.json").read_text()), "poses")
        back = load_pose_sequence(tmp_path / "p.json")
        assert np.array_equal(back[1].rotations, poses[1].rotations)


class TestLBS:
    def test_identity_is_exact(self, body):
        assert np.array_equal(pose_body(body, Pose.identity(16)).vertices, body.rest_vertices)

    def test_identity_through_kinematics(self, body):
        # tiny nonzero translation defeats the shortcut; result must stay within 1e-6
        out = pose_body(body, Pose(np.zeros((16, 3)), [1e-12, 0, 0]))
        assert np.abs(out.vertices - body.rest_vertices).max() <= 1e-6

    def test_single_weight_rigid(self):
        b = two_joint_body()
        rot = np.zeros((2, 3))
        rot[1] = [0, 0, np.pi / 2]
        out = pose_body(b, Pose(rot))
        assert out.vertices[0] == pytest.approx([1.0, 1.0, 0.0], abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_chain_oracle(self, body, seed):
        pose = random_pose(16, np.random.default_rng(seed), 0.8, 0.3)
        got = pose_body(body, pose).vertices
        want = lbs_loop(body.rest_vertices, body.joints, body.parents, body.weights,
                        pose.rotations, pose.root_translation)
        assert np.abs(got - want).max() <= 1e-6

    def test_wrong_joint_count(self, body):
        with pytest.raises(JointCountError):
            pose_body(body, Pose.identity(15))


class TestTransfer:
    def test_identical_scan(self, body):
        w, parts = transfer_weights(body.rest_mesh(), body)
        assert np.array_equal(w, body.weights)
        assert parts == list(body.part_labels)

    def test_tie_goes_to_lower_index(self):
        b = two_joint_body()
        scan = TriMesh([[0, 0.5, 0.5]], np.zeros((0, 3), int))  # equidistant to vertices 1 and 2
        w, parts = transfer_weights(scan, b)
        assert np.array_equal(w[0], b.weights[1])

    def test_brute_force(self, body):
        rng = np.random.default_rng(3)
        scan = TriMesh(body.rest_vertices[rng.integers(0, 400, 500)] + rng.normal(0, 0.02, (500, 3)),
                       np.zeros((0, 3), int))
        w, parts = transfer_weights(scan, body)
        for k in range(500):
            j, _ = brute_nearest(body.rest_vertices, scan.vertices[k])
            assert np.array_equal(w[k], body.weights[j]) and parts[k] == body.part_labels[j]
        assert np.abs(w.sum(axis=1) - 1).max() <= 1e-6


class TestAttach:
    def test_centered_on_joint(self, body):
        assert attach_object_joint(make_sphere(body.joints[7], 0.02, 30), body) == 7

    def test_tie_lowest_index(self):
        joints = np.full((10, 3), 50.0)
        joints[3] = [0, 0, 0]
        joints[9] = [2, 0, 0]
        b = SkinnedBody([[0, 0, 0]], [], joints, [-1] + [0] * 9, [[1] + [0] * 9], ["torso"])
        # joint 9 is nearer by 8e-7 m, inside the 1e-6 m tie window
        obj = TriMesh([[1.0 + 4e-7, 0, 0]], np.zeros((0, 3), int))
        assert attach_object_joint(obj, b) == 3
        far = TriMesh([[1.0 + 4e-6, 0, 0]], np.zeros((0, 3), int))
        assert attach_object_joint(far, b) == 9

    def test_brute_force(self, body):
        rng = np.random.default_rng(5)
        for _ in range(10):
            obj = make_sphere(rng.uniform(-1, 2, 3), 0.1, 40)
            d = [min(np.linalg.norm(obj.vertices - j, axis=1)) for j in body.joints]
            assert attach_object_joint(obj, body) == int(np.argmin(d))

    def test_rigid_invariance(self, body):
        rng = np.random.default_rng(6)
        obj = make_sphere([-0.9, 1.4, 0.1], 0.05, 40)
        before = attach_object_joint(obj, body)
        R = Rotation.from_rotvec(rng.normal(size=3)).as_matrix()
        t = rng.normal(size=3)
        moved = SkinnedBody(body.rest_vertices @ R.T + t, body.faces, body.joints @ R.T + t, body.parents,
                            body.weights, body.part_labels)
        assert attach_object_joint(obj.with_vertices(obj.vertices @ R.T + t), moved) == before


class TestAnimate:
    def scene(self, body, align):
        obj = make_sphere([-0.95, 1.45, 0.0], 0.06, 60)  # near the right wrist
        human = apply_similarity(align, body.rest_mesh())
        obj_m = apply_similarity(align, obj)
        w, _ = transfer_weights(apply_similarity(align.inverse(), human), body)
        return human, obj_m, w, obj

    def test_identity_frame(self, body):
        align = Similarity7DoF(1.3, random_rotation(np.random.default_rng(0), 40), [0.5, -0.2, 1.0])
        human, obj, w, _ = self.scene(body, align)
        (h, o), = animate_scene(human, w, obj, body, [Pose.identity(16)], align)
        assert np.abs(h.vertices - human.vertices).max() <= 1e-6
        assert np.abs(o.vertices - obj.vertices).max() <= 1e-6
        assert np.array_equal(h.faces, human.faces)

    def test_rigid_orbit(self, body):
        align = Similarity7DoF.identity()
        human, obj, w, _ = self.scene(body, align)
        j = attach_object_joint(obj, body)
        rot = np.zeros((16, 3))
        rot[j] = [0, 0, np.radians(30)]
        (_, o), = animate_scene(human, w, obj, body, [Pose(rot)], align)
        pivot = posed_joints(body, Pose(rot))[j]
        r0 = np.linalg.norm(obj.vertices.mean(axis=0) - body.joints[j])
        assert np.linalg.norm(o.vertices.mean(axis=0) - pivot) == pytest.approx(r0, abs=1e-6)

    def test_compositional_oracle(self, body):
        align = Similarity7DoF(0.8, random_rotation(np.random.default_rng(2), 60), [1.0, 0.0, -2.0])
        human, obj, w, obj_body = self.scene(body, align)
        rng = np.random.default_rng(9)
        poses = [random_pose(16, rng, 0.5, 0.1) for _ in range(2)]
        frames = animate_scene(human, w, obj, body, poses, align)
        j = int(np.argmin([np.linalg.norm(obj_body.vertices - p, axis=1).min() for p in body.joints]))
        for pose, (h, o) in zip(poses, frames):
            want_h = align.apply_points(lbs_loop(body.rest_vertices, body.joints, body.parents, body.weights,
                                                 pose.rotations, pose.root_translation))
            m = chain_transforms(body.joints, body.parents, pose.rotations, pose.root_translation)[j]
            want_o = align.apply_points(obj_body.vertices @ m[:3, :3].T + m[:3, 3])
            assert np.abs(h.vertices - want_h).max() <= 1e-6
            assert np.abs(o.vertices - want_o).max() <= 1e-6

    def test_fitted_pose_is_unposed_first(self, body):
        # a body fitted at a non-rest pose: animating to that same pose reproduces the input
        fitted = random_pose(16, np.random.default_rng(4), 0.4, 0.05)
        posed_body = body.with_pose(fitted)
        align = Similarity7DoF.identity()
        human = posed_body.posed_mesh()
        w, _ = transfer_weights(human, posed_body)
        obj = make_sphere([-0.9, 1.5, 0.1], 0.05, 30)
        (h, o), = animate_scene(human, w, obj, posed_body, [fitted], align)
        assert np.abs(h.vertices - human.vertices).max() <= 1e-6
        assert np.abs(o.vertices - obj.vertices).max() <= 1e-6

    def test_joint_count_mismatch(self, body):
        align = Similarity7DoF.identity()
        human, obj, w, _ = self.scene(body, align)
        with pytest.raises(JointCountError):
            animate_scene(human, w, obj, body, [Pose.identity(3)], align)


def test_part_names_are_snake_case():
    assert all(p.value == p.value.lower() and " " not in p.value for p in PartName)
    assert len(ALL_PARTS) == 15
