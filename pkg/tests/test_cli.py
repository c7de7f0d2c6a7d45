import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from hoikit.body import Pose, animate_scene, bundled_body_path, load_body, load_pose_sequence, save_pose_sequence, \
    transfer_weights
from hoikit.cli import main
from hoikit.contact import ContactSpec, select_best_candidate
from hoikit.fixtures import make_sphere, two_sphere_scene, write_demo_fixture
from hoikit.mesh import load_mesh, save_mesh
from hoikit.registration import Similarity7DoF, apply_similarity, load_alignment, save_alignment
from hoikit.render import make_trajectory, save_trajectory
from hoikit.segmentation import MaskFrame, render_label_masks, save_mask_frames
from conftest import validate
from scenes import CHAIN_SCHEMAS, candidate_views, demo_chain, write_curation_fixture


def run(argv):
    return main([str(a) for a in argv])


def last_diagnostic(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    fixture = write_demo_fixture(root / "in", n_views=12, n_bands=3, resolution=128)
    for _, argv in demo_chain(fixture, root / "out"):
        assert main(argv) == 0
    return fixture, root / "out"


@pytest.fixture(scope="module")
def body():
    return load_body(bundled_body_path())


def two_sphere_inputs(d, seed=0, views=8, res=96):
    scene = two_sphere_scene(np.random.default_rng(seed), 300, 150)
    box = scene.mesh.aabb()
    traj = make_trajectory(box.center, 1.8 * box.diagonal, views, 2, res, res)
    d.mkdir(parents=True, exist_ok=True)
    save_mesh(scene.mesh, d / "mesh.ply")
    save_trajectory(traj, d / "traj.json")
    masks = render_label_masks(scene.mesh, scene.labels, traj.cameras)
    save_mask_frames(masks, d / "masks")
    return scene, traj, masks


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"tua": 0.5}))
        assert run(["trajectory", "--config", tmp_path / "c.json", "--out", tmp_path]) == 2
        assert "unknown config keys" in last_diagnostic(capsys)["message"]

    @pytest.mark.parametrize("cfg", [{"tau": 1.0}, {"tau": "half"}, {"delta": -1.0}, {"n_views": 0}])
    def test_bad_value(self, tmp_path, cfg, capsys):
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert run(["trajectory", "--config", tmp_path / "c.json", "--center", 0, 0, 0, "--radius", 1,
                    "--out", tmp_path]) == 2
        diag = last_diagnostic(capsys)
        assert diag["exit_code"] == 2 and diag["error"] == "ConfigError"

    def test_bad_flag_value(self, tmp_path):
        assert run(["trajectory", "--tau", "1.5", "--center", 0, 0, 0, "--radius", 1, "--out", tmp_path]) == 2

    def test_usage_error(self):
        assert run(["frobnicate"]) == 2
        assert run([]) == 2

    def test_curate_needs_seed(self, tmp_path):
        manifest, rules = write_curation_fixture(tmp_path, 5)
        assert run(["curate", "--manifest", manifest, "--rules", rules, "--out", tmp_path / "o"]) == 2

    def test_empty_contact_manifest(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("")
        assert run(["contact", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path]) == 2

    def test_nothing_visible(self, tmp_path, capsys):
        mesh = make_sphere((0, 0, 0), 0.5, 60)
        save_mesh(mesh, tmp_path / "m.ply")
        traj = make_trajectory((50, 0, 0), 1.0, 3, 1, 32, 32)
        save_trajectory(traj, tmp_path / "t.json")
        blank = np.zeros((32, 32), bool)
        save_mask_frames([MaskFrame(blank, blank)] * 3, tmp_path / "masks")
        assert run(["segment", "--mesh", tmp_path / "m.ply", "--trajectory", tmp_path / "t.json",
                    "--masks", tmp_path / "masks", "--out", tmp_path / "o"]) == 3
        assert last_diagnostic(capsys)["error"] == "NoVisibleVerticesError"

    def test_corrupt_mesh(self, tmp_path):
        (tmp_path / "bad.ply").write_text("ply\nformat nonsense\n")
        assert run(["trajectory", "--mesh", tmp_path / "bad.ply", "--out", tmp_path]) == 3

    def test_missing_file(self, tmp_path):
        assert run(["trajectory", "--mesh", tmp_path / "nope.obj", "--out", tmp_path]) == 3

    def test_mask_size_mismatch(self, tmp_path):
        two_sphere_inputs(tmp_path, views=4, res=32)
        traj = make_trajectory((0, 0, 0), 3.0, 4, 2, 48, 48)
        save_trajectory(traj, tmp_path / "traj.json")
        assert run(["segment", "--mesh", tmp_path / "mesh.ply", "--trajectory", tmp_path / "traj.json",
                    "--masks", tmp_path / "masks", "--out", tmp_path / "o"]) == 3

    def test_internal_error(self, tmp_path, monkeypatch):
        import hoikit.cli as cli

        def boom(cfg):
            raise AssertionError("invariant broken")
        monkeypatch.setitem(cli.COMMANDS, "trajectory", boom)
        assert run(["trajectory", "--out", tmp_path]) == 4

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "hoikit", "trajectory", "--center", "0", "0", "0",
                               "--radius", "2", "--n-views", "6", "--out", str(tmp_path)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        proc = subprocess.run([sys.executable, "-m", "hoikit", "trajectory", "--out", str(tmp_path)],
                              capture_output=True, text=True)
        assert proc.returncode == 2
        json.loads(proc.stderr.strip().splitlines()[-1])


class TestTrajectory:
    def test_defaults(self, tmp_path):
        assert run(["trajectory", "--center", 0, 1, 0, "--radius", 3, "--out", tmp_path]) == 0
        d = json.loads((tmp_path / "trajectory.json").read_text())
        validate(d, "trajectory")
        assert len(d["cameras"]) == 120

    def test_single_view(self, tmp_path):
        assert run(["trajectory", "--center", 0, 1, 0, "--radius", 3, "--n-views", 1, "--out", tmp_path]) == 0
        assert len(json.loads((tmp_path / "trajectory.json").read_text())["cameras"]) == 1

    def test_config_file_and_override(self, tmp_path):
        sub = tmp_path / "cfg"
        sub.mkdir()
        save_mesh(make_sphere((0, 0, 0), 1, 50), sub / "m.ply")
        (sub / "c.json").write_text(json.dumps({"mesh": "m.ply", "n_views": 10, "output_dir": "out"}))
        assert run(["trajectory", "--config", sub / "c.json", "--n-views", 7]) == 0
        assert len(json.loads((sub / "out" / "trajectory.json").read_text())["cameras"]) == 7


class TestSegment:
    def test_accuracy_and_rerun(self, tmp_path):
        scene, _, _ = two_sphere_inputs(tmp_path / "in", seed=5)
        args = ["segment", "--mesh", tmp_path / "in" / "mesh.ply", "--trajectory", tmp_path / "in" / "traj.json",
                "--masks", tmp_path / "in" / "masks"]
        assert run(args + ["--out", tmp_path / "a", "--dump-depth"]) == 0
        assert run(args + ["--out", tmp_path / "b", "--threads", 3]) == 0
        labels = json.loads((tmp_path / "a" / "labels.json").read_text())
        validate(labels, "labels")
        assert np.mean(np.array(labels["labels"]) == scene.labels) >= 0.99
        for name in ("human.ply", "object.ply", "labels.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert len(list((tmp_path / "a" / "depth").glob("*.pfm"))) == 8

    def test_black_object_masks(self, tmp_path):
        _, _, masks = two_sphere_inputs(tmp_path / "in", seed=6, views=4, res=64)
        black = [MaskFrame(m.human_mask | m.object_mask, np.zeros_like(m.object_mask)) for m in masks]
        save_mask_frames(black, tmp_path / "in" / "masks")
        assert run(["segment", "--mesh", tmp_path / "in" / "mesh.ply", "--trajectory", tmp_path / "in" / "traj.json",
                    "--masks", tmp_path / "in" / "masks", "--out", tmp_path / "o"]) == 0
        assert load_mesh(tmp_path / "o" / "object.ply").n_vertices == 0


class TestRegister:
    def test_self_registration(self, tmp_path, body):
        save_mesh(body.rest_mesh(), tmp_path / "h.ply")
        assert run(["register", "--human-mesh", tmp_path / "h.ply", "--body", bundled_body_path(),
                    "--out", tmp_path]) == 0
        rep = json.loads((tmp_path / "registration.json").read_text())
        validate(rep, "registration_report")
        assert rep["chamfer_human_to_body_m"] <= 1e-6 and not rep["partial_subset"]
        a = json.loads((tmp_path / "alignment.json").read_text())
        validate(a, "alignment")
        assert {"camhmr_to_mesh", "mesh_to_camhmr"} <= set(a)

    def test_planted_transform(self, tmp_path, body):
        truth = Similarity7DoF(1.4, [0.98, 0.1, -0.15, 0.05], [0.3, -0.2, 0.5])
        save_mesh(apply_similarity(truth, body.rest_mesh()), tmp_path / "h.ply")
        assert run(["register", "--human-mesh", tmp_path / "h.ply", "--body", bundled_body_path(),
                    "--out", tmp_path]) == 0
        rep = json.loads((tmp_path / "registration.json").read_text())
        assert rep["chamfer_human_to_body_m"] <= 1e-3 * body.rest_mesh().aabb().diagonal * 1.4
        assert rep["chamfer_human_to_body"].endswith("cm")

    def test_partial_scan(self, tmp_path, body):
        m = body.rest_mesh()
        keep = m.vertices[:, 1] > 0.9
        upper, _ = m.submesh(np.all(keep[m.faces], axis=1))
        save_mesh(upper, tmp_path / "h.ply")
        assert run(["register", "--human-mesh", tmp_path / "h.ply", "--body", bundled_body_path(),
                    "--out", tmp_path]) == 0
        rep = json.loads((tmp_path / "registration.json").read_text())
        assert rep["partial_subset"] and rep["subset_size"] < body.n_vertices


class TestContact:
    def scene_files(self, d, body, part="right_hand", gap=0.01):
        cand = candidate_views(body, part, [gap])[0]
        save_mesh(cand.body_mesh, d / "body.ply")
        save_mesh(cand.object, d / f"obj_{gap}.ply")
        (d / "parts.json").write_text(json.dumps([p.value for p in cand.part_labels]))
        return cand

    def test_known_contact(self, tmp_path, body):
        self.scene_files(tmp_path, body)
        (tmp_path / "spec.json").write_text(json.dumps({"category": "ball", "parts": ["right_hand"]}))
        assert run(["contact", "--body-mesh", tmp_path / "body.ply", "--part-labels", tmp_path / "parts.json",
                    "--object-mesh", tmp_path / "obj_0.01.ply", "--spec", tmp_path / "spec.json",
                    "--out", tmp_path]) == 0
        rep = json.loads((tmp_path / "contact_report.json").read_text())
        validate(rep, "contact_report")
        assert rep["configuration"] == "right_hand" and rep["satisfied"] is True

    def test_sixty_row_batch(self, tmp_path, body):
        gaps = [0.01, 0.2]
        for g in gaps:
            self.scene_files(tmp_path, body, gap=g)
        lines = [json.dumps({"scene_id": f"p{i:02d}", "spec": {"category": "ball", "parts": ["right_hand"]},
                             "body_mesh": "body.ply", "part_labels": "parts.json",
                             "object_mesh": f"obj_{gaps[i % 2]}.ply"}) for i in range(60)]
        (tmp_path / "m.jsonl").write_text("\n".join(lines) + "\n")
        assert run(["contact", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "o"]) == 0
        with open(tmp_path / "o" / "contact_report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 60 and [r["scene_id"] for r in rows] == [f"p{i:02d}" for i in range(60)]
        assert [r["satisfied"] for r in rows[:2]] == ["1", "0"]
        assert len(rows[0]) == 1 + 15 + 2


class TestAnimate:
    def test_identity_sequence(self, tmp_path, body):
        human = body.rest_mesh()
        obj = make_sphere([-0.95, 1.45, 0.0], 0.06, 40)
        save_mesh(human, tmp_path / "h.ply")
        save_mesh(obj, tmp_path / "o.ply")
        save_alignment(Similarity7DoF.identity(), tmp_path / "a.json")
        save_pose_sequence([Pose.identity(16)] * 2, tmp_path / "p.json")
        assert run(["animate", "--human-mesh", tmp_path / "h.ply", "--object-mesh", tmp_path / "o.ply",
                    "--body", bundled_body_path(), "--alignment", tmp_path / "a.json", "--poses", tmp_path / "p.json",
                    "--out", tmp_path / "out"]) == 0
        meta = json.loads((tmp_path / "out" / "animation.json").read_text())
        validate(meta, "animation")
        assert meta["n_frames"] == 2
        for i in range(2):
            h = load_mesh(tmp_path / "out" / f"frame_{i:04d}_human.ply")
            o = load_mesh(tmp_path / "out" / f"frame_{i:04d}_object.ply")
            assert np.abs(h.vertices - human.vertices).max() <= 1e-6
            assert np.abs(o.vertices - obj.vertices).max() <= 1e-6

    def test_matches_library(self, demo):
        fixture, out = demo
        human = load_mesh(out / "seg" / "human.ply")
        obj = load_mesh(out / "seg" / "object.ply")
        body = load_body(fixture["body"])
        align = load_alignment(out / "reg" / "alignment.json")
        poses = load_pose_sequence(fixture["poses"])
        weights, _ = transfer_weights(apply_similarity(align.inverse(), human), body)
        frames = animate_scene(human, weights, obj, body, poses, align)
        assert len(frames) == len(poses) == 3
        for i, (h, o) in enumerate(frames):
            got_h = load_mesh(out / "anim" / f"frame_{i:04d}_human.ply")
            got_o = load_mesh(out / "anim" / f"frame_{i:04d}_object.ply")
            assert np.abs(got_h.vertices - h.vertices).max() <= 1e-6
            assert np.abs(got_o.vertices - o.vertices).max() <= 1e-6


class TestCurate:
    def test_empty_manifest(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("")
        (tmp_path / "r.json").write_text("{}")
        assert run(["curate", "--manifest", tmp_path / "m.jsonl", "--rules", tmp_path / "r.json", "--seed", 1,
                    "--out", tmp_path / "o"]) == 0
        assert (tmp_path / "o" / "kept_ids.txt").read_text() == ""
        assert (tmp_path / "o" / "rejections.csv").read_text() == "id,reason,detail\n"
        assert all(p.read_text() == "" for p in (tmp_path / "o" / "subsets").glob("*.jsonl"))

    def test_seeded_rerun(self, tmp_path):
        manifest, rules = write_curation_fixture(tmp_path / "in", 40, seed=8)
        for k in range(2):
            assert run(["curate", "--manifest", manifest, "--rules", rules, "--seed", 3, "--n-per-subset", 2,
                        "--out", tmp_path / f"o{k}"]) == 0
        for p in sorted((tmp_path / "o0").rglob("*")):
            if p.is_file():
                assert p.read_bytes() == (tmp_path / "o1" / p.relative_to(tmp_path / "o0")).read_bytes()
        with open(tmp_path / "o0" / "rejections.csv") as fh:
            assert {r["reason"] for r in csv.DictReader(fh)} <= {"PENETRATION", "FLOATING", "ACTION_MISMATCH"}

    def test_bad_rules(self, tmp_path):
        manifest, _ = write_curation_fixture(tmp_path, 3)
        (tmp_path / "r.json").write_text(json.dumps({"kicking": ["elbow"]}))
        assert run(["curate", "--manifest", manifest, "--rules", tmp_path / "r.json", "--seed", 1,
                    "--out", tmp_path / "o"]) == 3


class TestSelect:
    def write_candidates(self, d, body, part, gaps, spec):
        cands = candidate_views(body, part, gaps)
        entries = []
        (d / "parts.json").write_text(json.dumps([p.value for p in body.part_labels]))
        save_mesh(body.rest_mesh(), d / "body.ply")
        for k, c in enumerate(cands):
            save_mesh(c.object, d / f"o{k}.ply")
            entries.append({"body_mesh": "body.ply", "part_labels": "parts.json", "object_mesh": f"o{k}.ply"})
        (d / "c.json").write_text(json.dumps({"candidates": entries, "spec": spec.to_dict()}))
        return cands

    @pytest.mark.parametrize("gaps,want_rule", [([0.2, 0.01, 0.02], "first_satisfier"), ([0.3], "max_part_hits"),
                                                ([0.2, 0.3, 0.25], "max_part_hits")])
    def test_mirrors_library(self, tmp_path, body, capsys, gaps, want_rule):
        spec = ContactSpec("cup", {"left_hand"})
        cands = self.write_candidates(tmp_path, body, "left_hand", gaps, spec)
        assert run(["select", "--candidates", tmp_path / "c.json", "--out", tmp_path]) == 0
        d = json.loads((tmp_path / "select.json").read_text())
        validate(d, "select")
        assert d["index"] == select_best_candidate(cands, spec)
        assert capsys.readouterr().out.strip() == str(d["index"])
        assert d["rule"] == want_rule

    def test_single_candidate(self, tmp_path, body):
        spec = ContactSpec("cup", {"left_hand"})
        self.write_candidates(tmp_path, body, "left_hand", [0.01], spec)
        assert run(["select", "--candidates", tmp_path / "c.json", "--out", tmp_path]) == 0
        assert json.loads((tmp_path / "select.json").read_text())["index"] == 0


class TestDemoChain:
    def test_schemas(self, demo):
        _, out = demo
        for rel, name in CHAIN_SCHEMAS:
            validate(json.loads((out / rel).read_text()), name)

    def test_outcome(self, demo):
        _, out = demo
        rep = json.loads((out / "contact" / "contact_report.json").read_text())
        assert rep["configuration"] == "right_hand" and rep["satisfied"]
        reg = json.loads((out / "reg" / "registration.json").read_text())
        assert reg["chamfer_human_to_body_m"] < 0.01
