import csv
import json

import pytest

from depthforge.cli import COMMANDS, main
from depthforge.io_store import load_manifest, read_depthmap, read_pointcloud_ply
from depthforge.shapes import box, icosphere


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(err):
    return json.loads(err.strip().splitlines()[-1])


def write_obj(mesh, path):
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    path.write_text("\n".join(lines) + "\n")


@pytest.fixture(scope="module")
def meshes(tmp_path_factory):
    root = tmp_path_factory.mktemp("meshes")
    write_obj(box((1.0, 1.0, 1.0), 1), root / "cube.obj")
    write_obj(icosphere(2), root / "ball.obj")
    write_obj(box((0.8, 0.4, 0.6), 2), root / "slab.obj")
    return root


@pytest.fixture(scope="module")
def trained(meshes, tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    data = root / "data"
    for name, cls in (("cube", 0), ("ball", 1), ("slab", 0)):
        assert main(["render", "--mesh", str(meshes / f"{name}.obj"), "--out", str(data), "--res", "16",
                     "--bits", "5", "--class-id", str(cls), "--class-name", name]) == 0
    assert main(["train", "--manifest", str(data / "manifest.csv"), "--out", str(root / "run"), "--batch", "2",
                 "--iters", "2", "--latent", "16", "--channels", "8", "--checkpoint-every", "2",
                 "--class-conditional"]) == 0
    return root, data / "manifest.csv", root / "run" / "ckpt_0000002.dfck"


class TestRender:
    def test_cube_twenty_files(self, capsys, meshes, tmp_path):
        code, out, err = run(capsys, "render", "--mesh", meshes / "cube.obj", "--out", tmp_path, "--res", 64)
        assert code == 0
        files = sorted((tmp_path / "cube").glob("view_*.dfdm"))
        assert len(files) == 20 and all(f.stat().st_size == 4112 for f in files)
        recs = load_manifest(tmp_path / "manifest.csv")
        assert [r.object_id for r in recs] == ["cube"] and len(recs[0].paths) == 20
        assert json.loads(err.splitlines()[0])["config"]["res"] == 64

    def test_rerender_is_identical_and_idempotent(self, capsys, meshes, tmp_path):
        args = ("render", "--mesh", meshes / "ball.obj", "--res", 16, "--bits", 6, "--projection", "persp")
        run(capsys, *args, "--out", tmp_path / "a")
        run(capsys, *args, "--out", tmp_path / "a")
        run(capsys, *args, "--out", tmp_path / "b")
        assert len(load_manifest(tmp_path / "a" / "manifest.csv")) == 1
        for v in range(20):
            name = f"ball/view_{v:02d}.dfdm"
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert read_depthmap(tmp_path / "a" / "ball/view_00.dfdm").projection == "perspective"

    def test_gt_ply(self, capsys, meshes, tmp_path):
        code, _, _ = run(capsys, "render", "--mesh", meshes / "ball.obj", "--out", tmp_path, "--res", 16,
                         "--gt-ply", tmp_path / "gt" / "ball.ply")
        assert code == 0 and len(read_pointcloud_ply(tmp_path / "gt" / "ball.ply").points) > 0

    def test_missing_mesh_is_runtime_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "render", "--mesh", tmp_path / "nope.obj", "--out", tmp_path)
        assert code == 1 and set(last_json(err)) == {"error", "message"}


class TestExitCodes:
    def test_missing_required(self, capsys):
        code, _, err = run(capsys, "render", "--out", "x")
        assert code == 2 and last_json(err)["error"] == "UsageError"

    def test_unknown_flag(self, capsys):
        code, _, err = run(capsys, "render", "--mesh", "a", "--out", "b", "--bogus", "1")
        assert code == 2 and last_json(err)["error"] == "UsageError"

    def test_unknown_command(self, capsys):
        assert run(capsys, "frobnicate")[0] == 2

    def test_bad_choice(self, capsys):
        assert run(capsys, "rig-info", "--projection", "fisheye")[0] == 2

    def test_rig_info(self, capsys):
        code, out, _ = run(capsys, "rig-info")
        assert code == 0 and out.strip()


class TestConfigPrecedence:
    def test_flag_beats_file_beats_default(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"res": 32, "projection": "persp"}))
        _, _, err = run(capsys, "rig-info", "--config", cfg, "--res", 16)
        resolved = json.loads(err.splitlines()[0])["config"]
        assert resolved["res"] == 16 and resolved["projection"] == "persp" and resolved["seed"] == 0

    def test_unknown_config_key(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"resolution": 32}))
        assert run(capsys, "rig-info", "--config", cfg)[0] == 2

    def test_help_lists_every_flag_with_defaults(self, capsys):
        for name, (_, opts) in COMMANDS.items():
            assert main([name, "--help"]) == 0
            out = capsys.readouterr().out
            for o in opts:
                assert o.flag in out, (name, o.flag)
            assert "--seed" in out and "(default:" in out
        assert main(["train", "--help"]) == 0
        out = " ".join(capsys.readouterr().out.split())
        assert "(default: 0.004)" in out and "(default: 0.99)" in out


class TestEval:
    def test_identical_dirs_all_zero(self, capsys, meshes, tmp_path):
        run(capsys, "render", "--mesh", meshes / "ball.obj", "--out", tmp_path / "r", "--res", 16,
            "--gt-ply", tmp_path / "gt" / "ball.ply")
        run(capsys, "render", "--mesh", meshes / "cube.obj", "--out", tmp_path / "r", "--res", 16,
            "--gt-ply", tmp_path / "gt" / "cube.ply")
        code, out, _ = run(capsys, "eval", "--pred", tmp_path / "gt", "--gt", tmp_path / "gt",
                           "--cd-samples", 500, "--emd-samples", 50, "--csv", tmp_path / "m.csv")
        assert code == 0
        with open(tmp_path / "m.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["shape"] for r in rows] == ["ball.ply", "cube.ply"]
        assert all(float(r["cd"]) == 0.0 and float(r["emd"]) == 0.0 for r in rows)
        assert "CD" in out

    def test_mismatched_sets(self, capsys, tmp_path):
        (tmp_path / "p").mkdir()
        (tmp_path / "g").mkdir()
        (tmp_path / "g" / "x.ply").write_text("")
        assert run(capsys, "eval", "--pred", tmp_path / "p", "--gt", tmp_path / "g")[0] == 1


class TestPipeline:
    def test_checkpoint_written(self, trained):
        root, _, ck = trained
        assert ck.is_file() and (root / "run" / "loss.csv").is_file()

    def test_reconstruct_single_view(self, capsys, trained, tmp_path):
        root, manifest, ck = trained
        view = load_manifest(manifest)[0].paths[3]
        code, _, _ = run(capsys, "reconstruct", "--checkpoint", ck, "--input", view, "--class", "cube",
                         "--out", tmp_path, "--name", "cube")
        assert code == 0 and (tmp_path / "cube.ply").is_file()
        assert len(list(tmp_path.glob("view_*.dfdm"))) == 20

    def test_interpolate_ten_steps(self, capsys, trained, tmp_path):
        _, manifest, ck = trained
        code, _, _ = run(capsys, "interpolate", "--checkpoint", ck, "--manifest", manifest, "--a", "cube",
                         "--b", "slab", "--steps", 10, "--out", tmp_path)
        assert code == 0
        assert sorted(p.name for p in tmp_path.glob("*.ply")) == [f"step_{i:02d}.ply" for i in range(10)]

    def test_interpolate_rejects_one_step(self, capsys, trained, tmp_path):
        _, manifest, ck = trained
        assert run(capsys, "interpolate", "--checkpoint", ck, "--manifest", manifest, "--a", "cube",
                   "--b", "ball", "--steps", 1, "--out", tmp_path)[0] == 1

    def test_imle_and_sample(self, capsys, trained, tmp_path):
        _, manifest, ck = trained
        code, out, _ = run(capsys, "imle-train", "--checkpoint", ck, "--manifest", manifest, "--out", tmp_path,
                           "--epochs", 3, "--class", "cube")
        assert code == 0 and (tmp_path / "identities_000.dfid").is_file()
        model = tmp_path / "imle_000.dfck"
        for sub in ("s1", "s2"):
            assert run(capsys, "sample", "--imle", model, "--n", 2, "--out", tmp_path / sub, "--seed", 7)[0] == 0
        for k in range(2):
            name = f"sample_{k:03d}.ply"
            assert (tmp_path / "s1" / name).read_bytes() == (tmp_path / "s2" / name).read_bytes()

    def test_export_embeddings(self, capsys, trained, tmp_path):
        _, _, ck = trained
        assert run(capsys, "export-embeddings", "--checkpoint", ck, "--out", tmp_path / "e.csv")[0] == 0
        with open(tmp_path / "e.csv") as fh:
            rows = list(csv.reader(fh))
        assert [r[0] for r in rows] == ["cube", "ball"] and len({len(r) for r in rows}) == 1


def test_ablate_bits_csv_is_reproducible(capsys, tmp_path):
    args = ("ablate", "--axis", "bits", "--values", "5,8", "--iters", 1, "--cd-samples", 100, "--emd-samples", 20)
    assert run(capsys, *args, "--out", tmp_path / "a.csv")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b.csv")[0] == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    with open(tmp_path / "a.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["precision", "quant_bound", "mode", "cd_mean", "cd_median", "emd"]
    assert [(r["precision"], r["mode"]) for r in rows] == [("5", "recon"), ("5", "svr"), ("8", "recon"), ("8", "svr")]
    assert float(rows[0]["quant_bound"]) > float(rows[2]["quant_bound"])


def test_ablate_bad_axis_value(capsys, tmp_path):
    assert run(capsys, "ablate", "--axis", "vin", "--values", "x", "--out", tmp_path / "a.csv")[0] == 2
