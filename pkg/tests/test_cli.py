import json
import subprocess
import sys
from importlib import resources

import numpy as np
import pytest
from jsonschema import Draft202012Validator
from referencing import Registry, Resource

from spectraforge.calibration import DistortionModel, distort_points, half_diagonal
from spectraforge.cli import main
from spectraforge.hypercube import SpectralCube, load_cube, load_mask_png, save_cube

SMALL_SYNTH = {"input_size": 16, "factor": 4, "bands": 16}
MICRO_NET = {
    "input": [16, 16, 8], "output": [4, 4, 16], "encoder_levels": 2, "encoder_channels": [8, 8, 8],
    "decoder_levels": 1, "decoder_channels": [8, 16],
}


def _schemas():
    root = resources.files("spectraforge").joinpath("schemas")
    docs = {p.name: json.loads(p.read_text()) for p in root.iterdir() if p.name.endswith(".json")}
    registry = Registry().with_resources((name, Resource.from_contents(d)) for name, d in docs.items())
    return docs, registry


SCHEMAS, REGISTRY = _schemas()


def validate(report: dict, name: str) -> None:
    Draft202012Validator(SCHEMAS[name], registry=REGISTRY).validate(report)


def cube_file(path, data, wl, raw=False):
    save_cube(SpectralCube(np.asarray(data, dtype=np.float32), wl, raw), path)
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    (root / "spec.json").write_text(json.dumps(SMALL_SYNTH))
    code = main(["synth", "--spec", str(root / "spec.json"), "--count", "6", "--seed", "3",
                 "--test-count", "2", "--out", str(root / "data"), "--report", str(root / "synth.json")])
    assert code == 0
    return root


class TestSchemas:
    def test_all_schemas_are_valid(self):
        assert len(SCHEMAS) == 8
        for doc in SCHEMAS.values():
            Draft202012Validator.check_schema(doc)


class TestBasics:
    def test_version(self, capsys):
        assert main(["--version"]) == 0
        assert "spectraforge" in capsys.readouterr().out

    def test_no_command(self):
        assert main([]) == 1

    def test_unknown_flag(self, capsys):
        assert main(["info", "--bogus"]) == 1
        assert "error" in capsys.readouterr().err

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "spectraforge", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and out.stdout.startswith("spectraforge")

    def test_missing_file_is_io_error(self, tmp_path):
        assert main(["info", str(tmp_path / "none.hsc")]) == 2

    def test_bad_header_is_validation_error(self, tmp_path, small_cube):
        save_cube(small_cube, tmp_path / "c.hsc")
        (tmp_path / "c.hsc.json").write_text("{}")
        assert main(["info", str(tmp_path / "c.hsc")]) == 1

    def test_threads_flag(self, tmp_path, small_cube, capsys):
        save_cube(small_cube, tmp_path / "c.hsc")
        assert main(["--threads", "1", "info", str(tmp_path / "c.hsc"), "--json"]) == 0
        info = json.loads(capsys.readouterr().out)
        assert (info["width"], info["height"], info["bands"]) == (7, 6, 5)
        assert main(["--threads", "0", "info", str(tmp_path / "c.hsc")]) == 1

    @pytest.mark.parametrize("cmd", [
        ["augment", "--in", "a.hsc", "--gt", "b.hsc", "--out", "o"],
        ["synth", "--count", "3", "--out", "o"],
        ["train", "--manifest", "m.json", "--stage", "pretrain", "--out", "o"],
    ])
    def test_randomized_commands_need_seed(self, cmd, capsys, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert main(cmd) == 1
        assert "--seed" in capsys.readouterr().err


class TestCalibrateCommand:
    def test_flat_and_undistort(self, tmp_path):
        wl = [500.0, 600.0]
        h, w = 40, 50
        model = DistortionModel(-0.1, 0.02, (w - 1) / 2, (h - 1) / 2, half_diagonal(w, h))
        ii, jj = np.meshgrid(np.arange(7), np.arange(5))
        board = np.stack([ii.ravel(), jj.ravel()], 1).astype(float)
        xd, yd = distort_points(model, 4 + 7 * board[:, 0], 4 + 7 * board[:, 1])
        lines = [f"{x} {y} {int(i)} {int(j)}" for x, y, (i, j) in zip(xd, yd, board)]
        (tmp_path / "corners.txt").write_text("\n".join(lines) + "\n")
        cube_file(tmp_path / "raw.hsc", np.full((2, h, w), 0.3), wl)
        cube_file(tmp_path / "white.hsc", np.full((2, h, w), 0.6), wl)
        cube_file(tmp_path / "dark.hsc", np.full((2, h, w), 0.1), wl)
        code = main(["calibrate", "--raw", str(tmp_path / "raw.hsc"), "--white", str(tmp_path / "white.hsc"),
                     "--dark", str(tmp_path / "dark.hsc"), "--corners", str(tmp_path / "corners.txt"),
                     "--pitch", "7", "--out", str(tmp_path / "cal.hsc"), "--mask-out", str(tmp_path / "m.png"),
                     "--report", str(tmp_path / "r.json")])
        assert code == 0
        rep = json.loads((tmp_path / "r.json").read_text())
        validate(rep, "calibrate_report.json")
        assert rep["distortion"]["k1"] == pytest.approx(-0.1, rel=1e-3)
        out = load_cube(tmp_path / "cal.hsc")
        valid = load_mask_png(tmp_path / "m.png").expand(2)
        # ambient light is in both frames: (0.3 - 0.1) / (0.6 - 0.1)
        np.testing.assert_allclose(out.data[valid], 0.4, atol=1e-6)

    def test_dim_mismatch(self, tmp_path):
        cube_file(tmp_path / "raw.hsc", np.zeros((2, 4, 4)), [500.0, 600.0])
        cube_file(tmp_path / "white.hsc", np.ones((2, 5, 4)), [500.0, 600.0])
        assert main(["calibrate", "--raw", str(tmp_path / "raw.hsc"), "--white", str(tmp_path / "white.hsc"),
                     "--out", str(tmp_path / "o.hsc")]) == 1


class TestPipelineCommands:
    def test_mask(self, tmp_path):
        data = np.full((2, 20, 20), 0.2)
        data[1, 5:9, 5:9] = 0.95
        cube_file(tmp_path / "c.hsc", data, [500.0, 600.0])
        code = main(["mask", "--in", str(tmp_path / "c.hsc"), "--mask-out", str(tmp_path / "masks"),
                     "--inpaint-out", str(tmp_path / "fill.hsc"), "--report", str(tmp_path / "r.json")])
        assert code == 0
        rep = json.loads((tmp_path / "r.json").read_text())
        validate(rep, "mask_report.json")
        assert [b["spot_pixels"] for b in rep["bands"]] == [0, 16]
        np.testing.assert_allclose(load_cube(tmp_path / "fill.hsc").data[1, 6, 6], 0.2, atol=1e-6)

    def test_align(self, tmp_path, rng):
        from scipy.ndimage import gaussian_filter

        ref = gaussian_filter(rng.random((30, 30)), 1.5)
        ref = (ref - ref.min()) / np.ptp(ref)
        ours = np.kron(ref[7:19, 5:17], np.ones((2, 2)))
        cube_file(tmp_path / "ref.hsc", ref[None], [660.0])
        cube_file(tmp_path / "ours.hsc", ours[None], [660.0])
        code = main(["align", "--ours", str(tmp_path / "ours.hsc"), "--ref", str(tmp_path / "ref.hsc"),
                     "--factor", "2", "--out-pair", str(tmp_path / "pair"), "--report", str(tmp_path / "r.json")])
        assert code == 0
        rep = json.loads((tmp_path / "r.json").read_text())
        validate(rep, "align_report.json")
        assert rep["offset"] == [7, 5] and abs(rep["score"] - 1.0) < 1e-9
        assert load_cube(tmp_path / "pair/gt.hsc").shape == (12, 12, 1)

    def test_project_and_eval_pair(self, tmp_path, grid299, rng):
        cube_file(tmp_path / "gt.hsc", np.full((299, 3, 3), 0.25), grid299)
        assert main(["project", "--gt", str(tmp_path / "gt.hsc"), "--out", str(tmp_path / "p.hsc")]) == 0
        p = load_cube(tmp_path / "p.hsc")
        assert p.bands == 8
        np.testing.assert_allclose(p.data, 0.25, atol=1e-6)
        cube_file(tmp_path / "pred.hsc", rng.random((299, 3, 3)), grid299)
        code = main(["eval", "--gt", str(tmp_path / "gt.hsc"), "--pred", str(tmp_path / "pred.hsc"),
                     "--report", str(tmp_path / "e.json")])
        assert code == 0
        rep = json.loads((tmp_path / "e.json").read_text())
        validate(rep, "eval_report.json")
        assert 0 < rep["summary"]["angle"] < 1

    def test_eval_mode_conflict(self, tmp_path):
        assert main(["eval", "--gt", "a.hsc", "--manifest", "m.json"]) == 1
        assert main(["eval", "--gt", "a.hsc"]) == 1

    def test_augment(self, tmp_path, rng):
        cube_file(tmp_path / "in.hsc", rng.random((3, 16, 16)), [450.0, 550.0, 650.0])
        cube_file(tmp_path / "gt.hsc", rng.random((4, 4, 4)), [400.0, 600.0, 800.0, 1000.0])
        args = ["augment", "--in", str(tmp_path / "in.hsc"), "--gt", str(tmp_path / "gt.hsc"),
                "--seed", "9", "--count", "2"]
        assert main(args + ["--out", str(tmp_path / "a"), "--report", str(tmp_path / "a.json")]) == 0
        assert main(args + ["--out", str(tmp_path / "b"), "--report", str(tmp_path / "b.json")]) == 0
        rep = json.loads((tmp_path / "a.json").read_text())
        validate(rep, "augment_report.json")
        assert rep == json.loads((tmp_path / "b.json").read_text())
        assert (tmp_path / "a/aug_0001_input.hsc").read_bytes() == (tmp_path / "b/aug_0001_input.hsc").read_bytes()


class TestDatasetCommands:
    def test_synth_report_and_manifest(self, dataset):
        rep = json.loads((dataset / "synth.json").read_text())
        validate(rep, "manifest.json")
        man = json.loads((dataset / "data/manifest.json").read_text())
        validate(man, "manifest.json")
        assert man["split"]["test_count"] == 2 and len(man["samples"]) == 6

    def test_synth_needs_two_samples(self, tmp_path):
        assert main(["synth", "--count", "1", "--seed", "0", "--out", str(tmp_path)]) == 1

    def test_train_resume_and_eval(self, dataset, tmp_path):
        cfg = {"network": MICRO_NET, "pretrain": {"augment": False}, "main": {"lr": 1e-3}}
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        man = str(dataset / "data/manifest.json")
        base = ["train", "--manifest", man, "--config", str(tmp_path / "cfg.json"), "--seed", "4"]
        assert main(base + ["--stage", "pretrain", "--epochs", "2", "--out", str(tmp_path / "pre"),
                            "--report", str(tmp_path / "pre.json")]) == 0
        pre = json.loads((tmp_path / "pre.json").read_text())
        validate(pre, "train_report.json")
        assert len(pre["history"]) == 2 and pre["train"]["augment"] is False

        init = str(tmp_path / "pre/pretrain_epoch00002.ck")
        main_args = base + ["--stage", "main", "--epochs", "4", "--checkpoint-every", "2", "--init", init]
        assert main(main_args + ["--out", str(tmp_path / "m1"), "--report", str(tmp_path / "m1.json")]) == 0
        assert main(main_args + ["--out", str(tmp_path / "m2"), "--report", str(tmp_path / "m2.json"),
                                 "--resume", str(tmp_path / "m1/main_epoch00002.ck")]) == 0
        h1 = json.loads((tmp_path / "m1.json").read_text())["history"]
        h2 = json.loads((tmp_path / "m2.json").read_text())["history"]
        assert h1 == h2

        code = main(["eval", "--manifest", man, "--checkpoint", str(tmp_path / "m1/main_epoch00004.ck"),
                     "--report", str(tmp_path / "ev.json")])
        assert code == 0
        ev = json.loads((tmp_path / "ev.json").read_text())
        validate(ev, "eval_report.json")
        assert len(ev["samples"]) == 2 and "root" in ev["samples"][0]

    def test_train_delta_vs_gt_flag(self, dataset, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"network": MICRO_NET}))
        base = ["train", "--manifest", str(dataset / "data/manifest.json"), "--config", str(tmp_path / "cfg.json"),
                "--stage", "pretrain", "--seed", "3", "--epochs", "1"]
        hist = {}
        for flag in (False, True):
            rep = tmp_path / f"{flag}.json"
            extra = ["--delta-vs-gt"] if flag else []
            assert main(base + extra + ["--out", str(tmp_path / str(flag)), "--report", str(rep)]) == 0
            out = json.loads(rep.read_text())
            assert out["train"]["delta_vs_gt"] is flag
            hist[flag] = out["history"]
        assert hist[False] != hist[True]

    def test_train_bad_config(self, dataset, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"network": {"input": [1]}}))
        code = main(["train", "--manifest", str(dataset / "data/manifest.json"), "--config", str(tmp_path / "cfg.json"),
                     "--stage", "pretrain", "--seed", "1", "--out", str(tmp_path / "o")])
        assert code == 1

    def test_network_config_schema(self):
        from spectraforge.tensornet import NetworkConfig

        validate(NetworkConfig.tiny().to_dict(), "network_config.json")
        validate(NetworkConfig.full().to_dict(), "network_config.json")
