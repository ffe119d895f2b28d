import csv
import json
import os

import numpy as np
import pytest

from fogstat import cli, dataio, dbsfnet, ndtensor as nd
from fogstat.errors import ConfigError


def run(*argv):
    return cli.main(list(argv))


class TestVariantConfig:
    def test_complete(self):
        cfg = cli.variant_config("complete", 64)
        assert cfg.use_statistical and cfg.use_feature_selection

    def test_base_is_visual_only(self):
        assert not cli.variant_config("base", 64).use_statistical

    def test_fs_off(self):
        assert not cli.variant_config("fs_off", 64).use_feature_selection

    def test_block_variant(self):
        assert cli.variant_config("block3", 64).fuse_scales == (3,)

    def test_single_feature_variant(self):
        cfg = cli.variant_config("feat:entropy", 64)
        assert cfg.feature_channels == ("entropy",)
        assert cfg.stat_channels == 1

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError):
            cli.variant_config("bogus", 64)
        with pytest.raises(ConfigError):
            cli.variant_config("feat:bogus", 64)


class TestSynthAndExtract:
    def test_synth_writes_dataset(self, tmp_path):
        out = str(tmp_path / "data")
        assert run("synth", "--events", "4", "--frames", "2", "--size", "32",
                   "--seed", "3", "--out", out) == 0
        manifest = dataio.load_manifest(os.path.join(out, "manifest.json"))
        total = sum(len(v) for v in manifest["splits"].values())
        assert total == 4
        assert os.path.exists(os.path.join(out, "run_config.json"))

    def test_extract_stack(self, synth_dataset, tmp_path):
        data_dir, manifest = synth_dataset
        image = manifest["splits"]["train"][0]["frames"][0]["image"]
        out = str(tmp_path / "feats.ndt")
        assert run("extract", "--input", os.path.join(data_dir, image),
                   "--out", out, "--patch", "5", "--levels", "2,3") == 0
        feats = nd.load_ndt(out)
        assert feats.shape == (8, 32, 32)

    def test_extract_pgm_dump(self, synth_dataset, tmp_path):
        data_dir, manifest = synth_dataset
        image = manifest["splits"]["train"][0]["frames"][0]["image"]
        dump = str(tmp_path / "channels")
        assert run("extract", "--input", os.path.join(data_dir, image),
                   "--out", str(tmp_path / "f.ndt"), "--patch", "5",
                   "--levels", "2", "--dump-pgm", dump) == 0
        assert sorted(os.listdir(dump)) == sorted(
            f"{n}.pgm" for n in
            ("mean", "variance", "homogeneity", "contrast",
             "dissimilarity", "entropy", "energy", "correlation"))

    def test_bad_levels_exit_code(self, synth_dataset, tmp_path, capsys):
        data_dir, manifest = synth_dataset
        image = manifest["splits"]["train"][0]["frames"][0]["image"]
        code = run("extract", "--input", os.path.join(data_dir, image),
                   "--out", str(tmp_path / "f.ndt"), "--levels", "2;3")
        assert code == 2
        assert "error:" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(synth_dataset, tmp_path_factory):
    """One short CLI training run reused by the predict/evaluate tests."""
    data_dir, _ = synth_dataset
    out = str(tmp_path_factory.mktemp("run"))
    mc = tmp_path_factory.mktemp("cfg") / "model.json"
    mc.write_text(json.dumps({"base_channels": 4, "depth": 2,
                              "patch": 5, "levels": [2, 3]}))
    tc = mc.parent / "train.json"
    tc.write_text(json.dumps({"lr0": 0.005, "p_noise": 0, "p_rotate": 0,
                              "p_erase": 0, "eval_every": 10}))
    code = run("train", "--manifest", os.path.join(data_dir, "manifest.json"),
               "--out", out, "--model-config", str(mc),
               "--train-config", str(tc), "--iters", "30", "--batch", "4",
               "--seed", "0")
    assert code == 0
    return data_dir, out


class TestTrainPredictEvaluate:
    def test_training_artifacts(self, trained):
        _, out = trained
        assert os.path.exists(os.path.join(out, "model.fgs"))
        with open(os.path.join(out, "log.csv")) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "lr", "train_loss", "val_loss", "val_csi"]
        assert len(rows) == 31
        with open(os.path.join(out, "run_config.json")) as f:
            recorded = json.load(f)
        assert recorded["train_config"]["total_iters"] == 30
        assert recorded["model_config"]["base_channels"] == 4

    def test_predict_roundtrip(self, trained, synth_dataset, tmp_path):
        data_dir, out = trained
        _, manifest = synth_dataset
        frame = manifest["splits"]["test"][0]["frames"][0]
        mask_out = str(tmp_path / "pred.pgm")
        prob_out = str(tmp_path / "prob.ndt")
        code = run("predict", "--ckpt", os.path.join(out, "model.fgs"),
                   "--input", os.path.join(data_dir, frame["image"]),
                   "--out", mask_out, "--prob", prob_out)
        assert code == 0
        mask = dataio.load_mask(mask_out)
        prob = nd.load_ndt(prob_out)
        assert mask.shape == prob.shape == (32, 32)
        # the saved mask is exactly the thresholded saved probabilities
        assert np.array_equal(mask, (prob >= 0.5).astype(np.uint8))

    def test_evaluate_perfect_prediction(self, synth_dataset, tmp_path):
        data_dir, manifest = synth_dataset
        pred_dir = tmp_path / "pred"
        pred_dir.mkdir()
        for ev in manifest["splits"]["test"]:
            for fr in ev["frames"]:
                mask = dataio.load_mask(os.path.join(data_dir, fr["mask"]))
                stem = fr["image"][:-len(".ppm")]
                dataio.save_mask(str(pred_dir / f"{stem}.pgm"), mask)
        out = str(tmp_path / "report.json")
        assert run("evaluate", "--pred", str(pred_dir),
                   "--truth", data_dir, "--out", out) == 0
        with open(out) as f:
            payload = json.load(f)
        for name in ("precision", "recall", "csi", "miou", "f1", "kappa"):
            assert payload["metrics"][name] == 1.0

    def test_evaluate_detects_corruption(self, synth_dataset, tmp_path):
        # negative control: inverting one mask must drag the scores down
        data_dir, manifest = synth_dataset
        pred_dir = tmp_path / "pred"
        pred_dir.mkdir()
        frames = [fr for ev in manifest["splits"]["test"] for fr in ev["frames"]]
        for i, fr in enumerate(frames):
            mask = dataio.load_mask(os.path.join(data_dir, fr["mask"]))
            if i == 0:
                mask = 1 - mask
            stem = fr["image"][:-len(".ppm")]
            dataio.save_mask(str(pred_dir / f"{stem}.pgm"), mask)
        out = str(tmp_path / "report.json")
        assert run("evaluate", "--pred", str(pred_dir),
                   "--truth", data_dir, "--out", out) == 0
        with open(out) as f:
            payload = json.load(f)
        assert payload["metrics"]["csi"] < 1.0
        assert payload["metrics"]["kappa"] < 1.0

    def test_evaluate_missing_truth_exit_code(self, tmp_path):
        pred_dir = tmp_path / "pred"
        pred_dir.mkdir()
        dataio.save_mask(str(pred_dir / "orphan.pgm"), np.zeros((4, 4), np.uint8))
        empty = tmp_path / "truth"
        empty.mkdir()
        code = run("evaluate", "--pred", str(pred_dir),
                   "--truth", str(empty), "--out", str(tmp_path / "r.json"))
        assert code == 3

    def test_curves_command(self, synth_dataset, tmp_path, rng):
        data_dir, manifest = synth_dataset
        probs_dir = tmp_path / "probs"
        probs_dir.mkdir()
        truth_dir = tmp_path / "truth"
        truth_dir.mkdir()
        for ev in manifest["splits"]["test"]:
            for fr in ev["frames"]:
                mask = dataio.load_mask(os.path.join(data_dir, fr["mask"]))
                stem = fr["image"][:-len(".ppm")]
                # near-perfect probabilities so the AUC is high
                prob = np.clip(mask * 0.9 + rng.uniform(0, 0.1, mask.shape), 0, 1)
                nd.save_ndt(str(probs_dir / f"{stem}.ndt"), prob)
                dataio.save_mask(str(truth_dir / f"{stem}.pgm"), mask)
        out = str(tmp_path / "curve.csv")
        assert run("curves", "--probs", str(probs_dir),
                   "--truth", str(truth_dir), "--points", "21",
                   "--out", out) == 0
        with open(out) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["threshold", "precision", "recall", "tpr", "fpr"]
        assert len(rows) == 23  # 21 points + sentinel + header


class TestAblate:
    def test_two_variants(self, synth_dataset, tmp_path, monkeypatch):
        data_dir, _ = synth_dataset
        out = str(tmp_path / "ablation.csv")
        # shrink the model via the variant geometry: patch the config factory
        orig = cli.variant_config

        def small(name, image_size):
            cfg = orig(name, image_size)
            return dbsfnet.ModelConfig(**{**cfg.to_dict(), "base_channels": 4,
                                          "depth": 2, "patch": 5,
                                          "levels": (2, 3)})
        monkeypatch.setattr(cli, "variant_config", small)
        code = run("ablate", "--manifest", os.path.join(data_dir, "manifest.json"),
                   "--out", out, "--variants", "complete,base",
                   "--iters", "12", "--batch", "4", "--seed", "0")
        assert code == 0
        with open(out) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["variant", "csi", "miou", "f1", "kappa"]
        assert [r[0] for r in rows[1:]] == ["complete", "base"]


class TestSelfcheck:
    def test_selfcheck_passes(self, capsys):
        assert run("selfcheck") == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l]
        assert len(lines) >= 6
        assert all(l.startswith("[PASS]") for l in lines)
