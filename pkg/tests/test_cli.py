import json

import numpy as np
import pytest

from madun import cli
from madun.checkpoint import load_checkpoint, save_checkpoint
from madun.cs_ops import build_gaussian_operator
from madun.data import load_image, save_pgm, synthetic_images, write_images
from madun.model import ModelConfig, init_params, zero_weights
from madun.trainer import TrainConfig, Trainer, make_dataset


@pytest.fixture
def corpus(tmp_path):
    write_images(tmp_path / "data", synthetic_images(2, 66, seed=3))
    write_images(tmp_path / "test", synthetic_images(1, 66, seed=4))
    return tmp_path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_selftest(capsys):
    assert run("selftest") == 0
    assert "selftest: 9 passed, 0 failed" in capsys.readouterr().out


def test_usage_errors(capsys):
    assert run("bogus") == 2
    assert run("train", "--no-such-flag") == 2
    assert run() == 2
    assert run("--version") == 0


def test_config_errors_exit_one(corpus, capsys):
    assert run("train", "--out", corpus / "o") == 1
    assert "error: ConfigError:" in capsys.readouterr().err
    assert run("train", "--data", corpus / "nothing", "--out", corpus / "o") == 1
    assert "error: DataError:" in capsys.readouterr().err
    assert run("train", "--data", corpus / "data", "--ratio", "1.5", "--out", corpus / "o") == 1


def _train(corpus, out, *extra):
    return run("train", "--data", corpus / "data", "--out", out, "--stages", 1, "--channels", 2,
               "--max-steps", 3, "--batch-size", 2, "--epochs-phase2", 0, *extra)


def test_train_writes_manifest_history_checkpoint(corpus):
    out = corpus / "run"
    assert _train(corpus, out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["config"]["stages"] == 1
    assert set(manifest["versions"]) >= {"madun", "numpy", "scipy", "python"}
    assert len(json.loads((out / "history.json").read_text())["step_loss"]) == 3
    ck = load_checkpoint(out / "checkpoint.madn")
    assert ck.step == 3 and ck.metadata["run_config"]["channels"] == 2


def test_config_precedence(corpus, monkeypatch):
    ini = corpus / "run.ini"
    ini.write_text("[model]\nstages = 2\nchannels = 5\n[train]\nlr = 0.01\nseed = 4\n[paths]\nout = ignored\n")
    monkeypatch.setenv("MADUN_SEED", "7")
    args = cli.build_parser().parse_args(["train", "--config", str(ini), "--channels", "3"])
    cfg = cli.resolve_config(args)
    assert (cfg.stages, cfg.channels, cfg.lr, cfg.seed) == (2, 3, 0.01, 7)
    assert cfg.sources["stages"].startswith("file:") and cfg.sources["channels"] == "flag"
    assert cfg.sources["seed"] == "env:MADUN_SEED"
    args = cli.build_parser().parse_args(["train", "--config", str(ini), "--seed", "9"])
    assert cli.resolve_config(args).seed == 9
    defaults = cli.resolve_config(cli.build_parser().parse_args(["train"]))
    assert (defaults.stages, defaults.channels, defaults.seed) == (9, 16, 7)


def test_bad_config_key(corpus):
    ini = corpus / "bad.ini"
    ini.write_text("[model]\nlayers = 3\n")
    assert run("train", "--config", ini) == 1


def test_resume_continues(corpus):
    out = corpus / "run"
    assert _train(corpus, out) == 0
    assert run("train", "--data", corpus / "data", "--out", out, "--stages", 1, "--channels", 2,
               "--max-steps", 5, "--batch-size", 2, "--epochs-phase2", 0, "--resume", out / "checkpoint.madn") == 0
    assert load_checkpoint(out / "checkpoint.madn").step == 5
    assert run("train", "--data", corpus / "data", "--out", corpus / "r2", "--stages", 2, "--channels", 2,
               "--max-steps", 5, "--resume", out / "checkpoint.madn") == 1


def test_interrupt_leaves_valid_checkpoint(corpus, monkeypatch):
    real = Trainer.train_step

    def flaky(self, x, sampler):
        if self.step == 2:
            raise KeyboardInterrupt
        return real(self, x, sampler)

    monkeypatch.setattr(Trainer, "train_step", flaky)
    out = corpus / "run"
    assert _train(corpus, out) == 130
    assert load_checkpoint(out / "checkpoint.madn").step == 2


def _fixed_point_checkpoint(path):
    mc = ModelConfig(stages=2, channels=2, ratio=1.0, block=33)
    params = zero_weights(init_params(mc))
    op = build_gaussian_operator(1.0, 1089, seed=0)
    ds = make_dataset(synthetic_images(1, 33), 33)
    save_checkpoint(path, Trainer(mc, params, op, TrainConfig(), ds).checkpoint())


def test_reconstruct_fixed_point_is_identity(tmp_path):
    ck = tmp_path / "id.madn"
    _fixed_point_checkpoint(ck)
    img = np.random.default_rng(0).integers(0, 256, (33, 33)).astype(np.uint8)
    save_pgm(tmp_path / "in.pgm", img)
    assert run("reconstruct", "--checkpoint", ck, "--out", tmp_path / "rec", tmp_path / "in.pgm") == 0
    assert np.array_equal(load_image(tmp_path / "rec" / "in_rec.pgm"), img)
    sidecar = json.loads((tmp_path / "rec" / "in_rec.json").read_text())
    assert sidecar["psnr"] == "inf" and sidecar["ssim"] == 1.0
    assert (tmp_path / "rec" / "manifest.json").exists()


def test_evaluate_is_reproducible(corpus):
    assert _train(corpus, corpus / "run") == 0
    ck = corpus / "run" / "checkpoint.madn"
    for out in ("e1", "e2"):
        assert run("evaluate", "--checkpoint", ck, "--data", corpus / "test", "--out", corpus / out) == 0
    a, b = ((corpus / o / "report.json").read_text() for o in ("e1", "e2"))
    assert a == b and json.loads(a)["images"][0]["name"] == "synthetic_000.pgm"
    assert (corpus / "e1" / "report.txt").read_text().splitlines()[-1].startswith("mean")


def test_analyze_exports(corpus):
    assert _train(corpus, corpus / "run") == 0
    out = corpus / "an"
    assert run("analyze", "--checkpoint", corpus / "run" / "checkpoint.madn", "--data", corpus / "test", "--out", out) == 0
    norms = (out / "gate_norms.csv").read_text().splitlines()
    assert norms[1] == "stage,input,forget,output" and len(norms) == 3
    spectra = (out / "spectra.csv").read_text().splitlines()
    assert "synthetic_000.pgm" in spectra[0] and spectra[1] == "frequency,stage1" and len(spectra) == 34


def test_gen_operator_and_train_with_it(corpus):
    op_path = corpus / "op.npz"
    assert run("gen-operator", "-o", op_path, "--ratio", 0.1, "--seed", 3) == 0
    with np.load(op_path) as z:
        phi = z["phi"]
    assert phi.shape == (109, 1089)
    assert _train(corpus, corpus / "run", "--operator-file", op_path) == 0
    ck = load_checkpoint(corpus / "run" / "checkpoint.madn")
    assert np.array_equal(ck.tensors["operator.phi"], phi)
    assert ck.model_config["ratio"] == 0.1


def test_gen_operator_mri(tmp_path):
    from madun.cs_ops import MRIOperator, save_mask

    save_mask(tmp_path / "m.pgm", np.eye(8))
    assert run("gen-operator", "--kind", "mri", "--mask", tmp_path / "m.pgm", "-o", tmp_path / "mri.npz") == 0
    op = cli.load_operator(tmp_path / "mri.npz")
    assert isinstance(op, MRIOperator) and np.array_equal(op.mask, np.eye(8, dtype=bool))
    assert run("gen-operator", "--kind", "mri", "-o", tmp_path / "x.npz") == 1


def test_ablate_table_has_eight_rows(tmp_path, capsys):
    out = tmp_path / "abl"
    assert run("ablate", "--out", out, "--stages", 1, "--channels", 2, "--max-steps", 2, "--blocks", 4, "--batch-size", 2) == 0
    rows = json.loads((out / "ablation.json").read_text())
    assert [r["case"] for r in rows] == ["a", "b", "c", "d", "e", "f", "plus", "concat"]
    table = (out / "ablation.txt").read_text().splitlines()
    assert len(table) == 10 and "*HSM" in table[0]


def test_train_mri_from_flags(corpus):
    from madun.cs_ops import save_mask

    mask = np.random.default_rng(0).random((33, 33)) < 0.3
    save_mask(corpus / "m.pgm", mask)
    assert _train(corpus, corpus / "mri", "--operator", "mri", "--mask", corpus / "m.pgm") == 0
    ck = load_checkpoint(corpus / "mri" / "checkpoint.madn")
    assert ck.model_config["operator"] == "mri" and ck.model_config["block"] == 33
