import hashlib
import json

import numpy as np
import pytest

from ntklab.cli import config_from_dict, main
from ntklab.errors import ConfigError
from ntklab.fscil import FscilDataset
from ntklab.genloss import read_spectrum_csv
from ntklab.model import NetworkSpec, init_params, load_matrix, load_params, save_params
from ntklab.numerics import make_rng


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def blobs(tmp_path_factory):
    out = tmp_path_factory.mktemp("blobs")
    assert main(["gen-data", "--classes", "20", "--per-class", "12", "--dim", "8", "--spread", "1e-6",
                 "--sessions", "2", "--ways", "5", "--seed", "3", "--out", str(out)]) == 0
    return out / "data.csv"


TRAIN = ["--hidden", "24", "--output-dim", "12", "--steps", "12", "--shots", "3", "--queries", "2",
         "--spectrum-every", "4", "--probe-size", "8", "--lr", "0.5"]


def test_gen_data_cifar_layout(tmp_path):
    assert main(["gen-data", "--classes", "100", "--per-class", "8", "--dim", "4", "--sessions", "8",
                 "--ways", "5", "--shots", "5", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "data.json").read_text())["base_classes"] == 60


def test_gen_data_infeasible(tmp_path, capsys):
    assert main(["gen-data", "--classes", "3", "--sessions", "8", "--ways", "5", "--out", str(tmp_path)]) == 2
    assert "cannot" in capsys.readouterr().err


def test_gen_data_deterministic(tmp_path):
    args = ["gen-data", "--classes", "20", "--per-class", "6", "--dim", "3", "--sessions", "2", "--seed", "9"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    for name in ("data.csv", "data.json"):
        assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)


def test_dataset_floats_roundtrip_exactly(blobs):
    ds = FscilDataset.load(blobs)
    ds.save(blobs.parent / "again.csv", blobs.parent / "again.json")
    assert sha(blobs) == sha(blobs.parent / "again.csv")


def test_train_separable_and_deterministic(tmp_path, blobs, capsys):
    for name in ("r1", "r2"):
        assert main(["train", "--data", str(blobs), "--out", str(tmp_path / name), *TRAIN]) == 0
    report = json.loads((tmp_path / "r1" / "report.json").read_text())
    assert report["accuracies"][0] == 1.0
    for name in ("loss_trace.csv", "spectrum.csv", "params.ntkp", "report.json"):
        assert sha(tmp_path / "r1" / name) == sha(tmp_path / "r2" / name)
    cfg = json.loads((tmp_path / "r1" / "config.json").read_text())
    assert cfg["version"] and cfg["train"]["steps"] == 12 and cfg["train"]["lr"] == 0.5
    lines = (tmp_path / "r1" / "loss_trace.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 13


def test_train_ablation_switches(tmp_path, blobs):
    assert main(["train", "--data", str(blobs), "--out", str(tmp_path / "r"), *TRAIN,
                 "--gamma", "0", "--alpha", "0", "--beta-hyper", "0"]) == 0


def test_train_resolved_config_reruns(tmp_path, blobs):
    main(["train", "--data", str(blobs), "--out", str(tmp_path / "r1"), *TRAIN])
    cfg = json.loads((tmp_path / "r1" / "config.json").read_text())
    cfg["out"] = str(tmp_path / "r2")
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 0
    assert sha(tmp_path / "r1" / "loss_trace.csv") == sha(tmp_path / "r2" / "loss_trace.csv")


def test_train_toml_config(tmp_path, blobs):
    (tmp_path / "c.toml").write_text(
        f'data = "{blobs}"\nout = "{tmp_path / "r"}"\n[network]\nhidden = [16]\noutput_dim = 8\n'
        "[train]\nsteps = 3\nshots = 3\nqueries = 2\nprobe_size = 4\n[margin]\ns = 10.0\n"
    )
    assert main(["train", "--config", str(tmp_path / "c.toml")]) == 0
    assert json.loads((tmp_path / "r" / "config.json").read_text())["margin"]["s"] == 10.0


def test_unknown_config_keys_rejected(tmp_path, blobs):
    for doc in ({"bogus": 1}, {"train": {"stepz": 3}}, {"network": {"depth": 2}}, {"margin": {"q": 1}}):
        with pytest.raises(ConfigError):
            config_from_dict(doc)
    (tmp_path / "c.json").write_text(json.dumps({"train": {"learning_rate": 0.1}}))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--data", str(blobs), "--out", str(tmp_path / "r")]) == 2


def test_train_conv_config(tmp_path):
    main(["gen-data", "--classes", "20", "--per-class", "10", "--dim", "16", "--sessions", "2", "--out", str(tmp_path)])
    doc = {"data": str(tmp_path / "data.csv"), "out": str(tmp_path / "r"),
           "network": {"hidden": [8], "output_dim": 6, "image": [1, 4, 4], "conv": [[2, 3, 3]]},
           "train": {"steps": 2, "shots": 3, "queries": 2, "probe_size": 4}}
    (tmp_path / "c.json").write_text(json.dumps(doc))
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 0
    assert load_params(tmp_path / "r" / "params.ntkp").spec.conv_front[0].out_channels == 2
    doc["network"]["image"] = [1, 3, 3]
    (tmp_path / "c.json").write_text(json.dumps(doc))
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 2


def test_init_weights_hook(tmp_path, blobs):
    spec = NetworkSpec(8, (24,), 12, 1.0, 0.1)
    save_params(init_params(spec, make_rng(77)), tmp_path / "w.ntkp")
    assert main(["train", "--data", str(blobs), "--out", str(tmp_path / "r"), *TRAIN, "--steps", "0",
                 "--init-weights", str(tmp_path / "w.ntkp")]) == 0
    got = load_params(tmp_path / "r" / "params.ntkp").theta
    assert got.tobytes() == init_params(spec, make_rng(77)).theta.tobytes()


def test_init_weights_wrong_layout(tmp_path, blobs):
    save_params(init_params(NetworkSpec(8, (5,), 12), make_rng(0)), tmp_path / "w.ntkp")
    assert main(["train", "--data", str(blobs), "--out", str(tmp_path / "r"), *TRAIN,
                 "--init-weights", str(tmp_path / "w.ntkp")]) == 2


def test_bad_lr_flag(blobs, tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["train", "--data", str(blobs), "--out", str(tmp_path), "--lr", "fast"])
    assert err.value.code == 2


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, blobs):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(blobs), "--out", str(out), *TRAIN]) == 0
    return out


def test_ntk_probe_one(tmp_path, blobs, run_dir):
    assert main(["ntk", "--checkpoint", str(run_dir / "params.ntkp"), "--data", str(blobs), "--probe", "1",
                 "--out", str(tmp_path)]) == 0
    assert load_matrix(tmp_path / "gram.ntkm").shape == (1, 1)
    assert json.loads((tmp_path / "condition.json").read_text())["condition_number"] == 1.0


def test_ntk_probe_too_large(tmp_path, blobs, run_dir):
    assert main(["ntk", "--checkpoint", str(run_dir / "params.ntkp"), "--data", str(blobs), "--probe", "100000",
                 "--out", str(tmp_path)]) == 2


def test_ntk_restriction_total_for_head_only_net(tmp_path, blobs):
    save_params(init_params(NetworkSpec(8, (), 4), make_rng(1)), tmp_path / "h.ntkp")
    for mode in ("all", "linear"):
        main(["ntk", "--checkpoint", str(tmp_path / "h.ntkp"), "--data", str(blobs), "--probe", "6",
              "--restrict", mode, "--out", str(tmp_path / mode)])
    assert (tmp_path / "all" / "eigenvalues.csv").read_text() == (tmp_path / "linear" / "eigenvalues.csv").read_text()


def test_ntk_spectrum_feeds_genloss(tmp_path, blobs, run_dir, capsys):
    main(["ntk", "--checkpoint", str(run_dir / "params.ntkp"), "--data", str(blobs), "--probe", "12", "--out", str(tmp_path)])
    gram = load_matrix(tmp_path / "gram.ntkm")
    lam, _ = read_spectrum_csv(tmp_path / "eigenvalues.csv")
    np.testing.assert_allclose(np.sort(lam)[::-1], np.linalg.eigvalsh(gram)[::-1][: lam.size], rtol=1e-8, atol=1e-12 * lam.max())
    capsys.readouterr()
    assert main(["genloss", "--spectrum", str(tmp_path / "eigenvalues.csv"), "--n", "4", "--noise", "0.1"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["residual"] < 1e-10 and 0 < rep["epsilon"] < 1


def test_genloss_uniform(tmp_path, capsys):
    (tmp_path / "s.csv").write_text("eigenvalue\n" + "1.0\n" * 10)
    assert main(["genloss", "--spectrum", str(tmp_path / "s.csv"), "--n", "4", "--out", str(tmp_path / "g.json")]) == 0
    rep = json.loads((tmp_path / "g.json").read_text())
    assert abs(rep["beta"] - 6) < 1e-12 and abs(rep["epsilon"] - 0.4) < 1e-12 and abs(rep["loss"] - 6) < 1e-12


def test_genloss_weights_file(tmp_path, capsys):
    (tmp_path / "s.csv").write_text("1.0\n0.5\n")
    (tmp_path / "w.txt").write_text("0\n0\n")
    assert main(["genloss", "--spectrum", str(tmp_path / "s.csv"), "--n", "1", "--weights", str(tmp_path / "w.txt")]) == 0
    assert json.loads(capsys.readouterr().out)["loss"] == 0.0
    (tmp_path / "w.txt").write_text("1\n")
    assert main(["genloss", "--spectrum", str(tmp_path / "s.csv"), "--n", "1", "--weights", str(tmp_path / "w.txt")]) == 2


def test_genloss_domain_exit(tmp_path, capsys):
    (tmp_path / "s.csv").write_text("2.0\n")
    assert main(["genloss", "--spectrum", str(tmp_path / "s.csv"), "--n", "1"]) == 3
    assert "domain" in capsys.readouterr().err


def test_eval_matches_training_report(run_dir, capsys):
    capsys.readouterr()
    assert main(["eval", "--run", str(run_dir)]) == 0
    assert json.loads(capsys.readouterr().out) == json.loads((run_dir / "report.json").read_text())


def test_report_summary(run_dir, capsys):
    assert main(["report", str(run_dir), str(run_dir)]) == 0
    out = capsys.readouterr().out
    assert "PD" in out and "median final accuracy over 2 runs" in out


def test_missing_dataset_is_runtime_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "r")]) == 1
