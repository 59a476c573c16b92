import json
import socket
import subprocess
import sys
import time

import pytest
import requests

from invattack.cli import main
from invattack.dataset_io import load_dataset_files, load_gallery
from invattack.training import load_model


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    rc = main(["make-dataset", "--out", str(out), "--train", "500",
               "--test", "80", "--seed", "5"])
    assert rc == 0
    return out


TINY_GRID_CONFIG = """
[attack]
count = 4
donor_pool = 8
grid_rotation = -10,10,10
grid_shift_x = -2,2,2
grid_shift_y = -2,2,2
grid_shear = 0,0,1
grid_scale = 1.0,1.0,1.0
"""


def attack_args(corpus, out, extra=()):
    return ["attack",
            "--train-images", str(corpus / "train-images.idx"),
            "--train-labels", str(corpus / "train-labels.idx"),
            "--test-images", str(corpus / "test-images.idx"),
            "--test-labels", str(corpus / "test-labels.idx"),
            "--out", str(out), *extra]


class TestMakeDataset:
    def test_files_parse(self, corpus):
        train = load_dataset_files(corpus / "train-images.idx",
                                   corpus / "train-labels.idx")
        test = load_dataset_files(corpus / "test-images.idx",
                                  corpus / "test-labels.idx")
        assert len(train) == 500 and len(test) == 80
        assert train.width == 28


class TestAttackCommand:
    def test_count_zero_empty_gallery(self, corpus, tmp_path):
        rc = main(attack_args(corpus, tmp_path,
                              ["--count", "0", "--norm", "l0", "--seed", "1"]))
        assert rc == 0
        assert json.loads((tmp_path / "gallery.json").read_text()) == []

    def test_small_l0_run_deterministic(self, corpus, tmp_path):
        cfg = tmp_path / "attack.cfg"
        cfg.write_text(TINY_GRID_CONFIG)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        for out in (out1, out2):
            rc = main(attack_args(corpus, out,
                                  ["--config", str(cfg), "--norm", "l0",
                                   "--epsilon", "25", "--seed", "3"]))
            assert rc == 0
        assert ((out1 / "gallery.json").read_bytes()
                == (out2 / "gallery.json").read_bytes())
        gallery = load_gallery((out1 / "gallery.json").read_text())
        assert len(gallery) == 4  # count from config file
        summary = json.loads((out1 / "summary.json").read_text())
        assert "l0_median" in summary and "mean_reduction_vs_full_mask" in summary

    def test_flag_overrides_config(self, corpus, tmp_path):
        cfg = tmp_path / "attack.cfg"
        cfg.write_text(TINY_GRID_CONFIG)
        rc = main(attack_args(corpus, tmp_path / "o",
                              ["--config", str(cfg), "--norm", "linf",
                               "--epsilon", "0.4", "--seed", "3",
                               "--count", "2"]))
        assert rc == 0
        gallery = load_gallery((tmp_path / "o" / "gallery.json").read_text())
        assert len(gallery) == 2
        summary = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert summary["linf_max"] <= 0.4

    def test_threads_do_not_change_output(self, corpus, tmp_path):
        cfg = tmp_path / "attack.cfg"
        cfg.write_text(TINY_GRID_CONFIG)
        seq, par = tmp_path / "seq", tmp_path / "par"
        for out, threads in ((seq, "1"), (par, "3")):
            rc = main(attack_args(corpus, out,
                                  ["--config", str(cfg), "--norm", "l0",
                                   "--epsilon", "25", "--seed", "9",
                                   "--threads", threads]))
            assert rc == 0
        assert ((seq / "gallery.json").read_bytes()
                == (par / "gallery.json").read_bytes())

    def test_missing_dataset_is_runtime_error(self, tmp_path):
        rc = main(["attack", "--train-images", str(tmp_path / "none.idx"),
                   "--train-labels", str(tmp_path / "none2.idx"),
                   "--test-images", str(tmp_path / "none3.idx"),
                   "--test-labels", str(tmp_path / "none4.idx"),
                   "--out", str(tmp_path)])
        assert rc == 2


class TestSyntheticVerify:
    def test_small_run_passes(self, tmp_path, capsys):
        rc = main(["synthetic-verify", "--n", "50000", "--seed", "1",
                   "--out", str(tmp_path)])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines and all(line.startswith("PASS") for line in lines)
        csv_text = (tmp_path / "synthetic_report.csv").read_text()
        assert csv_text.startswith("classifier,eps,n,clean_acc,robust_acc")

    def test_delta_zero_degenerate(self, tmp_path):
        rc = main(["synthetic-verify", "--n", "50000", "--seed", "2",
                   "--delta", "0.0", "--out", str(tmp_path)])
        assert rc == 0

    def test_k_one_rejected(self, tmp_path):
        rc = main(["synthetic-verify", "--k", "1.0", "--n", "1000",
                   "--out", str(tmp_path)])
        assert rc == 2


@pytest.fixture(scope="module")
def checkpoints(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("models")
    for eps, name in (("0.0", "clean.ckpt"), ("0.1", "robust.ckpt")):
        rc = main(["train", "--eps-train", eps, "--epochs", "2",
                   "--pgd-steps", "3", "--subset", "300", "--seed", "0",
                   "--name", name,
                   "--train-images", str(corpus / "train-images.idx"),
                   "--train-labels", str(corpus / "train-labels.idx"),
                   "--out", str(out)])
        assert rc == 0
    return out


class TestTrainEval:
    def test_eval_reports(self, corpus, checkpoints, tmp_path):
        rc = main(["eval",
                   "--checkpoints",
                   f"{checkpoints}/clean.ckpt,{checkpoints}/robust.ckpt",
                   "--eps", "0.0,0.1",
                   "--pgd-steps", "5",
                   "--test-images", str(corpus / "test-images.idx"),
                   "--test-labels", str(corpus / "test-labels.idx"),
                   "--out", str(tmp_path)])
        assert rc == 0
        lines = (tmp_path / "robust_error.csv").read_text().splitlines()
        assert lines[0] == "model,eps_eval,n,clean_error,robust_error,attack"
        rows = [line.split(",") for line in lines[1:]]
        for row in rows:
            if float(row[1]) == 0.0:
                assert float(row[3]) == float(row[4])  # eps 0: robust == clean

    def test_invariance_eval(self, corpus, checkpoints, tmp_path):
        cfg = tmp_path / "attack.cfg"
        cfg.write_text(TINY_GRID_CONFIG)
        gal_dir = tmp_path / "gal"
        rc = main(attack_args(corpus, gal_dir,
                              ["--config", str(cfg), "--norm", "linf",
                               "--epsilon", "0.3", "--seed", "4"]))
        assert rc == 0
        rc = main(["invariance-eval",
                   "--checkpoints",
                   f"{checkpoints}/clean.ckpt,{checkpoints}/robust.ckpt",
                   "--gallery", str(gal_dir / "gallery.json"),
                   "--test-images", str(corpus / "test-images.idx"),
                   "--test-labels", str(corpus / "test-labels.idx"),
                   "--out", str(tmp_path)])
        assert rc == 0
        lines = (tmp_path / "invariance_rates.csv").read_text().splitlines()
        assert lines[0] == "model,invariance_rate,n"
        assert len(lines) == 3

    def test_checkpoint_loadable(self, checkpoints):
        model = load_model(checkpoints / "clean.ckpt")
        assert model.layer_sizes == [784, 256, 128, 10]

    def test_empty_gallery_is_error(self, corpus, checkpoints, tmp_path):
        empty = tmp_path / "empty.json"
        empty.write_text("[]\n")
        rc = main(["invariance-eval",
                   "--checkpoints", f"{checkpoints}/clean.ckpt",
                   "--gallery", str(empty),
                   "--test-images", str(corpus / "test-images.idx"),
                   "--test-labels", str(corpus / "test-labels.idx"),
                   "--out", str(tmp_path)])
        assert rc == 2


class TestServeCommand:
    def test_bad_port_nonzero_exit(self, corpus, tmp_path):
        blocker = socket.socket()
        blocker.bind(("127.0.0.1", 0))
        port = blocker.getsockname()[1]
        rc = main(["serve", "--host", "127.0.0.1", "--port", str(port),
                   "--data-dir", str(tmp_path / "d"),
                   "--train-images", str(corpus / "train-images.idx"),
                   "--train-labels", str(corpus / "train-labels.idx")])
        blocker.close()
        assert rc == 2

    def test_serve_subprocess_health_and_restart(self, corpus, tmp_path):
        data_dir = tmp_path / "data"
        port = _free_port()
        proc = _spawn_serve(corpus, data_dir, port)
        try:
            base = f"http://127.0.0.1:{port}"
            _wait_health(base)
            r = requests.post(f"{base}/sessions",
                              json={"base_index": 1, "norm": "linf",
                                    "epsilon": 0.4})
            sid = r.json()["id"]
            requests.post(f"{base}/sessions/{sid}/edits",
                          json={"edits": [[5, 0.2]]})
        finally:
            proc.terminate()
            proc.wait(timeout=10)
        # restart replays persisted state
        port2 = _free_port()
        proc = _spawn_serve(corpus, data_dir, port2)
        try:
            base = f"http://127.0.0.1:{port2}"
            _wait_health(base)
            r = requests.get(f"{base}/sessions/{sid}")
            assert r.status_code == 200
            assert len(r.json()["edit_log"]) == 1
        finally:
            proc.terminate()
            proc.wait(timeout=10)


def _free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def _spawn_serve(corpus, data_dir, port):
    return subprocess.Popen(
        [sys.executable, "-m", "invattack.cli", "serve",
         "--host", "127.0.0.1", "--port", str(port),
         "--data-dir", str(data_dir),
         "--train-images", str(corpus / "train-images.idx"),
         "--train-labels", str(corpus / "train-labels.idx")])


def _wait_health(base, timeout=15.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        try:
            if requests.get(f"{base}/health", timeout=1).status_code == 200:
                return
        except requests.ConnectionError:
            time.sleep(0.1)
    raise TimeoutError(f"service at {base} never became healthy")


class TestUsageErrors:
    def test_unknown_subcommand_exit_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_missing_required_flag_exit_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["eval"])
        assert exc.value.code == 1
