import json
import os

import numpy as np
import pytest

from eresfd import cli, imageio, tensor
from eresfd.weights import load_weights


@pytest.fixture()
def config_path(tmp_path):
    p = tmp_path / "model.json"
    p.write_text(json.dumps({"arch": "eresfd", "width_multiplier": 1.0}))
    return str(p)


@pytest.fixture()
def weights_path(tmp_path, config_path):
    out = str(tmp_path / "w.erfd")
    assert cli.main(["init-weights", "--config", config_path, "--out", out,
                     "--seed", "3"]) == 0
    return out


@pytest.fixture()
def image_path(tmp_path):
    rng = np.random.default_rng(5)
    p = str(tmp_path / "img.ppm")
    imageio.write_ppm(p, rng.integers(0, 256, (64, 64, 3), dtype=np.uint8))
    return p


class TestAnalyze:
    def test_reports_structure_and_writes_csv(self, tmp_path, config_path, capsys):
        csv_path = str(tmp_path / "report.csv")
        assert cli.main(["analyze", "--config", config_path, "--csv", csv_path]) == 0
        out = capsys.readouterr().out
        assert "weighted backbone layers: 31" in out
        assert "residual blocks: 14" in out
        assert "C1:4 C2:8 C3:16 C4:32 C5:64 C6:128" in out
        assert os.path.exists(csv_path)
        assert os.path.exists(str(tmp_path / "report.png"))
        header = open(csv_path).readline().strip()
        assert header == "node_id,kind,macs,flops,params,h,w,rf,group"

    def test_default_config_used_when_omitted(self, capsys):
        assert cli.main(["analyze"]) == 0
        assert "weighted backbone layers: 31" in capsys.readouterr().out

    def test_convention_flag(self, capsys):
        assert cli.main(["analyze", "--convention", "macs"]) == 0
        assert "MACS" in capsys.readouterr().out

    def test_missing_config_exits_2(self, capsys):
        assert cli.main(["analyze", "--config", "/nope/missing.json"]) == 2
        assert "not found" in capsys.readouterr().err

    def test_malformed_config_exits_2(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"arch": "eresfd", "bogus_key": 1}))
        assert cli.main(["analyze", "--config", str(p)]) == 2
        assert "bogus_key" in capsys.readouterr().err

    def test_invalid_json_exits_2(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert cli.main(["analyze", "--config", str(p)]) == 2


class TestBench:
    def test_layer_sweep_row_count(self, tmp_path, capsys):
        csv_path = str(tmp_path / "sweep.csv")
        assert cli.main(["bench", "layer", "--sweep", "channels=4,8,16,32",
                         "--warmup", "1", "--iters", "3", "--csv", csv_path]) == 0
        rows = [ln for ln in open(csv_path) if ln.strip() and not ln.startswith("#")]
        assert len(rows) == 1 + 8  # header + 2 variants x 4 values
        assert os.path.exists(str(tmp_path / "sweep.png"))

    def test_block_sweep_and_json(self, tmp_path):
        json_path = str(tmp_path / "sweep.json")
        assert cli.main(["bench", "block", "--sweep", "channels=4",
                         "--warmup", "1", "--iters", "3", "--json", json_path]) == 0
        parsed = json.load(open(json_path))
        assert {r["variant"] for r in parsed["rows"]} == {"res_block", "inv_res_block"}

    def test_graph_bench_breakdown(self, tmp_path, config_path, capsys):
        assert cli.main(["bench", "graph", "--config", config_path,
                         "--input-size", "64x64", "--warmup", "1",
                         "--iters", "3"]) == 0
        out = capsys.readouterr().out
        assert "# threads=1" in out
        assert "total:" in out
        assert "stem" in out and "(100.0%)" in out

    def test_bad_sweep_exits_2(self, capsys):
        assert cli.main(["bench", "layer", "--sweep", "channels="]) == 2


class TestDetect:
    def test_smoke_on_small_ppm(self, config_path, weights_path, image_path, capsys):
        assert cli.main(["detect", "--config", config_path, "--weights", weights_path,
                         "--image", image_path, "--threshold", "0.5"]) == 0
        out = capsys.readouterr().out
        for line in out.strip().splitlines():
            parts = line.split()
            assert len(parts) == 5
            x1, y1, x2, y2, score = map(float, parts)
            assert x1 < x2 and y1 < y2 and score >= 0.5

    def test_zero_detections_still_exit_0(self, config_path, weights_path,
                                          image_path, capsys):
        assert cli.main(["detect", "--config", config_path, "--weights", weights_path,
                         "--image", image_path, "--threshold", "1.1"]) == 0
        assert capsys.readouterr().out == ""

    def test_json_output(self, config_path, weights_path, image_path, capsys):
        assert cli.main(["detect", "--config", config_path, "--weights", weights_path,
                         "--image", image_path, "--threshold", "0.5", "--json"]) == 0
        parsed = json.loads(capsys.readouterr().out)
        assert isinstance(parsed, list)
        for d in parsed:
            assert set(d) == {"x1", "y1", "x2", "y2", "score"}

    def test_flip_and_scales(self, config_path, weights_path, image_path, capsys):
        assert cli.main(["detect", "--config", config_path, "--weights", weights_path,
                         "--image", image_path, "--threshold", "0.6", "--flip",
                         "--scales", "2.0"]) == 0

    def test_deterministic_output(self, config_path, weights_path, image_path, capsys):
        args = ["detect", "--config", config_path, "--weights", weights_path,
                "--image", image_path, "--threshold", "0.5", "--threads", "1"]
        assert cli.main(args) == 0
        first = capsys.readouterr().out
        assert cli.main(args) == 0
        second = capsys.readouterr().out
        assert first == second

    def test_missing_weights_exit_2(self, config_path, image_path, capsys):
        assert cli.main(["detect", "--config", config_path, "--weights", "/no.erfd",
                         "--image", image_path]) == 2


class TestForward:
    def test_dumps_blobs(self, tmp_path, config_path, weights_path, capsys):
        blob_in = str(tmp_path / "in.blob")
        x = np.random.default_rng(0).normal(0, 1, (1, 3, 64, 64)).astype(np.float32)
        tensor.write_blob(x, blob_in)
        out_dir = str(tmp_path / "outs")
        assert cli.main(["forward", "--config", config_path, "--weights", weights_path,
                         "--input", blob_in, "--out", out_dir,
                         "--outputs", "D1.cls,D1.reg"]) == 0
        cls = tensor.read_blob(os.path.join(out_dir, "D1.cls.blob"))
        reg = tensor.read_blob(os.path.join(out_dir, "D1.reg.blob"))
        assert cls.shape == (1, 2, 16, 16)
        assert reg.shape == (1, 4, 16, 16)
        assert np.allclose(cls.sum(axis=1), 1.0, atol=1e-5)

    def test_unknown_output_exits_1(self, tmp_path, config_path, weights_path):
        blob_in = str(tmp_path / "in.blob")
        tensor.write_blob(np.zeros((1, 3, 64, 64), np.float32), blob_in)
        assert cli.main(["forward", "--config", config_path, "--weights", weights_path,
                         "--input", blob_in, "--out", str(tmp_path / "o"),
                         "--outputs", "D9.cls"]) == 1


class TestInitWeights:
    def test_container_loads_and_covers_graph(self, tmp_path, config_path):
        out = str(tmp_path / "w.erfd")
        assert cli.main(["init-weights", "--config", config_path, "--out", out,
                         "--checksums"]) == 0
        store = load_weights(out)
        assert "stem.conv0.weight" in store
        assert store["stem.conv0.weight"].shape == (16, 3, 5, 5)
