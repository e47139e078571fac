import numpy as np
import pytest

from ctrlsynth import vq
from ctrlsynth.cli import main, read_ppm, write_ppm

TINY = ["--n-layers", "1", "--d-model", "16", "--n-heads", "2", "--d-ff", "32", "--dtype", "float32"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n", "48", "--stratified", "--out", str(d / "data.ufcd")]) == 0
    assert main(["fit-vq", "--data", str(d / "data.ufcd"), "--k", "16", "--sample", "2000",
                 "--max-iters", "5", "--out", str(d / "cb.ufcv")]) == 0
    common = ["--data", str(d / "data.ufcd"), "--codebook", str(d / "cb.ufcv"), "--epochs", "1",
              "--batch-size", "16", "--K", "16", *TINY]
    assert main(["train", *common, "--out-dir", str(d / "nar")]) == 0
    assert main(["train-ar", *common, "--out-dir", str(d / "ar")]) == 0
    return d


def test_train_writes_artifacts(workdir):
    assert (workdir / "nar" / "final.ufcb").exists()
    assert (workdir / "nar" / "vocab.txt").exists()
    assert (workdir / "ar" / "ar_final.ufcb").exists()


def test_vq_encode_decode_round_trip(workdir, tmp_path):
    cb = vq.Codebook.load(workdir / "cb.ufcv")
    grid = np.random.default_rng(0).integers(0, cb.K, (8, 8))
    write_ppm(vq.decode_tokens(grid, cb), tmp_path / "in.ppm")
    assert main(["vq", "encode", "--codebook", str(workdir / "cb.ufcv"), "--image", str(tmp_path / "in.ppm"),
                 "--out", str(tmp_path / "g.txt")]) == 0
    assert main(["vq", "decode", "--codebook", str(workdir / "cb.ufcv"), "--grid", str(tmp_path / "g.txt"),
                 "--out", str(tmp_path / "out.ppm")]) == 0
    assert read_ppm(tmp_path / "out.ppm").shape == (32, 32, 3)


def test_generate_with_preservation_and_trace(workdir, tmp_path):
    src = tmp_path / "src.ppm"
    cb = vq.Codebook.load(workdir / "cb.ufcv")
    write_ppm(vq.decode_tokens(np.arange(64).reshape(8, 8) % cb.K, cb), src)
    out = tmp_path / "gen.ppm"
    rc = main(["generate", "--checkpoint", str(workdir / "nar" / "final.ufcb"), "--codebook",
               str(workdir / "cb.ufcv"), "--text", "red circle center on blue", "--preserve",
               f"0,0,2,8:{src}", "--B", "2", "--T", "3", "--trace", str(tmp_path / "t.ufct"), "--out", str(out)])
    assert rc == 0 and (tmp_path / "t.ufct").exists()
    got = vq.encode_image(read_ppm(out), cb)
    assert np.array_equal(got[:2], np.arange(16).reshape(2, 8) % cb.K)


def test_eval_and_benchmark_reports(workdir, tmp_path):
    assert main(["eval", "--checkpoint", str(workdir / "nar" / "final.ufcb"), "--codebook",
                 str(workdir / "cb.ufcv"), "--n-prompts", "4", "--preservation-cases", "0", "--beams", "1",
                 "--T", "2", "--report", str(tmp_path / "eval.txt")]) == 0
    assert "compliance" in (tmp_path / "eval.txt").read_text()
    assert main(["benchmark", "--checkpoint", str(workdir / "nar" / "final.ufcb"), "--ar-checkpoint",
                 str(workdir / "ar" / "ar_final.ufcb"), "--n-samples", "2", "--beams", "1",
                 "--report", str(tmp_path / "bench.txt")]) == 0
    assert (tmp_path / "bench.txt").exists()


def test_error_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1
    rc = main(["generate", "--checkpoint", str(tmp_path / "missing.ufcb"), "--codebook", str(tmp_path / "x"),
               "--text", "red circle center on blue"])
    assert rc == 2
    assert "missing file" in capsys.readouterr().err
