import json
import subprocess
import sys

import numpy as np
import pytest

from fcvit.cli import main
from fcvit.io import load_tensor, load_weights, save_tensor
from fcvit.model import count_flops, count_params, preset


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestCounts:
    def test_params(self, capsys):
        code, out, _ = run(capsys, "params", "--preset", "tiny")
        assert code == 0 and int(out) == count_params(preset("tiny"))

    def test_flops(self, capsys):
        code, out, _ = run(capsys, "flops", "--preset", "b12", "--res", "224")
        assert code == 0 and int(out) == count_flops(preset("b12"), 224)

    def test_config_file(self, capsys, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(preset("micro", mixer_repeats=1).to_json())
        code, out, _ = run(capsys, "params", "--config", str(path))
        assert code == 0 and int(out) == count_params(preset("micro", mixer_repeats=1))

    def test_bad_config_file(self, capsys, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        code, _, err = run(capsys, "params", "--config", str(path))
        assert code == 1 and err.startswith("fcvit:")


class TestErrors:
    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["params", "--bogus"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 2

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "fcvit", "flops", "--nope"], capture_output=True, text=True)
        assert proc.returncode == 2 and "usage" in proc.stderr

    def test_missing_file_exits_1(self, capsys, tmp_path):
        code, _, err = run(capsys, "forward", "--weights", str(tmp_path / "none"), "--input", str(tmp_path / "x"))
        assert code == 1 and "No such file" in err

    def test_corrupt_file_exits_1(self, capsys, tmp_path):
        (tmp_path / "w").write_bytes(b"XCVT" + bytes(64))
        save_tensor(np.zeros((3, 32, 32), np.float32), tmp_path / "x")
        code, _, err = run(capsys, "forward", "--weights", str(tmp_path / "w"), "--input", str(tmp_path / "x"))
        assert code == 1 and "magic" in err


class TestModelCommands:
    def test_forward_on_zero_weights(self, capsys, tmp_path):
        w, x, out = tmp_path / "w", tmp_path / "x", tmp_path / "logits"
        assert run(capsys, "init", "--preset", "micro", "--zeros", "-o", str(w))[0] == 0
        save_tensor(np.random.default_rng(0).standard_normal((2, 3, 32, 32)).astype(np.float32), x)
        code, _, _ = run(capsys, "forward", "--weights", str(w), "--input", str(x), "-o", str(out))
        logits = load_tensor(out)
        assert code == 0 and logits.shape == (2, 4) and not logits.any()

    def test_single_image_input(self, capsys, tmp_path):
        w, x, out = tmp_path / "w", tmp_path / "x", tmp_path / "logits"
        run(capsys, "init", "--preset", "micro", "-o", str(w))
        save_tensor(np.ones((3, 32, 32), np.float32), x)
        assert run(capsys, "forward", "--weights", str(w), "--input", str(x), "-o", str(out))[0] == 0
        assert load_tensor(out).shape == (1, 4)

    def test_seed_env_var(self, capsys, tmp_path, monkeypatch):
        run(capsys, "init", "-o", str(tmp_path / "default"))
        monkeypatch.setenv("FCVIT_SEED", "0")
        run(capsys, "init", "-o", str(tmp_path / "zero"))
        monkeypatch.setenv("FCVIT_SEED", "7")
        run(capsys, "init", "-o", str(tmp_path / "seven"))
        run(capsys, "init", "--seed", "0", "-o", str(tmp_path / "flag"))
        default = (tmp_path / "default").read_bytes()
        assert default == (tmp_path / "zero").read_bytes() == (tmp_path / "flag").read_bytes()
        assert default != (tmp_path / "seven").read_bytes()

    def test_repeated_invocations_identical(self, capsys, tmp_path):
        w, x = tmp_path / "w", tmp_path / "x"
        run(capsys, "init", "-o", str(w))
        save_tensor(np.random.default_rng(1).standard_normal((1, 3, 32, 32)).astype(np.float32), x)
        for name in ("a", "b"):
            run(capsys, "forward", "--weights", str(w), "--input", str(x), "-o", str(tmp_path / name))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_gradcheck(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--preset", "micro", "--coords", "10")
        assert code == 0 and float(out) < 1e-4

    def test_train_toy(self, capsys, tmp_path):
        log, w = tmp_path / "log.jsonl", tmp_path / "w"
        code, _, _ = run(capsys, "train-toy", "--steps", "3", "--samples-per-class", "2", "--batch-size", "4",
                         "--log", str(log), "--save", str(w))
        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert code == 0 and len(records) == 4 and "final_train_acc" in records[-1]
        assert load_weights(w).config == preset("micro")


class TestAnalysisCommands:
    def test_analyze(self, capsys, tmp_path):
        save_tensor(np.full((2, 196, 196), 1 / 196), tmp_path / "a")
        code, out, _ = run(capsys, "analyze", "--attn", str(tmp_path / "a"))
        stats = json.loads(out)
        assert code == 0 and stats["query_consistency"] == 1.0 and sum(stats["counts"]) == 2 * 196 * 196

    def test_analyze_rejects_non_square(self, capsys, tmp_path):
        save_tensor(np.ones((3, 4)), tmp_path / "a")
        assert run(capsys, "analyze", "--attn", str(tmp_path / "a"))[0] == 1

    def test_export_sim(self, capsys, tmp_path):
        w, x, out = tmp_path / "w", tmp_path / "x", tmp_path / "maps"
        run(capsys, "init", "--preset", "micro", "-o", str(w))
        save_tensor(np.random.default_rng(2).standard_normal((3, 32, 32)).astype(np.float32), x)
        code, stdout, _ = run(capsys, "export-sim", "--weights", str(w), "--input", str(x), "--block", "4",
                              "-o", str(out))
        info = json.loads(stdout)
        assert code == 0 and load_tensor(out).shape == (4, 1, 1) and info["shape"] == [4, 1, 1]
        # a 1x1 map is the zero-initialised shift, so no cosine is defined
        assert info["head_consistency"] is None
        code, stdout, _ = run(capsys, "export-sim", "--weights", str(w), "--input", str(x), "--block", "0",
                              "-o", str(out))
        info = json.loads(stdout)
        assert code == 0 and load_tensor(out).shape == (4, 8, 8) and -1 <= info["head_consistency"] <= 1

    def test_export_sim_bad_block(self, capsys, tmp_path):
        w, x = tmp_path / "w", tmp_path / "x"
        run(capsys, "init", "--preset", "micro", "-o", str(w))
        save_tensor(np.zeros((3, 32, 32), np.float32), x)
        code, _, err = run(capsys, "export-sim", "--weights", str(w), "--input", str(x), "--block", "9")
        assert code == 1 and "block_index" in err
