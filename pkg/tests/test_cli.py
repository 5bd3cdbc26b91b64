import subprocess
import sys
from fractions import Fraction

import numpy as np
import pytest

from hybridattn import cli
from hybridattn.cost_model import read_cost_csv
from hybridattn.rl_objective import batch_to_csv, synthetic_batch

SMALL_CFG = """\
n_layers = 4
layer_group_size = 2
d_model = 16
n_heads = 2
n_kv_heads = 1
d_head = 8
norm_groups = 2
n_experts = 4
d_expert_hidden = 8
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL_CFG)
    return str(p)


def metrics(path):
    lines = open(path).read().splitlines()
    assert lines[0] == "metric,value"
    return dict(line.split(",", 1) for line in lines[1:])


class TestVerify:
    def test_passes(self, cfg_file, capsys):
        assert cli.main(["verify", "--config", cfg_file, "--instances", "40", "--tokens", "12"]) == 0
        out = capsys.readouterr().out
        assert "all suites passed" in out
        for name in ("linear_equivalence", "tree_decode", "gradient", "prefill_decode"):
            assert name in out

    def test_chunk_sweep_lines(self, cfg_file, capsys, tmp_path):
        out_csv = tmp_path / "verify.csv"
        code = cli.main(["verify", "--config", cfg_file, "--instances", "10", "--tokens", "4",
                         "--chunk-sweep", "6", "--out", str(out_csv)])
        assert code == 0
        out = capsys.readouterr().out
        assert all(f"chunk={c} " in out for c in range(1, 7)) and "chunk=7 " not in out
        assert out_csv.read_text().startswith("suite,max_dev,tol,status\n")

    def test_indivisible_config(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text("n_layers = 9\nlayer_group_size = 5\n")
        assert cli.main(["verify", "--config", str(p)]) == 2
        assert "not divisible" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert cli.main(["verify", "--config", str(tmp_path / "nope.cfg")]) == 2

    def test_failure_exit_code(self, monkeypatch, cfg_file):
        bad = cli.SuiteResult("linear_equivalence", 1.0, 1e-10)
        monkeypatch.setattr(cli, "suite_linear_equivalence", lambda rng, n: bad)
        assert cli.main(["verify", "--config", cfg_file, "--instances", "4", "--tokens", "2"]) == 1


class TestCost:
    def test_rows_and_rerun(self, cfg_file, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        args = ["cost", "--config", cfg_file, "--seq-lens", "1:1025:256"]
        assert cli.main(args + ["--out", str(a)]) == 0
        assert cli.main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        data = read_cost_csv(a.read_text())
        assert len(a.read_text().splitlines()) == 1 + 5 * 5
        slope = {k: Fraction(v[-1][1] - v[0][1], v[-1][0] - v[0][0]) for k, v in data.items()}
        assert slope["hybrid_m1"] / slope["gqa"] == Fraction(1, 2) and slope["linear"] == 0

    def test_bad_seq_lens(self, cfg_file):
        assert cli.main(["cost", "--config", cfg_file, "--seq-lens", "0,5"]) == 2
        assert cli.main(["cost", "--config", cfg_file, "--seq-lens", "a:b:c"]) == 2

    def test_unwritable(self, cfg_file, tmp_path):
        assert cli.main(["cost", "--config", cfg_file, "--out", str(tmp_path / "no" / "dir.csv")]) == 2


class TestAlign:
    def test_identical_paths(self, cfg_file, capsys, tmp_path):
        out = tmp_path / "r.csv"
        code = cli.main(["align", "--config", cfg_file, "--tokens", "6", "--path-a", "decode",
                         "--path-b", "decode", "--out", str(out)])
        assert code == 0
        text = capsys.readouterr().out
        assert text.splitlines()[0].endswith("exceed_fraction=0") and "first divergence: none" in text
        assert out.read_text().startswith("layer,module,max_abs_diff,mean_abs_diff\n")

    def test_bf16_state(self, cfg_file, capsys):
        code = cli.main(["align", "--config", cfg_file, "--tokens", "16", "--path-a", "decode:exact:exact",
                         "--path-b", "decode:exact:bf16", "--threshold", "0.5"])
        assert code == 0
        text = capsys.readouterr().out
        assert "threshold=0.5" in text and "first divergence: layer 0 attn_core" in text

    @pytest.mark.parametrize("t", ["0", "1", "1.5", "-0.2"])
    def test_threshold_range(self, cfg_file, t):
        assert cli.main(["align", "--config", cfg_file, "--threshold", t]) == 2

    def test_bad_path(self, cfg_file):
        assert cli.main(["align", "--config", cfg_file, "--path-a", "sideways"]) == 2


class TestRl:
    def test_on_policy_file(self, tmp_path):
        batch, _ = synthetic_batch(200, disparity_rate=0.0, seed=2)
        src, out = tmp_path / "b.csv", tmp_path / "o.csv"
        src.write_text(batch_to_csv(batch))
        assert cli.main(["rl", "--batch", str(src), "--out", str(out)]) == 0
        m = metrics(out)
        assert float(m["gap_max"]) == 0.0 and m["objective_rollout"] == m["objective_recompute"]

    def test_synthetic(self, tmp_path):
        out = tmp_path / "o.csv"
        assert cli.main(["rl", "--synthetic", "1000", "--disparity-rate", "0.1", "--seed", "5",
                         "--out", str(out)]) == 0
        m = metrics(out)
        assert m["gap_nonzero_tokens"] == "100" and float(m["disparity_fraction"]) == 0.1

    def test_byte_identical_reruns(self, tmp_path):
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for p in paths:
            cli.main(["rl", "--synthetic", "300", "--seed", "11", "--out", str(p)])
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_malformed_row(self, tmp_path, capsys):
        src = tmp_path / "b.csv"
        src.write_text("token_id,lp_rollout,lp_train_old,lp_train_new,advantage\n0,-1,-1,-1,1\n1,-1,oops,-1,1\n")
        assert cli.main(["rl", "--batch", str(src)]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_empty_file(self, tmp_path, capsys):
        src = tmp_path / "empty.csv"
        src.write_text("")
        assert cli.main(["rl", "--batch", str(src)]) == 2
        assert "empty input" in capsys.readouterr().err

    def test_needs_one_source(self):
        assert cli.main(["rl"]) == 2


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate"])
    assert info.value.code == 2


def test_console_entry_point(tmp_path):
    out = tmp_path / "c.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "hybridattn.cli", "cost", "--seq-lens", "1,2", "--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    rows = out.read_text().splitlines()
    assert rows[0] == "spec,seq_len,bytes" and len(rows) == 11
    assert np.all([int(r.split(",")[2]) > 0 for r in rows[1:]])
