"""Command-line surface: config handling, subcommands, reproducibility."""

import json

import numpy as np
import pytest

from stochmds.cli import (
    EMBED_DEFAULTS,
    EXIT_CONFIG,
    EXIT_OK,
    ConfigError,
    load_config,
    main,
)


@pytest.fixture
def edge_file(tmp_path):
    rng = np.random.default_rng(0)
    coords = rng.random((15, 2)) * 4
    lines = []
    for i in range(15):
        for j in range(i + 1, 15):
            d = float(np.linalg.norm(coords[i] - coords[j]))
            lines.append(f"{i}\t{j}\t{d!r}")
    path = tmp_path / "edges.tsv"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


class TestLoadConfig:
    def test_defaults_applied(self):
        cfg = load_config(EMBED_DEFAULTS, None, {})
        assert cfg["mu"] == 0.1
        assert cfg["eps_x"] == 1e-8
        assert cfg["eps_w"] == 1e-3
        assert cfg["dim"] == 2

    def test_flag_overrides_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"mu": 0.2}))
        cfg = load_config(EMBED_DEFAULTS, str(path), {"mu": 0.05})
        assert cfg["mu"] == 0.05

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"stepsize": 0.2}))
        with pytest.raises(ConfigError, match="stepsize"):
            load_config(EMBED_DEFAULTS, str(path), {})

    def test_range_violation_names_field(self):
        with pytest.raises(ConfigError, match="mu"):
            load_config(EMBED_DEFAULTS, None, {"mu": 1.5})


class TestSubcommands:
    def test_embed_batch_reaches_tiny_stress(self, edge_file, tmp_path, capsys):
        out = tmp_path / "emb.csv"
        trace = tmp_path / "trace.jsonl"
        code = main(["embed", "--mode", "batch", "--input", edge_file,
                     "--tol", "1e-12", "--iters", "2000",
                     "--out", str(out), "--trace", str(trace)])
        assert code == EXIT_OK
        lines = trace.read_text().splitlines()
        header = json.loads(lines[0])
        assert header["config"]["mode"] == "batch"  # full config echoed
        last = json.loads(lines[-1])
        assert last["stress_norm"] < 1e-6
        assert out.exists()

    def test_embed_stochastic_writes_trace(self, edge_file, tmp_path):
        trace = tmp_path / "t.jsonl"
        code = main(["embed", "--mode", "stochastic", "--input", edge_file,
                     "--p", "5", "--fraction", "1.0", "--slots", "50",
                     "--mu", "0.3", "--trace", str(trace), "--seed", "4"])
        assert code == EXIT_OK
        lines = trace.read_text().splitlines()
        assert len(lines) == 52  # header + initial + 50 slots
        rec = json.loads(lines[2])
        assert set(rec) == {"t", "stress", "stress_norm", "mu", "wall_ms",
                            "pairs"}

    def test_embed_mu_range_error(self, edge_file):
        code = main(["embed", "--input", edge_file, "--mu", "1.5"])
        assert code == EXIT_CONFIG

    def test_missing_input_is_config_error(self):
        assert main(["embed", "--mode", "batch"]) == EXIT_CONFIG

    def test_unknown_subcommand_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_localize_trace(self, tmp_path):
        trace = tmp_path / "loc.jsonl"
        snaps = tmp_path / "snaps.csv"
        code = main(["localize", "--n", "30", "--rounds", "25",
                     "--seed", "1", "--trace", str(trace),
                     "--snapshots", str(snaps)])
        assert code == EXIT_OK
        lines = trace.read_text().splitlines()
        rec = json.loads(lines[-1])
        assert set(rec) >= {"t", "e_loc", "clusters", "messages"}
        snap_lines = snaps.read_text().splitlines()
        assert snap_lines[0] == "t,node,est_x,est_y,true_x,true_y"
        assert len(snap_lines) == 1 + 25 * 30  # one row per round per node

    def test_oracle_closed_form(self, edge_file, tmp_path):
        trace = tmp_path / "o.jsonl"
        code = main(["oracle", "--mode", "closed_form", "--input", edge_file,
                     "--p", "5", "--mu", "0.3", "--slots", "40",
                     "--trace", str(trace)])
        assert code == EXIT_OK
        stresses = [json.loads(l)["stress"]
                    for l in trace.read_text().splitlines()[1:]]
        assert all(b <= a + 1e-9 * (1 + a)
                   for a, b in zip(stresses, stresses[1:]))

    def test_stats_window(self, edge_file, tmp_path, capsys):
        trace = tmp_path / "t.jsonl"
        main(["embed", "--mode", "stochastic", "--input", edge_file,
              "--p", "5", "--fraction", "1.0", "--slots", "30",
              "--trace", str(trace), "--seed", "9"])
        capsys.readouterr()
        code = main(["stats", "--trace-file", str(trace),
                     "--window", "21:30"])
        assert code == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["eta_min"] <= out["eta_mean"] <= out["eta_max"]

    def test_stats_hovering(self, tmp_path, capsys):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((6, 4, 2))
        b = a + 0.0
        np.save(tmp_path / "a.npy", a)
        np.save(tmp_path / "b.npy", b)
        code = main(["stats", "--hovering", str(tmp_path / "a.npy"),
                     str(tmp_path / "b.npy"), "--horizon", "5"])
        assert code == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["hovering_deviation"] == 0.0

    def test_bench_small(self, tmp_path, capsys):
        out = tmp_path / "bench.json"
        code = main(["bench", "--sizes", "400,800", "--p", "20", "--q", "10",
                     "--slots", "2", "--out", str(out)])
        assert code == EXIT_OK
        rows = json.loads(out.read_text())
        assert len(rows) == 2
        assert rows[1]["n"] == 800


def _normalize(lines):
    out = []
    for line in lines:
        rec = json.loads(line)
        rec.pop("wall_ms", None)  # timing is measurement, not output
        out.append(json.dumps(rec, sort_keys=True))
    return out


class TestDeterminism:
    def test_embed_bit_identical_across_threads(self, edge_file, tmp_path):
        outs = []
        for threads in (1, 8):
            out = tmp_path / f"e{threads}.csv"
            trace = tmp_path / f"t{threads}.jsonl"
            code = main(["embed", "--mode", "stochastic", "--input", edge_file,
                         "--p", "5", "--fraction", "0.8", "--slots", "40",
                         "--seed", "7", "--threads", str(threads),
                         "--out", str(out), "--trace", str(trace)])
            assert code == EXIT_OK
            outs.append((out.read_bytes(),
                         _normalize(trace.read_text().splitlines()[1:])))
        assert outs[0][0] == outs[1][0]  # embedding CSV byte-for-byte
        assert outs[0][1] == outs[1][1]

    def test_localize_reproducible(self, tmp_path):
        trace = tmp_path / "l.jsonl"  # identical command line both times
        texts = []
        for run in range(2):
            main(["localize", "--n", "25", "--rounds", "20", "--seed", "3",
                  "--trace", str(trace)])
            texts.append(trace.read_text())
        assert texts[0] == texts[1]
