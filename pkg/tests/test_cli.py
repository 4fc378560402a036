"""End-to-end tests for the forge command line."""

import json
import textwrap
from pathlib import Path

import numpy as np
import pytest

from advforge import cli, gbdt, selector
from advforge.cli import dispatch
from alg1_oracle import alg1_reference
from pe_oracle import build_pe


def make_corpus(root: Path, count: int) -> list:
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        data = build_pe([(b".text", bytes([40 + i]) * 700, 0x60000020)])
        p = root / f"s{i:03d}.bin"
        p.write_bytes(data)
        paths.append(p)
    return paths


def constant_model_file(path, base_score: float) -> None:
    model = gbdt.TrainedModel(
        trees=(), base_score=base_score, learning_rate=0.05,
        feature_dim=552, decision_threshold=0.5, degenerate=False,
        train_loss_trace=())
    model.save(path)


def write_config(path: Path, obj: dict) -> str:
    path.write_text(json.dumps(obj))
    return str(path)


class TestConfig:
    def test_defaults_when_unset(self, monkeypatch):
        monkeypatch.delenv("FORGE_CONFIG", raising=False)
        config = cli.load_config(None)
        assert config.rng_seed == 0
        assert config.selection == selector.SelectionConstants()

    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = write_config(tmp_path / "c.json", {"rngseed": 3})
        with pytest.raises(cli.ConfigError, match="unknown config keys"):
            cli.load_config(path)

    def test_unknown_nested_key_rejected(self, tmp_path):
        path = write_config(tmp_path / "c.json",
                            {"selection": {"ember_thresh": 0.9}})
        with pytest.raises(cli.ConfigError, match="selection"):
            cli.load_config(path)

    def test_env_fallback(self, tmp_path, monkeypatch):
        path = write_config(tmp_path / "c.json", {"rng_seed": 99})
        monkeypatch.setenv("FORGE_CONFIG", path)
        assert cli.load_config(None).rng_seed == 99

    def test_flag_beats_env(self, tmp_path, monkeypatch):
        env_cfg = write_config(tmp_path / "env.json", {"rng_seed": 1})
        flag_cfg = write_config(tmp_path / "flag.json", {"rng_seed": 2})
        monkeypatch.setenv("FORGE_CONFIG", env_cfg)
        assert cli.load_config(flag_cfg).rng_seed == 2

    def test_bad_json_is_config_error(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{nope")
        with pytest.raises(cli.ConfigError, match="not valid JSON"):
            cli.load_config(str(path))

    def test_sections_become_typed_values(self, tmp_path):
        path = write_config(tmp_path / "c.json", {
            "selection": {"maximum_size": 1000},
            "gbdt": {"max_rounds": 7},
        })
        config = cli.load_config(path)
        assert config.selection.maximum_size == 1000
        assert config.gbdt.max_rounds == 7


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert dispatch(["--bogus"]) == 2

    def test_unknown_subcommand_is_usage_error(self):
        assert dispatch(["conquer"]) == 2

    def test_no_arguments_is_usage_error(self):
        assert dispatch([]) == 2

    def test_bad_config_is_exit_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"wat": 1})
        make_corpus(tmp_path / "in", 1)
        code = dispatch(["--config", cfg, "validate", str(tmp_path / "in")])
        assert code == 2
        assert "unknown config keys" in capsys.readouterr().err

    def test_missing_scorer_section_is_exit_2(self, tmp_path, capsys):
        make_corpus(tmp_path / "in", 1)
        code = dispatch(["score", "--in", str(tmp_path / "in")])
        assert code == 2
        assert "scorer" in capsys.readouterr().err


class TestValidate:
    def test_jsonl_to_stdout(self, tmp_path, capsys):
        make_corpus(tmp_path / "in", 3)
        assert dispatch(["validate", str(tmp_path / "in")]) == 0
        rows = [json.loads(line)
                for line in capsys.readouterr().out.strip().splitlines()]
        assert len(rows) == 3
        assert all(r["is_valid_pe"] for r in rows)
        assert all(len(r["sha256"]) == 64 for r in rows)

    def test_invalid_pe_still_exit_zero(self, tmp_path, capsys):
        make_corpus(tmp_path / "in", 1)
        (tmp_path / "in" / "bad.bin").write_bytes(b"garbage")
        assert dispatch(["validate", str(tmp_path / "in")]) == 0
        rows = [json.loads(line)
                for line in capsys.readouterr().out.strip().splitlines()]
        flags = {Path(r["path"]).name: r["is_valid_pe"] for r in rows}
        assert flags == {"s000.bin": True, "bad.bin": False}

    def test_out_dir_gets_reports_and_manifest(self, tmp_path):
        make_corpus(tmp_path / "in", 2)
        out = tmp_path / "out"
        assert dispatch(["validate", str(tmp_path / "in"),
                         "--out", str(out)]) == 0
        assert (out / "reports.jsonl").exists()
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "validate"
        assert manifest["versions"]["advforge"]
        assert manifest["rng_seed"] == 0

    def test_input_dir_not_mutated(self, tmp_path):
        paths = make_corpus(tmp_path / "in", 2)
        before = {p.name: p.read_bytes() for p in paths}
        dispatch(["validate", str(tmp_path / "in"), "--out",
                  str(tmp_path / "out")])
        after = {p.name: p.read_bytes()
                 for p in (tmp_path / "in").iterdir()}
        assert after == before


class TestMutateAndScore:
    def test_score_writes_report(self, tmp_path):
        make_corpus(tmp_path / "in", 2)
        constant_model_file(tmp_path / "model.json", -2.0)
        cfg = write_config(tmp_path / "c.json", {
            "scorer": {"kind": "local",
                       "model_path": str(tmp_path / "model.json"),
                       "threshold": 0.5}})
        out = tmp_path / "out"
        code = dispatch(["--config", cfg, "score",
                         "--in", str(tmp_path / "in"), "--out", str(out)])
        assert code == 0
        report = json.loads((out / "scores.json").read_text())
        assert len(report) == 2
        for row in report.values():
            assert row["verdict"] is False
            assert row["score"] == pytest.approx(1 / (1 + np.exp(2.0)))

    def test_mutate_campaigns_deterministic(self, tmp_path):
        make_corpus(tmp_path / "in", 2)
        constant_model_file(tmp_path / "model.json", 2.0)
        cfg = write_config(tmp_path / "c.json", {
            "rng_seed": 5,
            "scorer": {"kind": "local",
                       "model_path": str(tmp_path / "model.json"),
                       "threshold": 0.5}})
        codes = []
        outputs = []
        for run in ("a", "b"):
            out = tmp_path / f"out_{run}"
            codes.append(dispatch([
                "--config", cfg, "mutate", "--in", str(tmp_path / "in"),
                "--out", str(out), "--max-steps", "4"]))
            outputs.append((out / "campaigns.jsonl").read_text())
        assert codes == [0, 0]
        assert outputs[0] == outputs[1]
        rows = [json.loads(line)
                for line in outputs[0].strip().splitlines()]
        assert all(r["evaded"] is False for r in rows)
        assert all(r["steps_used"] == 4 for r in rows)

    def test_mutate_instant_evasion(self, tmp_path):
        paths = make_corpus(tmp_path / "in", 2)
        constant_model_file(tmp_path / "model.json", -2.0)
        cfg = write_config(tmp_path / "c.json", {
            "scorer": {"kind": "local",
                       "model_path": str(tmp_path / "model.json"),
                       "threshold": 0.5}})
        out = tmp_path / "out"
        assert dispatch(["--config", cfg, "mutate",
                         "--in", str(tmp_path / "in"),
                         "--out", str(out)]) == 0
        rows = [json.loads(line) for line in
                (out / "campaigns.jsonl").read_text().strip().splitlines()]
        assert all(r["evaded"] for r in rows)
        for p in paths:
            assert (out / "files" / p.name).exists()


class TestHarnessCommand:
    def test_run_end_to_end(self, tmp_path, capsys):
        make_corpus(tmp_path / "in", 4)
        worker = tmp_path / "worker.py"
        worker.write_text(textwrap.dedent("""\
            import hashlib, pathlib, sys
            inp, out, log = (pathlib.Path(a) for a in sys.argv[1:4])
            with open(log, "a") as lg:
                for f in sorted(inp.iterdir()):
                    data = f.read_bytes()
                    sha = hashlib.sha256(data).hexdigest()
                    (out / (sha + ".bin")).write_bytes(data + b"!")
                    print("ok", f.name, file=lg, flush=True)
            """))
        cfg = write_config(tmp_path / "c.json", {"harness": {
            "worker_command":
                f"python3 {worker} {{input_dir}} {{output_dir}} {{log_file}}",
            "chunk_count": 2, "stale_window": 5.0, "max_parallel": 2}})
        out = tmp_path / "out"
        code = dispatch(["--config", cfg, "harness", "run",
                         "--input", str(tmp_path / "in"), "--out", str(out)])
        assert code == 0
        merged = [p.name for p in (out / "merged").iterdir()
                  if p.name != "provenance.json"]
        assert len(merged) == 4
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["chunk_states"].values()) == {"done"}
        assert (out / "chunks.json").exists()
        assert (out / "run_manifest.json").exists()


class TestVerdictsCommand:
    def test_submit_poll_with_factory_service(self, tmp_path, capsys):
        make_corpus(tmp_path / "in", 2)
        state_path = tmp_path / "quota.json"
        cfg = write_config(tmp_path / "c.json", {"quota": {
            "daily_limit": 10, "state_path": str(state_path),
            "service": "cli_service:make_service", "poll_interval": 0.01}})
        code = dispatch(["--config", cfg, "verdicts",
                         "--in", str(tmp_path / "in")])
        assert code == 0
        echoed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert echoed == {"used_today": 2, "pending": 0, "completed": 2}
        state = json.loads(state_path.read_text())
        assert state["used_today"] == 2
        assert len(state["completed"]) == 2

    def test_missing_service_is_exit_2(self, tmp_path, capsys):
        make_corpus(tmp_path / "in", 1)
        cfg = write_config(tmp_path / "c.json", {"quota": {
            "daily_limit": 5, "state_path": str(tmp_path / "q.json")}})
        assert dispatch(["--config", cfg, "verdicts",
                         "--in", str(tmp_path / "in")]) == 2


class TestSelectCommand:
    @staticmethod
    def fixture_rows(tmp_path):
        adv_dir = tmp_path / "adv"
        adv_dir.mkdir()
        sources = [{"sha256": f"{i:064x}", "label_scheme": "family",
                    "label_value": "zeus"} for i in (1, 2)]
        candidates = []
        for i, scores in [(1, [0.95, 0.30]), (2, [0.20, 0.50])]:
            for j, score in enumerate(scores):
                name = f"gen{'AB'[j]}"
                blob = build_pe([(b".text",
                                  bytes([i * 16 + j]) * 600, 0x60000020)])
                path = adv_dir / f"adv_{i}_{j}.bin"
                path.write_bytes(blob)
                candidates.append({
                    "generator": name, "ember_score": score,
                    "orig_size": 1000,
                    "modified_size": [1200, 3000][j] if i == 1
                                     else [2000, 1100][j],
                    "path": str(path),
                    "sha256_adv": f"{i * 100 + j:064x}",
                    "sha256_orig": f"{i:064x}"})
        return sources, candidates

    def test_end_to_end_matches_module_oracle(self, tmp_path, capsys):
        sources, candidates = self.fixture_rows(tmp_path)
        src_file = tmp_path / "sources.jsonl"
        cand_file = tmp_path / "cands.jsonl"
        src_file.write_text("\n".join(json.dumps(r) for r in sources))
        cand_file.write_text("\n".join(json.dumps(r) for r in candidates))

        out_cli = tmp_path / "out_cli"
        code = dispatch(["select", "--sources", str(src_file),
                         "--candidates", str(cand_file),
                         "--out", str(out_cli)])
        assert code == 0

        out_mod = tmp_path / "out_mod"
        selector.assemble_dataset(
            [selector.SourceSample(**r) for r in sources],
            [selector.CandidateRecord.from_dict(r) for r in candidates],
            out_mod)

        cli_meta = (out_cli / "metadata.jsonl").read_text()
        mod_meta = (out_mod / "metadata.jsonl").read_text()
        assert cli_meta == mod_meta

        rows = [json.loads(line) for line in cli_meta.strip().splitlines()]
        for row in rows:
            pool = [c for c in candidates
                    if c["sha256_orig"] == row["sha256_orig"]]
            assert row["generator"] == alg1_reference(pool)

    def test_malformed_rows_exit_2(self, tmp_path, capsys):
        src_file = tmp_path / "sources.jsonl"
        src_file.write_text(json.dumps({"sha256": "xx",
                                        "label_scheme": "galaxy",
                                        "label_value": "m31"}))
        cand_file = tmp_path / "cands.jsonl"
        cand_file.write_text("")
        assert dispatch(["select", "--sources", str(src_file),
                         "--candidates", str(cand_file),
                         "--out", str(tmp_path / "out")]) == 2


class TestStatsCommand:
    def test_writes_summary_and_csvs(self, tmp_path, capsys):
        rows = []
        for i in range(40):
            rows.append({"orig_verdict_malicious": True,
                         "adv_score": 0.1 if i < 30 else 0.95,
                         "orig_score": 0.9, "generator": "g1",
                         "orig_size": 1000, "modified_size": 1200})
        pairs = tmp_path / "pairs.jsonl"
        pairs.write_text("\n".join(json.dumps(r) for r in rows))
        out = tmp_path / "out"
        code = dispatch(["stats", "--pairs", str(pairs),
                         "--out", str(out), "--threshold", "0.871"])
        assert code == 0
        summary = json.loads((out / "stats.json").read_text())
        assert summary["evasion_rate"] == pytest.approx(0.75)
        assert (out / "score_drops.csv").exists()
        assert (out / "size_ratios.csv").exists()

    def test_empty_pairs_exit_2(self, tmp_path):
        pairs = tmp_path / "pairs.jsonl"
        pairs.write_text("")
        assert dispatch(["stats", "--pairs", str(pairs),
                         "--out", str(tmp_path / "out")]) == 2


class TestPoisonCommands:
    @staticmethod
    def bundle(tmp_path, rng) -> str:
        dim = 8
        n = 120
        benign = rng.normal(0.0, 0.4, size=(n, dim))
        malicious = rng.normal(3.0, 0.4, size=(n, dim))
        train_x = np.vstack([benign, malicious]).astype(np.float32)
        train_y = np.array([0] * n + [1] * n, dtype=np.int8)
        adv = rng.normal(0.0, 0.4, size=(60, dim)).astype(np.float32)
        path = tmp_path / "bundle.npz"
        np.savez(path, train_x=train_x, train_y=train_y,
                 test_x=train_x, test_y=train_y,
                 adv_pool=adv, adv_test=adv)
        return str(path)

    def test_small_grid_runs(self, tmp_path, rng, capsys):
        data = self.bundle(tmp_path, rng)
        cfg = write_config(tmp_path / "c.json", {
            "rng_seed": 3,
            "gbdt": {"max_rounds": 5, "num_leaves": 4,
                     "min_data_in_leaf": 10, "early_stop_rounds": 0}})
        out = tmp_path / "out"
        code = dispatch(["--config", cfg, "poison", "run",
                         "--data", data, "--out", str(out),
                         "--grid", "small"])
        assert code == 0
        echoed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert echoed == {"cells": 6, "failures": 0}
        heat = (out / "evasion_heatmap.csv").read_text().splitlines()
        assert len(heat) == 4  # header + 3 tau rows

    def test_missing_bundle_key_exit_2(self, tmp_path, rng):
        path = tmp_path / "partial.npz"
        np.savez(path, train_x=np.zeros((4, 2), dtype=np.float32))
        assert dispatch(["poison", "run", "--data", str(path),
                         "--out", str(tmp_path / "out")]) == 2

    def test_cross_eval(self, tmp_path, rng, capsys):
        data = self.bundle(tmp_path, rng)
        bundle = np.load(data)
        hp = gbdt.Hyperparams(max_rounds=5, num_leaves=4,
                              min_data_in_leaf=10, early_stop_rounds=0)
        model = gbdt.train(bundle["train_x"], bundle["train_y"], hp)
        model_path = tmp_path / "model.json"
        model.save(model_path)
        code = dispatch(["poison", "cross-eval", "--model", str(model_path),
                         "--data", data])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["f1"] == pytest.approx(1.0)
