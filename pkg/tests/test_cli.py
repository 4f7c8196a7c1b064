import hashlib
import json

import pytest

from main import main
from src.load_configs import apply_overrides, build_run_config, load_configs, mask_secrets
from src.errors import ConfigError
from tests.conftest import write_rows


def _config(tmp_path, **sections) -> str:
    data = {
        "seed": 0,
        "cache": {"enabled": True, "dir": str(tmp_path / "cache")},
        "pipeline": {"shots": 0, "parallelism": 2},
        "llm": {"backend": "simulated", "simulated": {"drop_count": 2}},
        "verifier": {"backend": "oracle"},
    }
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    path = tmp_path / "configs.yml"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def _sha(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_data_count_and_determinism(tmp_path, six_pair_seed):
    seed_file = write_rows(tmp_path / "seed.jsonl", [r.to_row() for r in six_pair_seed])
    config = _config(tmp_path)
    out = tmp_path / "verifier.jsonl"

    assert main(["--config", config, "gen-data", "--seed-file", str(seed_file), "--out", str(out)]) == 0
    assert len(out.read_text(encoding="utf-8").splitlines()) == 11
    stats = json.loads((tmp_path / "verifier.stats.json").read_text(encoding="utf-8"))
    assert stats["n_examples"] == 11
    assert stats["rng_seed"] == 0

    first = _sha(out)
    assert main(["--config", config, "gen-data", "--seed-file", str(seed_file), "--out", str(out)]) == 0
    assert _sha(out) == first


def test_gen_data_invalid_line(tmp_path, caplog):
    seed_file = tmp_path / "seed.jsonl"
    seed_file.write_text('{"text": "t", "graph": [["a", "r", "b"]]}\n{broken\n', encoding="utf-8")
    code = main(["--config", _config(tmp_path), "gen-data", "--seed-file", str(seed_file), "--out", str(tmp_path / "o.jsonl")])
    assert code == 1
    assert "seed.jsonl:2" in caplog.text


def test_run_with_simulated_backends(tmp_path, dataset_file, corpus):
    run_dir = tmp_path / "run"
    code = main(["--config", _config(tmp_path), "run", "--dataset", str(dataset_file), "--out", str(run_dir)])
    assert code == 0
    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    assert len(report["rows"]) == 4
    assert report["rows"][-1]["t_f1"] == 100.0
    config = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    assert config["llm"]["api_key_env"] == "OPENAI_API_KEY"
    assert config["seed"] == 0


@pytest.mark.parametrize("mode, expected_calls", [("offline", 1), ("prompt", 3)])
def test_run_modes_differ_in_llm_calls(tmp_path, dataset_file, corpus, mode, expected_calls):
    run_dir = tmp_path / mode
    code = main(["--config", _config(tmp_path), "run", "--dataset", str(dataset_file), "--out", str(run_dir), "--mode", mode])
    assert code == 0
    with open(run_dir / "traces.jsonl", encoding="utf-8") as file:
        traces = [json.loads(line) for line in file]
    assert all(t["llm_calls"] == expected_calls for t in traces)


def test_run_missing_api_key(tmp_path, dataset_file, monkeypatch):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    code = main(["--config", _config(tmp_path), "run", "--dataset", str(dataset_file), "--llm", "openai"])
    assert code == 2


def test_run_fails_above_failed_ratio(tmp_path, dataset_file):
    config = _config(tmp_path, pipeline={"malformed_output_handling": "error"}, llm={"simulated": {"preamble": "["}})
    code = main(["--config", config, "run", "--dataset", str(dataset_file), "--out", str(tmp_path / "run")])
    assert code == 1


def test_evaluate(tmp_path, dataset_file, corpus, capsys):
    config = _config(tmp_path)
    out = tmp_path / "report.json"
    per_instance = tmp_path / "scores.jsonl"
    code = main(["--config", config, "evaluate", "--pred", str(dataset_file), "--gold", str(dataset_file), "--out", str(out), "--per-instance", str(per_instance)])
    assert code == 0
    report = json.loads(out.read_text(encoding="utf-8"))
    assert (report["t_f1"], report["g_f1"], report["g_bs"], report["ged"]) == (100.0, 100.0, 100.0, 0.0)
    assert len(per_instance.read_text(encoding="utf-8").splitlines()) == len(corpus)
    assert "T-F1" in capsys.readouterr().out


def test_evaluate_two_thirds(tmp_path):
    gold = write_rows(tmp_path / "gold.jsonl", [{"id": "1", "text": "t", "graph": [["a", "r", "b"], ["c", "s", "d"], ["e", "t", "f"]]}])
    pred = write_rows(tmp_path / "pred.jsonl", [{"id": "1", "graph": "[[a, r, b], [c, s, d], [e, t, x]]"}])
    out = tmp_path / "report.json"
    assert main(["--config", _config(tmp_path), "evaluate", "--pred", str(pred), "--gold", str(gold), "--out", str(out)]) == 0
    assert round(json.loads(out.read_text(encoding="utf-8"))["t_f1"], 2) == 66.67


def test_evaluate_id_mismatch(tmp_path, caplog):
    gold = write_rows(tmp_path / "gold.jsonl", [{"id": "1", "text": "t", "graph": [["a", "r", "b"]]}])
    pred = write_rows(tmp_path / "pred.jsonl", [{"id": "2", "graph": [["a", "r", "b"]]}])
    assert main(["--config", _config(tmp_path), "evaluate", "--pred", str(pred), "--gold", str(gold)]) == 1
    assert "do not match" in caplog.text


def test_augment(tmp_path):
    pairs = write_rows(
        tmp_path / "pairs.jsonl",
        [
            {"id": "g", "text": "Alan Bean flew on Apollo 12.", "graph": [["Alan Bean", "mission", "Apollo 12"]]},
            {"id": "u", "text": "Unrelated.", "graph": [["Grace Hopper", "rank", "rear admiral"]]},
        ],
    )
    references = write_rows(
        tmp_path / "references.jsonl",
        [
            {
                "id": "g",
                "text": "Alan Bean flew on Apollo 12.",
                "graph": [["Alan Bean", "mission", "Apollo 12"]] + [["Alan Bean", f"fact {i}", f"v{i}"] for i in range(6)],
            }
        ],
    )
    out = tmp_path / "augmented.jsonl"
    code = main(
        ["--config", _config(tmp_path), "augment", "--pairs", str(pairs), "--out", str(out),
         "--threshold", "1.0", "--verifier", "oracle", "--references", str(references)]
    )
    assert code == 0
    rows = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
    assert [r["id"] for r in rows] == ["g"]
    assert len(rows[0]["graph"]) == 5
    stats = json.loads((tmp_path / "augmented.stats.json").read_text(encoding="utf-8"))
    assert stats["kept"] == 1
    assert stats["dropped"] == 1
    assert stats["max_iterations"] == 4
    assert stats["triples_added_per_iteration"] == [1, 1, 1, 1]


def test_report_rerenders_run(tmp_path, dataset_file, capsys):
    config = _config(tmp_path)
    run_dir = tmp_path / "run"
    assert main(["--config", config, "run", "--dataset", str(dataset_file), "--out", str(run_dir)]) == 0
    table = (run_dir / "report.txt").read_text(encoding="utf-8")
    capsys.readouterr()

    assert main(["--config", config, "report", "--run-dir", str(run_dir), "--dataset", str(dataset_file)]) == 0
    assert capsys.readouterr().out.strip() == table.strip()


def test_report_uses_the_recorded_iteration_cap(tmp_path, dataset_file, capsys):
    config = _config(tmp_path)
    run_dir = tmp_path / "run"
    code = main(["--config", config, "run", "--dataset", str(dataset_file), "--out", str(run_dir), "--max-iterations", "1"])
    assert code == 0
    table = (run_dir / "report.txt").read_text(encoding="utf-8")
    capsys.readouterr()

    assert main(["--config", config, "report", "--run-dir", str(run_dir)]) == 0
    printed = capsys.readouterr().out.strip()
    assert printed == table.strip()
    stages = [line.split("  ")[0].strip() for line in printed.splitlines()[2:]]
    assert stages == ["Base", "Iteration 1"]


# config layer


def test_env_interpolation(tmp_path, monkeypatch):
    monkeypatch.setenv("VERIGRAPH_TEST_URL", "http://verifier.local")
    monkeypatch.delenv("VERIGRAPH_UNSET_VAR", raising=False)
    path = tmp_path / "c.yml"
    path.write_text("verifier:\n  base_url: ${VERIGRAPH_TEST_URL}\n  endpoint: ${VERIGRAPH_UNSET_VAR:-/check}\n", encoding="utf-8")
    cfg = build_run_config(load_configs(path))
    assert cfg.verifier.base_url == "http://verifier.local"
    assert cfg.verifier.endpoint == "/check"

    path.write_text("verifier:\n  base_url: ${VERIGRAPH_UNSET_VAR}\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_configs(path)


def test_overrides_and_unknown_keys():
    data = apply_overrides({"pipeline": {"mode": "prompt"}}, {"pipeline.mode": "offline", "pipeline.shots": None})
    assert build_run_config(data).pipeline.mode == "offline"
    assert build_run_config(data).pipeline.shots == 6
    with pytest.raises(ConfigError):
        build_run_config({"pipeline": {"not_a_key": 1}})


def test_secrets_masked():
    masked = mask_secrets({"llm": {"api_key": "sk-123", "api_key_env": "OPENAI_API_KEY"}})
    assert masked["llm"]["api_key"] == "***"
    assert masked["llm"]["api_key_env"] == "OPENAI_API_KEY"


def test_ged_timeout_must_be_positive(tmp_path, dataset_file):
    config = _config(tmp_path, metrics={"ged_timeout": 0})
    assert main(["--config", config, "evaluate", "--pred", str(dataset_file), "--gold", str(dataset_file)]) == 2
    config = _config(tmp_path, metrics={"ged_timeout": 30})
    assert main(["--config", config, "evaluate", "--pred", str(dataset_file), "--gold", str(dataset_file), "--out", str(tmp_path / "r.json")]) == 0
