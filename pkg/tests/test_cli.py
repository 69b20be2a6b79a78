from __future__ import annotations

import json

from click.testing import CliRunner

from dbdoctor.bench import bundled_scenarios_dir
from dbdoctor.cli import main

B = 1684600070


def test_cli_bench_writes_results(tmp_path):
    out = tmp_path / "bench.json"
    result = CliRunner().invoke(main, ["bench", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "legality 11/11" in result.output
    payload = json.loads(out.read_text())
    assert payload["accuracy_count"] == {"dbot": 9, "baseline": 4}


def test_cli_diagnose_demo(tmp_path):
    alert = bundled_scenarios_dir().parent / "demo" / "alert.json"
    result = CliRunner().invoke(
        main,
        [
            "diagnose",
            "--alert",
            str(alert),
            "--sessions-dir",
            str(tmp_path / "sessions"),
        ],
    )
    assert result.exit_code == 0, result.output
    assert "MISSING_INDEXES" in result.output


def test_cli_ingest(tmp_path):
    doc = tmp_path / "guide.md"
    doc.write_text("# Bloat\nDead tuples slow scans. (alpha)\n")
    seg = {
        "name": "many_dead_tuples",
        "content": "bloat slows scans",
        "metrics": ["dead_rate"],
        "steps": "If dead_rate exceeds (0.02), vacuum. We suggest to vacuum.",
    }
    script = tmp_path / "script.json"
    script.write_text(
        json.dumps(
            [
                {"match": "[summarize-chunk]", "reply": "bloat summary"},
                {"match": "[extract-experience]", "reply": json.dumps(seg)},
            ]
        )
    )
    kb_path = tmp_path / "kb.json"
    result = CliRunner().invoke(
        main,
        ["ingest", str(doc), "--kb", str(kb_path), "--script", str(script)],
    )
    assert result.exit_code == 0, result.output
    assert "ingested 1 segments" in result.output
    assert "many_dead_tuples" in kb_path.read_text()


def test_cli_prompt_tune(tmp_path):
    samples_dir = tmp_path / "samples"
    fixtures = samples_dir / "fixtures"
    fixtures.mkdir(parents=True)
    (fixtures / "cpu_usage.json").write_text(
        json.dumps(
            {
                "metric_name": "cpu_usage",
                "points": [[B + i, v] for i, v in enumerate([0.85, 0.9, 0.95, 0.9, 0.85])],
            }
        )
    )
    (samples_dir / "sample0.json").write_text(
        json.dumps(
            {
                "alert": {
                    "alert_id": "s0",
                    "start_time": B,
                    "end_time": B + 4,
                    "description": "cpu pinned",
                    "anomaly_class": "running_slow",
                },
                "fixture_dir": "fixtures",
                "labeled_causes": ["CPU_PIN"],
                "thresholds": {"cpu_usage": 0.8},
            }
        )
    )
    (samples_dir / "candidates.json").write_text(
        json.dumps(["{task_description} {anomaly} {tools} {experience}"])
    )
    script = tmp_path / "score_script.json"
    script.write_text(
        json.dumps(
            [
                {
                    "match": "[propose-action]",
                    "reply": (
                        "Thought: x\nAction: is_abnormal_metric\nAction Input: "
                        + json.dumps(
                            {
                                "start_time": B,
                                "end_time": B + 4,
                                "metric_name": "cpu_usage",
                            }
                        )
                    ),
                },
                {"match": "[reflect]", "reply": "useful"},
            ]
        )
    )
    out = tmp_path / "tuning.json"
    result = CliRunner().invoke(
        main,
        [
            "prompt-tune",
            "--samples",
            str(samples_dir),
            "--script",
            str(script),
            "--out",
            str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(out.read_text())
    assert payload["chosen"].startswith("{task_description}")
