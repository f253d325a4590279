"""
Operator CLI: JSON on stdout, diagnostics on stderr, exit codes 0/1/2
"""

import json
import os

import pytest

from conftest import TOY_DOCS
from spark_memory.cli import build_parser, main
from spark_memory.evalkit import records_from_histogram


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in list(os.environ):
        if name.startswith("SPARK_"):
            monkeypatch.delenv(name, raising=False)


@pytest.fixture
def spark(store_root, capsys):
    """Run the CLI against the temporary store; returns (exit code, stdout, stderr)"""
    def run(*argv):
        code = main(["--store-root", str(store_root), *argv])
        out, err = capsys.readouterr()
        return code, out, err
    return run


def write_lines(path, rows):
    path.write_text(
        "".join((row if isinstance(row, str) else json.dumps(row)) + "\n" for row in rows),
        encoding="utf-8",
    )
    return str(path)


@pytest.fixture
def docs_file(tmp_path):
    rows = [{k: v for k, v in d.items() if k != "source"} if d["source"] == "pandas" else d for d in TOY_DOCS]
    return write_lines(tmp_path / "docs.jsonl", rows)


def trace_row(trace_id, n=0, hindsight="Use np.argsort to get the sort order of an array"):
    return {
        "trace_id": trace_id,
        "timestamp": f"2025-01-01T00:00:{n:02d}Z",
        "problem_text": "How do I get the order that sorts an array?",
        "code_context": "",
        "outcome": "no_recommendation_available",
        "hindsight_feedback": hindsight,
        "agent_tag": "cli-test",
    }


# ============================================================================
# USAGE
# ============================================================================

def test_usage_errors_exit_2(spark, store_root):
    assert spark()[0] == 2
    assert spark("query")[0] == 2
    assert spark("teleport")[0] == 2
    assert spark("export", "--what", "everything")[0] == 2
    assert not store_root.exists()


def test_parser_knows_every_command():
    parser = build_parser()
    for argv in (
        ["ingest", "--input", "x.jsonl"],
        ["epoch", "run"],
        ["query", "--problem", "p"],
        ["stats"],
        ["export", "--what", "epochs"],
        ["serve", "--transport", "http", "--port", "9000"],
        ["synth-traces", "--problems", "p.jsonl", "--solutions", "s.jsonl"],
        ["eval", "--scores", "s.jsonl", "--mode", "quality"],
    ):
        assert callable(parser.parse_args(argv).handler)


# ============================================================================
# INGEST / STATS / QUERY
# ============================================================================

def test_ingest_docs_and_stats(spark, docs_file):
    code, out, _ = spark("ingest", "--input", docs_file, "--source", "pandas")
    assert code == 0
    report = json.loads(out)
    assert report["inserted"] == 6
    assert report["rejected"] == 0

    code, out, _ = spark("ingest", "--input", docs_file, "--source", "pandas")
    assert json.loads(out)["deduplicated"] == 6
    assert json.loads(out)["inserted"] == 0

    code, out, _ = spark("stats")
    assert code == 0
    stats = json.loads(out)
    assert stats["doc_count"] == 6
    assert stats["trace_count"] == 0
    assert stats["epoch_number"] == 0
    assert stats["index_version"].startswith("docs-6-")


def test_ingest_rejects_bad_lines_by_position(spark, tmp_path):
    path = write_lines(tmp_path / "mixed.jsonl", [TOY_DOCS[0], "{broken", {"source": "pandas", "path": "x"}])
    code, out, _ = spark("ingest", "--input", path)
    assert code == 0
    report = json.loads(out)
    assert report["inserted"] == 1
    assert [r["index"] for r in report["rejections"]] == [1, 2]


def test_missing_input_file(spark, tmp_path):
    code, out, err = spark("ingest", "--input", str(tmp_path / "nope.jsonl"))
    assert code == 1
    assert out == ""
    assert err.startswith("❌ ")


def test_input_file_that_is_not_utf8(spark, tmp_path):
    path = tmp_path / "latin1.jsonl"
    path.write_bytes(b'{"source": "pandas", "path": "caf\xe9", "body": "x"}\n\xff\xfe\n')
    code, out, err = spark("ingest", "--input", str(path))
    assert code == 1
    assert out == ""
    assert err.startswith("❌ ")


def test_query(spark, docs_file):
    spark("ingest", "--input", docs_file, "--source", "pandas")
    code, out, _ = spark("query", "--problem", "How do I merge two DataFrames on a key?",
                         "--code-context", "import pandas as pd")
    assert code == 0
    rec = json.loads(out)
    assert rec["epoch_number"] == 0
    assert rec["code_context"] == "import pandas as pd"
    assert "api/pandas.merge" in [c["locator"] for c in rec["citations"]]


def test_query_unknown_epoch(spark, docs_file):
    spark("ingest", "--input", docs_file, "--source", "pandas")
    code, out, err = spark("query", "--problem", "How do I sort?", "--epoch", "9")
    assert code == 1
    assert out == ""
    assert "❌" in err


def test_pretty_output(spark):
    code, out, _ = spark("--pretty", "stats")
    assert code == 0
    assert out.startswith("{\n  ")
    assert json.loads(out)["doc_count"] == 0


# ============================================================================
# TRACES / EPOCHS / EXPORT
# ============================================================================

def test_trace_ingest_epoch_and_export(spark, tmp_path):
    rows = [trace_row("t-1", 0), trace_row("t-2", 1), {"trace_id": "t-3", "timestamp": "yesterday",
                                                        "outcome": "accepted"}]
    path = write_lines(tmp_path / "traces.jsonl", rows)
    code, out, _ = spark("ingest", "--kind", "traces", "--input", path)
    assert code == 0
    report = json.loads(out)
    assert report["inserted"] == 2
    assert report["rejected"] == 1
    assert report["rejections"][0]["index"] == 2

    code, out, _ = spark("ingest", "--kind", "traces", "--input", path)
    assert json.loads(out)["deduplicated"] == 2

    code, out, _ = spark("epoch", "run")
    assert code == 0
    epoch = json.loads(out)
    assert epoch["epoch_number"] == 1
    assert epoch["traces_consumed"] == 2

    code, out, _ = spark("epoch", "run")
    assert json.loads(out)["epoch_number"] == 1
    assert json.loads(out)["traces_consumed"] == 0

    code, out, _ = spark("export", "--what", "epochs")
    assert [e["epoch_number"] for e in json.loads(out)] == [0, 1]

    code, out, _ = spark("export", "--what", "traces")
    assert [t["trace_id"] for t in json.loads(out)] == ["t-1", "t-2"]

    code, out, _ = spark("export", "--what", "snapshot", "--epoch", "0")
    assert json.loads(out)["epoch_number"] == 0
    assert json.loads(out)["insights"] == []

    code, out, _ = spark("export", "--what", "insights")
    assert code == 0
    assert isinstance(json.loads(out), list)


def test_trace_with_non_text_hindsight_is_rejected(spark, tmp_path):
    """A rejected entry never reaches the trace log, so later epochs still run"""
    rows = [trace_row("t-1", 0), dict(trace_row("t-2", 1), outcome="rejected", hindsight_feedback=123)]
    code, out, _ = spark("ingest", "--kind", "traces", "--input", write_lines(tmp_path / "traces.jsonl", rows))
    report = json.loads(out)
    assert (report["inserted"], report["rejected"]) == (1, 1)
    assert "hindsight_feedback" in report["rejections"][0]["reason"]

    code, out, _ = spark("epoch", "run")
    assert code == 0
    assert json.loads(out)["traces_consumed"] == 1


def test_export_unknown_epoch(spark):
    code, _, err = spark("export", "--what", "snapshot", "--epoch", "4")
    assert code == 1
    assert "❌" in err


# ============================================================================
# SYNTHETIC TRACES / EVAL
# ============================================================================

def test_synth_traces_writes_jsonl(spark, tmp_path):
    problems = write_lines(tmp_path / "problems.jsonl", [
        json.dumps("Group sales by region and sum them"),
        {"problem": "Sort an array by its second column"},
    ])
    solutions = write_lines(tmp_path / "solutions.jsonl", [
        {"solution": "df.groupby('region')['sales'].sum()"},
        {"text": "a[a[:, 1].argsort()]"},
    ])
    code, out, _ = spark("synth-traces", "--problems", problems, "--solutions", solutions,
                         "--base-time", "2025-03-01T12:00:00Z")
    assert code == 0
    traces = [json.loads(line) for line in out.splitlines()]
    assert len(traces) == 2
    assert all(t["trace_id"].startswith("syn-") for t in traces)
    assert [t["timestamp"] for t in traces] == ["2025-03-01T12:00:00Z", "2025-03-01T12:00:01Z"]

    synthesized = write_lines(tmp_path / "synth.jsonl", out.splitlines())
    code, out, _ = spark("ingest", "--kind", "traces", "--input", synthesized)
    assert json.loads(out)["inserted"] == 2


def test_synth_traces_count_mismatch(spark, tmp_path):
    problems = write_lines(tmp_path / "problems.jsonl", [json.dumps("a"), json.dumps("b")])
    solutions = write_lines(tmp_path / "solutions.jsonl", [json.dumps("x")])
    code, out, err = spark("synth-traces", "--problems", problems, "--solutions", solutions)
    assert code == 1
    assert out == ""
    assert "2 problems but 1 reference solutions" in err


def test_synth_traces_bad_line(spark, tmp_path):
    problems = write_lines(tmp_path / "problems.jsonl", [json.dumps("a"), {"other": 1}])
    solutions = write_lines(tmp_path / "solutions.jsonl", [json.dumps("x"), json.dumps("y")])
    code, _, err = spark("synth-traces", "--problems", problems, "--solutions", solutions)
    assert code == 1
    assert "problems.jsonl:2:" in err


def test_eval_quality(spark, tmp_path):
    rows = [r.to_dict() for r in records_from_histogram("qwen3-coder", "with_spark", (7, 18, 5, 17, 953))]
    rows += [r.to_dict() for r in records_from_histogram("qwen3-coder", "no_spark", (47, 133, 74, 39, 707))]
    code, out, _ = spark("eval", "--scores", write_lines(tmp_path / "scores.jsonl", rows), "--mode", "quality")
    assert code == 0
    result = json.loads(out)
    means = {(c["model_tag"], c["condition"]): c["mean"] for c in result["cells"]}
    assert means[("qwen3-coder", "no_spark")] == 4.23
    assert means[("qwen3-coder", "with_spark")] == 4.89
    assert result["changes"]["qwen3-coder"] == 0.66


def test_eval_helpfulness(spark, tmp_path):
    rows = ([{"problem_id": f"p{i}", "band": "EXTREMELY_HELPFUL"} for i in range(3)]
            + [{"problem_id": "p3", "band": "GOOD"}])
    code, out, _ = spark("eval", "--scores", write_lines(tmp_path / "bands.jsonl", rows), "--mode", "helpfulness")
    assert code == 0
    result = json.loads(out)
    assert result["top_share_percent"] == 75.0
    assert result["top_two_share_percent"] == 100.0


def test_eval_bad_record(spark, tmp_path):
    path = write_lines(tmp_path / "scores.jsonl", [{"problem_id": "a", "condition": "no_spark", "score": 7}])
    code, _, err = spark("eval", "--scores", path, "--mode", "quality")
    assert code == 1
    assert "scores.jsonl:1:" in err
