"""Shared fixture builders: benchmark package directories and model cards."""

import json
from pathlib import Path

import pytest

from depkit.protocol import ModelCard


def write_benchmark(root: Path, *, dataset_id="toy", version="1.0", rows=None,
                    fields=None, template="Q: {q}\nA:", metrics=("acc",),
                    subtasks=(), postprocess=None, data_format="jsonl",
                    sample_count=None, loader_extra=None, card_extra=None) -> Path:
    """Write a complete benchmark package directory and return its path."""
    rows = rows if rows is not None else [
        {"q": "2+2", "a": "4"},
        {"q": "3+3", "a": "6"},
        {"q": "5+1", "a": "6"},
    ]
    fields = fields or {"inputs": ["q"], "gold": "a"}
    root.mkdir(parents=True, exist_ok=True)
    (root / "data").mkdir(exist_ok=True)

    card = {
        "dataset_id": dataset_id,
        "version": version,
        "description": "test fixture",
        "task_type": "qa",
        "subtasks": list(subtasks),
        "metrics": list(metrics),
        "sample_count": len(rows) if sample_count is None else sample_count,
        "data_format": data_format,
        "prompt_template_ref": "prompt.tmpl",
    }
    card.update(card_extra or {})
    (root / "dataset.card.json").write_text(json.dumps(card, indent=1), encoding="utf-8")

    loader = {"format": data_format, "fields": fields}
    if postprocess:
        loader["postprocess"] = postprocess
    loader.update(loader_extra or {})
    (root / "loader.json").write_text(json.dumps(loader, indent=1), encoding="utf-8")

    (root / "prompt.tmpl").write_text(template, encoding="utf-8")

    if data_format == "jsonl":
        lines = "\n".join(json.dumps(row, ensure_ascii=False) for row in rows)
        (root / "data" / "rows.jsonl").write_text(lines + "\n", encoding="utf-8")
    elif data_format == "csv":
        names = sorted({k for row in rows for k in row})
        out = [",".join(names)]
        for row in rows:
            out.append(",".join(str(row.get(n, "")) for n in names))
        (root / "data" / "rows.csv").write_text("\n".join(out) + "\n", encoding="utf-8")
    return root


def scripted_card(model_id: str, script: dict, **card_kwargs) -> ModelCard:
    return ModelCard(model_id=model_id,
                     endpoint={"kind": "scripted", "script": script},
                     **card_kwargs)


def write_model_card(directory: Path, model_id: str, script: dict) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{model_id}.model.json"
    path.write_text(json.dumps({
        "model_id": model_id,
        "display_name": model_id,
        "endpoint": {"kind": "scripted", "script": script},
    }, indent=1), encoding="utf-8")
    return path


def echo_benchmark(root: Path, n: int, correct_every: int = 2, **kwargs) -> Path:
    """Benchmark where an echo model answers correctly every k-th sample.

    Template is the bare question, so echoing the prompt reproduces the gold
    for rows where a == q. Expected accuracy: ceil-free n-even fraction.
    """
    rows = []
    for i in range(n):
        value = f"value-{i:04d}"
        rows.append({"q": value, "a": value if i % correct_every == 0 else f"gold-{i:04d}"})
    return write_benchmark(root, rows=rows, template="{q}", **kwargs)


ECHO_SCRIPT = {"responses": {"*": {"status": 200, "echo": True}}}


@pytest.fixture
def toy_benchmark(tmp_path):
    return write_benchmark(tmp_path / "bench")


@pytest.fixture
def echo_card():
    return scripted_card("echo", ECHO_SCRIPT)
