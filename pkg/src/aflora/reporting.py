"""Artifact files: report JSON, step and freeze-event CSVs, heatmap grid, checkpoints.

CSV files are UTF-8 with LF line endings. Their first line is a comment
``# config_hash=<hex>`` tying them to the run's config; readers skip lines
starting with ``#``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .adapters import MATRICES, SITES
from .freezing import FreezeEvent
from .trainer import ExperimentReport, StepRecord

CHECKPOINT_FORMAT = "aflora-checkpoint"
CHECKPOINT_VERSION = 1

STEP_COLUMNS = [f.name for f in fields(StepRecord)]
EVENT_COLUMNS = ["step", "block", "site", "matrix", "score_at_freeze"]
COMPARE_COLUMNS = [
    "method",
    "avg_params",
    "total_flops",
    "wall_seconds",
    "normalized_params",
    "normalized_flops",
    "normalized_runtime",
]


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv_text(header: list[str], rows, config_hash: str | None) -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def csv_config_hash(path: str | Path) -> str | None:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    return first.strip().split("=", 1)[1] if first.startswith("# config_hash=") else None


def report_json(report: ExperimentReport, extra: dict | None = None) -> str:
    payload = report.summary()
    payload.update(extra or {})
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_report(path, report: ExperimentReport, extra: dict | None = None) -> None:
    _write_text(Path(path), report_json(report, extra))


def write_steps(path, records, config_hash: str | None = None) -> None:
    rows = ([getattr(r, c) for c in STEP_COLUMNS] for r in records)
    _write_text(Path(path), _csv_text(STEP_COLUMNS, rows, config_hash))


def write_freeze_events(path, events, config_hash: str | None = None) -> None:
    rows = ([e.step, e.block, e.site, e.matrix, repr(e.score)] for e in events)
    _write_text(Path(path), _csv_text(EVENT_COLUMNS, rows, config_hash))


def read_freeze_events(path) -> list[FreezeEvent]:
    return [
        FreezeEvent(int(r["step"]), int(r["block"]), r["site"], r["matrix"], float(r["score_at_freeze"]))
        for r in read_csv(path)
    ]


def write_heatmap(path, labels, grid, config_hash: str | None = None) -> None:
    n_blocks = len(grid[0]) if grid else 0
    header = ["pm"] + [f"block{b}" for b in range(n_blocks)]
    rows = ([label, *row] for label, row in zip(labels, grid))
    _write_text(Path(path), _csv_text(header, rows, config_hash))


def write_table(path, columns, rows, config_hash: str | None = None) -> None:
    def cell(v):
        return "" if v is None else (repr(v) if isinstance(v, float) else v)

    body = ([cell(row.get(c)) for c in columns] for row in rows)
    _write_text(Path(path), _csv_text(columns, body, config_hash))


# ----------------------------------------------------------------------------
# checkpoints


def _entry(layer_id: str, component: str, array: np.ndarray, **meta) -> dict:
    entry = {"layer_id": layer_id, "component": component, "shape": list(array.shape)}
    entry.update(meta)
    entry["data"] = [float(x) for x in array.reshape(-1)]
    return entry


def save_checkpoint(path, model, config_hash: str = "") -> None:
    """JSON dump of every tensor with a versioned header.

    Entries are ``{layer_id, component, shape, data}``; projection-matrix entries
    also carry ``frozen`` and ``freeze_step``.
    """
    entries = [
        _entry("embedding", "tokens", model.tok_emb.data),
        _entry("embedding", "positions", model.pos_emb.data),
    ]
    for block, sites in enumerate(model.blocks):
        for site in SITES:
            layer = sites[site]
            layer_id = f"block{block}.{site}"
            entries.append(_entry(layer_id, "w0", layer.w0.data))
            for matrix in MATRICES:
                entries.append(
                    _entry(
                        layer_id,
                        matrix,
                        layer.pm(matrix).data,
                        frozen=layer.is_frozen(matrix),
                        freeze_step=layer.freeze_step(matrix),
                    )
                )
            entries.append(_entry(layer_id, "vec_d", layer.vec_d.data))
            entries.append(_entry(layer_id, "vec_b", layer.vec_b.data))
    entries.append(_entry("head", "weight", model.head_w.data))
    entries.append(_entry("head", "bias", model.head_b.data))
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "model_config": model.config.to_dict(),
        "entries": entries,
    }
    _write_text(Path(path), json.dumps(payload, sort_keys=True) + "\n")


def load_checkpoint(path) -> dict:
    """Return the header plus ``tensors[(layer_id, component)] -> ndarray``."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    tensors = {
        (e["layer_id"], e["component"]): np.array(e["data"], dtype=np.float64).reshape(e["shape"])
        for e in payload["entries"]
    }
    meta = {
        (e["layer_id"], e["component"]): {"frozen": e["frozen"], "freeze_step": e["freeze_step"]}
        for e in payload["entries"]
        if "frozen" in e
    }
    return {**{k: v for k, v in payload.items() if k != "entries"}, "tensors": tensors, "pm_state": meta}


def restore_checkpoint(model, path) -> None:
    """Copy checkpoint data into a model built from the same config."""
    ckpt = load_checkpoint(path)
    tensors = ckpt["tensors"]
    model.tok_emb.data[...] = tensors[("embedding", "tokens")]
    model.pos_emb.data[...] = tensors[("embedding", "positions")]
    for block, sites in enumerate(model.blocks):
        for site in SITES:
            layer = sites[site]
            layer_id = f"block{block}.{site}"
            layer.w0.data[...] = tensors[(layer_id, "w0")]
            layer.vec_d.data[...] = tensors[(layer_id, "vec_d")]
            layer.vec_b.data[...] = tensors[(layer_id, "vec_b")]
            for matrix in MATRICES:
                layer.pm(matrix).data[...] = tensors[(layer_id, matrix)]
                state = ckpt["pm_state"][(layer_id, matrix)]
                if state["frozen"] and not layer.is_frozen(matrix):
                    layer.freeze(matrix, state["freeze_step"])
    model.head_w.data[...] = tensors[("head", "weight")]
    model.head_b.data[...] = tensors[("head", "bias")]


def events_as_dicts(events) -> list[dict]:
    return [asdict(e) for e in events]
