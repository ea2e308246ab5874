"""Retrieval report assembly: per-task records, meta-task aggregates, files.

Aggregation follows the macro-average convention: tasks fold into their
meta-task, each meta-task score is the unweighted mean over its member
tasks, and the overall score is the unweighted mean over meta-tasks.
"""

import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .checkpoint import canonical_json
from .errors import EmptyDataset, NonFinite, WriteFailure
from .metrics import META_TASK_OF

REPORT_SCHEMA_VERSION = 1
METRIC_KEYS = ("p_at_1", "r_at_5", "ndcg_at_5")
_PROVENANCE_KEYS = ("seed", "config_hash", "ecr_source", "model_hash", "timestamp")


def report_timestamp() -> str:
    """ISO-8601 UTC stamp; honors SOURCE_DATE_EPOCH (default 0) so report
    bytes are reproducible."""
    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    return datetime.fromtimestamp(epoch, tz=timezone.utc).isoformat()


def _check_record(rec: dict) -> dict:
    for key in METRIC_KEYS:
        v = float(rec[key])
        if not np.isfinite(v) or not 0.0 <= v <= 1.0:
            raise NonFinite(f"metric {key}={v!r} for task "
                            f"{rec.get('task_kind')!r} outside [0, 1]")
    return {"task_kind": str(rec["task_kind"]),
            "n_queries": int(rec["n_queries"]),
            **{k: float(rec[k]) for k in METRIC_KEYS}}


def aggregate_records(records) -> dict:
    """Pure reduction of per-task records into meta-task and overall means."""
    if not records:
        raise EmptyDataset("no per-task records to aggregate")
    groups: dict = {}
    for rec in records:
        meta = META_TASK_OF.get(rec["task_kind"], rec["task_kind"])
        groups.setdefault(meta, []).append(rec)
    per_meta = {
        meta: {k: float(np.mean([float(r[k]) for r in rows]))
               for k in METRIC_KEYS}
        for meta, rows in sorted(groups.items())
    }
    metas = sorted(per_meta)
    overall = {k: float(np.mean([per_meta[m][k] for m in metas]))
               for k in METRIC_KEYS}
    return {"per_meta_task": per_meta, "overall": overall}


@dataclass(frozen=True)
class RetrievalReport:
    records: tuple
    aggregates: dict
    provenance: dict

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION,
                "records": list(self.records),
                "aggregates": self.aggregates,
                "provenance": self.provenance}


def build_report(records, *, seed: int, config_hash: str, ecr_source: str,
                 model_hash: str) -> RetrievalReport:
    checked = tuple(sorted((_check_record(r) for r in records),
                           key=lambda r: r["task_kind"]))
    provenance = {"seed": int(seed), "config_hash": str(config_hash),
                  "ecr_source": str(ecr_source), "model_hash": str(model_hash),
                  "timestamp": report_timestamp()}
    return RetrievalReport(records=checked,
                           aggregates=aggregate_records(checked),
                           provenance=provenance)


def report_json(report: RetrievalReport) -> str:
    return canonical_json(report.to_dict()) + "\n"


def report_table(report: RetrievalReport) -> str:
    """Fixed-width human-readable rendering of the same content."""
    head = f"{'task':<18}{'queries':>8}{'P@1':>9}{'R@5':>9}{'NDCG@5':>9}"
    lines = [head, "-" * len(head)]
    for rec in report.records:
        lines.append(f"{rec['task_kind']:<18}{rec['n_queries']:>8d}"
                     f"{rec['p_at_1']:>9.4f}{rec['r_at_5']:>9.4f}"
                     f"{rec['ndcg_at_5']:>9.4f}")
    lines.append("")
    lines.append(f"{'meta-task means':<18}{'':>8}{'P@1':>9}{'R@5':>9}{'NDCG@5':>9}")
    agg = report.aggregates
    for meta in sorted(agg["per_meta_task"]):
        row = agg["per_meta_task"][meta]
        lines.append(f"{meta:<18}{'':>8}{row['p_at_1']:>9.4f}"
                     f"{row['r_at_5']:>9.4f}{row['ndcg_at_5']:>9.4f}")
    row = agg["overall"]
    lines.append(f"{'overall':<18}{'':>8}{row['p_at_1']:>9.4f}"
                 f"{row['r_at_5']:>9.4f}{row['ndcg_at_5']:>9.4f}")
    lines.append("")
    prov = report.provenance
    lines.append("provenance: " + "  ".join(
        f"{k}={prov[k]}" for k in _PROVENANCE_KEYS))
    return "\n".join(lines) + "\n"


def emit_report(report: RetrievalReport, out_dir) -> tuple:
    """Write report.json and report.txt under out_dir; returns both paths."""
    recomputed = aggregate_records(report.records)
    if recomputed != report.aggregates:
        raise NonFinite("report aggregates do not match their own records")
    json_path = os.path.join(str(out_dir), "report.json")
    txt_path = os.path.join(str(out_dir), "report.txt")
    try:
        with open(json_path, "w") as fh:
            fh.write(report_json(report))
        with open(txt_path, "w") as fh:
            fh.write(report_table(report))
    except OSError as exc:
        raise WriteFailure(f"cannot write report under {out_dir}: {exc}") from exc
    return json_path, txt_path
