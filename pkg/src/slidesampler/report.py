"""Per-class AP tables in the mode / backbone / batch-size layout."""

import csv

from .evaluation import map_score

TABLE_LABELS = ("eosinophils", "mast cell", "neutrophils", "macrophages", "lymphocytes")
CLASS_KEYS = ("eosinophil", "mast_cell", "neutrophil", "macrophage", "lymphocyte")


def parse_row_spec(spec):
    """``MODE:BACKBONE:BS=path.json`` -> (mode, backbone, batch_size, path)."""
    head, sep, path = spec.partition("=")
    parts = head.split(":")
    if not sep or len(parts) != 3 or not path:
        raise ValueError(f"row spec must look like MODE:BACKBONE:BS=eval.json, got {spec!r}")
    return parts[0], parts[1], parts[2], path


def table_row(mode, backbone, batch_size, report_dict, class_keys=CLASS_KEYS):
    classes = report_dict.get("classes", {})
    aps = [classes.get(k, {}).get("ap") for k in class_keys]
    present = [a for a in aps if a is not None]
    return {
        "mode": mode,
        "backbone": backbone,
        "batch_size": batch_size,
        "aps": aps,
        "mean": map_score(present) if present else None,
    }


def write_table_csv(rows, fh, labels=TABLE_LABELS, precision=2):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["mode", "BB", "BS", *labels, "mean"])
    fmt = f"{{:.{precision}f}}"
    for row in rows:
        values = ["" if v is None else fmt.format(v) for v in list(row["aps"]) + [row["mean"]]]
        writer.writerow([row["mode"], row["backbone"], row["batch_size"], *values])
