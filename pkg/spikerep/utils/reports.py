"""JSON and aligned-text renderings of evaluation results."""
import json
import logging
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from spikerep.utils.errors import PipelineError
from spikerep.utils.evaluation import ProtocolResult, SortingScore, WilcoxonResult
from spikerep.utils.type_converter import convert_numpy_types

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def write_json(obj, path: PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(convert_numpy_types(obj), indent=2))
    except OSError as e:
        logger.error(f"Error writing report {path}: {str(e)}")
        raise PipelineError(f"Cannot write {path}: {e}", "unwritable_path", {"path": str(path)}) from e
    return path


def write_text(text: str, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n")
    return path


def _pm(mean: float, spread: float, digits: int = 4) -> str:
    if mean is None or not np.isfinite(mean):
        return "n/a"
    return f"{mean:.{digits}f} ± {spread:.{digits}f}"


def protocol_table(rows: Mapping[str, ProtocolResult]) -> str:
    """One row per configuration: Mean ± SEM, Max, Min and seconds per data point."""
    df = pd.DataFrame(
        [
            {
                "method": name,
                "ARI (Mean ± SEM)": _pm(r.mean, r.sem),
                "Max": f"{r.max:.4f}",
                "Min": f"{r.min:.4f}",
                "s/point": f"{r.seconds_per_point:.3f}",
            }
            for name, r in rows.items()
        ]
    )
    return df.to_string(index=False)


def sorting_table(score: SortingScore) -> str:
    df = pd.DataFrame(
        [
            {
                "unit": u.gt_unit_id,
                "label": "-" if u.matched_sorter_label is None else u.matched_sorter_label,
                "snr": f"{u.snr:.2f}" if u.snr < 1e6 else "inf",
                "accuracy": f"{u.accuracy:.4f}",
                "recall": f"{u.recall:.4f}",
                "precision": f"{u.precision:.4f}",
                "n1": u.counts.n1,
                "n2": u.counts.n2,
                "n3": u.counts.n3,
                "flags": ",".join(u.flags),
            }
            for u in score.units
        ]
    )
    summary = "  ".join(f"{m}: {_pm(*score.aggregate[m])}" for m in ("accuracy", "recall", "precision"))
    return f"{df.to_string(index=False)}\n\nMean ± SEM over {len(score.units)} units  {summary}"


def ablation_table(rows: Mapping[str, Mapping[str, Sequence[Optional[float]]]]) -> str:
    """Mean ± STD over repeats of distance, silhouette and ARI for each variant."""
    records = []
    for name, metrics in rows.items():
        record = {"variant": name}
        for metric in ("centroid_distance", "silhouette", "ari"):
            values = [v for v in metrics.get(metric, []) if v is not None]
            record[metric] = _pm(float(np.mean(values)), float(np.std(values))) if values else "n/a"
        records.append(record)
    return pd.DataFrame(records).to_string(index=False)


def significance_marker(p: float) -> str:
    if p < 0.05:
        return "*"
    if p < 0.10:
        return "†"
    return ""


def comparison_table(results: Dict[str, WilcoxonResult], means: Dict[str, tuple]) -> str:
    df = pd.DataFrame(
        [
            {
                "metric": metric,
                "A (mean)": f"{means[metric][0]:.4f}",
                "B (mean)": f"{means[metric][1]:.4f}",
                "W": f"{r.statistic:g}",
                "p": f"{r.p_value:.4g}{significance_marker(r.p_value)}",
                "n": r.n,
                "method": r.method,
            }
            for metric, r in results.items()
        ]
    )
    return df.to_string(index=False) + "\n\n* p < 0.05   † 0.05 ≤ p < 0.10"
