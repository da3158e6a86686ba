"""Perturbed query sets and their audit trail."""
import csv
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import save_png

QUANTIZATION_NOTE = "PNG copies are 8-bit, round-half-even; evaluation uses images.npy (float64)"


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple, np.ndarray)):
        return " ".join(_fmt(v) for v in value)
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def perturbation_norms(clean, perturbed):
    delta = (np.asarray(perturbed) - np.asarray(clean)).reshape(len(clean), -1)
    linf = np.abs(delta).max(axis=1) if delta.size else np.zeros(len(clean))
    return linf, np.sqrt((delta ** 2).sum(axis=1))


@dataclass(eq=False)
class AttackArtifact:
    """Attacked query images plus per-image traces and quality/budget audit.

    ``stages`` lists, for chained attacks, one dict per stage with that
    stage's per-image L-inf and L2 norms relative to its own input.
    """

    method: str
    sample_ids: list
    perturbed: np.ndarray
    linf: np.ndarray
    l2: np.ndarray
    ms_ssim: np.ndarray
    traces: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, method, sample_ids, clean, perturbed, traces=None, stages=None, meta=None,
              msssim_config=None):
        # local import: misrank itself builds artifacts
        from .misrank.msssim import MsSsimConfig, ms_ssim

        clean = np.asarray(clean, dtype=np.float64)
        perturbed = np.asarray(perturbed, dtype=np.float64)
        linf, l2 = perturbation_norms(clean, perturbed)
        cfg = msssim_config or MsSsimConfig()
        scores = np.array([ms_ssim(c, p, cfg) for c, p in zip(clean, perturbed)])
        return cls(method=method, sample_ids=list(sample_ids), perturbed=perturbed, linf=linf,
                   l2=l2, ms_ssim=scores, traces=list(traces or [{} for _ in sample_ids]),
                   stages=list(stages or []), meta=dict(meta or {}))

    def __len__(self):
        return len(self.sample_ids)

    @property
    def mean_ms_ssim(self):
        return float(np.mean(self.ms_ssim)) if len(self.ms_ssim) else float("nan")

    def records(self):
        rows = []
        for i, sid in enumerate(self.sample_ids):
            row = {"sample_id": sid, "linf": self.linf[i], "l2": self.l2[i],
                   "ms_ssim": self.ms_ssim[i]}
            for stage in self.stages:
                row[f"{stage['name']}_linf"] = stage["linf"][i]
                row[f"{stage['name']}_l2"] = stage["l2"][i]
            row.update(self.traces[i])
            rows.append(row)
        return rows

    def save(self, directory, png=True):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "images.npy", self.perturbed)
        if (directory / "png").is_dir():
            shutil.rmtree(directory / "png")
        if png:
            (directory / "png").mkdir()
            for sid, image in zip(self.sample_ids, self.perturbed):
                save_png(image, directory / "png" / f"{sid}.png")
        rows = self.records()
        columns = list(dict.fromkeys(k for r in rows for k in r))
        with open(directory / "trace.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for r in rows:
                writer.writerow([_fmt(r.get(c, "")) for c in columns])
        summary = {
            "method": self.method,
            "count": len(self),
            "mean_ms_ssim": self.mean_ms_ssim,
            "max_linf": float(self.linf.max()) if len(self) else 0.0,
            "mean_l2": float(self.l2.mean()) if len(self) else 0.0,
            "stages": [s["name"] for s in self.stages],
            "quantization": QUANTIZATION_NOTE,
            "meta": self.meta,
        }
        (directory / "artifact.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        summary = json.loads((directory / "artifact.json").read_text())
        perturbed = np.load(directory / "images.npy")
        with open(directory / "trace.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        fixed = {"sample_id", "linf", "l2", "ms_ssim"}
        stage_names = summary["stages"]
        stage_cols = {f"{n}_{m}" for n in stage_names for m in ("linf", "l2")}
        stages = [{"name": n,
                   "linf": np.array([float(r[f"{n}_linf"]) for r in rows]),
                   "l2": np.array([float(r[f"{n}_l2"]) for r in rows])} for n in stage_names]
        traces = [{k: v for k, v in r.items() if k not in fixed | stage_cols} for r in rows]
        return cls(method=summary["method"], sample_ids=[r["sample_id"] for r in rows],
                   perturbed=perturbed, linf=np.array([float(r["linf"]) for r in rows]),
                   l2=np.array([float(r["l2"]) for r in rows]),
                   ms_ssim=np.array([float(r["ms_ssim"]) for r in rows]),
                   traces=traces, stages=stages, meta=summary["meta"])
