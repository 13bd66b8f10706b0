"""No-reference sharpness statistics (SF, SD, AG) and MSE against ground truth.

Images are float arrays in [0, 1]. MSE is reported on that scale, i.e. the
0-255 squared error divided by 255**2.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLUMNS = ("SF", "SD", "AG", "MSE")


def spatial_frequency(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    rd = np.diff(x, axis=1)
    cd = np.diff(x, axis=0)
    rf2 = float(np.mean(rd ** 2)) if rd.size else 0.0
    cf2 = float(np.mean(cd ** 2)) if cd.size else 0.0
    return math.sqrt(rf2 + cf2)


def standard_deviation(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    # shifting by one pixel leaves SD unchanged and makes a flat image exactly 0
    return float(np.std(x - x.flat[0])) if x.size else 0.0


def average_gradient(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2 or x.shape[1] < 2:
        return 0.0
    dx = x[:-1, 1:] - x[:-1, :-1]
    dy = x[1:, :-1] - x[:-1, :-1]
    return float(np.mean(np.sqrt((dx ** 2 + dy ** 2) / 2.0)))


def mse(x: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    x = np.asarray(x, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if x.shape != gt.shape:
        raise ValueError(f"image {x.shape} and ground truth {gt.shape} differ in shape")
    d = (x - gt) ** 2
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        return float(d[m].mean()) if m.any() else 0.0
    return float(d.mean())


def compute_metrics(x: np.ndarray, gt: np.ndarray | None = None, mask=None) -> dict:
    x = np.squeeze(np.asarray(x, dtype=np.float64))
    if x.size == 0:
        raise ValueError("empty image")
    row = {"SF": spatial_frequency(x), "SD": standard_deviation(x), "AG": average_gradient(x)}
    if gt is not None:
        row["MSE"] = mse(x, np.squeeze(gt), mask)
    return row


@dataclass
class MetricReport:
    rows: list[tuple[str, dict]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, sample_id: str, values: dict) -> None:
        self.rows.append((sample_id, dict(values)))

    @property
    def count(self) -> int:
        return len(self.rows)

    def columns(self) -> list[str]:
        seen = []
        for _, vals in self.rows:
            for k in vals:
                if k not in seen:
                    seen.append(k)
        ordered = [c for c in COLUMNS if c in seen]
        return ordered + [c for c in seen if c not in ordered]

    def means(self) -> dict:
        out = {}
        for c in self.columns():
            vals = [v[c] for _, v in self.rows if c in v and v[c] is not None]
            out[c] = float(np.mean(vals)) if vals else float("nan")
        return out

    def to_tsv(self) -> str:
        cols = self.columns()
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        for k, v in self.config.items():
            buf.write(f"# {k} = {v}\n")
        w.writerow(["id"] + cols)
        for sid, vals in self.rows:
            w.writerow([sid] + [_fmt(vals.get(c)) for c in cols])
        means = self.means()
        w.writerow(["mean"] + [_fmt(means[c]) for c in cols])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_tsv())

    @classmethod
    def load(cls, path) -> "MetricReport":
        rep = cls()
        lines = Path(path).read_text().splitlines()
        body = []
        for ln in lines:
            if ln.startswith("# ") and " = " in ln:
                k, v = ln[2:].split(" = ", 1)
                rep.config[k] = v
            else:
                body.append(ln)
        reader = csv.reader(body, delimiter="\t")
        header = next(reader)
        for rec in reader:
            if rec[0] == "mean":
                continue
            rep.add(rec[0], {c: float(v) for c, v in zip(header[1:], rec[1:]) if v != ""})
        return rep


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))
