"""Metrics and report emission."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AapeError, ConfigError, DataError


def argmax_lowest(scores) -> np.ndarray:
    """Row-wise argmax; numpy already returns the lowest index among ties."""
    return np.argmax(np.asarray(scores), axis=-1)


def top1_accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DataError(f"{predictions.shape[0]} predictions vs {labels.shape[0]} labels")
    if predictions.size == 0:
        raise DataError("accuracy of an empty set")
    return 100.0 * float(np.mean(predictions == labels))


def harmonic_mean(a: float, b: float) -> float:
    if a <= 0 or b <= 0:
        raise DataError(f"harmonic mean needs positive inputs, got {a}, {b}")
    return 2.0 * a * b / (a + b)


def recall_at_k(rankings, ground_truth, k: int) -> float:
    """Percent of queries whose top-k ranked ids contain any ground-truth id."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if len(rankings) != len(ground_truth) or not rankings:
        raise DataError("need one non-empty ground-truth set per query")
    hits = 0
    for ranked, truth in zip(rankings, ground_truth):
        truth = set(int(t) for t in truth)
        if not truth:
            raise DataError("query with an empty ground-truth set")
        if truth.intersection(int(r) for r in list(ranked)[:k]):
            hits += 1
    return 100.0 * hits / len(rankings)


def modality_gap(image_embeddings, text_embeddings) -> float:
    """Euclidean distance between the centers of two embedding sets."""
    a = np.asarray(image_embeddings, dtype=np.float64)
    b = np.asarray(text_embeddings, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise DataError("modality gap needs two non-empty [n, d] sets")
    if a.shape[1] != b.shape[1]:
        raise ConfigError(f"dim mismatch {a.shape[1]} vs {b.shape[1]}")
    return float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))


def mean_pair_cosine(images, prompts) -> float:
    a = np.asarray(images, dtype=np.float64)
    b = np.asarray(prompts, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] == 0:
        raise DataError("mean_pair_cosine needs equal-length non-empty pair lists")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DataError("zero-norm member in a pair")
    return float(np.mean(np.sum(a * b, axis=1) / (na * nb)))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricRow:
    metric: str
    per_seed: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def std(self) -> float:
        return float(np.std(self.per_seed)) if len(self.per_seed) > 1 else 0.0

    def to_json(self) -> dict:
        return {"metric": self.metric, "per_seed": [float(v) for v in self.per_seed],
                "mean": self.mean, "std": self.std}


@dataclass
class MetricReport:
    protocol: str
    seeds: list[int]
    rows: list[MetricRow] = field(default_factory=list)
    config_digest: str = ""

    def add(self, metric: str, per_seed) -> None:
        self.rows.append(MetricRow(metric, [float(v) for v in per_seed]))

    def row(self, metric: str) -> MetricRow:
        for r in self.rows:
            if r.metric == metric:
                return r
        raise KeyError(metric)

    def metrics(self) -> list[str]:
        return [r.metric for r in self.rows]

    def to_json(self) -> dict:
        return {"protocol": self.protocol, "config_digest": self.config_digest,
                "seeds": list(self.seeds), "rows": [r.to_json() for r in self.rows]}

    @classmethod
    def from_json(cls, doc: dict) -> "MetricReport":
        rep = cls(doc["protocol"], list(doc["seeds"]), config_digest=doc.get("config_digest", ""))
        for r in doc["rows"]:
            rep.add(r["metric"], r["per_seed"])
        return rep

    def to_text(self) -> str:
        header = ["metric"] + [f"seed {s}" for s in self.seeds] + ["mean", "std"]
        body = [[r.metric] + [f"{v:.2f}" for v in r.per_seed] + [f"{r.mean:.2f}", f"{r.std:.2f}"]
                for r in self.rows]
        widths = [max(len(str(line[i])) for line in [header] + body) for i in range(len(header))]

        def fmt(line):
            return "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                             for i, (c, w) in enumerate(zip(line, widths))).rstrip()

        lines = [f"# {self.protocol}  config {self.config_digest[:12]}", fmt(header),
                 "  ".join("-" * w for w in widths)]
        lines.extend(fmt(line) for line in body)
        return "\n".join(lines) + "\n"


def report_json_text(report: MetricReport) -> str:
    # repr-exact floats so a parse round trip restores every value
    return json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n"


def emit_report(report: MetricReport, path, fmt: str = "json") -> Path:
    path = Path(path)
    if fmt == "json":
        text = report_json_text(report)
    elif fmt in ("text", "text-table"):
        text = report.to_text()
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    try:
        path.write_text(text)
    except OSError as exc:
        raise AapeError(f"cannot write report to {path}: {exc}") from exc
    return path


def parse_report(path) -> MetricReport:
    return MetricReport.from_json(json.loads(Path(path).read_text()))


def nan_safe_harmonic(a: float, b: float) -> float:
    """Harmonic mean that reports 0 when either accuracy is 0 (a degenerate run)."""
    if a <= 0 or b <= 0:
        return 0.0
    return harmonic_mean(a, b)
