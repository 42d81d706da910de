"""Evaluation protocols: tolerance sweeps, extractor comparison, linear probes
and watermark robustness grids.

Every report keeps the per-image values it was aggregated from, and every
aggregate is the plain arithmetic mean of those values, so a CSV row can be
recomputed from the JSONL log next to it.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import torch

from . import distortion, watermark
from .backbone import RegistryError

logger = logging.getLogger(__name__)

FeatureFn = Callable[[torch.Tensor], torch.Tensor]

CSV_COLUMNS = ("section", "metric", "distortion", "strength", "value", "std", "n")
SECTIONS = ("invariance", "compare", "linear_probe", "robustness")
NO_ATTACK = "none"


class ReportError(RuntimeError):
    pass


# -- helpers --------------------------------------------------------------------


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(fn, items))


def format_strength(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (tuple, list)):
        return "..".join(format_strength(v) for v in value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def _cell_key(name: str, strength) -> int:
    return zlib.crc32(f"{name}|{format_strength(strength)}".encode())


def cosine64(a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine similarity in float64, written so identical vectors give exactly 1.0."""
    a = a.detach().double().reshape(-1)
    b = b.detach().double().reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero feature vector")
    diff = a / na - b / nb
    return float(1.0 - 0.5 * diff.dot(diff))


def _features(images: Sequence[torch.Tensor], feature_fn: FeatureFn, jobs: int) -> list[torch.Tensor]:
    with torch.no_grad():
        return _map(lambda img: feature_fn(img).detach(), list(images), jobs)


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _cells(suite, strengths: Mapping[str, Sequence] | None):
    """Expand ``(name, spec)`` pairs into ``(name, strength, spec)`` cells."""
    for name, spec in suite:
        values = None if strengths is None else strengths.get(name)
        if values is None:
            yield name, distortion.strength_of(spec), spec
            continue
        for v in values:
            yield name, v, distortion.with_strength(spec, v, name)


# -- invariance -----------------------------------------------------------------


@dataclass(frozen=True)
class InvarianceRow:
    distortion: str
    strength: Any
    mean: float
    std: float
    n: int


@dataclass
class InvarianceReport:
    rows: list[InvarianceRow] = field(default_factory=list)
    per_image: list[dict] = field(default_factory=list)
    section: str = "invariance"
    metric: str = "cosine"

    def csv_rows(self) -> list[dict]:
        return [
            {
                "section": self.section,
                "metric": self.metric,
                "distortion": r.distortion,
                "strength": format_strength(r.strength),
                "value": r.mean,
                "std": r.std,
                "n": r.n,
            }
            for r in self.rows
        ]

    def curve(self, name: str) -> list[tuple[Any, float]]:
        return [(r.strength, r.mean) for r in self.rows if r.distortion == name]


def _sweep(images, clean, feature_fn, cells, seed, jobs, extra: dict):
    rows, log = [], []
    for name, strength, spec in cells:
        cell = _cell_key(name, strength)

        def one(i):
            rng = np.random.default_rng([seed, cell, i])
            with torch.no_grad():
                dist_feat = feature_fn(distortion.apply(spec, images[i], rng))
            return cosine64(clean[i], dist_feat)

        sims = _map(one, range(len(images)), jobs)
        mean, std = _mean_std(sims)
        rows.append((name, strength, mean, std, len(sims)))
        for i, s in enumerate(sims):
            log.append({**extra, "image": i, "distortion": name, "strength": format_strength(strength), "value": s})
    return rows, log


def invariance_sweep(
    images: Sequence[torch.Tensor],
    feature_fn: FeatureFn,
    suite: Sequence[tuple[str, distortion.DistortionSpec]],
    strengths: Mapping[str, Sequence] | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> InvarianceReport:
    """Mean/std of ``cos(f(I), f(distort(I)))`` per distortion and strength.

    ``strengths`` maps a suite entry's name to the values to sweep; entries
    without one are evaluated at the strength already in their spec.
    """
    images = list(images)
    if not images:
        raise ValueError("invariance_sweep needs at least one image")
    if not suite:
        raise ValueError("invariance_sweep needs at least one distortion")
    clean = _features(images, feature_fn, jobs)
    rows, log = _sweep(images, clean, feature_fn, _cells(suite, strengths), seed, jobs, {"section": "invariance"})
    return InvarianceReport([InvarianceRow(*r) for r in rows], log)


# -- extractor comparison -------------------------------------------------------

_EXTRACTORS: dict[str, FeatureFn] = {}


def register_extractor(name: str, feature_fn: FeatureFn) -> None:
    _EXTRACTORS[name] = feature_fn


def available_extractors() -> list[str]:
    return sorted(_EXTRACTORS)


def resolve_extractor(name: str) -> FeatureFn:
    try:
        return _EXTRACTORS[name]
    except KeyError:
        raise RegistryError(f"unknown extractor {name!r}; registered: {available_extractors()}") from None


@dataclass(frozen=True)
class CompareRow:
    extractor: str
    distortion: str
    strength: Any
    mean: float
    std: float
    n: int


@dataclass
class CompareReport:
    rows: list[CompareRow] = field(default_factory=list)
    per_image: list[dict] = field(default_factory=list)

    def csv_rows(self) -> list[dict]:
        return [
            {
                "section": "compare",
                "metric": f"cosine:{r.extractor}",
                "distortion": r.distortion,
                "strength": format_strength(r.strength),
                "value": r.mean,
                "std": r.std,
                "n": r.n,
            }
            for r in self.rows
        ]

    def table(self) -> dict[tuple[str, str], float]:
        return {(r.extractor, r.distortion): r.mean for r in self.rows}


def compare_extractors(
    images: Sequence[torch.Tensor],
    extractors: Mapping[str, FeatureFn] | Sequence[str],
    grid: Sequence[tuple[str, distortion.DistortionSpec]],
    seed: int = 0,
    jobs: int = 1,
) -> CompareReport:
    """Run the same tolerance measurement for several extractors.

    ``extractors`` is either a name -> feature function mapping or a list of
    names registered with :func:`register_extractor`.
    """
    if not isinstance(extractors, Mapping):
        extractors = {name: resolve_extractor(name) for name in extractors}
    if not extractors:
        raise ValueError("compare_extractors needs at least one extractor")
    images = list(images)
    if not images or not grid:
        raise ValueError("compare_extractors needs images and a non-empty grid")
    report = CompareReport()
    for ext_name, fn in extractors.items():
        clean = _features(images, fn, jobs)
        rows, log = _sweep(images, clean, fn, _cells(grid, None), seed, jobs, {"section": "compare", "extractor": ext_name})
        report.rows.extend(CompareRow(ext_name, *r) for r in rows)
        report.per_image.extend(log)
    return report


# -- linear probe ---------------------------------------------------------------


@dataclass(frozen=True)
class ProbeRow:
    distortion: str
    strength: Any
    accuracy: float
    n: int


@dataclass
class ProbeReport:
    rows: list[ProbeRow] = field(default_factory=list)
    per_image: list[dict] = field(default_factory=list)
    name: str = "probe"

    def csv_rows(self) -> list[dict]:
        return [
            {
                "section": "linear_probe",
                "metric": f"accuracy:{self.name}",
                "distortion": r.distortion,
                "strength": format_strength(r.strength),
                "value": r.accuracy,
                "std": float(np.std([p["value"] for p in self.per_image if p["distortion"] == r.distortion and p["strength"] == format_strength(r.strength)])),
                "n": r.n,
            }
            for r in self.rows
        ]

    def accuracy(self, name: str = NO_ATTACK) -> float:
        for r in self.rows:
            if r.distortion == name:
                return r.accuracy
        raise KeyError(name)


def fit_linear_classifier(feats: torch.Tensor, labels: torch.Tensor, num_classes: int, iterations: int = 500, lr: float = 0.5):
    """Full-batch gradient descent on softmax cross-entropy over standardized features.

    Returns a function mapping raw features to predicted labels.
    """
    feats = feats.double()
    mean = feats.mean(0, keepdim=True)
    std = feats.std(0, keepdim=True, unbiased=False).clamp_min(1e-8)
    x = (feats - mean) / std
    w = torch.zeros(x.shape[1], num_classes, dtype=torch.float64, requires_grad=True)
    b = torch.zeros(num_classes, dtype=torch.float64, requires_grad=True)
    for _ in range(iterations):
        loss = torch.nn.functional.cross_entropy(x @ w + b, labels)
        gw, gb = torch.autograd.grad(loss, (w, b))
        with torch.no_grad():
            w -= lr * gw
            b -= lr * gb
    w, b = w.detach(), b.detach()

    def predict(f: torch.Tensor) -> torch.Tensor:
        return (((f.double() - mean) / std) @ w + b).argmax(-1)

    return predict


def linear_probe(
    train_set: Sequence[tuple[torch.Tensor, int]],
    test_set: Sequence[tuple[torch.Tensor, int]],
    feature_fn: FeatureFn,
    distortions: Sequence[tuple[str, distortion.DistortionSpec]] = (),
    num_classes: int | None = None,
    iterations: int = 500,
    lr: float = 0.5,
    seed: int = 0,
    jobs: int = 1,
    name: str = "probe",
) -> ProbeReport:
    """Fit one affine layer on clean training features, then score clean and distorted test sets."""
    if not train_set or not test_set:
        raise ValueError("linear_probe needs non-empty train and test sets")
    train_labels = [int(y) for _, y in train_set]
    test_labels = [int(y) for _, y in test_set]
    if num_classes is None:
        num_classes = max(train_labels + test_labels) + 1
    bad = [y for y in train_labels + test_labels if not 0 <= y < num_classes]
    if bad:
        raise ValueError(f"labels must lie in [0, {num_classes}), got {sorted(set(bad))}")
    missing = sorted(set(test_labels) - set(train_labels))
    if missing:
        raise ValueError(f"test classes {missing} have no training examples")

    train_feats = torch.stack(_features([x for x, _ in train_set], feature_fn, jobs)).reshape(len(train_set), -1)
    predict = fit_linear_classifier(train_feats, torch.tensor(train_labels), num_classes, iterations, lr)

    test_images = [x for x, _ in test_set]
    report = ProbeReport(name=name)
    cells = [(NO_ATTACK, None, None)] + list(_cells(distortions, None))
    for dname, strength, spec in cells:
        cell = _cell_key(dname, strength)

        def one(i):
            img = test_images[i]
            if spec is not None:
                img = distortion.apply(spec, img, np.random.default_rng([seed, cell, i]))
            with torch.no_grad():
                return feature_fn(img).reshape(-1)

        feats = torch.stack(_map(one, range(len(test_images)), jobs))
        correct = (predict(feats) == torch.tensor(test_labels)).double().tolist()
        report.rows.append(ProbeRow(dname, strength, float(np.mean(correct)), len(correct)))
        for i, c in enumerate(correct):
            report.per_image.append(
                {"section": "linear_probe", "image": i, "distortion": dname, "strength": format_strength(strength), "value": c}
            )
    return report


# -- watermark robustness -------------------------------------------------------


@dataclass(frozen=True)
class RobustnessRow:
    attack: str
    strength: Any
    accuracy: float
    n_images: int


@dataclass
class RobustnessReport:
    rows: list[RobustnessRow] = field(default_factory=list)
    per_image: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def csv_rows(self) -> list[dict]:
        out = []
        for r in self.rows:
            vals = [p["value"] for p in self.per_image if p["distortion"] == r.attack]
            out.append(
                {
                    "section": "robustness",
                    "metric": "bit_accuracy",
                    "distortion": r.attack,
                    "strength": format_strength(r.strength),
                    "value": r.accuracy,
                    "std": float(np.std(vals)) if vals else 0.0,
                    "n": r.n_images,
                }
            )
        return out

    def accuracy(self, attack: str = NO_ATTACK) -> float:
        for r in self.rows:
            if r.attack == attack:
                return r.accuracy
        raise KeyError(attack)


def robustness_grid(
    images: Sequence[torch.Tensor],
    key: watermark.SecretKey,
    messages: Sequence[watermark.WatermarkMessage] | watermark.WatermarkMessage,
    feature_fn: FeatureFn,
    attack_grid: Sequence[tuple[str, distortion.DistortionSpec]],
    cfg: watermark.EmbedConfig = watermark.EmbedConfig(),
    transforms: Sequence[distortion.DistortionSpec] | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> RobustnessReport:
    """Embed, attack, extract and score bit accuracy per attack cell.

    A failed embedding is logged in ``failures`` and its image is left out of
    every cell; the rest of the grid still runs. The first row is the
    no-attack column.
    """
    images = list(images)
    if not images:
        raise ValueError("robustness_grid needs at least one image")
    if isinstance(messages, watermark.WatermarkMessage):
        messages = [messages] * len(images)
    if len(messages) != len(images):
        raise ValueError(f"got {len(messages)} messages for {len(images)} images")

    def embed_one(i):
        try:
            res = watermark.embed(images[i], key, messages[i], feature_fn, transforms, cfg, np.random.default_rng([seed, i]))
            return res, None
        except Exception as exc:  # noqa: BLE001 - reported per image, grid continues
            logger.error("embedding failed for image %d: %s", i, exc)
            return None, f"{type(exc).__name__}: {exc}"

    embedded = _map(embed_one, range(len(images)), jobs)
    report = RobustnessReport()
    ok = []
    for i, (res, err) in enumerate(embedded):
        if res is None:
            report.failures.append({"image": i, "error": err})
        else:
            ok.append(i)
            report.per_image.append({"section": "robustness", "image": i, "distortion": "embed", "strength": "", "psnr_db": res.psnr_db, "infeasible": res.infeasible})

    cells = [(NO_ATTACK, None, None)] + list(_cells(attack_grid, None))
    for name, strength, spec in cells:
        cell = _cell_key(name, strength)

        def one(i):
            marked = embedded[i][0].image
            if spec is not None:
                marked = distortion.apply(spec, marked, np.random.default_rng([seed, cell, i]))
            return watermark.bit_accuracy(messages[i], watermark.extract(marked, key, feature_fn))

        accs = _map(one, ok, jobs)
        mean = float(np.mean(accs)) if accs else math.nan
        report.rows.append(RobustnessRow(name, strength, mean, len(accs)))
        for i, a in zip(ok, accs):
            report.per_image.append({"section": "robustness", "image": i, "distortion": name, "strength": format_strength(strength), "value": a})
    return report


# -- files ----------------------------------------------------------------------


def _fmt_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_fmt_value(row[c]) for c in CSV_COLUMNS])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ReportError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for r in reader:
            r["value"] = float(r["value"])
            r["std"] = float(r["std"])
            r["n"] = int(r["n"])
            rows.append(r)
        return rows


def write_jsonl(path, records: Sequence[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_report(report, out_dir, stem: str) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (aggregates) and ``<stem>.jsonl`` (per-image values)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, log_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.jsonl"
    write_csv(csv_path, report.csv_rows())
    write_jsonl(log_path, report.per_image)
    return csv_path, log_path


# -- report rendering -----------------------------------------------------------

_TITLES = {
    "invariance": "Cosine similarity between clean and distorted features",
    "compare": "Cosine similarity by extractor",
    "linear_probe": "Linear-probe accuracy under distortion",
    "robustness": "Watermark bit accuracy under attack",
}


def _md_table(header: Sequence[str], body: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in body]
    return "\n".join(lines)


def _pivot(rows: Sequence[Mapping]) -> str:
    """Distortion x metric table (metric suffix after ':' names the column)."""
    cols = list(OrderedDict.fromkeys(r["metric"] for r in rows))
    keys = list(OrderedDict.fromkeys((r["distortion"], r["strength"]) for r in rows))
    cell = {(r["distortion"], r["strength"], r["metric"]): r["value"] for r in rows}
    header = ["Distortion", "Strength"] + [c.split(":", 1)[-1] for c in cols]
    body = [[d, s] + [f"{cell[(d, s, c)]:.4f}" if (d, s, c) in cell else "" for c in cols] for d, s in keys]
    return _md_table(header, body)


def _plain(rows: Sequence[Mapping]) -> str:
    body = [[r["distortion"], r["strength"], f"{r['value']:.4f}", f"{r['std']:.4f}", str(r["n"])] for r in rows]
    return _md_table(["Distortion", "Strength", "Mean", "Std", "n"], body)


def build_report(results_dir, out_dir=None) -> list[Path]:
    """Render ``report.md`` and per-distortion curve CSVs from evaluation CSVs.

    Output depends only on the input files, so regenerating it is
    byte-identical. Raises :class:`ReportError` if no section is present.
    """
    results_dir = Path(results_dir)
    out_dir = Path(out_dir) if out_dir else results_dir / "report"
    by_section: dict[str, list[dict]] = OrderedDict((s, []) for s in SECTIONS)
    for path in sorted(results_dir.glob("*.csv")):
        try:
            rows = read_csv(path)
        except (ReportError, ValueError, KeyError):
            logger.debug("skipping %s: not an evaluation CSV", path)
            continue
        for r in rows:
            if r["section"] in by_section:
                by_section[r["section"]].append(r)
    present = [s for s, rows in by_section.items() if rows]
    absent = [s for s in SECTIONS if s not in present]
    if not present:
        raise ReportError(f"no evaluation results in {results_dir}; absent sections: {', '.join(absent)}")

    out_dir.mkdir(parents=True, exist_ok=True)
    parts = ["# Evaluation report", ""]
    for s in present:
        rows = by_section[s]
        parts += [f"## {_TITLES[s]}", "", _plain(rows) if s == "invariance" else _pivot(rows), ""]
    if absent:
        parts += ["Sections without results: " + ", ".join(absent), ""]
    md = out_dir / "report.md"
    md.write_text("\n".join(parts), encoding="utf-8")
    written = [md]

    curves: dict[str, list[dict]] = OrderedDict()
    for r in by_section["invariance"]:
        curves.setdefault(r["distortion"], []).append(r)
    for name, rows in curves.items():
        path = out_dir / f"curve_{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strength", "mean", "std", "n"])
            for r in rows:
                w.writerow([r["strength"], repr(r["value"]), repr(r["std"]), r["n"]])
        written.append(path)
    return written
