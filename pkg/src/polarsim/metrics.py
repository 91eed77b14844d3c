"""Aggregation and serialization of evaluation results.

Everything here is render-free: figures are described by plot-spec JSON files
that point at the exported CSVs. ``polarsim.plots`` can draw them.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dynamics import N_CATEGORIES, USER_FIELDS, PoliticsCategory, UserBatch
from .storage import read_container, write_container

CATEGORY_LABELS = [c.label for c in PoliticsCategory]


# ---------------------------------------------------------------------------
# histograms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BeliefHistogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def bins(self) -> int:
        return len(self.counts)


def belief_histogram(beliefs, bins: int = 50) -> BeliefHistogram:
    """Fixed-width counts over [-1, 1]; a value of exactly 1 lands in the last bin."""
    b = np.asarray(beliefs, dtype=float).ravel()
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not np.all(np.isfinite(b)) or np.any(np.abs(b) > 1.0):
        raise ValueError("beliefs must lie in [-1, 1]")
    edges = np.linspace(-1.0, 1.0, bins + 1)
    idx = np.clip(np.floor((b + 1.0) * bins / 2.0).astype(np.int64), 0, bins - 1)
    return BeliefHistogram(edges, np.bincount(idx, minlength=bins))


# ---------------------------------------------------------------------------
# composition of recommendations by ideology
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompositionMatrix:
    """``freq[k, t]`` is the mean one-hot action of ideology-``k`` users alive at step ``t``.

    Cells with no survivors hold NaN and ``defined`` is False there.
    """

    freq: np.ndarray        # (7, steps, 7)
    survivors: np.ndarray   # (7, steps)

    @property
    def defined(self) -> np.ndarray:
        return self.survivors > 0

    @property
    def steps(self) -> int:
        return self.freq.shape[1]


def _composition_arrays(actions: np.ndarray, ideology: np.ndarray) -> CompositionMatrix:
    steps = actions.shape[1]
    counts = np.zeros((N_CATEGORIES, steps, N_CATEGORIES))
    for k in range(N_CATEGORIES):
        acts = actions[ideology == k]
        for a in range(N_CATEGORIES):
            counts[k, :, a] = (acts == a).sum(axis=0)
    survivors = counts.sum(axis=2).astype(np.int64)
    with np.errstate(invalid="ignore", divide="ignore"):
        freq = counts / survivors[..., None]
    freq[survivors == 0] = np.nan
    return CompositionMatrix(freq, survivors)


def composition_matrix(records, steps: int | None = None) -> CompositionMatrix:
    """Build from a list of ``EpisodeRecord`` or from anything with ``actions``/``ideology`` arrays."""
    if hasattr(records, "actions") and hasattr(records, "ideology") and not isinstance(records, list):
        return _composition_arrays(np.asarray(records.actions), np.asarray(records.ideology))
    records = list(records)
    steps = steps if steps is not None else max((len(r.actions) for r in records), default=0)
    actions = np.full((len(records), steps), -1, dtype=np.int64)
    for i, r in enumerate(records):
        actions[i, : len(r.actions)] = r.actions
    ideology = np.array([r.ideology for r in records], dtype=np.int64)
    return _composition_arrays(actions, ideology)


# ---------------------------------------------------------------------------
# summary table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    agent: str
    ctr: float
    attrition_rate: float

    def __post_init__(self):
        if not (0.0 <= self.ctr <= 1.0 and 0.0 <= self.attrition_rate <= 1.0):
            raise ValueError("CTR and attrition rate must lie in [0, 1]")


def summarize(reports) -> list[SummaryRow]:
    """One row per report: pooled CTR and attrited fraction."""
    if hasattr(reports, "total_clicks"):
        reports = [reports]
    rows = []
    for rep in reports:
        if rep.population == 0:
            raise ValueError("cannot summarize an empty report")
        rows.append(SummaryRow(rep.agent_name, rep.ctr, rep.attrition_rate))
    if not rows:
        raise ValueError("no reports to summarize")
    return rows


def disambiguate(names: Sequence[str]) -> list[str]:
    """Suffix repeated names with ``-2``, ``-3``... in order of appearance."""
    seen: dict[str, int] = {}
    out = []
    for n in names:
        seen[n] = seen.get(n, 0) + 1
        out.append(n if seen[n] == 1 else f"{n}-{seen[n]}")
    return out


# ---------------------------------------------------------------------------
# population persistence
# ---------------------------------------------------------------------------


def save_population(path, population: UserBatch, seed: int | None = None) -> Path:
    arrays = {name: getattr(population, name) for name in USER_FIELDS}
    return write_container(path, "population", arrays, {"seed": seed, "size": len(population)})


def load_population(path) -> tuple[UserBatch, int | None]:
    """Returns the population and the seed recorded when it was generated."""
    arrays, meta = read_container(path, "population")
    missing = set(USER_FIELDS) - set(arrays)
    if missing:
        raise ValueError(f"population file lacks fields {sorted(missing)}")
    return UserBatch(**{name: arrays[name] for name in USER_FIELDS}), meta.get("seed")


# ---------------------------------------------------------------------------
# file export
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        if np.isnan(x):
            return ""
        return repr(float(x))
    return str(x)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, (np.ndarray, tuple)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def plot_spec(title: str, data: str, mark: str, encoding: dict, **extra) -> dict:
    """A small grammar-of-graphics description: data file, mark type and field encodings."""
    return {"title": title, "data": data, "mark": mark, "encoding": encoding, **extra}


def write_histogram(path, hist: BeliefHistogram) -> Path:
    rows = zip(hist.edges[:-1], hist.edges[1:], hist.counts)
    return write_csv(path, ["bin_lo", "bin_hi", "count"], rows)


def write_composition(path, comp: CompositionMatrix) -> Path:
    def rows():
        for k in range(N_CATEGORIES):
            for t in range(comp.steps):
                n = int(comp.survivors[k, t])
                f = comp.freq[k, t] if n > 0 else [None] * N_CATEGORIES
                yield [k, t, *f, n]
    header = ["ideology", "step", *[f"f{j + 1}" for j in range(N_CATEGORIES)], "survivors"]
    return write_csv(path, header, rows())


def write_training_curve(path, curve) -> Path:
    return write_csv(path, ["episode_window", "ctr", "mean_abs_shift"],
                     zip(curve.episodes, curve.ctr, curve.mean_abs_shift))


def write_summary(path, rows: Sequence[SummaryRow]) -> Path:
    names = disambiguate([r.agent for r in rows])
    return write_csv(path, ["agent", "ctr", "attrition_rate"],
                     [(n, r.ctr, r.attrition_rate) for n, r in zip(names, rows)])


def write_trajectories(path, beliefs: np.ndarray, lengths: np.ndarray, stride: int = 10) -> Path:
    """Per-user belief every ``stride`` steps up to the user's last step (always included)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")

    def rows():
        for u in range(len(lengths)):
            n = int(lengths[u])
            steps = list(range(0, n + 1, stride))
            if steps[-1] != n:
                steps.append(n)
            for t in steps:
                yield u, t, beliefs[u, t]
    return write_csv(path, ["user_id", "step", "belief"], rows())


def export_report(report, outdir, bins: int = 50, stride: int = 10, curve=None) -> dict[str, Path]:
    """Write the evaluation file set and its plot-specs into ``outdir``; returns name -> path."""
    out = Path(outdir)
    files = {}
    files["eval_summary"] = write_summary(out / "eval_summary.csv", summarize(report))
    h0 = belief_histogram(report.initial_beliefs, bins)
    h1 = belief_histogram(report.final_beliefs, bins)
    files["belief_hist_initial"] = write_histogram(out / "belief_hist_initial.csv", h0)
    files["belief_hist_final"] = write_histogram(out / "belief_hist_final.csv", h1)
    files["composition"] = write_composition(out / "composition.csv", composition_matrix(report))
    files["trajectories"] = write_trajectories(out / "trajectories.csv", report.beliefs, report.lengths, stride)
    if curve is not None:
        files["training_curve"] = write_training_curve(out / "training_curve.csv", curve)

    specs = {
        "belief_hist": plot_spec(
            f"Belief distribution before and after ({report.agent_name})",
            "belief_hist_initial.csv", "bar",
            {"x": "bin_lo", "x2": "bin_hi", "y": "count"},
            layers=["belief_hist_initial.csv", "belief_hist_final.csv"],
            layer_labels=["initial", "final"],
        ),
        "composition": plot_spec(
            f"Mean recommendation by user ideology ({report.agent_name})",
            "composition.csv", "area",
            {"facet": "ideology", "x": "step", "y": [f"f{j + 1}" for j in range(N_CATEGORIES)],
             "undefined": "survivors == 0"},
            labels=CATEGORY_LABELS,
        ),
        "trajectories": plot_spec(
            f"Belief trajectories ({report.agent_name})", "trajectories.csv", "line",
            {"x": "step", "y": "belief", "detail": "user_id"},
        ),
    }
    if curve is not None:
        specs["training_curve"] = plot_spec(
            f"Training curve ({report.agent_name})", "training_curve.csv", "line",
            {"x": "episode_window", "y": ["ctr", "mean_abs_shift"]},
        )
    for name, spec in specs.items():
        files[f"plot_{name}"] = write_json(out / "plots" / f"{name}.json", spec)
    files["index"] = write_json(out / "index.json", {
        "agent": report.agent_name,
        "files": {k: str(p.relative_to(out)) for k, p in sorted(files.items())},
    })
    return files
