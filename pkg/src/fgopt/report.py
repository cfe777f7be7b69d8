"""Run reports: canonical JSON, a plain-text table, CSV series and figures.

The CSV carries one row per strategy per series (token spend vs. test
performance, and wall-clock vs. test performance), which is exactly what the
rendered scatter figures plot. Figures are written as PNGs next to the CSV.
"""
from __future__ import annotations

import csv
import importlib.resources
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .core import PerformanceStats, canonical_dumps, canonical_loads


@dataclass
class StrategyReport:
    strategy: str
    train: dict
    test: dict
    tokens_by_tag: dict[str, dict]
    wall_clock_ms: int
    optimizer_calls: int
    trimming_events: int
    kept_previous: int
    merge: dict | None = None
    per_category: dict[str, list[int]] | None = None

    def total_prompt_tokens(self) -> int:
        return sum(t["prompt_tokens"] for t in self.tokens_by_tag.values())

    def total_completion_tokens(self) -> int:
        return sum(t["completion_tokens"] for t in self.tokens_by_tag.values())

    def test_rate(self) -> Fraction:
        return Fraction(self.test["successes"], self.test["trials"])

    def train_rate(self) -> Fraction:
        return Fraction(self.train["successes"], self.train["trials"])

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "train": self.train,
            "test": self.test,
            "tokens_by_tag": self.tokens_by_tag,
            "wall_clock_ms": self.wall_clock_ms,
            "optimizer_calls": self.optimizer_calls,
            "trimming_events": self.trimming_events,
            "kept_previous": self.kept_previous,
            "merge": self.merge,
            "per_category": self.per_category,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyReport":
        return cls(strategy=d["strategy"], train=d["train"], test=d["test"],
                   tokens_by_tag=d["tokens_by_tag"],
                   wall_clock_ms=d["wall_clock_ms"],
                   optimizer_calls=d["optimizer_calls"],
                   trimming_events=d["trimming_events"],
                   kept_previous=d.get("kept_previous", 0),
                   merge=d.get("merge"),
                   per_category=d.get("per_category"))


@dataclass
class RunReport:
    strategies: dict[str, StrategyReport]
    environment: dict
    config: dict
    seed: int
    train_task_count: int
    test_task_count: int

    def to_dict(self) -> dict:
        return {
            "strategies": {name: s.to_dict() for name, s in sorted(self.strategies.items())},
            "environment": self.environment,
            "config": self.config,
            "seed": self.seed,
            "train_task_count": self.train_task_count,
            "test_task_count": self.test_task_count,
        }

    def to_json(self) -> str:
        return canonical_dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(
            strategies={name: StrategyReport.from_dict(s)
                        for name, s in d["strategies"].items()},
            environment=d["environment"], config=d["config"], seed=d["seed"],
            train_task_count=d["train_task_count"],
            test_task_count=d["test_task_count"])

    @classmethod
    def from_json(cls, text: str | bytes) -> "RunReport":
        return cls.from_dict(canonical_loads(text))


def stats_as_dict(stats: PerformanceStats) -> dict:
    return stats.to_dict()


def schema_path() -> Path:
    return Path(str(importlib.resources.files("fgopt") / "schemas" / "report.schema.json"))


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def render_table(report: RunReport) -> str:
    headers = ["strategy", "train", "test", "prompt_tok", "compl_tok",
               "opt_calls", "trims", "wall_ms"]
    rows = []
    for name in sorted(report.strategies):
        s = report.strategies[name]
        rows.append([
            name,
            f"{s.train['successes']}/{s.train['trials']} ({float(s.train_rate()):.3f})",
            f"{s.test['successes']}/{s.test['trials']} ({float(s.test_rate()):.3f})",
            str(s.total_prompt_tokens()),
            str(s.total_completion_tokens()),
            str(s.optimizer_calls),
            str(s.trimming_events),
            str(s.wall_clock_ms),
        ])
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(headers))))

    category_lines = []
    for name in sorted(report.strategies):
        s = report.strategies[name]
        if s.per_category:
            parts = [f"{cat}={succ}/{trials}"
                     for cat, (succ, trials) in sorted(s.per_category.items())]
            category_lines.append(f"{name}: " + "  ".join(parts))
    if category_lines:
        lines.append("")
        lines.append("per-category test success:")
        lines.extend("  " + line for line in category_lines)
    return "\n".join(lines) + "\n"


def write_series_csv(report: RunReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series", "strategy", "x", "y"])
        for name in sorted(report.strategies):
            s = report.strategies[name]
            writer.writerow(["tokens_vs_performance", name,
                             s.total_prompt_tokens(), f"{float(s.test_rate()):.6f}"])
        for name in sorted(report.strategies):
            s = report.strategies[name]
            writer.writerow(["time_vs_performance", name,
                             s.wall_clock_ms, f"{float(s.test_rate()):.6f}"])


def render_figures(report: RunReport, out_dir: str | Path) -> list[Path]:
    """Scatter plots of token spend and wall-clock vs. test performance."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    series = [
        ("tokens_vs_performance", "prompt tokens",
         lambda s: s.total_prompt_tokens()),
        ("time_vs_performance", "wall clock (ms)",
         lambda s: s.wall_clock_ms),
    ]
    for stem, xlabel, x_of in series:
        fig, ax = plt.subplots(figsize=(6.4, 4.8))
        for name in sorted(report.strategies):
            s = report.strategies[name]
            x = x_of(s)
            y = float(s.test_rate())
            size = 100 + 400 * (x / max(1, max(x_of(o) for o in report.strategies.values())))
            ax.scatter([x], [y], s=size, alpha=0.5)
            ax.plot([x], [y], marker="+", color="black", markersize=8)
            ax.annotate(name, (x, y), textcoords="offset points", xytext=(6, 6))
        ax.set_xlabel(xlabel)
        ax.set_ylabel("test success rate")
        ax.set_ylim(-0.05, 1.05)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"{stem}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def emit_report(report: RunReport, out_dir: str | Path, *, csv_out: bool = True,
                figures: bool = True) -> list[Path]:
    """Write report.json (canonical), report.txt, report.csv and figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    json_path = out_dir / "report.json"
    json_path.write_text(report.to_json(), encoding="utf-8")
    written.append(json_path)

    txt_path = out_dir / "report.txt"
    txt_path.write_text(render_table(report), encoding="utf-8")
    written.append(txt_path)

    if csv_out:
        csv_path = out_dir / "report.csv"
        write_series_csv(report, csv_path)
        written.append(csv_path)

    if figures:
        written.extend(render_figures(report, out_dir))
    return written
