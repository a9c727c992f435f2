"""Tables, CSV exports, and figures for training runs and studies."""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class ReportError(RuntimeError):
    """Raised when there is nothing to render."""


MARGIN_POINTS = 0.5  # required improvement over baseline, in mIoU points


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def _table(headers, rows) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# ablation


def ablation_ordering_checks(result: dict) -> list:
    """The trend checks: full and +nsfr must clear baseline by MARGIN_POINTS."""
    means = {v["name"]: v.get("mean", {}).get("avg") for v in result["variants"]}
    margin = MARGIN_POINTS / 100.0
    checks = []
    for name in ("+nsfr+nsca", "+nsfr"):
        base, cand = means.get("baseline"), means.get(name)
        if base is None or cand is None:
            checks.append((f"{name} >= baseline + {MARGIN_POINTS}pt", None))
        else:
            checks.append((f"{name} >= baseline + {MARGIN_POINTS}pt",
                           bool(cand >= base + margin)))
    return checks


def render_ablation_table(result: dict) -> str:
    domains = list(result["domains"])
    headers = ["variant"] + domains + ["avg"]
    rows = []
    for variant in result["variants"]:
        row = [variant["name"]]
        mean, std = variant.get("mean"), variant.get("std")
        for key in domains + ["avg"]:
            if mean is None:
                row.append("failed")
            else:
                row.append(f"{_pct(mean[key])} ± {_pct(std[key])}")
        rows.append(row)
    lines = [_table(headers, rows), ""]
    lines.append(f"unseen-domain mIoU (%), mean ± std over seeds {result['seeds']}, "
                 f"source domain '{result['source_domain']}'")
    for label, ok in ablation_ordering_checks(result):
        status = "PASS" if ok else ("FLAG" if ok is not None else "N/A")
        lines.append(f"check: {label}: {status}")
    for variant in result["variants"]:
        for seed, msg in variant.get("errors", {}).items():
            lines.append(f"error: {variant['name']} seed {seed}: {msg}")
    return "\n".join(lines) + "\n"


def ablation_csv_rows(result: dict) -> list:
    rows = []
    for variant in result["variants"]:
        mean, std = variant.get("mean"), variant.get("std")
        if mean is None:
            continue
        for key in list(result["domains"]) + ["avg"]:
            rows.append({"variant": variant["name"], "domain": key,
                         "mean_miou": f"{mean[key]:.6f}", "std": f"{std[key]:.6f}"})
    return rows


# ---------------------------------------------------------------------------
# alpha sweep


def render_sweep_table(sweep: dict) -> str:
    headers = ["alpha", "mean mIoU (%)", "std"]
    rows = []
    for point in sweep["points"]:
        if "mean" in point:
            rows.append([f"{point['alpha']:g}", _pct(point["mean"]), _pct(point["std"])])
        else:
            rows.append([f"{point['alpha']:g}", "failed", ""])
    lines = [_table(headers, rows), ""]
    lines.append(f"unseen-domain mIoU over seeds {sweep['seeds']}, "
                 f"source domain '{sweep['source_domain']}'")
    scored = [p for p in sweep["points"] if "mean" in p]
    if scored:
        best = max(scored, key=lambda p: p["mean"])
        lines.append(f"peak at alpha={best['alpha']:g}")
    for point in sweep["points"]:
        for seed, msg in point.get("errors", {}).items():
            lines.append(f"error: alpha={point['alpha']:g} seed {seed}: {msg}")
    return "\n".join(lines) + "\n"


def sweep_csv_rows(sweep: dict) -> list:
    rows = []
    for point in sweep["points"]:
        if "mean" not in point:
            continue
        rows.append({"alpha": f"{point['alpha']:g}",
                     "mean_miou": f"{point['mean']:.6f}",
                     "std": f"{point['std']:.6f}"})
    return rows


def write_csv(path, rows, fieldnames):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# figures


def plot_alpha_curve(sweep: dict, path):
    points = [p for p in sweep["points"] if "mean" in p]
    if not points:
        raise ReportError("alpha sweep has no scored points to plot")
    xs = [p["alpha"] for p in points]
    ys = [100.0 * p["mean"] for p in points]
    es = [100.0 * p["std"] for p in points]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3)
    best = max(points, key=lambda p: p["mean"])
    ax.axvline(best["alpha"], color="gray", linestyle=":", linewidth=1)
    ax.set_xlabel("alpha (non-salient quantile)")
    ax.set_ylabel("unseen-domain mIoU (%)")
    ax.set_title("mIoU vs alpha")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_loss_curves(records: list, path):
    if not records:
        raise ReportError("training log is empty")
    iters = [r["iter"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key, label in (("L_s", "segmentation"), ("L_cls", "classification"),
                       ("L_sca", "centroid alignment")):
        ax.plot(iters, [r[key] for r in records], label=label, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax2 = ax.twinx()
    ax2.plot(iters, [r["lr"] for r in records], color="gray", linestyle="--",
             linewidth=0.8, alpha=0.6)
    ax2.set_ylabel("lr", color="gray")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


# ---------------------------------------------------------------------------
# discovery


def render_run_report(out_dir) -> list:
    """Render tables/CSV/figures for whatever artifacts out_dir contains."""
    out_dir = Path(out_dir)
    written = []
    ablation_path = out_dir / "ablation.json"
    if ablation_path.exists():
        result = json.loads(ablation_path.read_text())
        (out_dir / "ablation_table.txt").write_text(render_ablation_table(result))
        written.append(out_dir / "ablation_table.txt")
        written.append(write_csv(out_dir / "ablation.csv", ablation_csv_rows(result),
                                 ["variant", "domain", "mean_miou", "std"]))
    sweep_path = out_dir / "sweep.json"
    if sweep_path.exists():
        sweep = json.loads(sweep_path.read_text())
        (out_dir / "sweep_table.txt").write_text(render_sweep_table(sweep))
        written.append(out_dir / "sweep_table.txt")
        written.append(write_csv(out_dir / "sweep.csv", sweep_csv_rows(sweep),
                                 ["alpha", "mean_miou", "std"]))
        written.append(plot_alpha_curve(sweep, out_dir / "alpha_curve.png"))
    log_path = out_dir / "train_log.ndjson"
    if log_path.exists():
        records = [json.loads(line) for line in log_path.read_text().splitlines() if line]
        written.append(plot_loss_curves(records, out_dir / "loss_curves.png"))
    if not written:
        raise ReportError(
            f"nothing to report in {out_dir} (expected ablation.json, sweep.json, "
            f"or train_log.ndjson)")
    return written
