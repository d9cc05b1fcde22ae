"""Command line entry point: generate / train / evaluate / ablate / report.

Every command is deterministic given its inputs and --seed, writes outputs
under a run directory with a manifest.json, and uses the exit-code contract
0 = success, 2 = input validation failure, 3 = runtime failure.
"""

from __future__ import annotations

import csv
import functools
import json
import os
import sys

import click
import yaml

from .errors import (ConfigurationError, DomainError, FormatError,
                     OcclkitError, QuotaError, TrainingAbort, ValidationError)
from .occlcon import MarginConfig
from .occlevel import LEVELS
from .pandata import PanopticDataset
from .paneval import stratified_report
from .scenegen import GeneratorConfig, config_from_dict, generate_dataset
from .trainhar import (TrainConfig, extract_embeddings, predict_dataset,
                       separation_score, train)

DEFAULT_ABLATION_GRID = [(0.3, 0.4), (0.3, 0.6), (0.3, 0.8),
                         (0.4, 0.6), (0.4, 0.7)]

_VALIDATION_ERRORS = (ConfigurationError, FormatError, ValidationError,
                      DomainError)


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _VALIDATION_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except (QuotaError, TrainingAbort) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)
        except OcclkitError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)
    return wrapper


def _load_config(path: str, section: str) -> dict:
    with open(path) as fh:
        obj = yaml.safe_load(fh) or {}
    if not isinstance(obj, dict):
        raise ConfigurationError(f"config {path} is not a mapping")
    sub = obj.get(section, obj)
    if not isinstance(sub, dict):
        raise ConfigurationError(f"config section {section!r} is not a mapping")
    return sub


def _write_manifest(out_dir: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


@click.group()
def main():
    """Occlusion benchmarking kit for panoptic segmentation."""


@main.command("generate")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_root", required=True, type=click.Path())
@click.option("--n-images", type=int, default=None,
              help="Override the configured image count.")
@_exit_codes
def cmd_generate(config_path, seed, out_root, n_images):
    """Generate a synthetic occlusion dataset with exact ground truth."""
    cfg = config_from_dict(_load_config(config_path, "generate"))
    if n_images is not None:
        cfg.n_images = n_images
    manifest = generate_dataset(cfg, seed, out_root)
    counts = manifest["level_counts"]
    for lvl in LEVELS:
        click.echo(f"{lvl:>5}: {counts[lvl]}")
    click.echo(f"wrote {sum(counts.values())} images to {out_root} "
               f"(config hash {cfg.hash()})")


def _evaluate_to(out_dir, pred_root, gt_root, no_ap):
    gt_ds = PanopticDataset(gt_root)
    pred_ds = PanopticDataset(pred_root, require_sidecar=False)
    report = stratified_report(pred_ds, gt_ds, with_ap=not no_ap)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write(report.to_csv())
    text = report.to_text()
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(text)
    return report, text


@main.command("evaluate")
@click.option("--pred", "pred_root", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--gt", "gt_root", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--sidecar", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Occlusion sidecar; defaults to the one "
              "inside the gt root.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--no-ap", is_flag=True, help="Skip AP (predictions carry no scores).")
@_exit_codes
def cmd_evaluate(pred_root, gt_root, sidecar, out_dir, no_ap):
    """Occlusion-stratified evaluation of a prediction root against gt."""
    if sidecar is not None and not os.path.samefile(
            sidecar, os.path.join(gt_root, "occlusion.json")):
        raise ConfigurationError(
            "--sidecar must point at the gt root's occlusion.json "
            "(external sidecars: copy them into the gt root)")
    report, text = _evaluate_to(out_dir, pred_root, gt_root, no_ap)
    _write_manifest(out_dir, {"command": "evaluate", "pred": pred_root,
                              "gt": gt_root, "no_ap": no_ap})
    click.echo(text)


def _train_run(train_cfg: TrainConfig, out_dir: str,
               eval_root: str | None, no_ap: bool = False) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.yaml"), "w") as fh:
        yaml.safe_dump({"train": train_cfg.to_json()}, fh, sort_keys=True)
    result = train(train_cfg, out_dir)
    summary = {"command": "train", "config_hash": train_cfg.hash(),
               "seed": train_cfg.seed, "mode": train_cfg.mode,
               "best_val_pq": result["best_val_pq"], "steps": result["steps"]}
    if eval_root:
        gt_ds = PanopticDataset(eval_root)
        pred_root = os.path.join(out_dir, "pred")
        predict_dataset(result["checkpoint"], gt_ds, pred_root)
        report, _ = _evaluate_to(out_dir, pred_root, eval_root, no_ap)
        emb = extract_embeddings(result["checkpoint"], gt_ds)
        sep = separation_score(emb)
        with open(os.path.join(out_dir, "separation.json"), "w") as fh:
            json.dump({"separation_score": round(sep, 6)}, fh, sort_keys=True)
            fh.write("\n")
        summary["separation_score"] = sep
        summary["report"] = {k: (None if v is None else
                                 {m: v[m] for m in ("PQ", "PQ_th", "PQ_st")})
                             for k, v in report.rows.items()}
    _write_manifest(out_dir, summary)
    return summary


@main.command("train")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["baseline", "contrastive"]),
              default=None, help="Override the configured mode.")
@click.option("--tau-lh", type=float, default=None)
@click.option("--tau-m", type=float, default=None)
@click.option("--lambda", "lambda_weight", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--eval-dataset", "eval_root", default=None,
              type=click.Path(exists=True, file_okay=False),
              help="After training, predict and evaluate on this gt root.")
@_exit_codes
def cmd_train(config_path, mode, tau_lh, tau_m, lambda_weight, seed, out_dir,
              eval_root):
    """Train the toy panoptic model, optionally with the contrastive loss."""
    obj = dict(_load_config(config_path, "train"))
    for key, val in (("mode", mode), ("tau_lh", tau_lh), ("tau_m", tau_m),
                     ("lambda", lambda_weight), ("seed", seed)):
        if val is not None:
            obj[key] = val
    train_cfg = TrainConfig.from_dict(obj)
    summary = _train_run(train_cfg, out_dir, eval_root)
    click.echo(f"best val PQ {summary['best_val_pq']:.4f} "
               f"({summary['steps']} steps); run dir {out_dir}")


def _parse_grid(text: str) -> list[tuple[float, float]]:
    cells = []
    for part in text.split(","):
        lo, _, hi = part.strip().partition(":")
        try:
            cells.append((float(lo), float(hi)))
        except ValueError:
            raise ConfigurationError(f"bad grid cell {part!r}; expected "
                                     "tau_lh:tau_m")
    return cells


@main.command("ablate")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", default=None,
              help="Comma-separated tau_lh:tau_m cells; default is the "
              "5-cell margin grid.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--eval-dataset", "eval_root", required=True,
              type=click.Path(exists=True, file_okay=False))
@_exit_codes
def cmd_ablate(config_path, grid, seed, out_dir, eval_root):
    """Train one run per margin-grid cell and tabulate PQ per cell."""
    cells = DEFAULT_ABLATION_GRID if grid is None else _parse_grid(grid)
    for tau_lh, tau_m in cells:
        MarginConfig(tau_lh=tau_lh, tau_m=tau_m)  # rejects invalid pairs early
    obj = dict(_load_config(config_path, "train"))
    rows = []
    for tau_lh, tau_m in cells:
        cell_obj = dict(obj)
        cell_obj.update({"mode": "contrastive", "tau_lh": tau_lh,
                         "tau_m": tau_m, "seed": seed})
        cell_dir = os.path.join(out_dir, f"tau_{tau_lh:g}_{tau_m:g}")
        summary = _train_run(TrainConfig.from_dict(cell_obj), cell_dir,
                             eval_root)
        all_row = summary["report"]["all"]
        rows.append((tau_lh, tau_m, all_row["PQ"], all_row["PQ_th"],
                     all_row["PQ_st"]))
    os.makedirs(out_dir, exist_ok=True)
    header = ("tau_lh", "tau_m", "PQ", "PQ_th", "PQ_st")
    with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{row[0]:g}", f"{row[1]:g}"]
                            + [f"{v * 100:.4f}" for v in row[2:]])
    lines = [" ".join(f"{h:>8}" for h in header)]
    for row in rows:
        lines.append(f"{row[0]:>8g} {row[1]:>8g} "
                     + " ".join(f"{v * 100:>8.1f}" for v in row[2:]))
    table = "\n".join(lines) + "\n"
    with open(os.path.join(out_dir, "ablation.txt"), "w") as fh:
        fh.write(table)
    _write_manifest(out_dir, {"command": "ablate", "seed": seed,
                              "grid": [list(c) for c in cells]})
    click.echo(table)


def _load_run(run_dir: str) -> dict:
    run = {"dir": run_dir, "name": os.path.basename(run_dir.rstrip("/"))}
    cfg_path = os.path.join(run_dir, "config.yaml")
    if not os.path.isfile(cfg_path):
        raise ConfigurationError(f"run dir {run_dir} has no config.yaml")
    with open(cfg_path) as fh:
        run["config"] = (yaml.safe_load(fh) or {}).get("train", {})
    csv_path = os.path.join(run_dir, "report.csv")
    if not os.path.isfile(csv_path):
        raise ConfigurationError(f"run dir {run_dir} has no report.csv "
                                 "(train with --eval-dataset)")
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    run["report"] = {
        r["subset"]: {k: (None if r[k] == "n/a" else float(r[k]) / 100)
                      for k in r if k != "subset"}
        for r in rows}
    sep_path = os.path.join(run_dir, "separation.json")
    run["separation"] = None
    if os.path.isfile(sep_path):
        with open(sep_path) as fh:
            run["separation"] = json.load(fh)["separation_score"]
    log_path = os.path.join(run_dir, "log.jsonl")
    run["log"] = []
    if os.path.isfile(log_path):
        with open(log_path) as fh:
            run["log"] = [json.loads(line) for line in fh if line.strip()]
    return run


def _delta_cell(base, con) -> str:
    if base is None or con is None:
        return "n/a"
    return f"{con * 100:.1f}({(con - base) * 100:+.1f})"


@main.command("report")
@click.option("--runs", "runs_dir", required=True,
              type=click.Path(file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path())
@_exit_codes
def cmd_report(runs_dir, out_dir):
    """Baseline-vs-contrastive comparison tables and plots."""
    if not os.path.isdir(runs_dir):
        raise ConfigurationError(f"runs dir {runs_dir} does not exist")
    runs = [_load_run(os.path.join(runs_dir, name))
            for name in sorted(os.listdir(runs_dir))
            if os.path.isdir(os.path.join(runs_dir, name))]
    base = [r for r in runs if r["config"].get("mode") == "baseline"
            or float(r["config"].get("lambda", 1.0)) == 0.0]
    con = [r for r in runs if r not in base]
    if not base or not con:
        raise ConfigurationError(
            "need at least one baseline (or lambda=0) run and one "
            "contrastive run under --runs")
    b, c = base[0], con[0]

    metrics = ("PQ", "PQ_th", "PQ_st", "AP_th_pan", "mIoU_pan")
    lines = [" ".join([f"{'level':>6}", f"{'model':>6}"]
                      + [f"{m:>12}" for m in metrics])]
    for lvl in LEVELS:
        brow, crow = b["report"].get(lvl), c["report"].get(lvl)
        if brow is None or crow is None:
            continue
        lines.append(" ".join(
            [f"{lvl:>6}", f"{'base':>6}"]
            + [f"{'n/a':>12}" if brow[m] is None else f"{brow[m] * 100:>12.1f}"
               for m in metrics]))
        lines.append(" ".join(
            [f"{'':>6}", f"{'con':>6}"]
            + [f"{_delta_cell(brow[m], crow[m]):>12}" for m in metrics]))
    if b["separation"] is not None and c["separation"] is not None:
        lines.append("")
        lines.append(f"separation score: base {b['separation']:+.4f}  "
                     f"con {c['separation']:+.4f}  "
                     f"delta {c['separation'] - b['separation']:+.4f}")
    table = "\n".join(lines) + "\n"
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "comparison.txt"), "w") as fh:
        fh.write(table)

    _plot_runs(b, c, out_dir)
    _write_manifest(out_dir, {"command": "report", "runs": runs_dir,
                              "baseline": b["name"], "contrastive": c["name"]})
    click.echo(table)


def _plot_runs(base: dict, con: dict, out_dir: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for run, style in ((base, "o--"), (con, "s-")):
        ys = [run["report"][lvl]["PQ"] for lvl in LEVELS
              if run["report"].get(lvl) and run["report"][lvl]["PQ"] is not None]
        xs = [lvl for lvl in LEVELS
              if run["report"].get(lvl) and run["report"][lvl]["PQ"] is not None]
        ax.plot(xs, [y * 100 for y in ys], style, label=run["name"])
    ax.set_xlabel("occlusion level")
    ax.set_ylabel("PQ")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "pq_vs_level.png"), dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for run, ls in ((base, "--"), (con, "-")):
        if not run["log"]:
            continue
        steps = [r["step"] for r in run["log"]]
        for key in ("L_seg", "L_con"):
            ax.plot(steps, [r[key] for r in run["log"]], ls,
                    label=f"{run['name']} {key}", alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "loss_curves.png"), dpi=120)
    plt.close(fig)


if __name__ == "__main__":
    main()
