"""Command-line entry point: ``samcl <subcommand> [--config FILE] [key=value ...]``.

Exit codes: 0 success, 3 configuration error, 4 runtime error, 5 acceptance failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from samcl.config import ExperimentConfig, parse_config, serialize_config, with_settings
from samcl.errors import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_RUNTIME = 4
EXIT_ACCEPTANCE = 5

OUTPUT_ENV = "SAMCL_OUTPUT"
PLOT_KINDS = ("trajectory", "ablation-bars", "robustness-curve")

log = logging.getLogger("samcl")


# --- reporting ------------------------------------------------------------

def _cell_column(variant: str, scheme: str) -> str:
    return f"{variant}[{scheme}]" if variant in ("sam", "lsm") else variant


def report_grid(records) -> dict:
    """{(learner, buffer): {column: Aggregate}} from final-task records."""
    from samcl.harness import aggregate

    grid: dict = {}
    for a in aggregate(records):
        grid.setdefault((a.learner, a.buffer), {})[_cell_column(a.variant, a.scheme)] = a
    return grid


def report(records) -> str:
    """Mean +- std (percent) per (learner, buffer, variant) cell, Class-IL and Task-IL sections."""
    if not records:
        raise ValueError("no records to report")
    grid = report_grid(records)
    columns = []
    for row in grid.values():
        for c in row:
            if c not in columns:
                columns.append(c)
    lines = []
    for title, attr in (("Class-IL", "class_il"), ("Task-IL", "task_il")):
        header = ["learner", "buffer"] + columns
        body = []
        for (learner, buffer), row in grid.items():
            cells = [learner, str(buffer)]
            for c in columns:
                a = row.get(c)
                cells.append("-" if a is None else
                             f"{100 * getattr(a, attr + '_mean'):.2f} ± {100 * getattr(a, attr + '_std'):.2f}")
            body.append(cells)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        lines.append(f"{title} accuracy (%), mean ± std over seeds")
        lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
        for r in body:
            lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
        lines.append("")
    return "\n".join(lines)


def missing_cells(records, rows, columns) -> list:
    grid = report_grid(records)
    return [(r, c) for r in rows for c in columns if c not in grid.get(r, {})]


# --- plots ----------------------------------------------------------------

def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _require(records, fields, kind) -> None:
    missing = sorted({f for r in records for f in fields if getattr(r, f, None) is None})
    if missing:
        raise ValueError(f"{kind} plot: records lack required fields {missing}")


def emit_plots(records, kind: str, out_dir) -> list:
    """Write a PNG and a CSV sidecar for ``kind``; returns the written paths.

    ``records`` are ResultRecords for trajectory / ablation-bars and
    (epsilon, seed, accuracy) rows for robustness-curve.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    if not records:
        raise ValueError(f"{kind} plot: no records")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png, sidecar = out_dir / f"{kind}.png", out_dir / f"{kind}.csv"
    fig, ax = plt.subplots(figsize=(5, 3.5))

    if kind == "trajectory":
        _require(records, ("sal_sim", "sal_kld"), kind)
        tasks = sorted({r.task_index for r in records})
        rows = []
        for t in tasks:
            at = [r for r in records if r.task_index == t]
            cc = [r.sal_cc for r in at if r.sal_cc is not None]
            rows.append([t + 1, np.mean([r.sal_sim for r in at]), np.mean(cc) if cc else float("nan"),
                         np.mean([r.sal_kld for r in at])])
        data = np.array(rows, dtype=float)
        for j, name in enumerate(("Sim", "CC", "KLD"), start=1):
            ax.plot(data[:, 0], data[:, j], marker="o", label=name)
        ax.set_xticks(data[:, 0])
        ax.set_xlabel("task")
        ax.set_ylabel("held-out saliency metric")
        ax.legend()
        _write_csv(sidecar, ["task", "sim", "cc", "kld"], rows)
    elif kind == "ablation-bars":
        from samcl.harness import aggregate

        aggs = aggregate(records)
        labels = [a.label for a in aggs]
        x = np.arange(len(aggs))
        ax.bar(x - 0.2, [100 * a.class_il_mean for a in aggs], 0.4,
               yerr=[100 * a.class_il_std for a in aggs], label="Class-IL")
        ax.bar(x + 0.2, [100 * a.task_il_mean for a in aggs], 0.4,
               yerr=[100 * a.task_il_std for a in aggs], label="Task-IL")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
        ax.set_ylabel("accuracy (%)")
        ax.legend()
        _write_csv(sidecar, ["label", "runs", "class_il_mean", "class_il_std", "task_il_mean", "task_il_std"],
                   [[a.label, a.runs, a.class_il_mean, a.class_il_std, a.task_il_mean, a.task_il_std] for a in aggs])
    else:
        from samcl.harness import mean_std

        eps = sorted({float(r[0]) for r in records})
        rows = []
        for e in eps:
            m, s = mean_std([r[2] for r in records if float(r[0]) == e])
            rows.append([e, m, s, sum(1 for r in records if float(r[0]) == e)])
        data = np.array(rows, dtype=float)
        ax.plot(data[:, 0] * 255, data[:, 1], marker="o")
        ax.fill_between(data[:, 0] * 255, data[:, 1] - data[:, 2], data[:, 1] + data[:, 2], alpha=0.3)
        ax.set_xticks(data[:, 0] * 255)
        ax.set_xlabel("epsilon (x 1/255)")
        ax.set_ylabel("accuracy")
        _write_csv(sidecar, ["epsilon", "mean", "std", "seeds"], rows)

    fig.tight_layout()
    fig.savefig(png, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return [png, sidecar]


# --- subcommands ----------------------------------------------------------

def _seeds(args, cfg: ExperimentConfig) -> list:
    if args.seed_list:
        try:
            return [int(s) for s in args.seed_list.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seed-list: expected comma-separated integers, got {args.seed_list!r}") from None
    return list(cfg.train.seeds)


def _csv_list(value: str, name: str, cast=str) -> list:
    try:
        return [cast(v.strip()) for v in value.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r}") from None


def cmd_pretrain(args, cfg, out: Path) -> int:
    from samcl.harness import build_stream, pretrained_saliency
    from samcl.saliency import evaluate_saliency, save_checkpoint

    for seed in _seeds(args, cfg):
        stream = build_stream(cfg, seed)
        S = pretrained_saliency(cfg, seed, stream.classes)
        held = [s for t in stream.tasks for s in t.test]
        m = evaluate_saliency(S, held)
        path = out / f"saliency_seed{seed}.pt"
        save_checkpoint(S, path, input_size="x".join(map(str, S.image_size)), epochs=cfg.pretrain.epochs,
                        seed=seed, pretrain=cfg.pretrain.kind)
        print(f"seed {seed}: cc={m.cc:.4f} sim={m.sim:.4f} kld={m.kld:.4f} -> {path}")
    return EXIT_OK


def cmd_train(args, cfg, out: Path) -> int:
    from samcl.harness import run_experiment, write_records
    from samcl.saliency import save_checkpoint

    records = out / "records.jsonl"
    for seed in _seeds(args, cfg):
        res = run_experiment(cfg, seed, experiment="train")
        write_records(records, res.records, append=True)
        save_checkpoint(res.model, out / f"model_seed{seed}.pt", label=cfg.label, seed=seed,
                        config=cfg.digest())
        r = res.records[-1]
        print(f"{cfg.label} seed {seed}: class-il={r.class_il:.4f} task-il={r.task_il:.4f}")
    return EXIT_OK


def cmd_eval(args, cfg, out: Path) -> int:
    from samcl.harness import build_model, build_stream, evaluate
    from samcl.saliency import load_checkpoint

    seed = _seeds(args, cfg)[0]
    stream = build_stream(cfg, seed)
    model = build_model(cfg, stream, seed)
    load_checkpoint(model, args.checkpoint)
    for mode in ("class-il", "task-il"):
        ev = evaluate(model, stream, mode)
        per = " ".join(f"{a:.4f}" for a in ev.per_task)
        print(f"{mode}: average={ev.average:.4f} per-task=[{per}]")
    return EXIT_OK


def cmd_ablate(args, cfg, out: Path) -> int:
    from samcl.harness import run_matrix

    schemes = _csv_list(args.schemes, "--schemes")
    variants = _csv_list(args.variants, "--variants")
    configs = []
    for v in variants:
        for s in (schemes if v in ("sam", "lsm") else [cfg.sam.scheme]):
            c = with_settings(cfg, **{"sam.variant": v, "sam.scheme": s})
            c.name = f"{cfg.learner.kind}/b{cfg.learner.buffer}/{v}[{s}]" if v in ("sam", "lsm") else ""
            configs.append(c)
    result = run_matrix(configs, _seeds(args, cfg), out / "records.jsonl", experiment="ablate")
    if result.records:
        print(report(result.records))
    expected = {c.label for c in configs}
    present = {a.label for a in result.aggregates}
    if result.failures or expected - present:
        print(f"incomplete grid: missing {sorted(expected - present)} failures {result.failures}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    return EXIT_OK


def cmd_attack(args, cfg, out: Path) -> int:
    from samcl.harness import build_stream, train_online
    from samcl.robustness import robustness_curve, write_curve_csv

    eps = sorted(_csv_list(args.eps, "--eps", float) if args.eps else cfg.attack.eps)
    rows = []
    for seed in _seeds(args, cfg):
        stream = build_stream(cfg, seed)
        model = train_online(cfg, stream, seed, experiment="attack").model
        curve = robustness_curve(model, stream, [e / 255.0 for e in eps], seed, cfg.attack.steps,
                                 cfg.attack.step_size / 255.0 or None, cfg.attack.random_start)
        rows.extend(curve)
        for e, _, acc in curve:
            print(f"seed {seed} eps {e * 255:g}/255: accuracy={acc:.4f}")
    write_curve_csv(out / "robustness.csv", rows)
    return EXIT_OK


def cmd_spurious(args, cfg, out: Path) -> int:
    from samcl.harness import write_records
    from samcl.robustness import spurious_experiment

    recovered = 0
    seeds = _seeds(args, cfg)
    for seed in seeds:
        rows = spurious_experiment(cfg, seed)
        write_records(out / "records.jsonl", list(rows.values()), append=True)
        clean, sf, sam = (rows[k].class_il for k in ("clean", "spurious", "spurious+sam"))
        gap = clean - sf
        frac = (sam - sf) / gap if gap > 0 else float("nan")
        ok = gap >= 0.05 and frac >= 0.25
        recovered += ok
        print(f"seed {seed}: clean={clean:.4f} spurious={sf:.4f} spurious+sam={sam:.4f} "
              f"gap={gap:.4f} recovered={frac:.2f}")
    if args.check and recovered < int(np.ceil(0.8 * len(seeds))):
        print(f"directional check failed: {recovered}/{len(seeds)} seeds", file=sys.stderr)
        return EXIT_ACCEPTANCE
    return EXIT_OK


def cmd_plot(args, cfg, out: Path) -> int:
    if args.kind == "robustness-curve":
        from samcl.robustness import read_curve_csv

        records = read_curve_csv(args.records)
    else:
        from samcl.harness import read_records

        records = read_records(args.records)
    for p in emit_plots(records, args.kind, out):
        print(p)
    return EXIT_OK


def cmd_report(args, cfg, out: Path) -> int:
    from samcl.harness import read_records

    print(report(read_records(args.records)))
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "attack": cmd_attack,
    "spurious": cmd_spurious,
    "plot": cmd_plot,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samcl", description="Saliency-modulated online continual learning")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--out", default=None, help=f"output directory (default: ${OUTPUT_ENV} or ./runs)")
        p.add_argument("--seed-list", default=None, help="comma-separated seeds, overrides train.seeds")
        p.add_argument("-v", "--verbose", action="store_true")
        p.add_argument("overrides", nargs="*", help="key=value settings applied after the config file")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
        if name == "ablate":
            p.add_argument("--schemes", default="11100,11110,11111")
            p.add_argument("--variants", default="sim,sai,sam,lsm")
        if name == "attack":
            p.add_argument("--eps", default=None, help="budgets in 1/255 units, e.g. 0,2,4,8")
        if name == "spurious":
            p.add_argument("--check", action="store_true", help="exit 5 unless the directional check holds")
        if name in ("plot", "report"):
            p.add_argument("--records", required=True)
        if name == "plot":
            p.add_argument("--kind", choices=PLOT_KINDS, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "runs")
    try:
        cfg = parse_config(args.config, args.overrides)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(serialize_config(cfg), encoding="utf-8")
        return COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
