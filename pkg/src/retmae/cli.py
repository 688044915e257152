"""Command-line entry point: synth, pretrain, probe, segment-tune, evaluate, stats, report."""
from __future__ import annotations

import argparse
import csv
import datetime
import itertools
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import runconfig
from .adapt import (classification_scores, load_classifier, load_segmenter, probe_predict, probe_replicas,
                    read_replicas, seg_predict, seg_tune)
from .core import Checkpoint, ConfigError, DataError, RetmaeError, UndefinedMetricError
from .data import (AugmentPolicy, ManifestRow, MissingFileError, load_dataset, load_indexed, save_indexed,
                   select_split, split_stratified, synth_blobs, synth_generate, write_dataset)
from .metrics import (SEG_METRICS, aggregate_patient, segmentation_scores, t_test, wilcoxon_signed_rank,
                      write_report_csv)
from .pretrain import load_pretrained, pretrain_run, read_history
from .report import md_table, mean_std, save_recon_grid, write_loss_svg
from .runconfig import RunConfig

log = logging.getLogger("retmae")

COMMANDS = ("synth", "pretrain", "probe", "segment-tune", "evaluate", "stats", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # keep argparse failures on the one-line diagnostic path
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="retmae", description="Multimodal masked-autoencoder pipeline for paired retinal images.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        sp.add_argument("--out", help="output directory (beats the environment and the config)")
        if name == "stats":
            sp.add_argument("replicas", nargs="+", help="replica CSVs (seed,metric,value)")
            sp.add_argument("--names", help="comma-separated labels for the replica files")
    return p


def _overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _sidecar(cfg: RunConfig, command: str, message: str) -> None:
    # timestamps live only here so every other output stays byte-identical across reruns
    logs = cfg.output_dir / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    with open(logs / f"{command}.log", "a") as fh:
        fh.write(f"{stamp} {message}\n")


def _policy(cfg: RunConfig) -> AugmentPolicy:
    return {"full": AugmentPolicy(), "flip": AugmentPolicy.flip_only(), "none": AugmentPolicy.identity()}[
        cfg.run.augment]


def _dataset(cfg: RunConfig):
    return load_dataset(cfg.data_root, cfg.model.num_layer_classes, None)


def _checkpoint(cfg: RunConfig, default_name: Optional[str], required: bool = False) -> Optional[Checkpoint]:
    if cfg.run.checkpoint:
        path = Path(cfg.run.checkpoint)
        if not path.exists():
            raise MissingFileError(f"checkpoint not found: {path}")
        return Checkpoint.load(path)
    if default_name is not None and (cfg.output_dir / default_name).exists():
        return Checkpoint.load(cfg.output_dir / default_name)
    if required:
        raise MissingFileError(f"no checkpoint: set run.checkpoint or provide {cfg.output_dir / str(default_name)}")
    return None


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: RunConfig) -> str:
    d = cfg.data
    if d.kind == "blobs":
        samples = synth_blobs(d.n_patients * d.samples_per_patient, cfg.model.image_size, cfg.phantom.seed)
        rows = [ManifestRow.for_sample(s) for s in samples]
        assign = split_stratified(rows, d.ratios, cfg.phantom.seed)
        for r in rows:
            r.split = assign[r.patient_id]
    else:
        samples, rows = synth_generate(cfg.phantom, d.n_patients, d.samples_per_patient, d.ratios)
    root = write_dataset(cfg.data_root, samples, rows)
    counts = {k: sum(r.split == k for r in rows) for k in ("train", "val", "test")}
    return f"wrote {len(samples)} samples to {root} (splits {counts})"


def cmd_pretrain(cfg: RunConfig) -> str:
    samples, rows = _dataset(cfg)
    train = select_split(samples, rows, "train")
    out = cfg.output_dir
    res = pretrain_run(train, cfg.model, cfg.schedule, cfg.masking, seed=cfg.run.seed, policy=_policy(cfg),
                       out_dir=out, max_steps=cfg.run.max_steps or None)
    write_loss_svg(out / "loss.svg", res.history)
    h = res.history
    return f"pretrained {len(h)} epochs on {len(train)} samples; total loss {h[0]['total']:.4g} -> {h[-1]['total']:.4g}"


def cmd_probe(cfg: RunConfig) -> str:
    samples, rows = _dataset(cfg)
    train, val, test = (select_split(samples, rows, k) for k in ("train", "val", "test"))
    ckpt = _checkpoint(cfg, "pretrain_final.ckpt")
    if ckpt is None:
        warnings.warn("no pretrained checkpoint; probing a randomly initialised encoder", stacklevel=2)
    table, _ = probe_replicas(train, val, test, cfg.model, cfg.run.num_classes, ckpt, cfg.probe,
                              cfg.run.downstream, _policy(cfg), cfg.output_dir)
    summ = table.summary()
    return "probe " + ", ".join(f"{k} {mean_std(*v)}" for k, v in summ.items())


def cmd_segment_tune(cfg: RunConfig) -> str:
    samples, rows = _dataset(cfg)
    train, val = select_split(samples, rows, "train"), select_split(samples, rows, "val")
    ckpt = _checkpoint(cfg, "pretrain_final.ckpt")
    if ckpt is None:
        warnings.warn("no pretrained checkpoint; tuning on a randomly initialised encoder", stacklevel=2)
    res = seg_tune(train, val, cfg.model, cfg.run.num_classes, ckpt, cfg.seg, cfg.run.head, cfg.run.seed,
                   cfg.run.downstream, cfg.output_dir)
    best = res.trace[res.best_epoch - 1]["dice"] if res.best_epoch else float("nan")
    return f"segment-tune ({cfg.seg.mode}, {cfg.run.head}) best validation Dice {best:.4f} at epoch {res.best_epoch}"


def _load_predictions(cfg: RunConfig, samples) -> np.ndarray:
    root = Path(cfg.run.predictions)
    maps = []
    for s in samples:
        path = root / f"{s.sample_id}_pred.png"
        if not path.exists():
            raise MissingFileError(f"prediction not found: {path}")
        maps.append(load_indexed(path, cfg.run.num_classes))
    return np.stack(maps)


def cmd_evaluate(cfg: RunConfig) -> str:
    samples, rows = _dataset(cfg)
    split = select_split(samples, rows, cfg.data.split)
    if not split:
        raise DataError(f"split {cfg.data.split!r} is empty")
    out = cfg.output_dir
    if not cfg.run.predictions:
        ckpt = _checkpoint(cfg, f"segment_seed{cfg.run.seed}.ckpt", required=True)
        if ckpt.manifest.get("mode") == "probe":
            return _evaluate_classification(cfg, ckpt, split)
        pred = seg_predict(split, load_segmenter(ckpt))
        for s, p in zip(split, pred):
            save_indexed(out / "predictions" / f"{s.sample_id}_pred.png", p)
    else:
        pred = _load_predictions(cfg, split)
    patient_of = {s.sample_id: s.patient_id for s in split}
    classes = range(1, cfg.run.num_classes)
    per_metric: dict[str, list] = {m: [] for m in SEG_METRICS}
    for s, p in zip(split, pred):
        if s.mask is None:
            raise DataError(f"sample {s.sample_id} has no reference mask")
        scores = segmentation_scores(p, s.mask, classes, s.spacing)
        for m in SEG_METRICS:
            per_metric[m].append((s.sample_id, scores[m]))
    reports = [aggregate_patient(per_metric[m], patient_of, m) for m in SEG_METRICS]
    write_report_csv(out / "metrics.csv", reports)
    return "evaluate " + ", ".join(f"{r.metric} {mean_std(r.mean, r.std)} (n={r.n})" for r in reports)


def _evaluate_classification(cfg: RunConfig, ckpt: Checkpoint, split) -> str:
    model = load_classifier(ckpt)
    proba = probe_predict(split, model)
    labels = np.array([s.label for s in split])
    scores = classification_scores(proba, labels)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "classification_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("level", "unit_id", "class", "metric", "value"))
        for k, v in scores.items():
            w.writerow(("aggregate", "all", "all", k, repr(float(v))))
    with open(out / "probabilities.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label"] + [f"p{c}" for c in range(proba.shape[1])])
        for s, row in zip(split, proba):
            w.writerow([s.sample_id, s.label] + [repr(float(x)) for x in row])
    return "evaluate " + ", ".join(f"{k} {v:.4f}" for k, v in scores.items())


STATS_COLUMNS = ("metric", "a", "b", "mean_a", "mean_b", "t_p", "t_note", "wilcoxon_p", "wilcoxon_note")


def compare_replicas(name_a: str, a: dict, name_b: str, b: dict) -> list[tuple]:
    rows = []
    for metric in sorted(set(a) & set(b)):
        va, vb = a[metric], b[metric]
        t = t_test(va, vb)
        t_note = "zero variance" if t.degenerate else ""
        if len(va) != len(vb):
            raise DataError(f"{metric}: {name_a} has {len(va)} replicas, {name_b} has {len(vb)}")
        try:
            w_p, w_note = wilcoxon_signed_rank(va, vb), ""
        except UndefinedMetricError:
            w_p, w_note = 1.0, "all differences zero"
        rows.append((metric, name_a, name_b, float(np.mean(va)), float(np.mean(vb)), t.p, t_note, w_p, w_note))
    return rows


def cmd_stats(cfg: RunConfig, files: Sequence[str], names: Optional[str]) -> str:
    if len(files) < 2:
        raise ConfigError("stats needs at least two replica files")
    paths = [Path(f) for f in files]
    for p in paths:
        if not p.exists():
            raise MissingFileError(f"replica file not found: {p}")
    labels = names.split(",") if names else [f"{p.parent.name}/{p.stem}" for p in paths]
    if len(labels) != len(paths) or len(set(labels)) != len(labels):
        labels = [f"r{i}" for i in range(len(paths))] if not names else labels
    if len(labels) != len(paths):
        raise ConfigError("--names must give one label per replica file")
    tables = [read_replicas(p) for p in paths]
    rows = []
    for i, j in itertools.combinations(range(len(paths)), 2):
        rows += compare_replicas(labels[i], tables[i], labels[j], tables[j])
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "stats.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(r[3]), repr(r[4]), repr(float(r[5])), r[6], repr(float(r[7])), r[8]])
    return f"stats: {len(rows)} comparisons written to {out / 'stats.csv'}"


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(cfg: RunConfig) -> str:
    out = cfg.output_dir
    parts = ["# Run report\n"]
    hist_path = out / "loss_history.csv"
    if hist_path.exists():
        hist = read_history(hist_path)
        write_loss_svg(out / "loss.svg", hist)
        cols = ("l_oct", "l_slo", "l_layers", "total")
        parts.append("## Pretraining\n")
        parts.append(md_table(("epoch",) + cols, [[str(int(r["epoch"]))] + [r[c] for c in cols]
                                                  for r in (hist[0], hist[-1])]))
        parts.append("\n![loss curves](loss.svg)\n")
    replica_files = sorted(out.rglob("replicas.csv"))
    if replica_files:
        parts.append("## Replicas (mean ± std over seeds)\n")
        rows = []
        for p in replica_files:
            for metric, vals in read_replicas(p).items():
                sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                rows.append((str(p.parent.relative_to(out)) or ".", metric, mean_std(float(np.mean(vals)), sd),
                             str(len(vals))))
        parts.append(md_table(("run", "metric", "value", "n"), rows))
    if (out / "stats.csv").exists():
        parts.append("\n## Significance tests\n")
        rows = [(r["metric"], r["a"], r["b"], float(r["t_p"]), float(r["wilcoxon_p"]),
                 "; ".join(x for x in (r["t_note"], r["wilcoxon_note"]) if x)) for r in _read_csv(out / "stats.csv")]
        parts.append(md_table(("metric", "a", "b", "t-test p (a > b)", "Wilcoxon p", "note"), rows))
    if (out / "metrics.csv").exists():
        parts.append("\n## Segmentation (patient level)\n")
        agg: dict[str, dict[str, float]] = {}
        for r in _read_csv(out / "metrics.csv"):
            if r["level"] == "aggregate" and r["class"] in ("mean", "std", "n"):
                agg.setdefault(r["metric"], {})[r["class"]] = float(r["value"])
        rows = [(m, mean_std(v["mean"], v["std"]), str(int(v["n"]))) for m, v in agg.items()]
        parts.append(md_table(("metric", "value", "patients"), rows))
    ckpt_path = Path(cfg.run.checkpoint) if cfg.run.checkpoint else out / "pretrain_final.ckpt"
    if ckpt_path.exists() and (cfg.data_root / "manifest.csv").exists():
        ckpt = Checkpoint.load(ckpt_path)
        if ckpt.manifest.get("mode") == "pretrain":
            model = load_pretrained(ckpt)
            samples, rows_ = _dataset(cfg)
            chosen = select_split(samples, rows_, cfg.data.split)[: cfg.run.report_samples]
            if chosen:
                parts.append("\n## Reconstructions\n")
                parts.append("Rows: " + ", ".join(m.value for m in model.cfg.active)
                             + ". Columns: masked input and reconstruction at 0%, 50% and 100% masking "
                             "of that row's modality (others fully visible), then the original.\n")
                for s in chosen:
                    save_recon_grid(out / "reconstructions" / f"{s.sample_id}.png", model, s, seed=cfg.run.seed)
                    parts.append(f"\n![{s.sample_id}](reconstructions/{s.sample_id}.png)\n")
    if len(parts) == 1:
        raise MissingFileError(f"nothing to report in {out}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text("\n".join(parts))
    return f"report written to {out / 'report.md'}"


# ---------------------------------------------------------------------------


def run(argv: Optional[Sequence[str]] = None) -> str:
    args = build_parser().parse_args(argv)
    cfg = runconfig.load(args.config, _overrides(args.set), args.out)
    torch.set_num_threads(cfg.run.threads)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / f"{args.command.replace('-', '_')}_config.txt")
    if args.command == "stats":
        msg = cmd_stats(cfg, args.replicas, args.names)
    else:
        msg = {"synth": cmd_synth, "pretrain": cmd_pretrain, "probe": cmd_probe,
               "segment-tune": cmd_segment_tune, "evaluate": cmd_evaluate, "report": cmd_report}[args.command](cfg)
    _sidecar(cfg, args.command, msg)
    return msg


def diagnostic(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, RetmaeError):
        code, module = exc.code, exc.module
    elif isinstance(exc, (FileNotFoundError, PermissionError)):
        code, module = 3, "io"
    else:
        code, module = 1, "internal"
    message = json.dumps(f"{type(exc).__name__}: {exc}")
    return code, f"error code={code} module={module} message={message}"


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        print(run(argv))
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes one diagnostic line
        code, line = diagnostic(exc)
        print(line, file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
