"""Command-line entry point: gen-data, train, eval, ensemble, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import config as C
from .backbone import BackboneConfig
from .data import (CLASS_NAMES, NUM_CLASSES, ParseError, SpecError, SyntheticSpec, ValidationError,
                   emit_results_csv, gen_synthetic, load_dataset, parse_ava_csv, save_dataset, write_gt_csv)
from .evaluate import (AlignmentError, ensemble_average, frame_map_50, gt_from_clips, gt_from_rows,
                       infer_results, results_from_rows)
from .heads import HeadConfig, HeadConfigError
from .memory import MemoryBank, extract_and_store_all
from .model import ActionDetector, ModelConfig
from .tensor import load_arrays
from .train import (SGD, StageSpec, TrainConfig, TrainConfigError, load_training_state, run_pipeline,
                    save_training_state, strategy_stages)

log = logging.getLogger("strel")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class DataError(RuntimeError):
    pass


def _setup_logging() -> None:
    level = os.environ.get("STREL_LOG", "WARNING").strip().upper()
    if level.isdigit():
        num = int(level)
    else:
        num = logging.getLevelName(level)
        if not isinstance(num, int):
            num = logging.WARNING
    logging.basicConfig(level=num, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _prepare_out(out: Path, force: bool, keep_if: tuple[str, ...] = ()) -> None:
    """Refuse to write into a non-empty directory unless forced; forced runs clear only our own outputs."""
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DataError(f"output directory {out} is not empty (use --force to overwrite)")
        for child in out.iterdir():
            if child.name in keep_if:
                continue
            if child.is_dir():
                shutil.rmtree(child)
            else:
                child.unlink()
    out.mkdir(parents=True, exist_ok=True)


def _emit(lines, path: Path | None = None) -> None:
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if path is not None:
        path.write_text(text)


def _resolve(args, command: str) -> dict:
    cfg = C.load_config(args.config, C.SECTIONS[command])
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    return cfg


# gen-data ---------------------------------------------------------------------

def _specs(d: dict, seed: int, split: str) -> list[SyntheticSpec]:
    base = SyntheticSpec(num_videos=d["num_videos"] if split == "train" else d["val_videos"],
                         clips_per_video=d["clips_per_video"], min_persons=d["min_persons"],
                         max_persons=d["max_persons"], T=d["T"], H=d["H"], W=d["W"], Q=d["Q"], seed=seed,
                         split=split, persist_prob=d["persist_prob"], twin_scope=d["twin_scope"],
                         bright_prob=d["bright_prob"] if split == "train" else d["val_bright_prob"],
                         grid=d["grid"], box_scale=d["box_scale"], clutter=d["clutter"])
    specs = [base] if base.num_videos > 0 else []
    if d["k_videos"] > 0:
        specs.append(replace(base, num_videos=d["k_videos"], domain="K", annotate="center"))
    return specs


def dataset_summary(clips, split: str) -> list[str]:
    labelled = [c for c in clips if c.labels is not None]
    counts = np.sum([c.labels.sum(axis=0) for c in labelled], axis=0) if labelled else np.zeros(NUM_CLASSES)
    lines = [f"split={split}", f"clips={len(clips)}", f"annotated_clips={len(labelled)}",
             f"persons={sum(len(c.boxes) for c in clips)}",
             f"annotated_persons={sum(len(c.boxes) for c in labelled)}"]
    lines += [f"positives[{k}]={int(n)}" for k, n in enumerate(counts)]
    return lines


def cmd_gen_data(args) -> int:
    cfg = _resolve(args, "gen-data")
    out = Path(args.out)
    specs = {split: _specs(cfg["data"], cfg["run"]["seed"], split) for split in ("train", "val")}
    for ss in specs.values():
        for s in ss:
            s.validate()
    _prepare_out(out, args.force)
    lines = []
    for split, ss in specs.items():
        clips = [c for s in ss for c in gen_synthetic(s)]
        save_dataset(clips, out / split)
        write_gt_csv(clips, out / split / "gt.csv")
        lines += dataset_summary(clips, split)
    C.write_resolved(cfg, out)
    _emit(lines, out / "summary.txt")
    return EXIT_OK


# train -------------------------------------------------------------------------

def model_config(m: dict) -> ModelConfig:
    head = HeadConfig(m["head_type"], m["agg"], NUM_CLASSES, m["use_memory"])
    head.validate()
    return ModelConfig(BackboneConfig(channels=tuple(m["channels"])), head, m["roi_size"], m["sampling_ratio"])


def build_plan(cfg: dict, domains: tuple[str, ...]) -> list[tuple[StageSpec, TrainConfig]]:
    t, m, seed = cfg["train"], cfg["model"], cfg["run"]["seed"]
    common = dict(batch_size=t["batch_size"], weight_decay=t["weight_decay"], momentum=t["momentum"],
                  lr_gamma=t["lr_gamma"], seed=seed, box_jitter=t["box_jitter"], color_jitter=t["color_jitter"])
    cfg1 = TrainConfig.desk(t["iters"], base_lr=t["base_lr"], **common)
    if t["strategy"] == "none":
        if m["use_memory"]:
            stage = StageSpec("train", domains, read_bank=True, write_domains=domains)
        else:
            stage = StageSpec("train", domains)
        plan = [(stage, cfg1)]
    else:
        if not m["use_memory"]:
            raise C.ConfigError(f"strategy {t['strategy']} needs [model] use_memory = true")
        s1, s2 = strategy_stages(t["strategy"])
        plan = [(s1, cfg1), (s2, TrainConfig.desk(t["stage2_iters"], base_lr=t["stage2_lr"], **common))]
    if t["decoupled"] != "off":
        if t["decoupled"] == "before_stage2" and len(plan) < 2:
            raise C.ConfigError("decoupled = before_stage2 needs a two-stage memory strategy")
        dec = StageSpec("decoupled", domains, freeze_scope="all_but_classifier", sampler="class_balanced",
                        read_bank=m["use_memory"])
        dcfg = TrainConfig.desk(t["decoupled_iters"], base_lr=t["decoupled_lr"], **common)
        plan.insert(1 if t["decoupled"] == "before_stage2" else len(plan), (dec, dcfg))
    for spec, tc in plan:
        spec.validate()
        tc.validate()
    return plan


def _read_metrics(path: Path) -> list[tuple[str, int, float, float]]:
    rows = []
    if path.exists():
        for line in path.read_text().splitlines()[1:]:
            stage, it, lr, loss = line.split("\t")
            rows.append((stage, int(it), float(lr), float(loss)))
    return rows


def _write_metrics(path: Path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("stage\titer\tlr\tloss\n")
        for stage, it, lr, loss in rows:
            fh.write(f"{stage}\t{it}\t{lr:.8g}\t{loss:.8g}\n")


def cmd_train(args) -> int:
    cfg = _resolve(args, "train")
    data_root = Path(cfg["paths"]["data"] or "")
    if not cfg["paths"]["data"]:
        raise C.ConfigError("[paths] data must point at a gen-data output directory")
    out = Path(args.out or cfg["paths"]["run"] or "")
    if not str(out) or str(out) == ".":
        raise C.ConfigError("no output directory: pass --out or set [paths] run")
    mcfg = model_config(cfg["model"])
    try:
        clips = load_dataset(data_root / "train")
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    domains = tuple(sorted({c.domain for c in clips if c.annotated}))
    plan = build_plan(cfg, domains)

    model = ActionDetector(mcfg, seed=cfg["run"]["seed"])
    bank = MemoryBank(cfg["model"]["window"]) if mcfg.head.use_memory else None
    start_stage = start_iter = 0
    optimizer = None
    metrics = []
    if args.resume:
        out.mkdir(parents=True, exist_ok=True)
        state = Path(args.resume)
        extra = load_arrays(state)
        start_stage = int(extra.get("meta/stage", np.array(0.0)))
        _, stage_cfg = plan[start_stage]
        optimizer, start_iter = load_training_state(state, model, stage_cfg)
        if bank is not None and (state.parent / "state_bank").exists():
            bank = MemoryBank.load(state.parent / "state_bank", cfg["model"]["window"])
        names = [s.name for s, _ in plan]
        metrics = [r for r in _read_metrics(out / "metrics.tsv")
                   if (names.index(r[0]), r[1]) < (start_stage, start_iter)]
        log.info("resuming at stage %s iteration %d", names[start_stage], start_iter)
    else:
        _prepare_out(out, args.force)

    meta = {**asdict(mcfg), "window": cfg["model"]["window"]}
    (out / "model.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    C.write_resolved(cfg, out)

    def on_iter(stage, it, lr, loss):
        metrics.append((stage, it, lr, loss))
        if it % 50 == 0:
            log.info("%s it=%d lr=%.5g loss=%.4f", stage, it, lr, loss)

    def on_stage_end(i, spec):
        model.save(out / f"{spec.name}.ckpt")
        _write_metrics(out / "metrics.tsv", metrics)

    def checkpoint(i, it, opt: SGD):
        # the state file goes last so an interrupted write never pairs it with a stale bank
        if bank is not None:
            bank.save(out / "state_bank")
        _write_metrics(out / "metrics.tsv", metrics)
        save_training_state(out / "state.ckpt", model, opt, it, stage=i)

    try:
        run_pipeline(model, clips, plan, bank, start_stage=start_stage, start_iter=start_iter,
                     optimizer=optimizer, on_iter=on_iter, on_stage_end=on_stage_end, checkpoint=checkpoint,
                     checkpoint_every=cfg["train"]["checkpoint_every"])
    except (TrainConfigError, HeadConfigError):
        raise
    except Exception as exc:
        raise RuntimeError(f"training failed in {type(exc).__name__}: {exc}") from exc
    model.save(out / "final.ckpt")
    if bank is not None:
        bank.save(out / "bank")
    _write_metrics(out / "metrics.tsv", metrics)
    last = {}
    for stage, it, lr, loss in metrics:
        last.setdefault(stage, []).append(loss)
    lines = [f"stages={','.join(s.name for s, _ in plan)}"]
    lines += [f"final_loss[{s}]={np.mean(v[-20:]):.6f}" for s, v in last.items()]
    _emit(lines)
    return EXIT_OK


# eval ---------------------------------------------------------------------------

def load_run(run_dir: Path, ckpt: str = "final.ckpt") -> ActionDetector:
    try:
        raw = json.loads((run_dir / "model.json").read_text())
    except FileNotFoundError:
        raise DataError(f"no model.json in {run_dir}") from None
    mcfg = ModelConfig(BackboneConfig(**{**raw["backbone"], "channels": tuple(raw["backbone"]["channels"])}),
                       HeadConfig(**raw["head"]), raw["roi_size"], raw["sampling_ratio"])
    model = ActionDetector(mcfg)
    # the memory window is a bank property; eval rebuilds the bank with the trained window
    model.memory_window = raw.get("window", 4)
    if not (run_dir / ckpt).exists():
        raise DataError(f"no checkpoint {run_dir / ckpt}")
    model.load(run_dir / ckpt)
    return model


def _parallel_infer(model, clips, targets, workers: int, **kw):
    bank = None
    if model.cfg.head.use_memory:
        bank = MemoryBank(getattr(model, "memory_window", 4))
        extract_and_store_all(bank, model, clips)
    if workers <= 1 or len(targets) < 2:
        return infer_results(model, targets, bank=bank, **kw)
    chunks = [list(c) for c in np.array_split(np.arange(len(targets)), workers) if len(c)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(lambda idx: infer_results(model, [targets[i] for i in idx], bank=bank, **kw), chunks)
        return [r for part in parts for r in part]


def cmd_eval(args) -> int:
    cfg = _resolve(args, "eval")
    e = cfg["eval"]
    if args.scales is not None:
        e["scales"] = C._ints(args.scales)
    if args.no_flip:
        e["flip"] = False
    if args.gt_boxes:
        e["gt_boxes"] = True
    if not cfg["paths"]["data"] or not cfg["paths"]["run"]:
        raise C.ConfigError("[paths] data and run are both required for eval")
    out = Path(args.out or Path(cfg["paths"]["run"]) / "eval")
    model = load_run(Path(cfg["paths"]["run"]))
    try:
        clips = load_dataset(Path(cfg["paths"]["data"]) / e["split"])
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    domains = set(e["domains"].split())
    clips = [c for c in clips if c.domain in domains]
    targets = [c for c in clips if c.annotated]
    if not targets:
        raise DataError(f"no annotated clips for domains {sorted(domains)}")
    _prepare_out(out, args.force)
    scales = e["scales"]
    if e["flip"] and not scales:
        scales = (min(targets[0].frames.shape[2:]),)
    preds = _parallel_infer(model, clips, targets, args.workers, gt_boxes=e["gt_boxes"], jitter=e["jitter"],
                            seed=cfg["run"]["seed"], scales=scales or None, flip=e["flip"])
    report = frame_map_50(preds, gt_from_clips(targets), model.cfg.head.num_classes)
    emit_results_csv(preds, out / "results.csv")
    write_gt_csv(targets, out / "gt.csv")
    C.write_resolved(cfg, out)
    _emit(report.lines(CLASS_NAMES), out / "report.txt")
    return EXIT_OK


# ensemble -------------------------------------------------------------------------

def cmd_ensemble(args) -> int:
    cfg = _resolve(args, "ensemble")
    if not args.inputs:
        raise C.ConfigError("ensemble needs at least one results CSV")
    sets = []
    num_classes = NUM_CLASSES
    rows_per = []
    for p in args.inputs:
        rows = parse_ava_csv(p)
        rows_per.append(rows)
        num_classes = max([num_classes] + [r.action_id + 1 for r in rows])
    for rows in rows_per:
        sets.append(results_from_rows(rows, num_classes))
    merged = ensemble_average(sets)
    out = Path(args.out)
    _prepare_out(out, args.force)
    emit_results_csv(merged, out / "results.csv")
    C.write_resolved(cfg, out)
    lines = [f"inputs={len(args.inputs)}", f"detections={len(merged)}"]
    if args.gt:
        gt = gt_from_rows(parse_ava_csv(args.gt), num_classes)
        lines += frame_map_50(merged, gt, num_classes).lines()
    _emit(lines, out / "report.txt")
    return EXIT_OK


# report ---------------------------------------------------------------------------

def _read_report(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        for tok in line.split():
            if "=" in tok:
                k, v = tok.split("=", 1)
                out[k] = v
    return out


def cmd_report(args) -> int:
    from .plots import plot_ap_bars, plot_curves

    cfg = _resolve(args, "report")
    if not args.inputs:
        raise C.ConfigError("report needs at least one run or eval directory")
    out = Path(args.out)
    _prepare_out(out, args.force)
    losses, lrs, aps = {}, {}, {}
    rows = []
    for d in map(Path, args.inputs):
        if not d.is_dir():
            raise DataError(f"{d} is not a directory")
        label = d.name if d.name != "eval" else d.parent.name
        metrics = _read_metrics(d / "metrics.tsv")
        if metrics:
            offset = 0
            for stage in dict.fromkeys(r[0] for r in metrics):
                sel = [r for r in metrics if r[0] == stage]
                x = np.array([r[1] for r in sel]) + offset
                losses[f"{label}/{stage}"] = (x, np.array([r[3] for r in sel]))
                lrs[f"{label}/{stage}"] = (x, np.array([r[2] for r in sel]))
                offset = x[-1] + 1
                rows.append((label, f"final_loss[{stage}]", f"{np.mean([r[3] for r in sel][-20:]):.6f}"))
        rep = d / "report.txt"
        if rep.exists():
            kv = _read_report(rep)
            ap = np.array([float(kv.get(f"ap[{k}]", "nan")) for k in range(NUM_CLASSES)])
            aps[label] = ap
            rows.append((label, "map", kv.get("map", "nan")))
            rows += [(label, f"ap[{k}]", f"{v:.6f}") for k, v in enumerate(ap)]
        if not metrics and not rep.exists():
            raise DataError(f"{d} holds neither metrics.tsv nor report.txt")
    figures = []
    if losses:
        figures.append(plot_curves(losses, out / "loss.png", "BCE loss", smooth=20))
        figures.append(plot_curves(lrs, out / "lr.png", "learning rate"))
    if aps:
        figures.append(plot_ap_bars(aps, CLASS_NAMES, out / "ap.png"))
    with open(out / "summary.tsv", "w") as fh:
        fh.write("source\tkey\tvalue\n")
        for r in rows:
            fh.write("\t".join(r) + "\n")
    C.write_resolved(cfg, out)
    _emit([f"{src}.{k}={v}" for src, k, v in rows] + [f"figure={p.name}" for p in figures])
    return EXIT_OK


# entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="strel", description="Person-relation action detection on synthetic clips.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="sectioned key=value config file")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        return p

    common(sub.add_parser("gen-data", help="write synthetic train/val datasets"))
    tr = common(sub.add_parser("train", help="train per the [train] section"), out_required=False)
    tr.add_argument("--resume", help="state.ckpt written by an earlier run of the same config")
    ev = common(sub.add_parser("eval", help="score a trained run on a dataset split"), out_required=False)
    ev.add_argument("--scales", help="comma-separated test scales (min side)")
    ev.add_argument("--no-flip", action="store_true", help="skip the mirrored test pass")
    ev.add_argument("--gt-boxes", action="store_true", help="use ground-truth boxes instead of detector boxes")
    ev.add_argument("--workers", type=int, default=1, help="inference threads")
    en = common(sub.add_parser("ensemble", help="average several results CSVs"))
    en.add_argument("inputs", nargs="+", help="results CSV files")
    en.add_argument("--gt", help="ground-truth CSV to score the ensemble against")
    rp = common(sub.add_parser("report", help="figures and a summary table from run/eval directories"))
    rp.add_argument("inputs", nargs="+", help="run or eval directories")
    return ap


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ensemble": cmd_ensemble,
            "report": cmd_report}


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (C.ConfigError, SpecError, HeadConfigError, TrainConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParseError, ValidationError, AlignmentError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        log.debug("unhandled error", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
