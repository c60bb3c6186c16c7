"""Command-line experiment runner.

Subcommands: ``gen-data`` (write the synthetic world and every dataset
split), ``train`` (run training stages with checkpoints and metrics),
``eval`` (score a checkpoint on the CS / Mono / Both validation splits),
``grad-check`` (finite-difference audit of every loss), ``ablate`` (variant
comparison table over seeds), and ``routing-report`` (routing and
separation statistics for a checkpoint).

Exit codes: 0 success, 1 assertion/tolerance failure (a failed gradient
check or a failed ablation run), 2 usage or configuration errors (bad
flags, bad config files, missing inputs, checkpoint/config mismatches).
All randomness flows from the seeds named in the config, so every command
is deterministic; flags override config-file values and the effective
merged config is written next to each command's outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import CANONICAL_VARIANTS, ablation_report, separation_score
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_from_dict, config_hash, config_to_dict
from .dataio import (
    append_metrics,
    load_dataset,
    save_dataset,
    save_world,
    write_json,
)
from .gradcheck import grad_check_report
from .projector import MoeProjector, mlp_forward, moe_forward
from .stages import (
    DatasetBundle,
    TrainState,
    evaluate_dataset,
    generate_datasets,
    routing_probe,
    run_pipeline,
)

__all__ = ["main"]

_PROBE_UTTERANCES = 16  # per split, for the fixed routing probe


class _UsageError(Exception):
    """Bad flags, bad config, missing inputs — exit code 2."""


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise _UsageError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise _UsageError(f"config file {path} is not valid JSON: {err}")
        config = config_from_dict(data)
    else:
        config = ExperimentConfig()
    overrides = {}
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if overrides:
        config = replace(config, **overrides)
    return config


def _max_workers() -> int:
    raw = os.environ.get("CSMOE_THREADS", "1")
    try:
        workers = int(raw)
    except ValueError:
        raise _UsageError(f"CSMOE_THREADS must be an integer, got {raw!r}")
    if workers < 1:
        raise _UsageError(f"CSMOE_THREADS must be >= 1, got {workers}")
    return workers


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_effective_config(out: Path, config: ExperimentConfig) -> None:
    write_json(out / "config.json", config_to_dict(config))


def _split_files(m: int) -> list[tuple[str, str, int, str]]:
    """(filename, task, language, split) for every dataset file."""
    files = []
    for g in range(m):
        files.append((f"asr_lang{g}.train.jsonl", "asr", g, "train"))
        files.append((f"asr_lang{g}.val.jsonl", "asr", g, "val"))
        files.append((f"st_lang{g}.train.jsonl", "st", g, "train"))
        files.append((f"st_lang{g}.val.jsonl", "st", g, "val"))
    files.append(("cs.train.jsonl", "cs", -1, "train"))
    files.append(("cs.val.jsonl", "cs", -1, "val"))
    return files


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    if args.seed is not None:
        config = replace(config, data_seed=args.seed)
    out = _out_dir(config)
    world, bundle = generate_datasets(config, max_workers=_max_workers())
    _write_effective_config(out, config)
    save_world(out / "world.json", world)
    m, n_val, n_train = config.num_languages, config.val_utterances, config.train_utterances
    blocks = {
        ("asr", "train"): lambda g: bundle.asr_train[g],
        ("asr", "val"): lambda g: bundle.asr_val[g * n_val:(g + 1) * n_val],
        ("st", "train"): lambda g: bundle.st_train[g * n_train:(g + 1) * n_train],
        ("st", "val"): lambda g: bundle.st_val[g * n_val:(g + 1) * n_val],
        ("cs", "train"): lambda g: bundle.cs_train,
        ("cs", "val"): lambda g: bundle.cs_val,
    }
    for filename, task, language, split in _split_files(m):
        data = blocks[(task, split)](language)
        save_dataset(out / filename, data)
        print(f"wrote {out / filename} ({len(data)} utterances)")
    print(f"wrote {out / 'world.json'}")
    return 0


def _load_bundle(out: Path, config: ExperimentConfig) -> DatasetBundle:
    m = config.num_languages
    missing = [name for name, *_ in _split_files(m) if not (out / name).exists()]
    if missing:
        raise _UsageError(
            f"datasets not found under {out} (missing {missing[0]} and "
            f"{len(missing) - 1} more); run gen-data first"
        )
    asr_train = tuple(load_dataset(out / f"asr_lang{g}.train.jsonl") for g in range(m))
    asr_val = tuple(u for g in range(m)
                    for u in load_dataset(out / f"asr_lang{g}.val.jsonl"))
    st_train = tuple(u for g in range(m)
                     for u in load_dataset(out / f"st_lang{g}.train.jsonl"))
    st_val = tuple(u for g in range(m)
                   for u in load_dataset(out / f"st_lang{g}.val.jsonl"))
    cs_train = load_dataset(out / "cs.train.jsonl")
    cs_val = load_dataset(out / "cs.val.jsonl")
    return DatasetBundle(asr_train, st_train, cs_train, asr_val, st_val, cs_val)


def _parse_stages(text: str) -> tuple:
    stages = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, _, hi = part.partition("-")
            try:
                stages.extend(range(int(lo), int(hi) + 1))
            except ValueError:
                raise _UsageError(f"bad stage range {part!r}")
        else:
            try:
                stages.append(int(part))
            except ValueError:
                raise _UsageError(f"bad stage number {part!r}")
    return tuple(stages)


def cmd_train(args) -> int:
    config = _load_config(args)
    if args.seed is not None:
        config = replace(config, train_seed=args.seed)
    out = _out_dir(config)
    bundle = _load_bundle(out, config)

    initial = None
    if args.resume:
        initial = load_checkpoint(args.resume, config)
        resumed_stage = (initial.stage if isinstance(initial, TrainState)
                         else 1)
        default_stages = tuple(range(resumed_stage + 1, 5))
    else:
        default_stages = (1, 2, 3, 4)
    stages = _parse_stages(args.stages) if args.stages else default_stages

    probe_set = tuple(bundle.st_val[:_PROBE_UTTERANCES]) + tuple(
        bundle.cs_val[:_PROBE_UTTERANCES]
    )

    def probe(model, stage):
        if not isinstance(model, TrainState):
            return {}
        row = dict(routing_probe(model, probe_set))
        row["val_mono_ce"] = evaluate_dataset(model, bundle.st_val)["ce"]
        row["val_cs_ce"] = evaluate_dataset(model, bundle.cs_val)["ce"]
        return row

    def checkpoint_cb(stage, model):
        save_checkpoint(out / "checkpoints" / f"stage{stage}", config, stage, model)

    result = run_pipeline(config, bundle, stages=stages, initial=initial,
                          probe=probe, checkpoint_cb=checkpoint_cb)
    append_metrics(out / "metrics.jsonl", result.metrics)
    _write_effective_config(out, config)
    print(f"ran stages {','.join(str(s) for s in stages)} "
          f"(variant {config.variant}); metrics in {out / 'metrics.jsonl'}")
    return 0


def _combined_report(parts: list) -> dict:
    ce_sum = sum(p["ce_sum"] for p in parts)
    tokens = sum(p["tokens"] for p in parts)
    correct = sum(p["correct"] for p in parts)
    return {
        "ce": ce_sum / tokens,
        "accuracy": correct / tokens,
        "ce_sum": ce_sum,
        "tokens": tokens,
        "correct": correct,
    }


def _load_state_checkpoint(path, config) -> TrainState:
    state = load_checkpoint(path, config)
    if not isinstance(state, TrainState):
        raise _UsageError(
            f"checkpoint {path} holds stage-1 per-language projectors; this "
            f"command needs a stage >= 2 checkpoint with a decoder"
        )
    return state


def cmd_eval(args) -> int:
    config = _load_config(args)
    state = _load_state_checkpoint(args.checkpoint, config)
    _, bundle = generate_datasets(config, max_workers=_max_workers())
    cs = evaluate_dataset(state, bundle.cs_val)
    mono = evaluate_dataset(state, bundle.st_val)
    both = _combined_report([cs, mono])
    report = {
        "checkpoint_stage": state.stage,
        "config_hash": config_hash(config),
        "cs": cs,
        "mono": mono,
        "both": both,
    }
    out = _out_dir(config)
    write_json(out / "report.json", report)
    for name in ("cs", "mono", "both"):
        entry = report[name]
        print(f"{name}: ce={entry['ce']:.6f} accuracy={entry['accuracy']:.4f} "
              f"({entry['tokens']} tokens)")
    print(f"wrote {out / 'report.json'}")
    return 0


def cmd_grad_check(args) -> int:
    report = grad_check_report(seed=args.seed or 0, instances=args.instances)
    for name, entry in report["losses"].items():
        status = "pass" if entry["pass"] else "FAIL"
        print(f"{name:14s} max_rel_err={entry['max_rel_err']:.3e} {status}")
    print(f"{'overall':14s} {'pass' if report['pass'] else 'FAIL'} "
          f"({report['instances']} instances, "
          f"{report['skipped_candidates']} screened out)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "report.json", report)
        print(f"wrote {out / 'report.json'}")
    return 0 if report["pass"] else 1


def _parse_csv(text: str) -> list:
    return [part.strip() for part in text.split(",") if part.strip()]


def cmd_ablate(args) -> int:
    config = _load_config(args)
    variants = _parse_csv(args.variants) if args.variants else list(CANONICAL_VARIANTS)
    seeds = ([int(s) for s in _parse_csv(args.seeds)] if args.seeds else [0, 1, 2])
    if not variants or not seeds:
        raise _UsageError("ablate needs at least one variant and one seed")
    results = {v: [] for v in variants}
    probes = {v: [] for v in variants}
    failures = []
    for seed in seeds:
        cfg_seed = replace(config, world_seed=seed, data_seed=seed, train_seed=seed)
        _, bundle = generate_datasets(cfg_seed, max_workers=_max_workers())
        probe_set = tuple(bundle.st_val[:_PROBE_UTTERANCES]) + tuple(
            bundle.cs_val[:_PROBE_UTTERANCES]
        )
        for variant in variants:
            cfg_run = replace(cfg_seed, variant=variant)
            try:
                result = run_pipeline(cfg_run, bundle)
                cs = evaluate_dataset(result.state, bundle.cs_val)
                mono = evaluate_dataset(result.state, bundle.st_val)
                results[variant].append({
                    "cs_ce": cs["ce"],
                    "cs_accuracy": cs["accuracy"],
                    "mono_ce": mono["ce"],
                    "mono_accuracy": mono["accuracy"],
                })
                probes[variant].append(
                    {"seed": seed, **routing_probe(result.state, probe_set)}
                )
                print(f"variant {variant} seed {seed}: "
                      f"cs_ce={cs['ce']:.4f} mono_ce={mono['ce']:.4f}")
            except Exception as err:  # report, never silently drop
                failures.append({"variant": variant, "seed": seed, "error": str(err)})
                print(f"variant {variant} seed {seed}: FAILED ({err})",
                      file=sys.stderr)
    try:
        report = ablation_report(results)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    out = _out_dir(config)
    write_json(out / "report.json", {
        "rows": [
            {"variant": row.variant, "num_runs": row.num_runs, "metrics": row.metrics}
            for row in report.rows
        ],
        "notices": list(report.notices),
        "failures": failures,
        "routing": probes,
        "seeds": seeds,
    })
    _write_report_csv(out / "report.csv", report)
    print(report.as_table())
    print(f"wrote {out / 'report.json'} and {out / 'report.csv'}")
    return 1 if failures else 0


def _write_report_csv(path, report) -> None:
    metric_names = sorted({name for row in report.rows for name in row.metrics})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["variant", "runs"]
        for name in metric_names:
            header += [f"{name}_median", f"{name}_min", f"{name}_max"]
        writer.writerow(header)
        for row in report.rows:
            cells = [row.variant, row.num_runs]
            for name in metric_names:
                stats = row.metrics.get(name)
                if stats is None:
                    cells += ["", "", ""]
                else:
                    cells += [stats["median"], stats["min"], stats["max"]]
            writer.writerow(cells)


def cmd_routing_report(args) -> int:
    config = _load_config(args)
    state = _load_state_checkpoint(args.checkpoint, config)
    _, bundle = generate_datasets(config, max_workers=_max_workers())
    probe_set = tuple(bundle.st_val) + tuple(bundle.cs_val)
    feats = np.concatenate([u.features for u in probe_set], axis=0)
    labels = np.concatenate([u.token_languages() for u in probe_set])
    if isinstance(state.projector, MoeProjector):
        h = moe_forward(state.projector, Tensor(feats))[0].data
        routing = routing_probe(state, probe_set)
    else:
        h = mlp_forward(state.projector, Tensor(feats)).data
        routing = None
    sep_in = separation_score(feats, labels)
    sep_out = separation_score(h, labels)
    report = {
        "checkpoint_stage": state.stage,
        "routing": routing,
        "input": {
            "silhouette": sep_in.silhouette,
            "pair_ratios": sep_in.pair_ratios.tolist(),
        },
        "projected": {
            "silhouette": sep_out.silhouette,
            "pair_ratios": sep_out.pair_ratios.tolist(),
        },
    }
    out = _out_dir(config)
    write_json(out / "report.json", report)
    print(f"input silhouette {sep_in.silhouette:.4f} -> "
          f"projected {sep_out.silhouette:.4f}")
    if routing:
        frames = ", ".join(f"{x:.4f}" for x in routing["top1_in_group"])
        print(f"top-1 in-group routing per language: {frames}")
    print(f"wrote {out / 'report.json'}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csmoe",
        description="Desk-scale grouped mixture-of-experts training laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_help):
        p.add_argument("--config", help="JSON config file (defaults apply otherwise)")
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--seed", type=int, help=seed_help)

    p = sub.add_parser("gen-data", help="write the world and all dataset splits")
    common(p, "unused")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run training stages on generated datasets")
    common(p, "override the training seed")
    p.add_argument("--variant", help="model variant tag (overrides config)")
    p.add_argument("--stages", help="stage subset, e.g. '1,2' or '3-4' (default: all remaining)")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on CS / Mono / Both splits")
    common(p, "unused")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference audit of every loss")
    common(p, "harness seed (default 0)")
    p.add_argument("--instances", type=int, default=20,
                   help="random instances per loss (default 20)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="run the pipeline per variant and seed")
    common(p, "unused (see --seeds)")
    p.add_argument("--variants", help="comma-separated variants (default: all four)")
    p.add_argument("--seeds", help="comma-separated seeds (default: 0,1,2)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("routing-report", help="routing and separation statistics")
    common(p, "unused")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_routing_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
