"""Command-line entry point.

Exit codes:
    0  success
    1  unexpected error
    2  bad command line
    3  missing input file
    4  malformed or out-of-range config
    5  incompatible or corrupt checkpoint
    6  invalid data (shapes, rotations, labels)
    7  filtering dropped every record
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import read_checkpoint, write_checkpoint
from .config import RunConfig, parse_config
from .dataset import read_dataset, record_from_dict, record_to_dict, write_dataset, write_verdicts
from .diffusion import build_schedule
from .errors import CheckpointError, ConfigError, FilterError, PedGenError
from .labels import LabelRecord, anomaly_scores, calibrate_threshold, filter_iterate
from .metrics import evaluate, flat_ground
from .model import GenerationContext
from .motion import Motion, decode_model_space
from .pipeline import stitch_long_horizon
from .rng import Stream
from .skeleton import PARENTS, skeleton_from_shape
from .synth import generate_dataset
from .training import train, write_loss_curve

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_DATA, EXIT_FILTER = range(8)
CONFIG_FILE = "config.txt"


class MissingInput(PedGenError):
    pass


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"no such file: {p}")
    return p


def _outdir(args, cfg: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(cfg.to_text())
    return out


def _write_jsonl(path: Path, rows) -> None:
    path.write_text("".join(json.dumps(r, separators=(",", ":")) + "\n" for r in rows))


def cmd_synth(args, cfg: RunConfig) -> None:
    out = _outdir(args, cfg)
    ds = generate_dataset(args.scenes, args.records, Stream(cfg.seed).split("synth"), cfg.frames)
    write_dataset(out / "dataset.jsonl", ds.records)


def _train_records(records: list[LabelRecord], cfg: RunConfig) -> list[LabelRecord]:
    return [r for r in records if int(r.mask.sum()) >= cfg.min_labelled_frames]


def cmd_train(args, cfg: RunConfig) -> None:
    records = _train_records(read_dataset(_need(args.data)), cfg)
    if not records:
        raise ValueError("no record has enough labelled frames")
    cfg = replace(cfg, frames=records[0].motion.n_frames)
    out = _outdir(args, cfg)
    init = read_checkpoint(_need(args.init))[0] if args.init else None
    gen, history = train(records, cfg.denoiser(), cfg.training(), build_schedule(cfg.k_steps),
                         Stream(cfg.seed).split("train"), init)
    write_checkpoint(out / "model.pgck", gen, {"config": cfg.to_text()})
    write_loss_curve(out / "loss.csv", history)


def cmd_filter(args, cfg: RunConfig) -> None:
    records = _train_records(read_dataset(_need(args.data)), cfg)
    clean = read_dataset(_need(args.clean)) if args.clean else None
    out = _outdir(args, cfg)
    sched = build_schedule(cfg.k_steps)
    policy = cfg.filter_policy()
    stream = Stream(cfg.seed).split("filter")
    state: dict = {}

    def train_fn(kept, it):
        tc = cfg.training()
        if it > 1 and cfg.filter_finetune_steps:
            tc = replace(tc, max_steps=cfg.filter_finetune_steps)
        gen, history = train(kept, cfg.denoiser(factors=False), tc, sched, stream.split("train", it),
                             state.get("gen"))
        write_loss_curve(out / f"loss_iter{it}.csv", history)
        state["gen"] = gen
        return gen

    threshold_fn = None
    if clean is not None:
        def threshold_fn(gen, it, kept, scores):
            if "threshold" not in state:
                scores = anomaly_scores(clean, gen, policy, stream.split("calibration"))
                state["threshold"] = calibrate_threshold(scores, cfg.filter_quantile)
            return state["threshold"]

    kept, dropped = filter_iterate(records, policy, train_fn, stream.split("score"), threshold_fn)
    write_verdicts(out / "verdicts.jsonl", [r for d in dropped for r in d] + kept)
    write_dataset(out / "filtered.jsonl", kept)


def _contexts(records, use_goal: bool) -> list[GenerationContext]:
    return [r.context if use_goal else replace(r.context, goal=None) for r in records]


def _sample_rows(records, motions, per_record: int):
    rows = []
    for i, m in enumerate(motions):
        src = records[i // per_record]
        rec = LabelRecord(f"{src.id}-{i % per_record}", m, src.context, src.ground_height)
        d = record_to_dict(rec, None)
        d["source_id"], d["sample_index"] = src.id, i % per_record
        rows.append(d)
    return rows


def cmd_sample(args, cfg: RunConfig) -> None:
    gen, _ = read_checkpoint(_need(args.checkpoint))
    records = read_dataset(_need(args.data))
    out = _outdir(args, cfg)
    use_goal = args.goal if args.goal is not None else gen.model.cfg.use_goal
    S = cfg.n_samples
    ctxs = [c for c in _contexts(records, use_goal) for _ in range(S)]
    mms = gen.sample(ctxs, cfg.sampling(), Stream(cfg.seed).split("sample"))
    motions = [decode_model_space(m, c.start) for m, c in zip(mms, ctxs)]
    _write_jsonl(out / "samples.jsonl", _sample_rows(records, motions, S))


def cmd_stitch(args, cfg: RunConfig) -> None:
    gen, _ = read_checkpoint(_need(args.checkpoint))
    records = read_dataset(_need(args.data))
    out = _outdir(args, cfg)
    motions = []
    for rec in records:
        base = replace(rec.context, goal=None)
        # later intervals reuse the first interval's scene grid
        ctx_fn = (lambda i, start, base=base: base if start is None else
                  replace(base, start=np.asarray(start, dtype=np.float64)))
        motions.append(stitch_long_horizon(gen, ctx_fn, args.intervals, cfg.stitch_overlap, cfg.sampling(),
                                           Stream(cfg.seed).split("stitch", rec.id), cfg.stitch_renoise))
    _write_jsonl(out / "stitched.jsonl", _sample_rows(records, motions, 1))


def _load_samples(path: Path):
    groups: dict[str, list[Motion]] = {}
    for line in path.read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            rec = record_from_dict(d, load_voxel=False)
            groups.setdefault(str(d.get("source_id", d["id"])), []).append(rec.motion)
    return groups


def cmd_eval(args, cfg: RunConfig) -> None:
    gts = {r.id: r for r in read_dataset(_need(args.data))}
    groups = _load_samples(_need(args.samples))
    out = _outdir(args, cfg)
    missing = sorted(set(groups) - set(gts))
    if missing:
        raise ValueError(f"predictions for unknown record(s): {', '.join(missing[:5])}")
    ids = sorted(groups)
    recs = [gts[i] for i in ids]
    preds = [groups[i] for i in ids]
    report = evaluate([r.motion for r in recs], preds, [r.context.voxel for r in recs],
                      [flat_ground(r.ground_height) for r in recs],
                      [skeleton_from_shape(r.context.beta) for r in recs])
    goal_err = [float(np.linalg.norm(m.trans[-1] - r.context.goal))
                for r, ps in zip(recs, preds) if r.context.goal is not None for m in ps]
    doc = json.loads(report.to_json())
    doc["goal_endpoint_error_max"] = max(goal_err) if goal_err else None
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "metrics.txt").write_text(report.to_table())


def cmd_export(args, cfg: RunConfig) -> None:
    src = _need(args.samples)
    out = _outdir(args, cfg)
    for line in src.read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        rec = record_from_dict(d, load_voxel=False)
        joints = rec.motion.joints(skeleton_from_shape(rec.context.beta))
        lines = [f"# {len(joints)} frames of {joints.shape[1]} joints"]
        for t, frame in enumerate(joints):
            base = t * len(frame)
            lines.append(f"o frame_{t:04d}")
            lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in frame]
            lines += [f"l {base + p + 1} {base + j + 1}" for j, p in enumerate(PARENTS) if p >= 0]
        (out / f"{d['id']}.obj").write_text("\n".join(lines) + "\n")


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "filter": cmd_filter, "sample": cmd_sample,
    "stitch": cmd_stitch, "eval": cmd_eval, "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    for f in fields(RunConfig):
        common.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, default=None,
                            metavar="VALUE", help=argparse.SUPPRESS)
    common.add_argument("--out", required=True, help="output directory")

    parser = argparse.ArgumentParser(prog="pedgen", description="Context-aware pedestrian motion generation")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--records", type=int, default=2000)
    p = sub.add_parser("train", parents=[common], help="train a denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="checkpoint to fine-tune")
    p = sub.add_parser("filter", parents=[common], help="iterative anomaly filtering")
    p.add_argument("--data", required=True)
    p.add_argument("--clean", help="clean records for threshold calibration")
    p = sub.add_parser("sample", parents=[common], help="generate motions for dataset contexts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--goal", dest="goal", action="store_true", default=None)
    g.add_argument("--no-goal", dest="goal", action="store_false")
    p = sub.add_parser("stitch", parents=[common], help="long-horizon generation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--intervals", type=int, default=3)
    p = sub.add_parser("eval", parents=[common], help="score predictions against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--samples", required=True)
    p = sub.add_parser("export", parents=[common], help="write joint positions as OBJ files")
    p.add_argument("--samples", required=True)
    return parser


def resolve_config(args) -> RunConfig:
    text = _need(args.config).read_text(encoding="utf-8") if args.config else ""
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    for f in fields(RunConfig):
        v = getattr(args, "cfg_" + f.name)
        if v is not None:
            overrides[f.name] = v
    return parse_config(text, overrides)


def main(argv=None) -> int:
    torch.set_num_threads(max(1, int(os.environ.get("PEDGEN_THREADS", "1"))))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except MissingInput as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FilterError as e:
        print(f"filter error: {e}", file=sys.stderr)
        return EXIT_FILTER
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
