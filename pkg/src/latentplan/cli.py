"""
Command-line entry point: gen-data, train, generate, eval, verify.

Exit codes: 0 success, 1 contract/config/input error, 2 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import KEYS, ConfigError, RunConfig
from .evaluation import MetricTable, ScfConfig, evaluate, normalized_score, scenario_metrics, write_report
from .inference import decode_output, generate
from .layout import MalformedLayoutError
from .model import Model, ModelConfig
from .seeds import SEED_TEST_SPLIT, SEED_TRAIN_SPLIT
from .toyworld import SCENARIOS, World, detect_events, detokenize, make_split, read_records, record_lines, tokenize, write_records
from .training import train

log = logging.getLogger("latentplan")

EXIT_OK, EXIT_ERROR, EXIT_VERIFY = 0, 1, 2


class CommandError(RuntimeError):
    pass


# ----------------------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.override(
        seed=args.seed,
        schedule=args.schedule,
        epochs=args.epochs,
        top_k=args.top_k,
        data_dir=getattr(args, "data", None),
    )


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError(f"{what} not found: {path}")
    return path


def _dump(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def dataset_checksum(data_dir: Path) -> str:
    """sha256 over the world file and the record lines of both splits (headers excluded)."""
    h = hashlib.sha256()
    h.update(json.dumps(World.load(data_dir / "world.json").to_json(), sort_keys=True).encode())
    for split in ("train", "test"):
        h.update(split.encode())
        for line in record_lines(read_records(data_dir / f"{split}.jsonl")):
            h.update(line.encode() + b"\n")
    return h.hexdigest()


def load_model(path) -> Model:
    """Model from a checkpoint; architecture comes from the JSON sidecar next to it."""
    path = _require(Path(path), "checkpoint")
    side = _require(path.with_suffix(".json"), "checkpoint sidecar")
    cfg = ModelConfig(**json.loads(side.read_text())["model"])
    model = Model(cfg)
    arrays = nx.load_checkpoint(path)
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("adam.")})
    return model


def save_model(path: Path, model: Model, config: RunConfig) -> None:
    nx.save_checkpoint(path, model.state_dict())
    _dump(path.with_suffix(".json"), {"model": model.cfg.to_dict(), "config": config.to_dict()})


def _latest_checkpoint(ckpt_dir: Path) -> Path | None:
    found = sorted(ckpt_dir.glob("epoch*.ckpt"))
    return found[-1] if found else None


# ----------------------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, out: Path) -> dict:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    world = World.build(**cfg.world_kwargs())
    world.save(out / "world.json")
    train_recs = make_split(world, cfg.train_counts(), SEED_TRAIN_SPLIT, "train")
    test_recs = make_split(world, cfg.test_counts(), SEED_TEST_SPLIT, "test")
    header = {"config": cfg.to_dict()}
    write_records(out / "train.jsonl", train_recs, {**header, "split": "train"})
    write_records(out / "test.jsonl", test_recs, {**header, "split": "test"})
    counts = {
        split: {s: sum(r.scenario == s for r in recs) for s in SCENARIOS}
        for split, recs in (("train", train_recs), ("test", test_recs))
    }
    manifest = {"config": cfg.to_dict(), "counts": counts, "checksum": dataset_checksum(out)}
    _dump(out / "manifest.json", manifest)
    for split, c in counts.items():
        print(f"{split}: {sum(c.values())} records " + " ".join(f"{s}={n}" for s, n in c.items()))
    print(f"checksum {manifest['checksum']}")
    return manifest


def _load_data(data_dir: Path, split: str):
    _require(data_dir, "dataset directory")
    world = World.load(_require(data_dir / "world.json", "world file"))
    recs = read_records(_require(data_dir / f"{split}.jsonl", f"{split} split"))
    return world, recs


def cmd_train(cfg: RunConfig, data_dir: Path, out: Path, resume: str | None = None) -> Path:
    world, recs = _load_data(data_dir, "train")
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    resume_from = None
    if resume == "auto":
        resume_from = _latest_checkpoint(ckpt_dir)
    elif resume:
        resume_from = _require(Path(resume), "resume checkpoint")
    _dump(out / "config.json", cfg.to_dict())
    model = Model(cfg.model_config(world.v_text), cfg.seed)
    sched = cfg.curriculum()
    _dump(out / "schedule.json", sched.to_json())
    log_path = out / "train_log.jsonl"
    if resume_from is None and log_path.exists():
        log_path.unlink()
    history = train(model, world, recs, sched, cfg.train_config(), log_path=log_path, ckpt_dir=ckpt_dir,
                    resume_from=resume_from)
    for row in history:
        for key in ("L_latent", "L_audio", "L_total"):
            if not np.isfinite(row[key]):
                raise CommandError(f"epoch {row['epoch']}: {key} is not finite")
    final = out / "model.ckpt"
    save_model(final, model, cfg)
    print(f"trained {len(history)} epoch(s); model written to {final}")
    return final


def _describe_grid(world: World, grid) -> list[str]:
    lines = [f"frames {grid.shape[0]}"]
    for d in detect_events(world, grid):
        lines.append(f"  [{d.start:3d}-{d.end:3d}] {world.item_name(d.label):<8s} conf {d.confidence:.3f}")
    words = [world.item_name(d.label) for d in detect_events(world, grid) if world.is_word(d.label)]
    lines.append("payload " + " ".join(words))
    return lines


def cmd_generate(cfg: RunConfig, checkpoint: Path, prompt: str, out: Path) -> dict:
    world = World.load(_require(Path(cfg.data_dir) / "world.json", "world file"))
    model = load_model(checkpoint)
    try:
        text = tokenize(world, prompt)
    except KeyError as exc:
        raise CommandError(str(exc.args[0])) from exc
    gen = cfg.gen_config()
    trace = generate(model, world.markers, text, gen)
    out.mkdir(parents=True, exist_ok=True)
    doc = {**trace.to_json(), "prompt": prompt, "config": cfg.to_dict()}
    _dump(out / "trace.json", doc)
    lines = [f"prompt: {detokenize(world, text)}", f"termination: {trace.termination}"]
    try:
        grid, dropped = decode_output(trace, world.q, world.pad)
        if dropped:
            lines.append(f"repair dropped {dropped} frame(s)")
        lines += _describe_grid(world, grid)
        np.savetxt(out / "grid.txt", grid, fmt="%d")
    except MalformedLayoutError as exc:
        lines.append(f"undecodable: {exc}")
    (out / "decode.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return doc


def cmd_eval(cfg: RunConfig, checkpoint: Path, split: str, out: Path) -> dict:
    world, recs = _load_data(Path(cfg.data_dir), split)
    model = load_model(checkpoint)
    report = evaluate(model, world, recs, cfg.gen_config(), ScfConfig(cfg.scf_sim_threshold, cfg.scf_conf_floor))
    report["checkpoint"] = str(checkpoint)
    report["split"] = split
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.json", out / "metrics.csv", report, cfg.to_dict())
    for s, block in report["scenarios"].items():
        shown = " ".join(f"{k}={v:.4f}" for k, v in block.items() if isinstance(v, float))
        print(f"{s:<9s} n={block['count']} undecodable={block['undecodable']} {shown}")
    return report


def cmd_compare(cfg: RunConfig, strategies: list[str], split: str, out: Path) -> dict:
    """Evaluate several checkpoints and write the per-scenario normalized-score table."""
    table = MetricTable()
    for spec in strategies:
        if "=" not in spec:
            raise CommandError(f"--strategies entries look like name=checkpoint, got {spec!r}")
        name, path = spec.split("=", 1)
        rep = cmd_eval(cfg, Path(path), split, out / name)
        for s, m, v, o in scenario_metrics(rep["scenarios"]):
            table.add(name, s, m, v, o)
    scores = {s: normalized_score(table, s) for s in SCENARIOS if any(k[1] == s for k in table.values)}
    _dump(out / "normalized_scores.json", {"scores": scores, "config": cfg.to_dict()})
    with open(out / "normalized_scores.csv", "w") as fh:
        fh.write("strategy,scenario,score\n")
        for s, row in scores.items():
            for name, v in row.items():
                fh.write(f"{name},{s},{v!r}\n")
    for s, row in scores.items():
        print(f"{s:<9s} " + " ".join(f"{n}={v:.3f}" for n, v in row.items()))
    return scores


def cmd_verify(fault: str | None = None) -> int:
    from .verify import run_all

    t0 = time.perf_counter()
    results = run_all(fault)
    failed = [(n, e) for n, e, _ in results if e is not None]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        print(f"first failure: {failed[0][0]}: {failed[0][1]}")
        return EXIT_VERIFY
    return EXIT_OK


# ----------------------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file; keys: " + ", ".join(KEYS))
    common.add_argument("--seed", type=int)
    common.add_argument("--schedule", choices=["constant", "gradual", "disjoint", "custom"])
    common.add_argument("--epochs", type=int)
    common.add_argument("--top-k", dest="top_k", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="latentplan", description=__doc__.strip().splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="build the world and the train/test splits")
    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="dataset directory (overrides data_dir)")
    t.add_argument("--resume", help="checkpoint to resume from, or 'auto' for the latest in --out")
    g = sub.add_parser("generate", parents=[common], help="generate audio tokens for a prompt")
    g.add_argument("--data", help="dataset directory holding world.json")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--prompt", required=True, help="whitespace-tokenized prompt text")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="test")
    e.add_argument("--strategies", nargs="+", metavar="NAME=CKPT", help="compare checkpoints by normalized score")
    v = sub.add_parser("verify", parents=[common], help="run the property suites")
    v.add_argument("--inject-fault", metavar="OP", help="debug: double the backward of an op (e.g. matmul)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "verify":
            return cmd_verify(args.inject_fault)
        cfg = _config(args)
        out = Path(args.out) if args.out else None
        if args.command == "gen-data":
            cmd_gen_data(cfg, out or Path(cfg.data_dir))
        elif args.command == "train":
            cmd_train(cfg, Path(cfg.data_dir), out or Path(cfg.run_dir), args.resume)
        elif args.command == "generate":
            cmd_generate(cfg, Path(args.checkpoint), args.prompt, out or Path(cfg.run_dir) / "generate")
        elif args.command == "eval":
            dest = out or Path(cfg.run_dir) / "eval"
            if args.strategies:
                cmd_compare(cfg, args.strategies, args.split, dest)
            elif args.checkpoint:
                cmd_eval(cfg, Path(args.checkpoint), args.split, dest)
            else:
                raise CommandError("eval needs --checkpoint or --strategies")
    except (ConfigError, CommandError, nx.ContractError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
