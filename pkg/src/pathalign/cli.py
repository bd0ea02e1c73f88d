"""Command-line entry point.

Subcommands: train, resume, eval, gen-data, grad-check.  Configs are flat
key-value text files (see config.py); datasets can be generated on the
fly from the config or loaded from files written by gen-data.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import evaluate as EV
from . import model as M
from . import tensor as T
from .config import TrainConfig, config_hash, load_config
from .errors import ConfigError, PathalignError
from .synth import WorldSpec, make_single_finding_corpus, make_split, read_dataset, write_dataset
from .trainer import load_model, resume, train

RETRIEVAL_QUERY_SEED_OFFSET = 10_000_000
RETRIEVAL_CORPUS_SEED_OFFSET = 11_000_000


def _load_datasets(data_dir: str | None, cfg: TrainConfig):
    if data_dir is None:
        return None
    root = Path(data_dir)
    world = cfg.world()
    return tuple(read_dataset(root / f"{split}.bin", world) for split in ("train", "val", "test"))


def _sibling_config(checkpoint_path: str, explicit: str | None) -> TrainConfig:
    if explicit is not None:
        return load_config(explicit)
    candidate = Path(checkpoint_path).parent / "config.txt"
    if not candidate.exists():
        raise ConfigError(f"no --config given and {candidate} does not exist")
    return load_config(candidate)


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    result = train(cfg, args.out, datasets=_load_datasets(args.data, cfg))
    print(f"best epoch {result.best_epoch} (val total {result.best_val_total:.6f}), "
          f"stopped after epoch {result.last_epoch}")
    print(f"metrics: {result.metrics_path}")
    print(f"best checkpoint: {result.best_checkpoint}")
    return 0


def _cmd_resume(args) -> int:
    cfg = _sibling_config(args.checkpoint, args.config)
    result = resume(args.checkpoint, cfg, args.out, datasets=_load_datasets(args.data, cfg))
    print(f"resumed; best epoch {result.best_epoch} (val total {result.best_val_total:.6f}), "
          f"stopped after epoch {result.last_epoch}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _sibling_config(args.checkpoint, args.config)
    world = cfg.world()
    model_params = load_model(args.checkpoint, cfg)
    splits = _load_datasets(args.data, cfg)
    if splits is None:
        splits = make_split(cfg.n_train, cfg.n_val, cfg.n_test, cfg.data_seed, world)
    by_name = dict(zip(("train", "val", "test"), splits))
    pairs = by_name[args.split]

    rows: list[tuple[str, float]] = []
    n_per_class = max(1, args.retrieval_per_class)
    queries = make_single_finding_corpus(n_per_class, cfg.data_seed + RETRIEVAL_QUERY_SEED_OFFSET, world)
    corpus = make_single_finding_corpus(n_per_class, cfg.data_seed + RETRIEVAL_CORPUS_SEED_OFFSET, world)
    k_list = [k for k in (1, 2, 5, 10) if k <= len(corpus)]
    ret = EV.retrieval_precision(
        M.projected_image_features(model_params, queries, cfg, world),
        M.projected_report_features(model_params, corpus, cfg, world),
        [p.labels[0][1] for p in queries], [p.labels[0][1] for p in corpus], k_list=k_list)
    for k in k_list:
        rows.append((f"retrieval_precision_at_{k}", ret.precision_at_k[k]))

    for pathology in range(world.n_pathologies):
        cons = EV.vpor_consistency(pairs, pathology, model_params, cfg, world)
        if cons is None:
            continue
        rows.append((f"vpor_consistency_top1_class{pathology}", cons.top1))
        rows.append((f"vpor_consistency_top2_class{pathology}", cons.top2))
        rows.append((f"random_argmax_baseline_class{pathology}",
                     EV.random_argmax_baseline(cons.n_samples, cfg.n_query)))

    if cfg.n_query >= 2 and len(pairs) >= 10:
        rows.append(("vpor_cluster_separation", EV.vpor_cluster_separation(pairs, model_params, cfg, world)))

    mean_acc, _ = EV.linear_probe(by_name["train"], pairs, model_params, cfg, world)
    rows.append(("linear_probe_mean_accuracy", mean_acc))

    hash_hex = config_hash(cfg).hex()
    lines = ["metric,value,split,config_hash"]
    lines += [f"{name},{value:.10g},{args.split},{hash_hex}" for name, value in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def _parse_world_file(path) -> tuple[WorldSpec, dict[str, int]]:
    field_types = {f.name: f.type for f in dataclasses.fields(WorldSpec)}
    world_kw: dict[str, object] = {}
    gen = {"n_train": 512, "n_val": 64, "n_test": 64, "base_seed": 20_000_000}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in gen:
            gen[key] = int(raw)
        elif key in field_types:
            typ = float if "float" in str(field_types[key]) else int
            world_kw[key] = typ(raw)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return WorldSpec(**world_kw), gen


def _cmd_gen_data(args) -> int:
    world, gen = _parse_world_file(args.spec)
    splits = make_split(gen["n_train"], gen["n_val"], gen["n_test"], gen["base_seed"], world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, pairs in zip(("train", "val", "test"), splits):
        write_dataset(out / f"{name}.bin", pairs, world)
        print(f"wrote {len(pairs)} pairs to {out / f'{name}.bin'}")
    return 0


def _cmd_grad_check(args) -> int:
    cfg = load_config(args.config)
    world = cfg.world()
    model_params = M.init_model(cfg, world)
    pairs, _, _ = make_split(max(2, args.batch), 1, 1, cfg.data_seed, world)
    batch = pairs[:args.batch]
    targets = M.covariance_targets(batch, cfg)
    params = M.parameters(model_params)
    n_entries = sum(p.data.size for p in params)
    print(f"checking {n_entries} parameter entries on a batch of {len(batch)} "
          f"(2 forward passes per entry; use a tiny config)")

    def objective():
        loss, _ = M.total_loss(model_params, batch, cfg, world, targets)
        return loss

    err = T.grad_check(objective, params, eps=args.eps)
    print(f"max relative error: {err:.3e}")
    return 0 if err < 1e-4 else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pathalign",
                                     description="joint image-report alignment training on synthetic pairs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from scratch")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="directory with train/val/test.bin (default: generate from config)")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("resume", help="continue from a last.ckpt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config file (default: config.txt next to the checkpoint)")
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.set_defaults(fn=_cmd_resume)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="write the metrics CSV here as well as stdout")
    p.add_argument("--data")
    p.add_argument("--retrieval-per-class", type=int, default=50)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gen-data", help="write synthetic dataset files")
    p.add_argument("--spec", required=True, help="world spec key-value file")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("grad-check", help="finite-difference check of the full objective")
    p.add_argument("--config", required=True)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(fn=_cmd_grad_check)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except PathalignError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
