"""Command-line entry point: ``python3 -m motionrag <subcommand> ...``.

Every subcommand reads an optional flat config file (``--config``), a root
seed (``--seed``, default 0) and an output location (``--out``). Exit codes:
0 success, 2 validation error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from ..codec import write_tokens
from ..encoders import CheckpointError, load_tensors, save_tensors
from ..fusion import RetrievalResult
from ..mcdpo import read_pairs, write_pairs
from ..metrics import EvalRun, evaluate_runs
from .config import ConfigError, build, parse_lines
from .pipeline import RETRIEVER_MODES, PipelineConfig, Workbench, eval_protocol, run_pipeline
from .synthetic import Corpus, SyntheticCorpusConfig, gen_synthetic

log = logging.getLogger("motionrag")

COMMANDS = ("gen-data", "ingest", "train-retriever", "train-integrator", "train-vq", "train-sft",
            "build-dpo", "train-dpo", "retrieve", "generate", "evaluate", "pipeline")


class UsageError(Exception):
    """Bad input detected before any work starts; maps to exit code 2."""


def load_configs(path, seed, overrides) -> tuple[PipelineConfig, SyntheticCorpusConfig]:
    """One flat file may hold keys of both the pipeline and the corpus
    config; a key unknown to both is an error."""
    raw = {}
    if path is not None:
        if not os.path.exists(path):
            raise UsageError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            raw = parse_lines(fh)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        raw[key.strip()] = value.strip()
    pipe_keys = {f.name for f in dataclasses.fields(PipelineConfig)}
    corpus_keys = {f.name for f in dataclasses.fields(SyntheticCorpusConfig)}
    unknown = set(raw) - pipe_keys - corpus_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if seed is not None:
        raw["seed"] = str(seed)
    pipe = build(PipelineConfig, {k: v for k, v in raw.items() if k in pipe_keys})
    corpus = build(SyntheticCorpusConfig, {k: v for k, v in raw.items() if k in corpus_keys})
    return pipe, corpus


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
    common.add_argument("--out", help="output file or directory for this step")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="motionrag", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "write a synthetic corpus directory",
        "ingest": "embed database videos into the action and object stores",
        "train-retriever": "stage 1: train both retrieval channels",
        "train-integrator": "stage 2: train the router with frozen encoders",
        "train-vq": "train the motion codebook and the evaluation co-embedder",
        "train-sft": "supervised training of the token policy on retrieved contexts",
        "build-dpo": "sample candidates and write the preference set",
        "train-dpo": "preference-optimise the SFT policy",
        "retrieve": "rank database videos for each query",
        "generate": "sample token sequences and decoded motions",
        "evaluate": "compute the metric report from a feature file",
        "pipeline": "retrieve, generate and evaluate end to end",
    }
    subs = {name: sub.add_parser(name, parents=[common], help=h) for name, h in helps.items()}
    for name in ("retrieve", "generate", "pipeline"):
        subs[name].add_argument("--retriever", choices=RETRIEVER_MODES)
        subs[name].add_argument("--split", default="test")
    subs["retrieve"].add_argument("--k", type=int, default=None)
    subs["evaluate"].add_argument("--input", required=True, help="named-tensor file with generated.<i>, "
                                  "reference and text matrices")
    subs["evaluate"].add_argument("--pool-size", type=int, default=None,
                                  help="R-precision pool (default min(32, n))")
    subs["evaluate"].add_argument("--diversity-pairs", type=int, default=None,
                                  help="Diversity pairs (default min(300, n // 2))")
    subs["build-dpo"].add_argument("--round", type=int, default=0, dest="round_")
    subs["train-dpo"].add_argument("--pairs", help="preference file (default <checkpoints>/preferences.tsv)")
    subs["pipeline"].add_argument("--train", action="store_true", help="train every stage first")
    return p


def _bench(cfg: PipelineConfig, stages=(), stores=False, ground_truth=False) -> Workbench:
    wb = Workbench(Corpus.read(cfg.data_dir, with_ground_truth=ground_truth), cfg)
    if stages:
        wb.load(cfg.checkpoint_dir, stages)
    if stores:
        wb.open_stores(cfg.store_dir)
    return wb


def _ckpt(cfg, name):
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    return os.path.join(cfg.checkpoint_dir, name)


def _queries(wb, split):
    items = wb.corpus.query_split(split)
    if not items:
        raise UsageError(f"no queries in split {split!r}")
    return [(q, t) for q, _, t in items]


def run(args) -> int:
    cfg, corpus_cfg = load_configs(args.config, args.seed, args.set)
    overrides = {}
    if getattr(args, "retriever", None):
        overrides["retriever"] = args.retriever
    if getattr(args, "k", None) is not None:
        if args.k < 1:
            raise UsageError("--k must be >= 1")
        overrides["top_k"] = args.k
    for key, flag in (("out_dir", "pipeline"),):
        if args.command == flag and args.out:
            overrides[key] = args.out
    if args.command == "ingest" and args.out:
        overrides["store_dir"] = args.out
    if args.command in ("train-retriever", "train-integrator", "train-vq", "train-sft", "train-dpo") and args.out:
        overrides["checkpoint_dir"] = args.out
    cfg = dataclasses.replace(cfg, **overrides)
    cmd = args.command

    if cmd == "gen-data":
        out = args.out or cfg.data_dir
        gen_synthetic(corpus_cfg).write(out)
        print(out)
    elif cmd == "train-retriever":
        wb = _bench(cfg, ground_truth=True)
        res = wb.train_retriever_stage1()
        wb.retriever.save_encoders(_ckpt(cfg, "encoders.tensors"))
        wb.retriever.router.save(_ckpt(cfg, "router.tensors"))
        print(f"action loss {res.action_trace[0]:.4f} -> {res.action_trace[-1]:.4f}; "
              f"object loss {res.object_trace[0]:.4f} -> {res.object_trace[-1]:.4f}")
    elif cmd == "train-integrator":
        wb = _bench(cfg, ("encoders", "router"), ground_truth=True)
        res = wb.train_integrator()
        wb.retriever.router.save(_ckpt(cfg, "router.tensors"))
        print(f"integrator loss {res.integ_trace[0]:.4f} -> {res.integ_trace[-1]:.4f}")
    elif cmd == "ingest":
        wb = _bench(cfg, ("encoders", "router"))
        a, o = wb.ingest(cfg.store_dir)
        print(f"{a.count()} videos -> {cfg.store_dir}")
    elif cmd == "train-vq":
        wb = _bench(cfg)
        res = wb.train_codec()
        wb.codec.save(_ckpt(cfg, "codebook.tensors"))
        trace = wb.train_evaluator()
        wb.evaluator.save(_ckpt(cfg, "evaluator.tensors"))
        print(f"codebook usage {res.usage:.3f}; vq loss {res.loss_trace[-1]:.4f}; evaluator loss {trace[-1]:.4f}")
    elif cmd == "train-sft":
        wb = _bench(cfg, ("encoders", "router", "codebook"), stores=True)
        res = wb.train_sft()
        wb.sft_policy.save(_ckpt(cfg, "policy_sft.tensors"))
        print(f"sft loss {res.loss_trace[0]:.4f} -> {res.loss_trace[-1]:.4f}")
    elif cmd == "build-dpo":
        wb = _bench(cfg, ("encoders", "router", "codebook", "evaluator", "policy_sft"), stores=True)
        prefs = wb.build_dpo(round_=args.round_)
        out = args.out or _ckpt(cfg, "preferences.tsv")
        write_pairs(out, prefs.pairs)
        print(f"{len(prefs.pairs)} pairs ({prefs.skipped_ties} tied examples skipped) -> {out}")
    elif cmd == "train-dpo":
        wb = _bench(cfg, ("encoders", "router", "codebook", "evaluator", "policy_sft"), stores=True)
        path = args.pairs or os.path.join(cfg.checkpoint_dir, "preferences.tsv")
        if not os.path.exists(path):
            raise CheckpointError(f"missing build-dpo output: {path}")
        pairs = read_pairs(path, wb.train_contexts())
        if not pairs:
            raise UsageError(f"empty preference set: {path}")
        res = wb.train_dpo(pairs)
        wb.policy.save(_ckpt(cfg, "policy.tensors"))
        print(f"dpo loss {res[0].loss_trace[0]:.4f} -> {res[-1].loss_trace[-1]:.4f}; margin {res[-1].final_margin:.4f}")
    elif cmd == "retrieve":
        wb = _bench(cfg, ("encoders", "router"), stores=True)
        queries = _queries(wb, args.split)
        hits = wb.retrieve(queries, k=cfg.top_k)
        lines = [RetrievalResult(q, i + 1, v, s).line() for q, _ in queries for i, (v, s) in enumerate(hits[q])]
        _emit(args.out, lines)
    elif cmd == "generate":
        wb = _bench(cfg, ("encoders", "router", "codebook", "policy"), stores=True)
        queries = _queries(wb, args.split)
        contexts = wb.build_contexts(queries, wb.retrieve(queries, k=cfg.top_k))
        toks = wb.generate(contexts, query_ids=[q for q, _ in queries])
        out = args.out or cfg.out_dir
        os.makedirs(out, exist_ok=True)
        write_tokens(os.path.join(out, "tokens.tsv"), [(q, t) for (q, _), t in zip(queries, toks)])
        save_tensors(os.path.join(out, "motions.tensors"),
                     {q: wb.codec.decode(t) for (q, _), t in zip(queries, toks) if len(t)})
        print(f"{len(toks)} sequences -> {out}")
    elif cmd == "evaluate":
        runs = read_eval_file(args.input)
        pool, pairs = eval_protocol(len(runs[0].reference))
        report = evaluate_runs(runs, pool_size=args.pool_size or pool,
                               diversity_pairs=args.diversity_pairs or pairs)
        if args.out:
            report.write(args.out)
        print(report.to_text(), end="")
    elif cmd == "pipeline":
        report, _ = run_pipeline(cfg, train=args.train, split=args.split)
        print(report.to_text(), end="")
    return 0


def read_eval_file(path) -> list[EvalRun]:
    if not os.path.exists(path):
        raise UsageError(f"input not found: {path}")
    t = load_tensors(path)
    n = sum(1 for k in t if k.startswith("generated."))
    if n == 0 or "reference" not in t or "text" not in t:
        raise UsageError("evaluation file needs generated.<i>, reference and text tensors")
    seeds = t["seeds"].astype(int) if "seeds" in t else np.arange(n)
    try:
        return [EvalRun(t[f"generated.{i}"], t["reference"], t["text"], seed=int(seeds[i])) for i in range(n)]
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad evaluation file: {exc}") from None


def _emit(out, lines):
    text = "".join(line + "\n" for line in lines)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return run(args)
    except (UsageError, ConfigError) as exc:
        print(f"motionrag {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        if args.verbose:
            raise
        print(f"motionrag {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
