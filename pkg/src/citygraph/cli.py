"""Command line entry point: ``citygraph <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, pipeline
from .errors import CityGraphError, ConfigError, DataError

log = logging.getLogger("citygraph")

COMMANDS = (
    "build-graph", "anchor-images", "extract-subgraphs", "gen-srp", "gen-captions-prompts", "emit-samples",
    "gen-bench", "eval", "train-toy", "grad-check", "full-build",
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _global_flags(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=default, help="JSON or YAML pipeline config")
    p.add_argument("--seed", type=int, metavar="N", default=default, help="global seed (overrides the config)")
    p.add_argument("--out", metavar="DIR", default=default, help="output directory (overrides the config)")
    p.add_argument("--jobs", type=int, metavar="N", default=default, help="worker threads for per-image stages")
    p.add_argument("--verbose", "-v", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser():
    parser = _Parser(prog="citygraph", description="Urban spatial graphs, reasoning paths and benchmarks.")
    parser.add_argument("--version", action="version", version=f"citygraph {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    shared = _Parser(add_help=False)
    _global_flags(shared, suppress=True)

    def cmd(name, help_):
        return sub.add_parser(name, help=help_, parents=[shared])

    p = cmd("build-graph", "ingest GeoJSON and write the spatial graph")
    p.add_argument("--input", action="append", metavar="GEOJSON", help="GeoJSON file (repeatable)")
    p.add_argument("--city", help="city name recorded in the graph")
    p = cmd("anchor-images", "add image viewpoints from a CSV of id,lon,lat")
    p.add_argument("--images", metavar="CSV")
    cmd("extract-subgraphs", "write per-image subgraphs and descriptions")
    cmd("gen-srp", "generate spatial reasoning paths for every image")
    cmd("gen-captions-prompts", "write caption prompts from subgraph descriptions")
    p = cmd("emit-samples", "write stage-1 and stage-2 training records")
    p.add_argument("--captions", metavar="CSV", help="optional image_id,caption file")
    p = cmd("gen-bench", "generate benchmark instances")
    p.add_argument("--perception", metavar="CSV", help="optional image_id,attribute,score file")
    p = cmd("eval", "rank candidates by cosine similarity and report Hit@5 / NDCG@5")
    p.add_argument("--instances", metavar="JSONL")
    p.add_argument("--queries", metavar="JSONL", help="query embeddings")
    p.add_argument("--candidates", metavar="JSONL", help="candidate embeddings")
    p = cmd("train-toy", "train the toy encoder on a synthetic separable dataset")
    p.add_argument("--pairs", type=int, default=64)
    p.add_argument("--steps", type=int)
    p.add_argument("--stage", type=int, default=2, choices=(1, 2))
    p = cmd("grad-check", "compare analytic and finite-difference encoder gradients")
    p.add_argument("--samples", type=int, default=120)
    p.add_argument("--eps", type=float, default=1e-4)
    cmd("full-build", "run every dataset stage into a fresh output tree")
    return parser


def _config(args):
    overrides = {k: getattr(args, k, None) for k in ("seed", "out", "jobs")}
    for flag, key in (("city", "city"), ("images", "images"), ("captions", "captions"), ("perception", "perception")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = str(Path(v).resolve()) if key != "city" else v
    if getattr(args, "input", None):
        overrides["inputs"] = [str(Path(p).resolve()) for p in args.input]
    cfg = pipeline.load_config(getattr(args, "config", None), **overrides)
    for flag, key in (("instances", "instances"), ("queries", "query_embeddings"),
                      ("candidates", "candidate_embeddings")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg.eval, key, str(Path(v).resolve()))
    return cfg.validate()


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _ids(g):
    return pipeline.image_ids(g)


def run(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out)
    c = args.command
    if c == "full-build":
        _emit(pipeline.run_dataset_build(cfg)["counts"])
    elif c == "build-graph":
        g = pipeline.stage_build_graph(cfg, out)
        _emit(g.counters())
    elif c == "anchor-images":
        if not cfg.images:
            raise ConfigError("no image manifest given (--images or 'images' in the config)")
        ids = pipeline.stage_anchor_images(cfg, out, pipeline.load_graph(out))
        _emit({"anchored": len(ids)})
    elif c == "extract-subgraphs":
        g = pipeline.load_graph(out)
        _emit({"subgraphs": pipeline.stage_extract_subgraphs(cfg, out, g, _ids(g))})
    elif c == "gen-captions-prompts":
        g = pipeline.load_graph(out)
        _emit({"caption_prompts": pipeline.stage_caption_prompts(cfg, out, g, _ids(g))})
    elif c == "gen-srp":
        g = pipeline.load_graph(out)
        _emit({"srps": len(pipeline.stage_srps(cfg, out, g, _ids(g)))})
    elif c == "emit-samples":
        g = pipeline.load_graph(out)
        n1, n2 = pipeline.stage_emit_samples(cfg, out, g, _ids(g))
        _emit({"stage1_samples": n1, "stage2_samples": n2})
    elif c == "gen-bench":
        g = pipeline.load_graph(out)
        inst, skipped = pipeline.stage_gen_bench(cfg, out, g, _ids(g))
        _emit({"instances": len(inst), "skipped": len(skipped)})
    elif c == "eval":
        report = pipeline.run_benchmark_eval(cfg, out)
        _emit(report.to_json())
    elif c == "train-toy":
        return _train_toy(cfg, args, out)
    elif c == "grad-check":
        return _grad_check(cfg, args)
    return 0


def _train_toy(cfg, args, out):
    from dataclasses import replace

    from .encoder.checkpoint import save_params
    from .encoder.toy import separable_pairs
    from .encoder.train import retrieval_hit_at_1, train_toy, write_training_log

    tcfg = replace(cfg.train, steps=args.steps) if args.steps else cfg.train
    data = separable_pairs(args.pairs, seed=cfg.seed)
    if args.stage == 1:
        from .encoder.train import ContrastiveBatch

        data = ContrastiveBatch([f"viewpoint {t}" for t in data.targets], data.targets)
    result = train_toy([data], cfg.encoder, args.stage, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    save_params(result.params, out / "encoder.ckpt")
    write_training_log(out / "training_log.csv", result)
    first, last = result.history[0], result.history[-1]
    _emit({
        "steps": tcfg.steps, "initial_loss": round(first, 6), "final_loss": round(last, 6),
        "reduction": round(1 - last / first, 6), "hit_at_1": retrieval_hit_at_1(result.params, data),
    })
    return 0


def _grad_check(cfg, args):
    from .encoder.model import EncoderParams
    from .encoder.toy import four_node_batch
    from .encoder.train import grad_check

    report = grad_check(EncoderParams.init(cfg.encoder, cfg.seed), four_node_batch(cfg.encoder),
                        eps=args.eps, n_samples=args.samples, seed=cfg.seed)
    _emit({
        "sampled_params": report.sampled_params, "max_rel_error": report.max_rel_error,
        "blocks": len(report.per_block), "ok": report.ok,
    })
    if not report.ok:
        print(f"gradient check failed: worst {report.worst}", file=sys.stderr)
        return 4
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    level = logging.WARNING - 10 * min(getattr(args, "verbose", 0) or 0, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except CityGraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
