"""Dataset builds and benchmark evaluation driven by one config file.

Every stage reads and writes plain files under an output directory, so the
CLI can run stages one at a time and ``run_dataset_build`` can chain them.
Output bytes depend only on the inputs, the config and the seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from . import __version__, bench
from .bench import BenchConfig, PerceptionScheme
from .build import anchor_image, build_graph
from .encoder.model import EncoderConfig
from .encoder.train import TrainConfig
from .errors import CityGraphError, ConfigError, DataError
from .geo import GeoPoint
from .graph import GraphBuildConfig, NodeKind, SpatialGraph
from .ingest import LoadReport, load_geojson
from .srp import SrpConfig, annotate_path, caption_samples, emit_training_samples, generate_srps, render_srp
from .subgraph import ExtractConfig, build_caption_prompt, describe_subgraph, extract_subgraph, serialize_subgraph

log = logging.getLogger(__name__)

GRAPH_DIR = "graph"
SUBGRAPH_DIR = "subgraphs"
DESCRIPTION_DIR = "descriptions"
PROMPT_DIR = "prompts"
SRP_FILE = "srps.jsonl"
STAGE1_FILE = "samples/stage1.jsonl"
STAGE2_FILE = "samples/stage2.jsonl"
INSTANCE_FILE = "bench/instances.jsonl"
SKIPPED_FILE = "bench/skipped.jsonl"
MANIFEST = "manifest.json"


@dataclass
class EvalConfig:
    instances: Optional[str] = None
    query_embeddings: Optional[str] = None
    candidate_embeddings: Optional[str] = None


@dataclass
class PipelineConfig:
    city: str = "city"
    inputs: List[str] = field(default_factory=list)
    images: Optional[str] = None
    out: str = "out"
    seed: int = 0
    jobs: int = 1
    captions: Optional[str] = None
    perception: Optional[str] = None
    perception_bins: Optional[list] = None
    graph: GraphBuildConfig = field(default_factory=GraphBuildConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    srp: SrpConfig = field(default_factory=SrpConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    _NESTED = {
        "graph": GraphBuildConfig.from_dict,
        "extract": ExtractConfig.from_dict,
        "srp": SrpConfig.from_dict,
        "encoder": EncoderConfig.from_dict,
        "train": TrainConfig.from_dict,
        "bench": BenchConfig.from_dict,
        "eval": lambda d: EvalConfig(**(d or {})),
    }
    _PATHS = ("images", "captions", "perception")

    @classmethod
    def from_dict(cls, d, base_dir=None):
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            for key, make in cls._NESTED.items():
                if key in d and not isinstance(d[key], (dict, type(None))):
                    raise ConfigError(f"config section {key!r} must be a mapping")
                if key in d:
                    d[key] = make(d[key])
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None
        if base_dir is not None:
            cfg._resolve(Path(base_dir))
        return cfg

    def _resolve(self, base: Path):
        def fix(p):
            return None if p is None else str(p if Path(p).is_absolute() else base / p)

        self.inputs = [fix(p) for p in self.inputs]
        for name in self._PATHS:
            setattr(self, name, fix(getattr(self, name)))
        self.out = fix(self.out)
        for name in ("instances", "query_embeddings", "candidate_embeddings"):
            setattr(self.eval, name, fix(getattr(self.eval, name)))

    def validate(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        if not isinstance(self.jobs, int) or self.jobs < 1:
            raise ConfigError("jobs must be a positive integer")
        for p in [*self.inputs, *(getattr(self, n) for n in self._PATHS)]:
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"referenced file does not exist: {p}")
        for name in ("instances", "query_embeddings", "candidate_embeddings"):
            p = getattr(self.eval, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"referenced file does not exist: {p}")
        self.perception_scheme("safe")
        return self

    def perception_scheme(self, attribute):
        if self.perception_bins is None:
            return PerceptionScheme(attribute)
        try:
            return PerceptionScheme(attribute, tuple(tuple(b) for b in self.perception_bins))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad perception_bins: {exc}") from None

    def echo(self):
        """Config as recorded in outputs: file paths reduced to name + content hash, no output dir."""
        def ref(p):
            return None if p is None else {"name": Path(p).name, "sha256": _sha256(Path(p))}

        out = {
            "city": self.city, "seed": self.seed,
            "inputs": [ref(p) for p in self.inputs],
            **{n: ref(getattr(self, n)) for n in self._PATHS},
            "perception_bins": self.perception_bins,
        }
        for key in ("graph", "extract", "srp", "train", "bench"):
            out[key] = _plain(asdict(getattr(self, key)))
        out["encoder"] = self.encoder.to_dict()
        return out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "value"):
        return obj.value
    return obj


def load_config(path=None, **overrides) -> PipelineConfig:
    """Read JSON or YAML; keyword overrides (None means unset) win over file values."""
    raw, base = {}, Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text(encoding="utf-8")
        try:
            raw = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse config {p}: {exc}") from None
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        base = p.resolve().parent
    cfg = PipelineConfig.from_dict(raw, base)
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, str(Path(v).resolve()) if k == "out" else v)
    # one seed drives everything random downstream
    cfg.bench = replace(cfg.bench, seed=cfg.seed)
    cfg.train = replace(cfg.train, seed=cfg.seed)
    return cfg.validate()


# --- small file helpers ---------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _write_jsonl(path: Path, records):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(_dumps(r) + "\n")
    return path


def _read_jsonl(path: Path):
    if not path.is_file():
        raise DataError(f"missing stage output {path}; run the earlier stage first")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _read_csv(path, required):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        return [(i + 2, row) for i, row in enumerate(reader)]


def read_image_manifest(path) -> List[tuple]:
    """CSV with columns id, lon, lat; returns (id, GeoPoint) sorted by id."""
    out, seen = [], set()
    for line, row in _read_csv(path, ("id", "lon", "lat")):
        iid = row["id"].strip()
        try:
            p = GeoPoint(float(row["lon"]), float(row["lat"]))
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}:{line}: image {iid!r}: {exc}") from None
        if not iid or iid in seen:
            raise DataError(f"{path}:{line}: empty or duplicate image id {iid!r}")
        seen.add(iid)
        out.append((iid, p))
    return sorted(out, key=lambda t: t[0])


class StageError(CityGraphError):
    """Wraps a stage failure with the stage name and entity; keeps the cause's exit code."""

    def __init__(self, stage, entity, cause):
        self.stage, self.entity, self.cause = stage, entity, cause
        self.exit_code = getattr(cause, "exit_code", 1)
        where = f" at {entity}" if entity is not None else ""
        super().__init__(f"stage {stage} failed{where}: {cause}")


def _guard(stage, entity, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except CityGraphError as exc:
        raise StageError(stage, entity, exc) from exc


def _map(cfg, fn, items):
    """Ordered map; results come back in input order whatever ``jobs`` is."""
    if cfg.jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(cfg.jobs) as pool:
        return list(pool.map(fn, items))


# --- stages ------------------------------------------------------------------------------


def stage_build_graph(cfg: PipelineConfig, out: Path) -> SpatialGraph:
    if not cfg.inputs:
        raise ConfigError("no GeoJSON inputs configured")
    nodes = []
    for path in cfg.inputs:
        rep = LoadReport()
        with open(path, "rb") as fh:
            nodes.extend(_guard("build-graph", Path(path).name, load_geojson, fh, rep))
        for idx, reason in rep.rejected:
            log.warning("%s: feature %d rejected: %s", Path(path).name, idx, reason)
    meta = {"city": cfg.city, "seed": cfg.seed}
    g = _guard("build-graph", None, build_graph, nodes, cfg.graph, None, meta)
    g.save(out / GRAPH_DIR)
    return g


def load_graph(out: Path) -> SpatialGraph:
    if not (out / GRAPH_DIR / "meta.json").is_file():
        raise DataError(f"no graph under {out / GRAPH_DIR}; run build-graph first")
    return SpatialGraph.load(out / GRAPH_DIR)


def stage_anchor_images(cfg: PipelineConfig, out: Path, g: SpatialGraph) -> List[str]:
    images = read_image_manifest(cfg.images) if cfg.images else []
    for iid, p in images:
        _guard("anchor-images", iid, anchor_image, g, iid, p)
    g.metadata["images"] = len(images)
    g.save(out / GRAPH_DIR)
    return [iid for iid, _ in images]


def image_ids(g: SpatialGraph) -> List[str]:
    """Anchored viewpoints, i.e. viewpoints with a nearest edge, sorted by id."""
    return sorted(e.src for e in g.edges if e.kind.value == "nearest" and g.nodes[e.src].kind == NodeKind.VIEWPOINT)


def stage_extract_subgraphs(cfg, out: Path, g, ids) -> int:
    def one(iid):
        s = _guard("extract-subgraphs", iid, extract_subgraph, g, iid, cfg.extract)
        return iid, serialize_subgraph(s), describe_subgraph(s).text()

    (out / SUBGRAPH_DIR).mkdir(parents=True, exist_ok=True)
    (out / DESCRIPTION_DIR).mkdir(parents=True, exist_ok=True)
    for iid, blob, text in _map(cfg, one, ids):
        (out / SUBGRAPH_DIR / f"{iid}.json").write_bytes(blob)
        (out / DESCRIPTION_DIR / f"{iid}.txt").write_text(text + "\n", encoding="utf-8")
    return len(ids)


def stage_caption_prompts(cfg, out: Path, g, ids) -> int:
    def one(iid):
        s = _guard("gen-captions-prompts", iid, extract_subgraph, g, iid, cfg.extract)
        return iid, build_caption_prompt(describe_subgraph(s)).full_text

    (out / PROMPT_DIR).mkdir(parents=True, exist_ok=True)
    for iid, text in _map(cfg, one, ids):
        (out / PROMPT_DIR / f"{iid}.txt").write_text(text, encoding="utf-8")
    return len(ids)


def stage_srps(cfg, out: Path, g, ids) -> List[dict]:
    def one(iid):
        paths = _guard("gen-srp", iid, generate_srps, g, iid, cfg.srp)
        return [
            {"image_id": iid, "destination": p.destination, "hops": p.hops, "node_ids": p.node_ids,
             "srp": render_srp(p)}
            for p in paths
        ]

    records = [r for batch in _map(cfg, one, ids) for r in batch]
    _write_jsonl(out / SRP_FILE, records)
    return records


def _read_captions(cfg) -> Dict[str, str]:
    if not cfg.captions:
        return {}
    return {row["image_id"].strip(): row["caption"] for _, row in _read_csv(cfg.captions, ("image_id", "caption"))}


def stage_emit_samples(cfg, out: Path, g, ids, srp_records=None):
    """Stage-1 and stage-2 records from SRPs (and captions when supplied); returns (n1, n2)."""
    if srp_records is None:
        srp_records = _read_jsonl(out / SRP_FILE)
    by_image: Dict[str, list] = {}
    for r in srp_records:
        by_image.setdefault(r["image_id"], []).append(r)
    captions = _read_captions(cfg)
    s1, s2 = [], []
    for iid in ids:
        image_path = f"images/{iid}.jpg"
        subgraph_file = f"{SUBGRAPH_DIR}/{iid}.json"
        paths = [_guard("emit-samples", iid, annotate_path, g, r["node_ids"]) for r in by_image.get(iid, [])]
        s1 += _guard("emit-samples", iid, emit_training_samples, g, iid, paths, 1, image_path)
        s2 += _guard("emit-samples", iid, emit_training_samples, g, iid, paths, 2, image_path, subgraph_file)
        if iid in captions:
            c1, *c2 = caption_samples(image_path, captions[iid], subgraph_file)
            s1.append(c1)
            s2.extend(c2)
    _write_jsonl(out / STAGE1_FILE, s1)
    _write_jsonl(out / STAGE2_FILE, s2)
    return len(s1), len(s2)


def _read_perception(cfg):
    if not cfg.perception:
        return []
    rows = []
    for line, row in _read_csv(cfg.perception, ("image_id", "attribute", "score")):
        try:
            rows.append((row["image_id"].strip(), row["attribute"].strip(), float(row["score"])))
        except ValueError:
            raise DataError(f"{cfg.perception}:{line}: bad score {row['score']!r}") from None
    return sorted(rows)


def stage_gen_bench(cfg, out: Path, g, ids):
    """All benchmark instances this graph supports; unfillable ones go to the skip list with a reason."""
    instances, skipped = [], []

    def attempt(iid, task, fn, *args):
        try:
            instances.append(fn(*args))
        except bench.InsufficientEntities as exc:
            skipped.append({"image_id": iid, "task": task, "reason": str(exc)})
        except CityGraphError as exc:
            raise StageError("gen-bench", f"{task}:{iid}", exc) from exc

    labels = {iid: _guard("gen-bench", iid, bench.gen_geolocation_label, g, iid) for iid in ids}
    srp_path = out / SRP_FILE
    destinations = {}
    if srp_path.is_file():
        for r in _read_jsonl(srp_path):
            destinations.setdefault(r["image_id"], r["destination"])
    for iid in ids:
        attempt(iid, bench.GEOLOCATION, bench.gen_geolocation_instance, g, iid, labels, cfg.bench, cfg.city)
        if iid in destinations:
            attempt(iid, bench.IMAGE_RETRIEVAL, bench.gen_retrieval_instance, iid, destinations[iid], ids,
                    cfg.bench, cfg.city)
        for task in bench.GROUNDING_TASKS:
            attempt(iid, task, bench.gen_spatial_grounding, g, iid, task, cfg.bench, cfg.city)
    for iid, attribute, score in _read_perception(cfg):
        if iid not in labels:
            raise StageError("gen-bench", iid, DataError("perception score for an unknown image"))
        scheme = cfg.perception_scheme(attribute)
        attempt(iid, bench.perception_task(attribute), bench.gen_perception_instance, iid, score, scheme,
                cfg.city, cfg.bench, None, f"{SUBGRAPH_DIR}/{iid}.json")
    instances.sort(key=lambda i: i.id)
    _write_jsonl(out / INSTANCE_FILE, [i.to_json() for i in instances])
    _write_jsonl(out / SKIPPED_FILE, skipped)
    return instances, skipped


# --- whole builds -------------------------------------------------------------------------


def _count_lines(path: Path) -> int:
    with open(path, "rb") as fh:
        return sum(1 for _ in fh)


def write_manifest(cfg, out: Path, g, ids, srp_records, n1, n2):
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            files[p.relative_to(out).as_posix()] = _sha256(p)
    hops = [r["hops"] for r in srp_records]
    manifest = {
        "tool": {"name": "citygraph", "version": __version__},
        "seed": cfg.seed,
        "counts": {
            "nodes": _count_lines(out / GRAPH_DIR / "nodes.jsonl"),
            "edges": _count_lines(out / GRAPH_DIR / "edges.jsonl"),
            "images": len(ids),
            "subgraphs": len(list((out / SUBGRAPH_DIR).glob("*.json"))),
            "caption_prompts": len(list((out / PROMPT_DIR).glob("*.txt"))),
            "srps": _count_lines(out / SRP_FILE),
            "stage1_samples": _count_lines(out / STAGE1_FILE),
            "stage2_samples": _count_lines(out / STAGE2_FILE),
        },
        "stats": {"mean_srp_hops": round(sum(hops) / len(hops), 4) if hops else 0.0,
                  "graph": g.counters()},
        "files": files,
        "config": cfg.echo(),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _prepare_target(out: Path):
    if out.exists():
        if not out.is_dir():
            raise ConfigError(f"output path {out} exists and is not a directory")
        if any(out.iterdir()) and not (out / MANIFEST).is_file():
            raise ConfigError(f"refusing to replace non-empty directory {out} that holds no build manifest")
    out.parent.mkdir(parents=True, exist_ok=True)


def run_dataset_build(cfg: PipelineConfig) -> dict:
    """Run every dataset stage into a scratch directory, then move it into place.

    On any failure the scratch directory is removed and an existing output
    directory is left untouched.
    """
    target = Path(cfg.out)
    _prepare_target(target)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        g = stage_build_graph(cfg, tmp)
        stage_anchor_images(cfg, tmp, g)
        ids = image_ids(g)
        stage_extract_subgraphs(cfg, tmp, g, ids)
        stage_caption_prompts(cfg, tmp, g, ids)
        records = stage_srps(cfg, tmp, g, ids)
        n1, n2 = stage_emit_samples(cfg, tmp, g, ids, records)
        manifest = write_manifest(cfg, tmp, g, ids, records, n1, n2)
        os.chmod(tmp, 0o755)
        if target.exists():
            shutil.rmtree(target)
        os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    log.info("build complete: %s", manifest["counts"])
    return manifest


def run_benchmark_eval(cfg: PipelineConfig, out: Optional[Path] = None) -> bench.EvalReport:
    """Pre-flight, score and write report.json / report.csv. Nothing is written if pre-flight fails."""
    e = cfg.eval
    for name in ("instances", "query_embeddings", "candidate_embeddings"):
        if getattr(e, name) is None:
            raise ConfigError(f"eval.{name} is not configured")
    instances = bench.load_instances(e.instances)
    queries = bench.load_embeddings(e.query_embeddings)
    cands = bench.load_embeddings(e.candidate_embeddings)
    report = bench.evaluate(instances, queries, cands)
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_json()
    doc["config"] = {
        "instances": {"name": Path(e.instances).name, "sha256": _sha256(Path(e.instances))},
        "query_embeddings": {"name": Path(e.query_embeddings).name, "sha256": _sha256(Path(e.query_embeddings))},
        "candidate_embeddings": {"name": Path(e.candidate_embeddings).name,
                                 "sha256": _sha256(Path(e.candidate_embeddings))},
        "k": 5,
    }
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    return report
