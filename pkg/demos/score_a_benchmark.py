"""Generate benchmark instances for the fixture city and score them with the toy encoder.

Queries are graph embeddings of each image's subgraph and candidates are text
embeddings, both from an untrained encoder, so the numbers sit near chance.
The point is the plumbing: instances, embedding files, pre-flight, report.

python3 demos/score_a_benchmark.py
"""

import tempfile
from pathlib import Path

from citygraph import bench, pipeline
from citygraph.encoder.model import EncoderConfig, EncoderParams, graph_embedding, text_embedding
from citygraph.subgraph import extract_subgraph
from citygraph.synth import write_fixture_city

work = Path(tempfile.mkdtemp(prefix="citygraph-bench-"))
cfg = pipeline.load_config(write_fixture_city(work / "inputs"), out=str(work / "build"))
pipeline.run_dataset_build(cfg)
g = pipeline.load_graph(Path(cfg.out))
ids = pipeline.image_ids(g)
instances, skipped = pipeline.stage_gen_bench(cfg, Path(cfg.out), g, ids)
print(f"{len(instances)} instances, {len(skipped)} skipped; first skip reason: {skipped[0]['reason'] if skipped else '-'}")

params = EncoderParams.init(EncoderConfig(), seed=0)
graph_vecs = {iid: graph_embedding(extract_subgraph(g, iid, cfg.extract), params) for iid in ids}
queries, candidates = {}, {}
for inst in instances:
    viewpoint = inst.id.rsplit(":", 1)[1]
    queries[inst.id] = graph_vecs[viewpoint]
    vecs = text_embedding(inst.candidates, params)
    for cid, vec in zip(inst.candidate_ids, vecs):
        candidates.setdefault(cid, vec)

report_dir = work / "report"
bench.write_instances(work / "instances.jsonl", instances)
bench.write_embeddings(work / "queries.jsonl", queries)
bench.write_embeddings(work / "candidates.jsonl", candidates)
cfg.eval = pipeline.EvalConfig(str(work / "instances.jsonl"), str(work / "queries.jsonl"),
                               str(work / "candidates.jsonl"))
report = pipeline.run_benchmark_eval(cfg, report_dir)
print((report_dir / "report.csv").read_text())
