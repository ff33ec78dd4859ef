"""Build a small synthetic city end to end and look at what comes out.

Run from anywhere: python3 demos/build_a_city.py [workdir]
"""

import json
import sys
import tempfile
from pathlib import Path

from citygraph.pipeline import load_config, run_dataset_build
from citygraph.synth import write_fixture_city

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="citygraph-demo-"))
config = write_fixture_city(work / "inputs", seed=0)
print(f"inputs written under {config.parent}")

manifest = run_dataset_build(load_config(config, out=str(work / "build")))
print("counts:", json.dumps(manifest["counts"], indent=2))
print(f"mean SRP length: {manifest['stats']['mean_srp_hops']} hops")

build = work / "build"
first_image = sorted((build / "descriptions").iterdir())[0]
print(f"\n--- description of {first_image.stem} ---")
print(first_image.read_text())

print("--- its reasoning paths ---")
for line in (build / "srps.jsonl").read_text().splitlines():
    rec = json.loads(line)
    if rec["image_id"] == first_image.stem:
        print(f"[{rec['hops']} hops to {rec['destination']}]")
        print(rec["srp"], "\n")
