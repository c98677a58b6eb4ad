"""The full learning loop on a small synthetic video corpus.

Starting from gradient edges, each iteration computes edge-aware flow,
harvests motion edges and trains a new forest from scratch.  No true edges
are used for training; the held-out set only measures progress.

    python demos/04_learning_loop.py [out_dir] [n_sequences]

The default 200 sequences take about half an hour on one core.  Much
smaller corpora give the forest too few positives to beat the gradient.
"""

import json
import logging
import sys
from pathlib import Path

from edgeloop import config as C
from edgeloop.pipeline import ingest, run
from edgeloop.synthetic import SceneParams, make_corpus

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
n_seq = int(sys.argv[2]) if len(sys.argv) > 2 else 200

make_corpus(out / "corpus", n_sequences=n_seq, frames_per_sequence=2, seed=3, n_val=24,
            params=SceneParams(height=128, width=128, radius=(20.0, 40.0)))
cfg = C.load(overrides={
    # small images: smaller superpixels, one detection scale, cheaper flow
    "imgproc.px_per_superpixel": 128,
    "sedge.scales": [1.0],
    "flow.mode": "nw",
    "flow.k": 25,
    "flow.smooth_iters": 50,
    "sedge.pos_threshold": 0.4,
    "pipeline.sample_budget": 100000,
    "pipeline.final_boost": 1.0,
    "pipeline.val_root": str(out / "corpus" / "val"),
})
ds = ingest(out / "corpus", out / "run", cfg)
print(f"{len(ds.pairs)} frame pairs accepted, {len(ds.rejected)} rejected")
run(ds, 3, cfg)

for m in json.loads((out / "run" / "metrics.json").read_text()):
    print(f"iteration {m['iteration']}: validation ODS {m['val']['ods']:.3f}, positives {m.get('positives', '-')}")
