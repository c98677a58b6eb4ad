"""Train a structured forest and benchmark it.

Samples come from true object boundaries of synthetic scenes, so this is
the supervised upper bound for what motion edges can teach.  The forest is
compared with the raw gradient on held-out scenes using the boundary
benchmark (ODS, OIS, AP).

    python demos/03_train_and_evaluate.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from edgeloop.evaluation import benchmark
from edgeloop.imageio import write_edge_png
from edgeloop.imgproc import gradient_magnitude
from edgeloop.sedge import SampleSet, detect, extract_samples, save_model, train_forest
from edgeloop.synthetic import Scene, boundaries

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

rng = np.random.default_rng(0)
sets = []
for i in range(60):
    img, lab = Scene(np.random.default_rng(rng.integers(2**63))).render(0)
    sets.append(extract_samples(img, boundaries(lab).astype(float), n_pos=150, n_neg=150, rng=i))
samples = SampleSet.concat(sets)
print(f"{samples.n_pos} positive and {samples.n_neg} negative patches")

forest = train_forest(samples, n_trees=4, n_feature_probe=500, seed=0)
save_model(forest, out / "forest.sedg")

val = [Scene(np.random.default_rng(1000 + v)).render(0) for v in range(12)]
gts = [boundaries(lab) for _, lab in val]
fe = [detect(forest, im, scales=(1.0,)) for im, _ in val]
write_edge_png(fe[0], out / "forest_edges.png")
for name, preds in [("gradient", [gradient_magnitude(im) for im, _ in val]), ("forest", fe)]:
    r = benchmark(preds, gts)
    print(f"{name:>8}: ODS {r.ods:.3f}  OIS {r.ois:.3f}  AP {r.ap:.3f}")
