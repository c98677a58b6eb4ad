"""Motion edges as free supervision.

Edges of the colorized flow mark where objects move differently.  After
thinning they are snapped onto superpixel boundaries, which fixes their
position to image structure, and the strong ones become positive labels.
The script reports how many harvested positives sit on a true object
boundary.

    python demos/02_motion_edges.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from edgeloop.flow import interpolate, smooth_flow
from edgeloop.imageio import write_edge_png
from edgeloop.imgproc import gradient_magnitude
from edgeloop.matching import block_match
from edgeloop.motionedge import AlignParams, HarvestParams, compute_motion_edges, harvest_supervision
from edgeloop.sedge import GradientDetector
from edgeloop.synthetic import Scene, boundaries

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

hits = total = 0
for seed in range(5):
    scene = Scene(np.random.default_rng(seed))
    (a, labels), (b, _) = scene.render(0), scene.render(1)
    edges = gradient_magnitude(a)
    flow = smooth_flow(interpolate(block_match(a, b), edges, mode="nw", k=25), edges, n_iters=50)

    m = compute_motion_edges(GradientDetector(), flow, a, params=AlignParams(px_per_segment=128))
    positives, exclusion = harvest_supervision(m, HarvestParams(pos_threshold=0.6))
    write_edge_png(m.edges, out / f"motion_edges_{seed}.png")
    write_edge_png(positives, out / f"positives_{seed}.png")

    near = ndimage.binary_dilation(boundaries(labels), iterations=2)
    pos = positives.strength > 0
    hits += int((pos & near).sum())
    total += int(pos.sum())
    p = m.provenance
    print(f"scene {seed}: {p.matched} aligned ({p.shifted} moved), {p.discarded} dropped, "
          f"{pos.sum()} positives, {exclusion.mean():.0%} of pixels excluded from negatives")

print(f"positives within 2 px of a true boundary: {hits / max(total, 1):.1%}")
