"""Motion edges: detect boundaries in colorized flow, snap them to superpixels."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .bipartite import candidate_pairs, ordered_matching, pixel_coords
from .errors import InvalidInputError
from .flow import flow_to_rgb
from .imageio import read_edge_png, write_edge_png
from .imgproc import EdgeMap, as_image, nms, slic, superpixel_edges
from .sedge.detect import detect


@dataclass
class AlignParams:
    tol: float = 3.0
    pre_threshold: float = 0.3
    px_per_segment: int = 512
    compactness: float = 10.0
    slic_iters: int = 10


@dataclass
class HarvestParams:
    pos_threshold: float = 0.8
    exclusion_radius: int = 8


@dataclass
class Provenance:
    iteration: int = 0
    frame_id: str = ""
    matched: int = 0
    shifted: int = 0
    discarded: int = 0
    collisions: int = 0


@dataclass
class MotionEdgeMap:
    """Aligned, thinned motion edges plus how they were obtained.

    ``raw`` keeps the thresholded motion edges before alignment; they define
    the negative-exclusion zone when harvesting.
    """

    edges: EdgeMap
    provenance: Provenance = field(default_factory=Provenance)
    raw: np.ndarray = None

    def __post_init__(self):
        if not self.edges.thinned:
            raise InvalidInputError("motion edge maps must be thinned")
        if self.raw is None:
            self.raw = self.edges.strength.copy()


def motion_edges(det, f, **detect_opts):
    """Edges of the colorized flow under detector ``det``."""
    return detect(det, flow_to_rgb(f), **detect_opts)


def n_superpixels(shape, px_per_segment=512):
    return max(1, int(round(shape[0] * shape[1] / px_per_segment)))


def align_motion_edges(g, img, tol=3.0, params=None, iteration=0, frame_id="", labels=None):
    """Move thinned motion-edge pixels onto nearby superpixel boundaries.

    Motion pixels at or above ``pre_threshold`` are matched one-to-one to
    superpixel-edge pixels within ``tol`` (strongest first, nearest partner
    preferred).  Matched pixels take their partner's location with their own
    strength; unmatched ones are dropped.
    """
    p = params or AlignParams(tol=tol)
    if not isinstance(g, EdgeMap) or not g.thinned:
        raise InvalidInputError("align_motion_edges needs a thinned EdgeMap (apply nms first)")
    img = as_image(img)
    if img.shape[:2] != g.shape:
        raise InvalidInputError("motion edges and image sizes differ")
    s = np.where(g.strength >= p.pre_threshold, g.strength, 0.0)
    if labels is None:
        labels = slic(img, n_superpixels(g.shape, p.px_per_segment), p.compactness, p.slic_iters)
    sp = superpixel_edges(labels).strength > 0

    left = pixel_coords(s > 0)
    right = pixel_coords(sp)
    strength = s[left[:, 0], left[:, 1]] if len(left) else np.zeros(0)
    i, j, _ = candidate_pairs(left, right, p.tol)
    order = np.lexsort((np.arange(len(left)), -strength))
    partner = ordered_matching(len(left), len(right), i, j, order)

    out = np.zeros(g.shape)
    ok = partner >= 0
    dst = right[partner[ok]]
    np.maximum.at(out, (dst[:, 0], dst[:, 1]), strength[ok])
    matched = int(ok.sum())
    shifted = int(np.any(dst != left[ok], axis=1).sum())
    prov = Provenance(
        iteration=int(iteration), frame_id=str(frame_id), matched=matched, shifted=shifted,
        discarded=int(len(left) - matched), collisions=int(matched - len(np.unique(dst, axis=0))),
    )
    return MotionEdgeMap(EdgeMap(out, thinned=True), prov, raw=s)


def normalize_peak(g):
    """Scale a thinned map so its strongest pixel is 1 (all-zero maps unchanged)."""
    m = g.strength.max() if g.strength.size else 0.0
    if m <= 0:
        return g
    return EdgeMap(g.strength / m, thinned=g.thinned, orientation=g.orientation)


def compute_motion_edges(det, f, img, nms_radius=1, params=None, iteration=0, frame_id="", **detect_opts):
    """Detect, thin and align: the full motion-edge stage for one frame.

    The thinned map is scaled to peak 1 before thresholding so that the
    alignment and harvesting thresholds mean the same for every detector.
    """
    g = normalize_peak(nms(motion_edges(det, f, **detect_opts), nms_radius))
    return align_motion_edges(g, img, params=params, iteration=iteration, frame_id=frame_id)


def harvest_supervision(aligned, params=None):
    """Positive map and negative-exclusion mask from aligned motion edges.

    The supervision keeps aligned strengths at or above ``pos_threshold``.
    The exclusion mask covers every motion-edge pixel (aligned or raw, any
    strength) dilated by ``exclusion_radius``.
    """
    p = params or HarvestParams()
    s = aligned.edges.strength
    sup = np.where(s >= p.pos_threshold, s, 0.0)
    anyedge = (s > 0) | (np.asarray(aligned.raw) > 0)
    r = int(p.exclusion_radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disk = yy * yy + xx * xx <= r * r
    excl = ndimage.binary_dilation(anyedge, structure=disk) if anyedge.any() else anyedge
    return EdgeMap(sup, thinned=True), excl


def save_motion_edges(m, png_path, json_path=None):
    png_path = Path(png_path)
    json_path = Path(json_path) if json_path else png_path.with_suffix(".json")
    write_edge_png(m.edges, png_path)
    json_path.write_text(json.dumps(asdict(m.provenance), sort_keys=True, indent=1) + "\n")
    return png_path, json_path


def load_motion_edges(png_path, json_path=None):
    png_path = Path(png_path)
    json_path = Path(json_path) if json_path else png_path.with_suffix(".json")
    e = read_edge_png(png_path)
    prov = Provenance(**json.loads(json_path.read_text()))
    return MotionEdgeMap(EdgeMap(e.strength, thinned=True), prov)
