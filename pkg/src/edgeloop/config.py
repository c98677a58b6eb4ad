"""Run configuration: defaults, TOML loading, overrides and fingerprinting.

The configuration is a two-level mapping ``section -> key -> value``.  Every
tunable default of the library appears here exactly once; the dataclass
parameter objects used by the stages are built from it.
"""

import copy
import hashlib
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import InvalidInputError

ENV_VAR = "EDGELOOP_CONFIG"

DEFAULTS = {
    "imgproc": {
        "nms_radius": 1,
        "slic_compactness": 10.0,
        "slic_iters": 10,
        "px_per_superpixel": 512,
    },
    "matching": {
        "grid_step": 4,
        "patch_radius": 4,
        "search_radius": 32,
        "levels": 3,
        "min_texture": 1e-4,
        "fwd_bwd_tol": 2.0,
        "refine_radius": 2,
        "min_score": 0.7,
        "min_count": 200,
        "slow_max_disp": 2.0,
        "large_mean_disp": 15.0,
        "trans_frac": 0.9,
        "trans_tol": 1.0,
    },
    "flow": {
        "k": 100,
        "alpha": 100.0,
        "kernel_bandwidth": 70.0,
        "mode": "la",
        "eps": 0.001,
        "cond_max": 1e8,
        "smooth_iters": 5,
        "smooth_alpha": 10.0,
    },
    "sedge": {
        "n_trees": 8,
        "max_depth": 64,
        "frac_per_tree": 0.25,
        "min_leaf": 8,
        "n_feature_probe": 1000,
        "n_thresholds": 8,
        "n_pairs": 256,
        "scales": [0.5, 1.0, 2.0],
        "sharpen": 2,
        "stride": 2,
        "pos_threshold": 0.8,
        "neg_threshold": 0.1,
        "exclusion_radius": 8,
    },
    "motionedge": {
        "tol": 3.0,
        "pre_threshold": 0.3,
    },
    "pipeline": {
        "iters": 3,
        "seed": 0,
        "max_frames": 2000,
        "sample_budget": 200000,
        "final_boost": 4.0,
        "max_fail_frac": 0.1,
        "min_samples": 100,
        "lazy": False,
        "val_root": "",
    },
    "eval": {
        "tol_frac": 0.0075,
        "motion_tol": 3.0,
        "n_thresholds": 99,
    },
}

HELP = {
    "imgproc.nms_radius": "non-maximum suppression radius (px)",
    "imgproc.slic_compactness": "SLIC compactness",
    "imgproc.slic_iters": "SLIC k-means iterations",
    "imgproc.px_per_superpixel": "image area per superpixel (px^2)",
    "matching.grid_step": "block-matcher grid spacing (px)",
    "matching.patch_radius": "NCC patch radius (px)",
    "matching.search_radius": "search radius at full resolution (px)",
    "matching.levels": "pyramid levels",
    "matching.min_texture": "minimum patch variance",
    "matching.fwd_bwd_tol": "forward-backward consistency tolerance (px)",
    "matching.refine_radius": "search radius on finer pyramid levels (px)",
    "matching.min_score": "minimum NCC score of a kept match",
    "matching.min_count": "minimum matches for a usable frame pair",
    "matching.slow_max_disp": "reject pairs whose max displacement is below this (px)",
    "matching.large_mean_disp": "reject pairs whose mean displacement exceeds this (px)",
    "matching.trans_frac": "reject pairs where one translation explains this fraction",
    "matching.trans_tol": "translation inlier tolerance (px)",
    "flow.k": "geodesic nearest matches per pixel",
    "flow.alpha": "edge weight in the geodesic cost",
    "flow.kernel_bandwidth": "interpolation kernel bandwidth",
    "flow.mode": "interpolator: la (locally affine) or nw (weighted average)",
    "flow.eps": "base geodesic cost",
    "flow.cond_max": "condition-number limit for affine fits",
    "flow.smooth_iters": "edge-stopped diffusion iterations after interpolation",
    "flow.smooth_alpha": "edge stopping strength of the diffusion",
    "sedge.n_trees": "trees per forest",
    "sedge.max_depth": "maximum tree depth",
    "sedge.frac_per_tree": "fraction of samples per tree",
    "sedge.min_leaf": "minimum samples per leaf",
    "sedge.n_feature_probe": "random features tried per node",
    "sedge.n_thresholds": "quantile thresholds tried per feature",
    "sedge.n_pairs": "pixel pairs for the structured-label mapping",
    "sedge.scales": "detection scales",
    "sedge.sharpen": "sharpening passes during detection",
    "sedge.stride": "detection stride (px, multiple of 2)",
    "sedge.pos_threshold": "supervision strength for positives",
    "sedge.neg_threshold": "dilated supervision below which negatives are drawn",
    "sedge.exclusion_radius": "negative exclusion radius around motion edges (px)",
    "motionedge.tol": "alignment tolerance (px)",
    "motionedge.pre_threshold": "motion-edge threshold before alignment",
    "pipeline.iters": "iterations T",
    "pipeline.seed": "master random seed",
    "pipeline.max_frames": "frames contributing samples per iteration",
    "pipeline.sample_budget": "total training samples per iteration",
    "pipeline.final_boost": "sample budget multiplier in the last iteration",
    "pipeline.max_fail_frac": "tolerated fraction of failing frames",
    "pipeline.min_samples": "minimum positives corpus-wide",
    "pipeline.lazy": "only recompute image edges for frames used next iteration",
    "pipeline.val_root": "validation set (images/ and gt/) for per-iteration ODS",
    "eval.tol_frac": "match tolerance as a fraction of the image diagonal",
    "eval.motion_tol": "match tolerance for motion-edge evaluation (px)",
    "eval.n_thresholds": "thresholds in the precision/recall sweep",
}


def defaults():
    return copy.deepcopy(DEFAULTS)


def _coerce(section, key, value):
    if section not in DEFAULTS:
        raise InvalidInputError(f"unknown config section [{section}]")
    if key not in DEFAULTS[section]:
        raise InvalidInputError(f"unknown config key {section}.{key}")
    ref = DEFAULTS[section][key]
    try:
        if isinstance(ref, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if isinstance(ref, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(ref, float):
            return float(value)
        if isinstance(ref, list):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return [float(v) for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise InvalidInputError(f"bad value for {section}.{key}: {value!r}") from None


def merge(cfg, overrides):
    """Apply ``{section: {key: value}}`` or ``{"section.key": value}`` overrides."""
    out = copy.deepcopy(cfg)
    for k, v in overrides.items():
        if isinstance(v, dict):
            for kk, vv in v.items():
                out[k][kk] = _coerce(k, kk, vv)
        else:
            if "." not in k:
                raise InvalidInputError(f"config key must be section.key, got {k!r}")
            s, kk = k.split(".", 1)
            out[s][kk] = _coerce(s, kk, v)
    return out


def load(path=None, overrides=None):
    """Defaults, then the TOML file (``path`` or $EDGELOOP_CONFIG), then overrides."""
    cfg = defaults()
    path = path or os.environ.get(ENV_VAR) or None
    if path:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except OSError as e:
            raise InvalidInputError(f"cannot read config {path}: {e}") from None
        except tomllib.TOMLDecodeError as e:
            raise InvalidInputError(f"bad config {path}: {e}") from None
        for s, body in doc.items():
            if not isinstance(body, dict):
                raise InvalidInputError(f"config entry {s!r} must be a [section]")
        cfg = merge(cfg, doc)
    if overrides:
        cfg = merge(cfg, overrides)
    return cfg


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))


def dumps(cfg):
    lines = []
    for s in DEFAULTS:
        lines.append(f"[{s}]")
        for k in DEFAULTS[s]:
            lines.append(f"{k} = {_toml_value(cfg[s][k])}")
        lines.append("")
    return "\n".join(lines)


def save(cfg, path):
    Path(path).write_text(dumps(cfg))


def fingerprint(cfg):
    """Stable hash of every setting that can change results."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def params_for(cls, section_dict, **rename):
    """Build a dataclass from the keys of a config section that it declares."""
    names = {f.name for f in fields(cls)}
    kw = {}
    for k, v in section_dict.items():
        k = rename.get(k, k)
        if k in names:
            kw[k] = v
    return cls(**kw)
