"""The iterative loop: flow from fixed matches, motion edges, forest training.

Run directory layout::

    run/config.toml                resolved configuration
    run/manifest.json              accepted and rejected frame pairs
    run/matches/<id>.txt           fixed matches, computed once
    run/0/state.json               gradient-detector state
    run/<t>/model.sedg             forest trained at iteration t
    run/<t>/frames/<id>.flo        flow estimated with the previous edges
    run/<t>/frames/<id>.medge.png  aligned motion edges (+ .medge.json)
    run/<t>/frames/<id>.edgm       image edges of the new detector
    run/<t>/state.json             written last; marks the iteration complete
    run/metrics.json               per-iteration report

Every stage reads its inputs back from disk, so resuming from any complete
``state.json`` reproduces later iterations bit for bit.
"""

import hashlib
import json
import logging
import os
import re
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import config as C
from .errors import EdgeloopError, IngestionError, InvalidInputError, IterationError
from .evaluation import benchmark, default_thresholds, load_gt_dir
from .flow import InterpParams, interpolate, read_flo, smooth_flow, write_flo
from .imageio import read_edgm, read_image, write_edgm
from .imgproc import gradient_magnitude
from .matching import BlockMatchParams, FilterParams, block_match, filter_frame_pair, read_matches, write_matches
from .motionedge import AlignParams, HarvestParams, compute_motion_edges, harvest_supervision, save_motion_edges
from .sedge import ForestParams, GradientDetector, SampleSet, detect, extract_samples, load_model, save_model, train_forest

log = logging.getLogger("edgeloop")

IMAGE_EXTS = {".png", ".pgm", ".ppm", ".jpg", ".jpeg", ".bmp"}
SKIP_DIRS = {"gt", "val", "run", "matches"}


@dataclass
class FramePair:
    id: str
    frame_a: str
    frame_b: str
    matches: Optional[str] = None


@dataclass
class Dataset:
    root: str
    run_dir: str
    pairs: List[FramePair]
    manifest_hash: str
    rejected: Dict[str, str] = field(default_factory=dict)


@dataclass
class IterationState:
    iteration: int
    model: Optional[str]                      # relative to run dir; None means gradient
    frames: Dict[str, dict] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    config_fingerprint: str = ""
    manifest_hash: str = ""

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True, indent=1) + "\n")

    @staticmethod
    def load(path):
        return IterationState(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# helpers


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _safe_id(s):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", s).strip("_") or "frame"


def frame_seed(seed, iteration, frame_id):
    """Independent random stream for one frame at one iteration."""
    return np.random.SeedSequence([int(seed), int(iteration), zlib.crc32(frame_id.encode())])


def _map(fn, items, jobs):
    """Ordered map, serial or across processes."""
    if jobs and jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))
    return [fn(x) for x in items]


def matching_params(cfg):
    return C.params_for(BlockMatchParams, cfg["matching"])


def filter_params(cfg):
    return C.params_for(FilterParams, cfg["matching"])


def interp_params(cfg):
    return C.params_for(InterpParams, cfg["flow"])


def forest_params(cfg, iteration):
    p = C.params_for(ForestParams, cfg["sedge"])
    # one forest per iteration, each with its own tree streams
    p.seed = int(np.random.SeedSequence([cfg["pipeline"]["seed"], iteration]).generate_state(1)[0])
    return p


def align_params(cfg):
    return AlignParams(
        tol=cfg["motionedge"]["tol"],
        pre_threshold=cfg["motionedge"]["pre_threshold"],
        px_per_segment=cfg["imgproc"]["px_per_superpixel"],
        compactness=cfg["imgproc"]["slic_compactness"],
        slic_iters=cfg["imgproc"]["slic_iters"],
    )


def detect_opts(cfg):
    s = cfg["sedge"]
    return {"scales": tuple(s["scales"]), "sharpen": s["sharpen"], "stride": s["stride"]}


# ---------------------------------------------------------------------------
# ingestion


def _scan_pairs(root):
    root = Path(root)
    dirs = [root] + sorted(d for d in root.rglob("*") if d.is_dir() and not (set(d.relative_to(root).parts) & SKIP_DIRS))
    pairs = []
    for d in dirs:
        frames = sorted(f for f in d.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_EXTS)
        for a, b in zip(frames[:-1], frames[1:]):
            rel = a.relative_to(root)
            pid = _safe_id("_".join(rel.with_suffix("").parts))
            pairs.append(FramePair(pid, str(rel), str(b.relative_to(root))))
    return pairs


def _read_pair_list(root, path):
    pairs = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise IngestionError(f"{path}: line {n}: expected 'frame_a frame_b [matches] [id]'")
        a, b = parts[0], parts[1]
        m = parts[2] if len(parts) > 2 and parts[2] != "-" else None
        pid = _safe_id(parts[3]) if len(parts) > 3 else _safe_id(Path(a).with_suffix("").as_posix().replace("/", "_"))
        pairs.append(FramePair(pid, a, b, m))
    return pairs


def _ingest_one(args):
    root, run_dir, pair, mp, fp = args
    root, run_dir = Path(root), Path(run_dir)
    try:
        a = read_image(root / pair.frame_a)
        if pair.matches:
            ms = read_matches(root / pair.matches, (a.shape[1], a.shape[0]), (a.shape[1], a.shape[0]))
        else:
            b = read_image(root / pair.frame_b)
            ms = block_match(a, b, mp)
    except (OSError, EdgeloopError, ValueError) as e:
        return pair, None, f"unreadable: {e}"
    out = run_dir / "matches" / f"{pair.id}.txt"
    write_matches(ms, out)
    v = filter_frame_pair(ms, fp)
    return pair, str(out.relative_to(run_dir)), (None if v.accept else v.reason)


def ingest(root, run_dir, cfg=None, jobs=1):
    """Find frame pairs under ``root``, fix their matches and filter them.

    Pairs come from ``root/pairs.txt`` when present (``frame_a frame_b
    [matches|-] [id]`` per line, paths relative to root), otherwise from
    consecutive image files of each directory in filename order.  Matches
    are computed once and stored in the run directory; an existing manifest
    whose input hashes still agree is reused as is.
    """
    cfg = cfg or C.defaults()
    root, run_dir = Path(root), Path(run_dir)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    pairs = _read_pair_list(root, root / "pairs.txt") if (root / "pairs.txt").exists() else _scan_pairs(root)
    if not pairs:
        raise IngestionError(f"no frame pairs found under {root}")
    ids = [p.id for p in pairs]
    if len(set(ids)) != len(ids):
        raise IngestionError("duplicate frame ids in dataset")
    for p in pairs:
        for f in (p.frame_a, p.frame_b) + ((p.matches,) if p.matches else ()):
            if not (root / f).is_file():
                raise IngestionError(f"missing file {root / f}")

    inputs = {p.id: [_sha(root / p.frame_a), _sha(root / p.frame_b), _sha(root / p.matches) if p.matches else None]
              for p in pairs}
    settings = {k: cfg["matching"][k] for k in sorted(cfg["matching"])}
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("inputs") == inputs and old.get("settings") == settings:
            ok = all((run_dir / e["matches"]).is_file() and _sha(run_dir / e["matches"]) == e["matches_sha"]
                     for e in old["accepted"])
            if ok:
                return _dataset_from_manifest(root, run_dir, old)

    (run_dir / "matches").mkdir(parents=True, exist_ok=True)
    mp, fp = matching_params(cfg), filter_params(cfg)
    results = _map(_ingest_one, [(str(root), str(run_dir), p, mp, fp) for p in pairs], jobs)
    accepted, rejected = [], {}
    for pair, mpath, reason in results:
        if reason is None:
            accepted.append({**asdict(pair), "matches": mpath, "matches_sha": _sha(run_dir / mpath)})
        else:
            rejected[pair.id] = reason
            log.info("reject %s: %s", pair.id, reason)
    manifest = {"root": str(root), "inputs": inputs, "settings": settings, "accepted": accepted,
                "rejected": rejected}
    body = {k: manifest[k] for k in ("inputs", "settings", "accepted", "rejected")}
    manifest["hash"] = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    if not accepted:
        reasons = {}
        for r in rejected.values():
            reasons[r.split(":")[0]] = reasons.get(r.split(":")[0], 0) + 1
        raise IngestionError(f"zero accepted pairs out of {len(pairs)} (rejections: {reasons})")
    return _dataset_from_manifest(root, run_dir, manifest)


def _dataset_from_manifest(root, run_dir, m):
    pairs = [FramePair(e["id"], e["frame_a"], e["frame_b"], e["matches"]) for e in m["accepted"]]
    if not pairs:
        raise IngestionError("zero accepted pairs")
    return Dataset(str(root), str(run_dir), pairs, m["hash"], dict(m["rejected"]))


# ---------------------------------------------------------------------------
# one iteration


def _select(ds, cfg, iteration):
    """Frames contributing training samples at ``iteration`` (sorted ids)."""
    n = len(ds.pairs)
    cap = int(cfg["pipeline"]["max_frames"])
    if n <= cap:
        return list(range(n))
    rng = np.random.default_rng([int(cfg["pipeline"]["seed"]), int(iteration), 1])
    return sorted(rng.choice(n, cap, replace=False).tolist())


def _prev_edges(ds, prev, pair):
    if prev.iteration == 0:
        return gradient_magnitude(read_image(Path(ds.root) / pair.frame_a))
    rec = prev.frames.get(pair.id, {})
    if "edgm" not in rec:
        raise IterationError(f"frame {pair.id} has no edges from iteration {prev.iteration}")
    return read_edgm(Path(ds.run_dir) / rec["edgm"])


def _load_detector(ds, state):
    if state.model is None:
        return GradientDetector()
    return load_model(Path(ds.run_dir) / state.model)


def _frame_job(args):
    """Flow, motion edges and samples for one frame.  Returns (id, record, samples, provenance, error)."""
    ds, prev, pair, cfg, t, n_pos, n_neg = args
    try:
        run = Path(ds.run_dir)
        out = run / str(t) / "frames"
        img = read_image(Path(ds.root) / pair.frame_a)
        ms = read_matches(run / pair.matches, (img.shape[1], img.shape[0]), (img.shape[1], img.shape[0]))
        e_prev = _prev_edges(ds, prev, pair)
        f = interpolate(ms, e_prev, interp_params(cfg))
        f = smooth_flow(f, e_prev, cfg["flow"]["smooth_iters"], cfg["flow"]["smooth_alpha"])
        write_flo(f, out / f"{pair.id}.flo")
        # reload so the motion edges see exactly what a resumed run would
        f = read_flo(out / f"{pair.id}.flo")
        det = _load_detector(ds, prev)
        m = compute_motion_edges(det, f, img, cfg["imgproc"]["nms_radius"], align_params(cfg),
                                 iteration=t, frame_id=pair.id, **detect_opts(cfg))
        png, js = save_motion_edges(m, out / f"{pair.id}.medge.png")
        sup, excl = harvest_supervision(m, HarvestParams(cfg["sedge"]["pos_threshold"],
                                                        cfg["sedge"]["exclusion_radius"]))
        rng = np.random.default_rng(frame_seed(cfg["pipeline"]["seed"], t, pair.id))
        s = extract_samples(img, sup, n_pos=n_pos, n_neg=n_neg, pos_threshold=cfg["sedge"]["pos_threshold"],
                            neg_threshold=cfg["sedge"]["neg_threshold"], exclusion=excl, rng=rng,
                            labels=m.edges.strength > 0)
        rec = {"flo": str((out / f"{pair.id}.flo").relative_to(run)), "medge_png": str(png.relative_to(run)),
               "medge_json": str(js.relative_to(run))}
        return pair.id, rec, s, asdict(m.provenance), None
    except (EdgeloopError, ValueError, OSError, np.linalg.LinAlgError) as e:
        return pair.id, None, None, None, f"{type(e).__name__}: {e}"


def _edge_job(args):
    ds, model_rel, pair, cfg, t = args
    run = Path(ds.run_dir)
    forest = load_model(run / model_rel)
    img = read_image(Path(ds.root) / pair.frame_a)
    e = detect(forest, img, **detect_opts(cfg))
    path = run / str(t) / "frames" / f"{pair.id}.edgm"
    write_edgm(e, path)
    return pair.id, str(path.relative_to(run))


def _val_set(cfg):
    root = cfg["pipeline"]["val_root"]
    if not root:
        return None
    root = Path(root)
    names = sorted(f for f in (root / "images").iterdir() if f.suffix.lower() in IMAGE_EXTS)
    if not names:
        return None
    return [(read_image(f), load_gt_dir(root / "gt", f.stem)) for f in names]


def _val_job(args):
    det_path, img, cfg = args
    det = GradientDetector() if det_path is None else load_model(det_path)
    return detect(det, img, **detect_opts(cfg))


def validate(ds, state, cfg, jobs=1):
    """Benchmark the state's detector on the validation split, if any."""
    val = _val_set(cfg)
    if val is None:
        return None
    det_path = None if state.model is None else str(Path(ds.run_dir) / state.model)
    preds = _map(_val_job, [(det_path, img, cfg) for img, _ in val], jobs)
    r = benchmark(preds, [g for _, g in val], tol=None, thresholds=default_thresholds(cfg["eval"]["n_thresholds"]),
                  nms_radius=cfg["imgproc"]["nms_radius"])
    return {"ods": r.ods, "ois": r.ois, "ap": r.ap, "p20": r.p20}


def initial_state(ds, cfg, jobs=1):
    st = IterationState(0, None, {}, {}, C.fingerprint(cfg), ds.manifest_hash)
    v = validate(ds, st, cfg, jobs)
    st.metrics = {"iteration": 0, "val": v}
    d = Path(ds.run_dir) / "0"
    d.mkdir(parents=True, exist_ok=True)
    st.save(d / "state.json")
    return st


def run_iteration(ds, prev, cfg, jobs=1, final=False):
    """Algorithm step t = prev.iteration + 1; persists everything before returning."""
    t0 = time.time()
    t = prev.iteration + 1
    fpr = C.fingerprint(cfg)
    if prev.config_fingerprint and prev.config_fingerprint != fpr:
        raise IterationError("configuration changed since the previous iteration")
    if prev.manifest_hash and prev.manifest_hash != ds.manifest_hash:
        raise IterationError("dataset manifest changed since the previous iteration")
    run = Path(ds.run_dir)
    out = run / str(t)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    pc = cfg["pipeline"]

    chosen = _select(ds, cfg, t)
    budget = pc["sample_budget"] * (pc["final_boost"] if final else 1.0)
    per = max(1, int(np.ceil(budget / (2 * len(chosen)))))
    jobs_args = [(ds, prev, ds.pairs[i], cfg, t, per, per) for i in chosen]
    results = _map(_frame_job, jobs_args, jobs)

    frames, sets, failed = {}, [], {}
    totals = {"matched": 0, "shifted": 0, "discarded": 0, "collisions": 0}
    for fid, rec, s, prov, err in results:
        if err is not None:
            failed[fid] = err
            log.warning("iteration %d: frame %s failed: %s", t, fid, err)
            continue
        frames[fid] = rec
        sets.append(s)
        for k in totals:
            totals[k] += prov[k]
    if len(failed) > pc["max_fail_frac"] * len(chosen):
        raise IterationError(f"{len(failed)} of {len(chosen)} frames failed at iteration {t}")
    samples = SampleSet.concat(sets)
    if samples.n_pos < pc["min_samples"]:
        raise IterationError(
            f"iteration {t}: only {samples.n_pos} positives (need {pc['min_samples']}); "
            f"{samples.n_neg} negatives from {len(sets)} frames, alignment {totals}")
    # positives are scarce on thin edges, so the negatives are cut down to match
    samples = samples.balanced(frame_seed(pc["seed"], t, "balance"))
    n_pos, n_neg = samples.n_pos, samples.n_neg
    forest = train_forest(samples, forest_params(cfg, t), jobs=jobs)
    model_rel = f"{t}/model.sedg"
    save_model(forest, run / model_rel)
    del samples, sets, forest

    if pc["lazy"] and not final:
        targets = [ds.pairs[i] for i in _select(ds, cfg, t + 1)]
    else:
        targets = ds.pairs
    for fid, path in _map(_edge_job, [(ds, model_rel, p, cfg, t) for p in targets], jobs):
        frames.setdefault(fid, {})["edgm"] = path

    st = IterationState(t, model_rel, frames, {}, fpr, ds.manifest_hash)
    st.metrics = {
        "iteration": t,
        "frames_used": len(chosen),
        "frames_failed": len(failed),
        "positives": n_pos,
        "negatives": n_neg,
        "alignment": totals,
        "val": validate(ds, st, cfg, jobs),
        "seconds": round(time.time() - t0, 1),
    }
    st.save(out / "state.json")
    return st


def _complete_state(run_dir, t, cfg, ds):
    p = Path(run_dir) / str(t) / "state.json"
    if not p.exists():
        return None
    st = IterationState.load(p)
    if st.config_fingerprint != C.fingerprint(cfg) or st.manifest_hash != ds.manifest_hash:
        return None
    return st


def run(ds, T, cfg, jobs=1):
    """Fold ``run_iteration`` T times, resuming from complete iterations on disk."""
    if T < 1:
        raise InvalidInputError("T must be >= 1")
    # the last iteration gets the boosted budget, so T is part of the fingerprint
    cfg = C.merge(cfg, {"pipeline.iters": int(T)})
    run_dir = Path(ds.run_dir)
    C.save(cfg, run_dir / "config.toml")
    state = _complete_state(run_dir, 0, cfg, ds) or initial_state(ds, cfg, jobs)
    report = [state.metrics]
    for t in range(1, T + 1):
        done = _complete_state(run_dir, t, cfg, ds)
        if done is not None:
            log.info("iteration %d already complete, skipping", t)
            state = done
        else:
            log.info("iteration %d", t)
            state = run_iteration(ds, state, cfg, jobs=jobs, final=(t == T))
        report.append(state.metrics)
        (run_dir / "metrics.json").write_text(json.dumps(report, indent=1) + "\n")
    return state


def default_jobs():
    return os.cpu_count() or 1
