"""Command-line entry point: one subcommand per stage.

Exit status is 0 on success, 1 for usage errors and 2 for data errors.
Diagnostics go to standard error.  Every config key can be set with
``--section.key VALUE``; ``--config FILE`` (or $EDGELOOP_CONFIG) supplies a
TOML file underneath those flags.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .errors import EdgeloopError, InvalidInputError

log = logging.getLogger("edgeloop")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p):
    g = p.add_argument_group("configuration (section.key, default in brackets)")
    g.add_argument("--config", help=f"TOML config file (default: ${C.ENV_VAR})")
    for s, body in C.DEFAULTS.items():
        for k, v in body.items():
            shown = " ".join(map(str, v)) if isinstance(v, list) else v
            g.add_argument(f"--{s}.{k}", dest=f"cfg:{s}.{k}", metavar="V",
                           nargs="+" if isinstance(v, list) else None,
                           help=f"{C.HELP.get(f'{s}.{k}', '')} [{shown}]")


def _resolve_config(args):
    over = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    return C.load(args.config, over)


def _edges_arg(path):
    from .imageio import read_edge_png, read_edgm

    p = Path(path)
    return read_edgm(p) if p.suffix.lower() == ".edgm" else read_edge_png(p)


def _detector(spec):
    from .sedge import GradientDetector, load_model

    return GradientDetector() if spec == "gradient" else load_model(spec)


def _detect_opts(cfg):
    from .pipeline import detect_opts

    return detect_opts(cfg)


# ---------------------------------------------------------------------------
# subcommands


def cmd_match(args, cfg):
    from .imageio import read_image
    from .matching import block_match, write_matches
    from .pipeline import matching_params

    ms = block_match(read_image(args.a), read_image(args.b), matching_params(cfg))
    write_matches(ms, args.out)
    log.info("%d matches", len(ms))


def cmd_filter(args, cfg):
    from .matching import filter_frame_pair, read_matches
    from .pipeline import filter_params

    dims = None
    if args.image:
        from .imageio import read_image

        im = read_image(args.image)
        dims = (im.shape[1], im.shape[0])
    ms = read_matches(args.matches, dims, dims)
    v = filter_frame_pair(ms, filter_params(cfg))
    _emit({"accept": v.accept, "reason": v.reason, **v.stats}, args.out)


def cmd_flow(args, cfg):
    from .flow import interpolate, smooth_flow, write_flo
    from .matching import read_matches
    from .pipeline import interp_params

    e = _edges_arg(args.edges)
    dims = (e.width, e.height)
    ms = read_matches(args.matches, dims, dims)
    f = interpolate(ms, e, interp_params(cfg))
    f = smooth_flow(f, e, cfg["flow"]["smooth_iters"], cfg["flow"]["smooth_alpha"])
    write_flo(f, args.out)


def cmd_colorize(args, cfg):
    from .flow import flow_to_rgb, read_flo
    from .imageio import write_image

    write_image(flow_to_rgb(read_flo(args.flow), args.max_mag), args.out)


def cmd_motion_edges(args, cfg):
    from .flow import read_flo
    from .imageio import read_image
    from .motionedge import compute_motion_edges, save_motion_edges
    from .pipeline import align_params

    m = compute_motion_edges(_detector(args.model), read_flo(args.flow), read_image(args.image),
                             cfg["imgproc"]["nms_radius"], align_params(cfg), iteration=args.iteration,
                             frame_id=args.frame_id or Path(args.image).stem, **_detect_opts(cfg))
    save_motion_edges(m, args.out, args.json)


def cmd_detect(args, cfg):
    from .imageio import read_image, write_edge_png, write_edgm
    from .imgproc import nms
    from .sedge import detect

    e = detect(_detector(args.model), read_image(args.inp), **_detect_opts(cfg))
    if args.nms:
        e = nms(e, cfg["imgproc"]["nms_radius"])
    write_edge_png(e, args.out)
    if args.edgm:
        write_edgm(e, args.edgm)


def _read_sample_manifest(path):
    base = Path(path).parent
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise InvalidInputError(f"{path}: line {n}: expected 'image supervision [exclusion]'")
        rows.append([base / q for q in parts[:3]])
    if not rows:
        raise InvalidInputError(f"{path}: no entries")
    return rows


def cmd_train(args, cfg):
    from .imageio import read_edge_png, read_image
    from .pipeline import frame_seed
    from .sedge import ForestParams, SampleSet, extract_samples, save_model, train_forest

    rows = _read_sample_manifest(args.samples)
    s = cfg["sedge"]
    per = max(1, int(np.ceil(cfg["pipeline"]["sample_budget"] / (2 * len(rows)))))
    sets = []
    for row in rows:
        img = read_image(row[0])
        sup = read_edge_png(row[1])
        excl = read_edge_png(row[2]).strength > 0 if len(row) > 2 else None
        rng = np.random.default_rng(frame_seed(args.seed, 0, str(row[0].name)))
        sets.append(extract_samples(img, sup, n_pos=per, n_neg=per, pos_threshold=s["pos_threshold"],
                                    neg_threshold=s["neg_threshold"], exclusion=excl,
                                    exclusion_radius=s["exclusion_radius"], rng=rng))
    samples = SampleSet.concat(sets).balanced(frame_seed(args.seed, 0, "balance"))
    log.info("%d positives, %d negatives", samples.n_pos, samples.n_neg)
    p = C.params_for(ForestParams, s)
    p.seed = args.seed
    save_model(train_forest(samples, p, jobs=args.jobs), args.out)


def cmd_pipeline(args, cfg):
    from .pipeline import ingest, run

    cfg = C.merge(cfg, {"pipeline.seed": args.seed, **({"pipeline.iters": args.iters} if args.iters else {})})
    ds = ingest(args.root, args.out, cfg, jobs=args.jobs)
    log.info("%d accepted pairs, %d rejected", len(ds.pairs), len(ds.rejected))
    st = run(ds, cfg["pipeline"]["iters"], cfg, jobs=args.jobs)
    _emit({"iteration": st.iteration, "model": str(Path(args.out) / st.model), "metrics": st.metrics}, None)


def cmd_eval_edges(args, cfg):
    from .evaluation import benchmark, default_thresholds, load_gt_dir
    from .imageio import read_edge_png

    pred_dir = Path(args.pred)
    files = [pred_dir] if pred_dir.is_file() else sorted(pred_dir.glob("*.png"))
    if not files:
        raise InvalidInputError(f"no predictions under {pred_dir}")
    preds = [read_edge_png(f) for f in files]
    gts = [load_gt_dir(args.gt, f.stem) for f in files]
    if args.tol is not None:
        tol = args.tol
    elif args.motion:
        tol = cfg["eval"]["motion_tol"]
    else:
        tol = None
    if tol is None and cfg["eval"]["tol_frac"] != C.DEFAULTS["eval"]["tol_frac"]:
        tol = cfg["eval"]["tol_frac"] * float(np.hypot(*preds[0].shape))
    r = benchmark(preds, gts, tol=tol, thresholds=default_thresholds(cfg["eval"]["n_thresholds"]),
                  nms_radius=None if args.thinned else cfg["imgproc"]["nms_radius"])
    d = json.loads(r.to_json())
    d["images"] = [f.stem for f in files]
    _emit(d, args.out)
    if args.plot:
        _plot(r, args.plot)


def _plot(r, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rec = [c.recall for c in r.curve]
    prec = [c.precision for c in r.curve]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(rec, prec)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"ODS {r.ods:.3f}  AP {r.ap:.3f}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_eval_flow(args, cfg):
    from .flow import aee, read_flo

    mask = None
    if args.mask:
        from .imageio import read_edge_png

        mask = read_edge_png(args.mask).strength > 0
    _emit({"aee": aee(read_flo(args.pred), read_flo(args.gt), mask)}, args.out)


def _emit(obj, out):
    text = json.dumps(obj, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="edgeloop", description="Unsupervised edge learning from video.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--jobs", type=int, default=None, help="worker processes [logical cores]")
        _add_config_flags(sp)
        return sp

    sp = add("match", cmd_match, "block-match a frame pair into a match file")
    sp.add_argument("--a", required=True, help="first frame")
    sp.add_argument("--b", required=True, help="second frame")
    sp.add_argument("--out", required=True, help="match file to write")

    sp = add("filter", cmd_filter, "accept or reject a frame pair from its matches")
    sp.add_argument("--matches", required=True)
    sp.add_argument("--image", help="frame giving the image size (otherwise the match header is used)")
    sp.add_argument("--out", help="JSON report (default: stdout)")

    sp = add("flow", cmd_flow, "interpolate matches into dense flow")
    sp.add_argument("--matches", required=True)
    sp.add_argument("--edges", required=True, help="edge map (.png or .edgm)")
    sp.add_argument("--out", required=True, help=".flo file to write")

    sp = add("colorize", cmd_colorize, "render a .flo file as a color image")
    sp.add_argument("--flow", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-mag", type=float, default=None, help="saturation scale [99th percentile, >= 1]")

    sp = add("motion-edges", cmd_motion_edges, "detect and align motion edges of one frame")
    sp.add_argument("--model", required=True, help="model file or 'gradient'")
    sp.add_argument("--flow", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="aligned edge PNG")
    sp.add_argument("--json", help="provenance sidecar [OUT with .json suffix]")
    sp.add_argument("--iteration", type=int, default=0)
    sp.add_argument("--frame-id", default=None)

    sp = add("detect", cmd_detect, "run an edge detector on an image")
    sp.add_argument("--model", required=True, help="model file or 'gradient'")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True, help="edge PNG")
    sp.add_argument("--edgm", help="also write float edges")
    sp.add_argument("--nms", action="store_true", help="thin before writing")

    sp = add("train", cmd_train, "train a forest from a sample manifest")
    sp.add_argument("--samples", required=True,
                    help="text file: 'image supervision.png [exclusion.png]' per line, relative paths")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, required=True)

    sp = add("pipeline", cmd_pipeline, "run the full iterative loop on a dataset")
    sp.add_argument("--root", required=True, help="dataset directory")
    sp.add_argument("--out", default="run", help="run directory [run]")
    sp.add_argument("--iters", type=int, default=None, help="iterations T [pipeline.iters]")
    sp.add_argument("--seed", type=int, required=True)

    sp = add("eval-edges", cmd_eval_edges, "boundary benchmark (ODS, OIS, AP, P20)")
    sp.add_argument("--pred", required=True, help="edge PNG or directory of <name>.png")
    sp.add_argument("--gt", required=True, help="directory of <name>/<k>.png annotations")
    sp.add_argument("--tol", type=float, default=None, help="match tolerance in px")
    sp.add_argument("--motion", action="store_true", help="use the motion-edge tolerance")
    sp.add_argument("--thinned", action="store_true", help="predictions are already thinned")
    sp.add_argument("--out", help="JSON file (default: stdout)")
    sp.add_argument("--plot", help="write a PR-curve image")

    sp = add("eval-flow", cmd_eval_flow, "average endpoint error between two .flo files")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--mask", help="PNG, nonzero pixels evaluated")
    sp.add_argument("--out", help="JSON file (default: stdout)")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            raise UsageError("edgeloop: a subcommand is required (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        cfg = _resolve_config(args)
        if args.jobs is None:
            from .pipeline import default_jobs

            args.jobs = default_jobs()
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except InvalidInputError as e:
        # bad config values are usage problems
        print(f"edgeloop: {e}", file=sys.stderr)
        return 1
    try:
        args.fn(args, cfg)
    except (EdgeloopError, OSError, ValueError) as e:
        print(f"edgeloop {args.command}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
