"""Command-line entry point: ``lmkrec <subcommand> ...``.

Failures exit with status 2 and one JSON line on stderr:
``{"error": <ExceptionType>, "stage": <stage or null>, "message": ...}``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config, parse_overrides
from .errors import IntegrityError, LmkError, ParamError
from .headmath import (
    ArcMarginParams,
    GemParams,
    arcmargin_logits_batch,
    arcmargin_loss,
    check_gem_gradients,
    cosine_logits,
    gem_lower_bound,
    gem_pool,
)
from .knn import write_neighbors_csv
from .metrics import gap_at_1, map_at_100, precision_trace, read_truth_csv, write_trace_csv
from .pipeline import (
    StageError,
    load_bundle,
    rerank_predictions,
    relevance_sets,
    run_pipeline,
    search_index,
    train_on_split,
)
from .postprocess import (
    PostprocessParams,
    apply_nonlandmark_rule,
    extract_rerank_features,
    frequency_suppression,
    nonlandmark_scores,
    nonlandmark_search,
    write_features_csv,
)
from .recognition import (
    FusionParams,
    canonicalize,
    predict_from_search,
    read_classifier_probs,
    read_predictions_csv,
    write_predictions_csv,
)
from .rerank import TreeHyper, load_model, save_model
from .store import DescriptorSet, l2_normalize, load_descriptors, save_descriptors
from .synth import SynthSpec, generate_synthetic, write_synthetic

log = logging.getLogger("lmkrec")


def _paths(value: str) -> list:
    return [p.strip() for p in value.split(",") if p.strip()]


def _weights(value):
    return [float(w) for w in _paths(value)] if value else None


def _add_sets(p, nonlandmark=False, index=True):
    p.add_argument("--queries", required=True, help="query LMKE file(s), comma-separated per feature type")
    if index:
        p.add_argument("--index", required=True, help="index LMKE file(s), same order as --queries")
    if nonlandmark:
        p.add_argument("--nonlandmark", required=True, help="non-landmark LMKE file(s)")
    p.add_argument("--weights", default="", help="per-feature-type fusion weights (default uniform)")
    p.add_argument("--workers", type=int, default=1)


def _add_search_k(p):
    p.add_argument("--k", type=int, default=100, help="neighbors retrieved per query")


def _add_post(p):
    d = PostprocessParams()
    p.add_argument("--tau", type=float, default=d.tau)
    p.add_argument("--topk-nl", type=int, default=d.topk_nl)
    p.add_argument("--cap", type=int, default=d.cap)
    p.add_argument("--penalty-mode", choices=("subtract", "zero"), default=d.penalty_mode)
    p.add_argument("--nl-stat", choices=("mean", "max"), default=d.nl_stat)


def _add_tree(p):
    d = TreeHyper()
    p.add_argument("--n-trees", type=int, default=d.n_trees)
    p.add_argument("--depth", type=int, default=d.depth)
    p.add_argument("--shrinkage", type=float, default=d.shrinkage)
    p.add_argument("--min-leaf", type=int, default=d.min_leaf)


def _post_params(a) -> PostprocessParams:
    return PostprocessParams(tau=a.tau, topk_nl=a.topk_nl, cap=a.cap,
                             penalty_mode=a.penalty_mode, nl_stat=a.nl_stat)


def cmd_synth(a):
    spec = SynthSpec(
        num_landmarks=a.num_landmarks, images_per_landmark=a.images_per_landmark,
        queries_per_landmark=a.queries_per_landmark, num_distractor_queries=a.num_distractors,
        num_nonlandmark_refs=a.num_nonlandmark_refs, dim=a.dim, sigma=a.sigma, rho=a.rho,
        seed=a.seed, nonlandmark_clusters=a.nonlandmark_clusters, confusion=a.confusion,
    )
    paths = write_synthetic(generate_synthetic(spec), a.out_dir)
    print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))


def cmd_build_index(a):
    src = Path(a.input)
    if src.suffix == ".npy":
        mat = np.load(src)
        if a.ids:
            ids = Path(a.ids).read_text(encoding="utf-8").splitlines()
        else:
            ids = [f"{src.stem}{i:08d}" for i in range(mat.shape[0])]
        labels = np.loadtxt(a.labels, dtype=np.int64, ndmin=1) if a.labels else None
        dset = DescriptorSet(ids=ids, matrix=mat, labels=labels)
    else:
        dset = load_descriptors(src)
    out = l2_normalize(dset)
    save_descriptors(out, a.output)
    print(f"wrote {len(out)} x {out.dim} normalized descriptors to {a.output}")


def cmd_search(a):
    w = _weights(a.weights)
    q, idx = load_bundle(_paths(a.queries), w), load_bundle(_paths(a.index), w)
    res = search_index(q, idx, a.k, a.workers)
    write_neighbors_csv(res, idx.ids, a.out)


def cmd_predict(a):
    w = _weights(a.weights)
    q, idx = load_bundle(_paths(a.queries), w), load_bundle(_paths(a.index), w)
    if idx.labels is None:
        raise IntegrityError("index set carries no landmark labels")
    probs = read_classifier_probs(a.classifier_probs) if a.classifier_probs else None
    res = search_index(q, idx, a.k, a.workers)
    preds = canonicalize(predict_from_search(res, idx.labels, probs, FusionParams(a.k_agg, a.alpha)))
    write_predictions_csv(preds, a.out, not a.abstain_label)


def cmd_postprocess(a):
    rules = {r.strip() for r in a.rules.split(",") if r.strip()}
    if not rules <= {"1", "2"}:
        raise ParamError(f"--rules accepts 1 and/or 2, got {a.rules!r}")
    params = _post_params(a)
    preds = read_predictions_csv(a.predictions)
    if "1" in rules:
        if not (a.queries and a.nonlandmark):
            raise ParamError("rule 1 needs --queries and --nonlandmark")
        w = _weights(a.weights)
        q, nl = load_bundle(_paths(a.queries), w), load_bundle(_paths(a.nonlandmark), w)
        nl_res = nonlandmark_search(q, nl, params.topk_nl, a.workers)
        preds = canonicalize(apply_nonlandmark_rule(preds, nonlandmark_scores(nl_res, params.topk_nl,
                                                                             params.nl_stat), params))
    if "2" in rules:
        preds = canonicalize(frequency_suppression(preds, params.cap))
    write_predictions_csv(preds, a.out, not a.abstain_label)


def _rerank_inputs(a):
    w = _weights(a.weights)
    q, idx = load_bundle(_paths(a.queries), w), load_bundle(_paths(a.index), w)
    nl = load_bundle(_paths(a.nonlandmark), w)
    probs = read_classifier_probs(a.classifier_probs) if a.classifier_probs else None
    preds = read_predictions_csv(a.predictions)
    res = search_index(q, idx, a.k, a.workers)
    nl_res = nonlandmark_search(q, nl, a.topk_nl, a.workers)
    feats = extract_rerank_features(preds, res, idx.labels, nl_res, probs)
    return preds, feats


def cmd_rerank_train(a):
    preds, feats = _rerank_inputs(a)
    if a.features_out:
        write_features_csv(preds, feats, a.features_out)
    hyper = TreeHyper(n_trees=a.n_trees, depth=a.depth, shrinkage=a.shrinkage, min_leaf=a.min_leaf)
    model, _ = train_on_split(preds, feats, read_truth_csv(a.truth), a.train_fraction, a.seed, hyper)
    save_model(model, a.out)


def cmd_rerank_apply(a):
    preds, feats = _rerank_inputs(a)
    write_predictions_csv(rerank_predictions(load_model(a.model), preds, feats), a.out,
                          not a.abstain_label)


def cmd_evaluate(a):
    preds = read_predictions_csv(a.predictions)
    truth = read_truth_csv(a.truth)
    line = {"gap_at_1": gap_at_1(preds, truth), "n_predictions": len(preds),
            "n_landmark_queries": sum(1 for v in truth.values() if v != -1)}
    if a.trace:
        write_trace_csv(precision_trace(preds, truth), a.trace)
    if a.neighbors:
        if not a.index:
            raise ParamError("--neighbors needs --index for relevance labels")
        ranked: dict = {}
        with open(a.neighbors, encoding="utf-8") as fh:
            next(fh)
            for rec in fh:
                qid, _, iid, _ = rec.rstrip("\n").split(",")
                ranked.setdefault(qid, []).append(iid)
        relevant = relevance_sets(load_bundle([a.index]), truth)
        line["map_at_100"] = map_at_100({q: r for q, r in ranked.items() if q in relevant}, relevant)
    print(" ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in line.items()))


def cmd_run(a):
    overrides = parse_overrides(a.set)
    for key in ("seed", "workers", "out_dir"):
        val = getattr(a, key)
        if val is not None:
            overrides[key] = val
    cfg = load_config(a.config, overrides)
    report = run_pipeline(cfg)
    summary = {"gap": report.get("gap"), "map_at_100": report.get("map_at_100"),
               "report": report["files"]["report"]}
    print(json.dumps(summary, sort_keys=True))


def cmd_check_grad(a):
    rng = np.random.default_rng(a.seed)
    ok = True

    def line(name, passed, detail):
        nonlocal ok
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")

    errs = check_gem_gradients(n_maps=a.maps, p=a.p, step=a.step, seed=a.seed)
    line("gem_gradient", max(errs) < 1e-4, f"max relative error {max(errs):.3e} over {len(errs)} maps")

    maps = [rng.uniform(0.0, 1.0, size=(int(rng.integers(1, 9)), 4, 5)) for _ in range(a.maps)]
    mean_err = max(float(np.max(np.abs(gem_pool(m, GemParams(p=1.0)) - m.reshape(m.shape[0], -1).mean(1))))
                   for m in maps)
    line("gem_p1_mean", mean_err <= 1e-7, f"max abs deviation {mean_err:.3e}")
    # within 2% of max is only guaranteed while (1/(h*w))**(1/64) >= 0.98, i.e. h*w <= 3
    small = [rng.uniform(0.0, 1.0, size=(int(rng.integers(1, 9)), 1, int(rng.integers(1, 4))))
             for _ in range(a.maps)]
    ratio = min(float(np.min(gem_pool(m, GemParams(p=64.0)) / m.reshape(m.shape[0], -1).max(1)))
                for m in small)
    line("gem_p64_max", ratio >= 0.98, f"min pooled/max ratio {ratio:.4f} (h*w <= 3)")
    bound_ok = all(
        np.all(gem_pool(m, GemParams(p=64.0)) / m.reshape(m.shape[0], -1).max(1)
               >= gem_lower_bound(m.shape[1] * m.shape[2], 64.0) - 1e-12)
        for m in maps
    )
    line("gem_p64_bound", bool(bound_ok), "pooled/max >= (1/(h*w))**(1/64) on 4x5 maps")

    params0 = ArcMarginParams(s=30.0, m=0.0)
    margin = ArcMarginParams(s=30.0, m=0.3)
    exact, mono = True, True
    for _ in range(100):
        w = rng.standard_normal((10, 16))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        e = rng.standard_normal((8, 16))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        t = np.argmax(e @ w.T, axis=1)
        exact &= np.array_equal(arcmargin_logits_batch(e, w, t, params0), cosine_logits(e, w, 30.0))
        mono &= arcmargin_loss(e, w, t, margin) >= arcmargin_loss(e, w, t, params0)
    line("arcmargin_m0_exact", bool(exact), "m=0 logits equal s*cos bit-for-bit")
    line("arcmargin_margin_loss", bool(mono), "loss(m=0.3) >= loss(m=0) on 100 batches")
    if not ok:
        raise LmkError("descriptor math verification failed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lmkrec", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    d = SynthSpec()
    p.add_argument("--out-dir", required=True)
    p.add_argument("--num-landmarks", type=int, default=d.num_landmarks)
    p.add_argument("--images-per-landmark", type=int, default=d.images_per_landmark)
    p.add_argument("--queries-per-landmark", type=int, default=d.queries_per_landmark)
    p.add_argument("--num-distractors", type=int, default=d.num_distractor_queries)
    p.add_argument("--num-nonlandmark-refs", type=int, default=d.num_nonlandmark_refs)
    p.add_argument("--dim", type=int, default=d.dim)
    p.add_argument("--sigma", type=float, default=d.sigma)
    p.add_argument("--rho", type=float, default=d.rho)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--nonlandmark-clusters", type=int, default=d.nonlandmark_clusters)
    p.add_argument("--confusion", type=float, default=d.confusion)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-index", help="L2-normalize descriptors into an LMKE file")
    p.add_argument("--input", required=True, help="LMKE file or .npy matrix")
    p.add_argument("--ids", help="text file with one id per line (for .npy input)")
    p.add_argument("--labels", help="text file with one landmark id per line (for .npy input)")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("search", help="exact top-k search, neighbors CSV out")
    _add_sets(p)
    _add_search_k(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("predict", help="search and aggregate into predictions")
    _add_sets(p)
    _add_search_k(p)
    p.add_argument("--k-agg", type=int, default=FusionParams().k_agg)
    p.add_argument("--alpha", type=float, default=FusionParams().alpha)
    p.add_argument("--classifier-probs")
    p.add_argument("--abstain-label", action="store_true", help="write -1 instead of an empty cell")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("postprocess", help="apply distractor rules 1 and/or 2")
    p.add_argument("--predictions", required=True)
    p.add_argument("--queries")
    p.add_argument("--nonlandmark")
    p.add_argument("--weights", default="")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--rules", default="1,2")
    p.add_argument("--abstain-label", action="store_true")
    _add_post(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_postprocess)

    for name, func, help_ in (("rerank-train", cmd_rerank_train, "fit the tree re-rank model"),
                              ("rerank-apply", cmd_rerank_apply, "recalibrate confidences")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--predictions", required=True)
        _add_sets(p, nonlandmark=True)
        _add_search_k(p)
        p.add_argument("--topk-nl", type=int, default=PostprocessParams().topk_nl)
        p.add_argument("--classifier-probs")
        p.add_argument("--out", required=True)
        if name == "rerank-train":
            p.add_argument("--truth", required=True)
            p.add_argument("--train-fraction", type=float, default=0.5)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--features-out")
            _add_tree(p)
        else:
            p.add_argument("--model", required=True)
            p.add_argument("--abstain-label", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="GAP@1 (and optionally mAP@100)")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--trace", help="write the per-rank precision trace CSV here")
    p.add_argument("--neighbors", help="neighbors CSV for mAP@100")
    p.add_argument("--index", help="labelled index LMKE (needed with --neighbors)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="full pipeline from a config file")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check-grad", help="verify GeM / ArcMargin math")
    p.add_argument("--maps", type=int, default=20)
    p.add_argument("--p", type=float, default=3.0)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check_grad)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (LmkError, OSError, ValueError, KeyError) as exc:
        stage = exc.stage if isinstance(exc, StageError) else args.command
        cause = exc.cause if isinstance(exc, StageError) else exc
        print(json.dumps({"error": type(cause).__name__, "stage": stage, "message": str(cause)}),
              file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
