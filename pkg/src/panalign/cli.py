"""Subcommand front-end for the whole pipeline.

Exit codes: 0 ok, 2 bad usage, 3 data error, 4 numeric divergence during
training. All outputs are written atomically (temp file + rename) and
every run directory receives the serialized run configuration plus the
tool version string.
"""

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, corpus, descriptor, metrics, retrieval
from .errors import DataError, InvalidArgumentError, PanalignError
from .network import NumericDivergenceError, PanConfig, PanModel, embed as embed_batch
from .network import train_stage1, train_stage2
from .spatial import apply_affine_to_image

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _atomic_write_text(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_writer(path, write_fn):
    """Run write_fn(tmp_path) then rename tmp over path."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_run_config(out_dir, args, extra=None):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["tool_version"] = __version__
    if extra:
        cfg.update(extra)
    _atomic_write_text(Path(out_dir) / "run_config.json",
                       json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    spec_dict = {}
    if args.spec:
        with open(args.spec) as f:
            spec_dict = json.load(f)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = corpus.GenSpec.from_dict(spec_dict)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = corpus.generate(spec, out)
    _write_run_config(out, args, {"genspec": spec.to_dict(), "n_samples": len(samples)})
    print(f"generated {len(samples)} samples in {out}")
    return EXIT_OK


def _load_train_config(args, num_classes):
    overrides = {}
    if args.config:
        with open(args.config) as f:
            overrides = json.load(f)
    for key in ("seed", "total_epochs", "batch_size"):
        val = getattr(args, key if key != "total_epochs" else "epochs", None)
        if val is not None:
            overrides[key] = val
    overrides["num_classes"] = num_classes
    if "base_channels" in overrides:
        overrides["base_channels"] = tuple(overrides["base_channels"])
    if "align_channels" in overrides:
        overrides["align_channels"] = tuple(overrides["align_channels"])
    return PanConfig(**overrides)


def cmd_train(args):
    samples = corpus.load(args.corpus)
    train = corpus.split_samples(samples, "train")
    if not train:
        raise DataError(f"{args.corpus}: no training split")
    images, labels, id_map = corpus.as_arrays(train)
    cfg = _load_train_config(args, num_classes=len(id_map))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.stage == "2":
        if not args.ckpt:
            raise InvalidArgumentError("--stage 2 requires --ckpt from stage 1")
        model = PanModel.load(args.ckpt, cfg)
    else:
        model = PanModel(cfg)

    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as log:
        if args.stage in ("1", "both"):
            train_stage1(model, images, labels, cfg, log_file=log)
        if args.stage in ("2", "both"):
            train_stage2(model, images, labels, cfg, log_file=log)

    ckpt_path = out / "checkpoint.panw"
    _atomic_writer(ckpt_path, model.save)
    _atomic_write_text(out / "model_config.json",
                       json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_run_config(out, args, {"model_config": cfg.to_dict()})
    print(f"trained stage={args.stage}; checkpoint at {ckpt_path}")
    return EXIT_OK


def _load_model(ckpt, config_path=None):
    ckpt = Path(ckpt)
    cfg_path = Path(config_path) if config_path else ckpt.parent / "model_config.json"
    if not cfg_path.exists():
        raise DataError(f"model config not found: {cfg_path}")
    with open(cfg_path) as f:
        d = json.load(f)
    d["base_channels"] = tuple(d["base_channels"])
    d["align_channels"] = tuple(d["align_channels"])
    return PanModel.load(ckpt, PanConfig(**d))


_SPLIT_ALIASES = {"q": "query", "g": "gallery", "query": "query",
                  "gallery": "gallery", "train": "train"}


def cmd_embed(args):
    model = _load_model(args.ckpt, args.config)
    samples = corpus.split_samples(corpus.load(args.corpus),
                                   _SPLIT_ALIASES[args.split])
    if not samples:
        raise DataError(f"{args.corpus}: split {args.split!r} is empty")
    images = np.stack([s.image for s in samples])
    base, align, _theta = embed_batch(model, images)
    records = [
        descriptor.EmbeddingRecord(s.sample_id, s.identity, s.camera,
                                   base[i], align[i])
        for i, s in enumerate(samples)
    ]
    manifest = {s.sample_id: s.path or "" for s in samples}
    _atomic_writer(args.out,
                   lambda tmp: descriptor.save_embeddings(tmp, records, manifest))
    print(f"wrote {len(records)} embeddings to {args.out}")
    return EXIT_OK


def _fused_matrix(qrec, grec, alpha):
    qv = np.stack([d.vector for d in descriptor.fuse_records(qrec, alpha)])
    gv = np.stack([d.vector for d in descriptor.fuse_records(grec, alpha)])
    return retrieval.pairwise_sqdist(qv, gv), retrieval.pairwise_sqdist(
        np.vstack([qv, gv]), np.vstack([qv, gv])
    )


def cmd_rank(args):
    qrec = descriptor.load_embeddings(args.query)
    grec = descriptor.load_embeddings(args.gallery)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dist, joint = _fused_matrix(qrec, grec, args.alpha)
    nq, ng = dist.shape
    retrieval.save_distances(out / "dist.pand", dist, nq, ng)
    final = dist
    if args.rerank:
        reranked_joint = retrieval.rerank(joint, k=args.k, lam=getattr(args, "lambda"))
        final = reranked_joint[:nq, nq:]
        retrieval.save_distances(out / "dist_rerank.pand", final, nq, ng)
    qmeta = [(r.identity, r.camera) for r in qrec]
    gmeta = [(r.identity, r.camera) for r in grec]
    lists = retrieval.rank(final, qmeta, gmeta, cross_camera_only=False)

    def write_ranks(tmp):
        with open(tmp, "w") as f:
            for rl in lists:
                f.write(json.dumps({
                    "query": int(rl.query_id),
                    "order": rl.order.tolist(),
                    "distances": [round(float(d), 9) for d in rl.distances],
                }) + "\n")

    _atomic_writer(out / "ranks.jsonl", write_ranks)
    meta = {
        "query_pane": str(Path(args.query).resolve()),
        "gallery_pane": str(Path(args.gallery).resolve()),
        "query_meta": [[r.sample_id, r.identity, r.camera] for r in qrec],
        "gallery_meta": [[r.sample_id, r.identity, r.camera] for r in grec],
        "alpha": args.alpha,
        "rerank": bool(args.rerank),
        "k": args.k,
        "lambda": getattr(args, "lambda"),
    }
    _atomic_write_text(out / "rank_meta.json",
                       json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write_run_config(out, args)
    print(f"ranked {nq} queries against {ng} gallery items -> {out}")
    return EXIT_OK


def _parse_sweep(text):
    try:
        lo, hi, step = (float(t) for t in text.split(":"))
    except ValueError as exc:
        raise InvalidArgumentError(f"bad sweep spec {text!r}, want lo:hi:step") from exc
    if step <= 0 or hi < lo:
        raise InvalidArgumentError(f"bad sweep spec {text!r}")
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]


def cmd_eval(args):
    ranks_dir = Path(args.ranks)
    meta_path = ranks_dir / "rank_meta.json"
    if not meta_path.exists():
        raise DataError(f"rank metadata not found: {meta_path}")
    with open(meta_path) as f:
        meta = json.load(f)
    qmeta = [(i, c) for _, i, c in meta["query_meta"]]
    gmeta = [(i, c) for _, i, c in meta["gallery_meta"]]
    dist = retrieval.load_distances(ranks_dir / "dist.pand")
    report = {"plain": metrics.evaluate(dist, qmeta, gmeta).to_dict()}
    rerank_path = ranks_dir / "dist_rerank.pand"
    if rerank_path.exists():
        reranked = retrieval.load_distances(rerank_path)
        report["reranked"] = metrics.evaluate(reranked, qmeta, gmeta).to_dict()
    if args.alpha_sweep:
        qrec = descriptor.load_embeddings(meta["query_pane"])
        grec = descriptor.load_embeddings(meta["gallery_pane"])
        sweep = []
        for alpha in _parse_sweep(args.alpha_sweep):
            d, _ = _fused_matrix(qrec, grec, alpha)
            rep = metrics.evaluate(d, qmeta, gmeta)
            sweep.append({"alpha": alpha, "rank1": rep.rank_accuracy[1],
                          "mAP": rep.mean_ap})
        report["alpha_sweep"] = sweep
        csv_lines = ["alpha,rank1,mAP"] + [
            f"{r['alpha']},{r['rank1']},{r['mAP']}" for r in sweep
        ]
        _atomic_write_text(Path(args.out).with_suffix(".alpha_sweep.csv"),
                           "\n".join(csv_lines) + "\n")
    report["tool_version"] = __version__
    _atomic_write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    cmc_csv = Path(args.out).with_suffix(".cmc.csv")
    key = "reranked" if "reranked" in report else "plain"
    lines = ["rank,accuracy"] + [
        f"{k},{v}" for k, v in sorted(
            ((int(k), v) for k, v in report[key]["rank_accuracy"].items())
        )
    ]
    _atomic_write_text(cmc_csv, "\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_visualize(args):
    model = _load_model(args.ckpt, args.config)
    samples = corpus.load(args.images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for s in samples:
        if args.limit and count >= args.limit:
            break
        _, _, theta = embed_batch(model, s.image)
        aligned = apply_affine_to_image(
            s.image, theta.reshape(2, 3), s.image.shape[1], s.image.shape[2]
        )
        pair = np.concatenate([s.image, np.ones((3, s.image.shape[1], 2)), aligned],
                              axis=2)
        name = Path(s.path or f"sample_{s.sample_id}").name
        dest = out / f"aligned_{Path(name).stem}.png"
        _atomic_writer(dest, lambda tmp: corpus.save_image(tmp, pair))
        count += 1
    _write_run_config(out, args)
    print(f"wrote {count} side-by-side images to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="panalign",
                                description="alignment-aware retrieval pipeline")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--spec", help="JSON generation spec")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the network")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--ckpt", help="stage-1 checkpoint when --stage 2")
    t.add_argument("--config", help="JSON training config overrides")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="export embeddings for a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--config")
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", choices=sorted(_SPLIT_ALIASES), default="q")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_embed)

    r = sub.add_parser("rank", help="rank gallery against queries")
    r.add_argument("--query", required=True)
    r.add_argument("--gallery", required=True)
    r.add_argument("--alpha", type=float, default=0.5)
    r.add_argument("--rerank", action="store_true")
    r.add_argument("--k", type=int, default=20)
    r.add_argument("--lambda", type=float, default=1.0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rank)

    ev = sub.add_parser("eval", help="compute CMC / mAP report")
    ev.add_argument("--ranks", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--alpha-sweep", dest="alpha_sweep",
                    help="lo:hi:step fusion-weight sweep")
    ev.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="render original/aligned image pairs")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--config")
    v.add_argument("--images", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--limit", type=int, default=0)
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvalidArgumentError, PanalignError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
