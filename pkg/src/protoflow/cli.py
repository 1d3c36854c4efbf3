"""Command-line entry point.

Subcommands: run, curate, bank, retrieve, train, sample, eval, ablate,
verify.  Exit codes: 0 success, 1 stage/command failure, 2 config error,
3 unmet stage dependency.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bank import load_bank
from .config import ConfigError, load_config, parse_config
from .core import HashTextProvider, stable_hash64
from .curation import dedup, kmeans, laplacian_variance, proportional_sample, rare_first_sample, sharpness_filter
from .evaluation import (MetricReport, ProbeSplit, RankedRetrieval, ablate_km,
                         ablate_retrieval, alignment_score, fid, kid, leakage_check,
                         linear_probe, retrieval_metrics)
from .flowmatch import (FlowModel, SampleConfig, euler_sample, load_checkpoint,
                        run_stage, save_checkpoint)
from .matrixio import read_matrix, write_matrix
from .msc import ConditionEncoder
from .pipeline import (EXIT_CONFIG_ERROR, EXIT_OK, EXIT_STAGE_FAILURE, PipelineContext,
                       run_directory, run_pipeline, verify_repro)
from .retrieval import RetrievalConfig, hybrid_retrieve
from .toytask import make_bank, make_train_items


def _read_ids(path: str) -> list[int]:
    return [int(line) for line in Path(path).read_text(encoding="utf-8").split()]


def _read_labels(path: str) -> np.ndarray:
    return np.array(_read_ids(path), dtype=np.int64)


def _load_gray_images(directory: str) -> tuple[list[str], list[np.ndarray]]:
    from PIL import Image

    paths = sorted(p for p in Path(directory).iterdir()
                   if p.suffix.lower() in (".png", ".pgm"))
    images = []
    for p in paths:
        with Image.open(p) as im:
            images.append(np.asarray(im.convert("L"), dtype=np.float64) / 255.0)
    return [p.name for p in paths], images


def _cmd_run(args) -> int:
    stages = args.stages.split(",") if args.stages else None
    return run_pipeline(args.config, stages, seed=args.seed, out=args.out)


def _cmd_curate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.features:
        feats = read_matrix(args.features)
        kept = dedup(feats, args.threshold)
        (out / "kept_dedup.txt").write_text("".join(f"{i}\n" for i in kept),
                                            encoding="utf-8")
        print(f"dedup: kept {len(kept)}/{feats.shape[0]} -> {out / 'kept_dedup.txt'}")
        assignment = kmeans(feats[kept], min(args.k, len(kept)), seed=args.seed)
        (out / "cluster_labels.txt").write_text(
            "".join(f"{i}\n" for i in assignment.labels), encoding="utf-8")
        if args.n:
            rare = rare_first_sample(assignment, min(args.n, len(kept)), seed=args.seed)
            prop = proportional_sample(assignment, min(args.n, len(kept)),
                                       seed=stable_hash64(args.seed, "prop"))
            (out / "sample_rare_first.txt").write_text(
                "".join(f"{kept[i]}\n" for i in rare), encoding="utf-8")
            (out / "sample_proportional.txt").write_text(
                "".join(f"{kept[i]}\n" for i in prop), encoding="utf-8")
    if args.images:
        names, images = _load_gray_images(args.images)
        if not images:
            print("no PNG/PGM images found", file=sys.stderr)
            return EXIT_STAGE_FAILURE
        scores = [laplacian_variance(img) for img in images]
        kept = sharpness_filter(images, args.keep_fraction)
        (out / "sharpness.txt").write_text(
            "".join(f"{n}\t{s:.12g}\n" for n, s in zip(names, scores)), encoding="utf-8")
        (out / "kept_sharp.txt").write_text(
            "".join(f"{names[i]}\n" for i in kept), encoding="utf-8")
        print(f"sharpness: kept {len(kept)}/{len(images)} -> {out / 'kept_sharp.txt'}")
    return EXIT_OK


def _cmd_bank(args) -> int:
    code = run_pipeline(args.config, ["bank"], seed=args.seed, out=args.out)
    return code


def _cmd_retrieve(args) -> int:
    bank = load_bank(args.bank)
    spec = bank.manifest.get("provider")
    if spec and spec.get("kind") == "hash-text":
        provider = HashTextProvider(dim=spec["dim"], ngram=spec["ngram"],
                                    seed=spec["seed"])
    else:
        provider = HashTextProvider(dim=bank.d_q)
    cfg = RetrievalConfig(km=args.km, seed=args.seed)
    result = hybrid_retrieve(args.prompt, bank, cfg, provider)
    q = provider.encode(args.prompt)
    for ident, tag in zip(result.ids, result.provenance):
        if tag.startswith("local"):
            score = tag
        else:
            mat = (bank.text_index if tag == "global-text" else bank.vision_index).matrix
            score = f"{float(mat[ident] @ (q / np.linalg.norm(q))):.6f} {tag}"
        print(f"{ident}\t{score}")
    if args.save_features:
        write_matrix(args.save_features, result.features)
        print(f"features -> {args.save_features}")
    return EXIT_OK


def _cmd_train(args) -> int:
    """Train into a checkpoint directory.

    --stage both runs the full two-stage schedule; --stage 1 runs only the
    alignment stage; --stage 2 resumes from the checkpoint already in
    --out and applies the refinement stage.
    """
    cfg = load_config(args.config, seed=args.seed)
    ctx = PipelineContext(cfg, run_directory(cfg))
    out = Path(args.out) if args.out else run_directory(cfg) / "train" / "checkpoint"
    bank = make_bank(ctx.corpus, ctx.curation.bank_ids, ctx.provider, ctx.toy_cfg,
                     ctx.seed)
    cfg1, cfg2 = ctx.train_configs()
    toy = ctx.toy_cfg
    if args.stage == "2":
        if not (out / "checkpoint.json").exists():
            print(f"--stage 2 resumes from {out}, but no checkpoint is there",
                  file=sys.stderr)
            return EXIT_CONFIG_ERROR
        encoder, model, extra = load_checkpoint(out)
    else:
        encoder = ConditionEncoder(ctx.msc_config())
        model = FlowModel(ctx.flow_config())
        extra = {}
    history = dict(extra.get("history", {}))
    if args.stage in ("1", "both"):
        data = make_train_items(toy, bank, ctx.provider, encoder, ctx.retrieval_cfg,
                                toy.train_large,
                                seed=stable_hash64(ctx.seed, "train-data-large"))
        losses = run_stage(encoder, model, data, cfg1)
        history["stage1_final_loss"] = losses[-1]
        print(f"stage 1: {cfg1.steps} steps, final loss {losses[-1]:.4f}")
    if args.stage in ("2", "both"):
        data = make_train_items(toy, bank, ctx.provider, encoder, ctx.retrieval_cfg,
                                toy.train_small,
                                seed=stable_hash64(ctx.seed, "train-data-small"))
        losses = run_stage(encoder, model, data, cfg2)
        history["stage2_final_loss"] = losses[-1]
        print(f"stage 2: {cfg2.steps} steps, final loss {losses[-1]:.4f}")
    save_checkpoint(out, encoder, model, extra={"history": history})
    print(f"checkpoint -> {out}")
    return EXIT_OK


def _cmd_sample(args) -> int:
    encoder, model, _extra = load_checkpoint(args.checkpoint)
    bank = load_bank(args.bank)
    spec = bank.manifest.get("provider") or {}
    provider = HashTextProvider(dim=spec.get("dim", bank.d_q),
                                ngram=spec.get("ngram", 3), seed=spec.get("seed", 0))
    rcfg = RetrievalConfig(km=args.km, seed=args.retrieval_seed)
    result = hybrid_retrieve(args.prompt, bank, rcfg, provider)
    cond = encoder.encode_prompt(args.prompt, result.features)
    cfg = SampleConfig(steps=args.steps, guidance_scale=args.cfg, seed=args.seed)
    z = euler_sample(model, cond, cfg, count=args.count,
                     null_cond=encoder.null_condition())
    latents = z.numpy().reshape(args.count, -1)
    write_matrix(args.out, latents)
    mean = latents.mean(axis=0)
    summary = "\n".join([
        f"prompt={args.prompt}",
        f"count={args.count} steps={cfg.steps} guidance={cfg.guidance_scale} "
        f"seed={cfg.seed}",
        f"prototypes_used={len(result.ids)}",
        f"mean=({', '.join(f'{v:.6f}' for v in mean)})",
        f"std={latents.std():.6f}",
    ]) + "\n"
    Path(str(args.out) + ".txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    print(f"latents -> {args.out}")
    return EXIT_OK


def _report(metrics: dict, out: str | None, name: str, metadata: dict | None = None) -> None:
    for key in sorted(metrics):
        print(f"{key}={metrics[key]:.12g}")
    if out:
        MetricReport(name=name, metrics=metrics, metadata=metadata or {}).save(out)
        print(f"report -> {out}")


def _cmd_eval(args) -> int:
    sub = args.eval_command
    if sub == "fid":
        _report({"fid": fid(read_matrix(args.a), read_matrix(args.b))}, args.out, "fid")
    elif sub == "kid":
        value = kid(read_matrix(args.a), read_matrix(args.b),
                    block_size=args.block_size, seed=args.seed)
        _report({"kid": value}, args.out, "kid")
    elif sub == "align":
        value = alignment_score(read_matrix(args.captions), read_matrix(args.images))
        _report({"alignment": value}, args.out, "align")
    elif sub == "retrieval":
        rankings, relevance = [], []
        for line in Path(args.ranked).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rankings.append([int(v) for v in line.split()])
        for line in Path(args.relevance).read_text(encoding="utf-8").splitlines():
            if line.strip():
                relevance.append({int(v) for v in line.split()})
        ks = [int(v) for v in args.ks.split(",")]
        _report(retrieval_metrics(RankedRetrieval(rankings, relevance), ks),
                args.out, "retrieval")
    elif sub == "probe":
        split = ProbeSplit.make(read_matrix(args.features), _read_labels(args.labels),
                                seed=args.seed)
        _report(linear_probe(split, seed=args.seed), args.out, "probe")
    elif sub == "leakage":
        report = leakage_check(read_matrix(args.a), read_matrix(args.b),
                               threshold=args.threshold)
        metrics = {"max": report.max_similarity, "mean": report.mean_similarity,
                   "std": report.std_similarity, "disjoint": float(report.disjoint)}
        _report(metrics, args.out, "leakage",
                metadata={"offending_pairs": len(report.offending_pairs)})
        for i, j, sim in report.offending_pairs[:20]:
            print(f"pair {i},{j} cosine={sim:.6f}")
    elif sub in ("ablate-km", "ablate-retrieval"):
        return _run_ablation(args, kind=sub.removeprefix("ablate-"))
    return EXIT_OK


def _run_ablation(args, kind: str) -> int:
    run_dir = Path(args.run) if args.run else run_directory(load_config(args.config))
    if not (run_dir / "train" / "manifest.json").exists():
        print(f"no trained checkpoint under {run_dir}", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    resolved = run_dir / "config.resolved.json"
    if resolved.exists():
        cfg = parse_config(json.loads(resolved.read_text(encoding="utf-8")))
    else:
        cfg = load_config(args.config)
    pipe = PipelineContext(cfg, run_dir).toy_pipeline()
    if kind == "km":
        values = ([int(v) for v in args.values.split(",")] if args.values
                  else list(cfg.eval.ablate_km_values))
        reports = ablate_km(pipe, values)
    else:
        reports = ablate_retrieval(pipe)
    out_dir = Path(args.out) if args.out else run_dir / f"ablate-{kind}"
    out_dir.mkdir(parents=True, exist_ok=True)
    for report in reports:
        safe = report.name.replace("=", "-").replace("+", "-")
        report.save(out_dir / f"{safe}.txt")
        line = "  ".join(f"{k}={v:.6g}" for k, v in sorted(report.metrics.items()))
        print(f"{report.name}: {line}")
    print(f"reports -> {out_dir}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    return _run_ablation(args, kind=args.kind)


def _cmd_verify(args) -> int:
    result = verify_repro(args.run_a, args.run_b)
    if result.equal:
        print("equal: all stage artifacts match")
        return EXIT_OK
    print(f"divergence at {result.divergence}")
    return EXIT_STAGE_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoflow",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run pipeline stages")
    p.add_argument("--config")
    p.add_argument("--stages", help="comma-separated subset of "
                                    "curate,bank,train,sample,eval")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("curate", help="dedup/sharpness/cluster standalone inputs")
    p.add_argument("--features", help="feature matrix (binary)")
    p.add_argument("--images", help="directory of 8-bit grayscale PNG/PGM images")
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--keep-fraction", type=float, default=0.5)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--n", type=int, default=0, help="sample budget per policy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_curate)

    p = sub.add_parser("bank", help="build and persist the prototype bank")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_bank)

    p = sub.add_parser("retrieve", help="hybrid retrieval against a bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--km", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-features")
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("train", help="two-stage flow-matching training")
    p.add_argument("--config")
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="sample latents from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--cfg", type=float, default=3.0, help="guidance scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--km", type=int, default=16)
    p.add_argument("--retrieval-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval", help="metric subcommands")
    ev = p.add_subparsers(dest="eval_command", required=True)
    for name in ("fid", "kid"):
        q = ev.add_parser(name)
        q.add_argument("a")
        q.add_argument("b")
        q.add_argument("--out")
        if name == "kid":
            q.add_argument("--block-size", type=int)
            q.add_argument("--seed", type=int, default=0)
    q = ev.add_parser("align")
    q.add_argument("captions")
    q.add_argument("images")
    q.add_argument("--out")
    q = ev.add_parser("retrieval")
    q.add_argument("--ranked", required=True, help="one ranked id list per line")
    q.add_argument("--relevance", required=True, help="relevant ids per line")
    q.add_argument("--ks", default="10,50")
    q.add_argument("--out")
    q = ev.add_parser("probe")
    q.add_argument("--features", required=True)
    q.add_argument("--labels", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q = ev.add_parser("leakage")
    q.add_argument("a")
    q.add_argument("b")
    q.add_argument("--threshold", type=float, default=0.95)
    q.add_argument("--out")
    q = ev.add_parser("ablate-km")
    q.add_argument("--run", help="pipeline run directory")
    q.add_argument("--config")
    q.add_argument("--values", help="comma-separated budgets; defaults to the config list")
    q.add_argument("--out")
    q = ev.add_parser("ablate-retrieval")
    q.add_argument("--run")
    q.add_argument("--config")
    q.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="prototype-budget or branch ablations")
    p.add_argument("--kind", choices=["km", "retrieval"], required=True)
    p.add_argument("--run")
    p.add_argument("--config")
    p.add_argument("--values", help="comma-separated budgets; defaults to the config list")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("verify", help="compare two run directories")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.set_defaults(func=_cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILURE


if __name__ == "__main__":
    sys.exit(main())
