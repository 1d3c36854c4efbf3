"""Pipeline orchestration: stage sequencing, run directories, manifests.

A run directory is content-addressed by config hash and seed.  Every
stage writes its artifacts plus a manifest recording their checksums;
``verify_repro`` compares two run directories stage by stage.  Stages are
pure functions of the resolved config and upstream artifacts, so deleting
a downstream stage and re-running it reproduces identical bytes.
"""

from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bank import load_bank, save_bank
from .config import ConfigError, RunConfig, config_digest, load_config, resolved_dict
from .core import HashTextProvider, stable_hash64
from .curation import laplacian_variance
from .evaluation import (MetricReport, RankedRetrieval, alignment_score, fid,
                         leakage_check, retrieval_metrics)
from .flowmatch import (FlowConfig, FlowModel, SampleConfig, TrainConfig,
                        load_checkpoint, run_two_stage, save_checkpoint)
from .matrixio import read_matrix, sha256_file, write_matrix
from .msc import ConditionEncoder, MscConfig
from .retrieval import RetrievalConfig
from .toytask import (ToyPipeline, ToyTaskConfig, class_text_centroids, curate_corpus,
                      generate_corpus, latent_proxy_embeddings, make_bank,
                      make_eval_prompts, make_train_items, real_latent_reference)

STAGE_ORDER = ("curate", "bank", "train", "sample", "eval")
STAGE_DEPS = {
    "curate": (),
    "bank": (),
    "train": ("bank",),
    "sample": ("bank", "train"),
    "eval": ("bank", "train", "sample"),
}

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_DEPENDENCY_ERROR = 3


class StageDependencyError(RuntimeError):
    """A requested stage needs outputs of a stage that has not run."""


class StageFailure(RuntimeError):
    """A stage raised; carries the stage name for diagnostics."""


def run_directory(cfg: RunConfig) -> Path:
    return Path(cfg.run.out) / f"{config_digest(cfg)[:12]}-s{cfg.run.seed}"


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_manifest(stage_dir: Path, stage: str, digest: str, started: float) -> None:
    artifacts = {}
    for p in sorted(stage_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            artifacts[str(p.relative_to(stage_dir))] = sha256_file(p)
    manifest = {
        "stage": stage,
        "config_digest": digest,
        "code_version": __version__,
        "started_unix": started,
        "finished_unix": time.time(),
        "artifacts": artifacts,
    }
    _write_atomic(stage_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def _ids_text(ids) -> str:
    return "".join(f"{int(i)}\n" for i in ids)


class PipelineContext:
    """Lazily materializes the derived objects stages share."""

    def __init__(self, cfg: RunConfig, run_dir: Path):
        self.cfg = cfg
        self.run_dir = run_dir
        self._cache: dict[str, object] = {}

    def _memo(self, key: str, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @property
    def seed(self) -> int:
        return self.cfg.run.seed

    @property
    def toy_cfg(self) -> ToyTaskConfig:
        def build():
            t = self.cfg.toy
            return ToyTaskConfig(
                classes=t.classes, class_means=tuple(tuple(m) for m in t.class_means),
                sigma=t.sigma, corpus_size=t.corpus_size, bank_size=t.bank_size,
                test_size=t.test_size, train_large=t.train_large,
                train_small=t.train_small,
                eval_prompts_per_class=t.eval_prompts_per_class,
                samples_per_prompt=t.samples_per_prompt,
                d_q=self.cfg.provider.dim, d_p=t.d_p, proxy_tau=t.proxy_tau,
                vocab_top_n=t.vocab_top_n, vocab_max_ngram=t.vocab_max_ngram,
                dedup_threshold=t.dedup_threshold,
                sharpness_keep_fraction=t.sharpness_keep_fraction,
                kmeans_k=t.kmeans_k, image_size=t.image_size,
                filler_prob=t.filler_prob)
        return self._memo("toy_cfg", build)

    @property
    def provider(self) -> HashTextProvider:
        return self._memo("provider", lambda: HashTextProvider(
            dim=self.cfg.provider.dim, ngram=self.cfg.provider.ngram,
            seed=stable_hash64(self.seed, "provider")))

    @property
    def corpus(self):
        return self._memo("corpus", lambda: generate_corpus(
            self.toy_cfg, self.seed, self.provider))

    @property
    def curation(self):
        return self._memo("curation", lambda: curate_corpus(
            self.corpus, self.toy_cfg, self.seed))

    @property
    def retrieval_cfg(self) -> RetrievalConfig:
        r = self.cfg.retrieval
        return RetrievalConfig(km=r.km, k_t=r.k_t, k_v=r.k_v, n_kw=r.n_kw,
                               n_per=r.n_per,
                               seed=stable_hash64(self.seed, "retrieval"))

    @property
    def eval_prompts(self):
        return self._memo("eval_prompts", lambda: make_eval_prompts(self.toy_cfg, self.seed))

    def msc_config(self) -> MscConfig:
        m = self.cfg.msc
        return MscConfig(d_c=m.d_c, n_q=m.n_q, d_p=self.cfg.toy.d_p,
                         prompt_buckets=m.prompt_buckets,
                         max_prompt_tokens=m.max_prompt_tokens, backbone=m.backbone,
                         backbone_layers=m.backbone_layers,
                         backbone_heads=m.backbone_heads,
                         projector_hidden=m.projector_hidden,
                         null_rts_tokens=m.null_rts_tokens,
                         null_ps_tokens=m.null_ps_tokens,
                         seed=stable_hash64(self.seed, "msc"))

    def flow_config(self) -> FlowConfig:
        f = self.cfg.flow
        return FlowConfig(d_latent=f.d_latent, n_tokens=f.n_tokens, d_model=f.d_model,
                          layers=f.layers, heads=f.heads, d_c=self.cfg.msc.d_c,
                          seed=stable_hash64(self.seed, "flow"))

    def train_configs(self) -> tuple[TrainConfig, TrainConfig]:
        t1, t2 = self.cfg.train1, self.cfg.train2
        cfg1 = TrainConfig(stage=1, steps=t1.steps, batch=t1.batch, peak_lr=t1.peak_lr,
                           min_lr=t1.min_lr, warmup_fraction=t1.warmup_fraction,
                           weight_decay=t1.weight_decay, beta1=t1.beta1, beta2=t1.beta2,
                           eps=t1.eps, uncond_drop_prob=t1.uncond_drop_prob,
                           seed=stable_hash64(self.seed, "train1"))
        cfg2 = TrainConfig(stage=2, steps=t2.steps, batch=t2.batch, fixed_lr=t2.fixed_lr,
                           weight_decay=t2.weight_decay, beta1=t2.beta1, beta2=t2.beta2,
                           eps=t2.eps, uncond_drop_prob=t2.uncond_drop_prob,
                           seed=stable_hash64(self.seed, "train2"))
        return cfg1, cfg2

    def sample_config(self, seed: int = 0) -> SampleConfig:
        return SampleConfig(steps=self.cfg.sample.steps,
                            guidance_scale=self.cfg.sample.guidance_scale, seed=seed)

    def load_trained(self) -> tuple[ConditionEncoder, FlowModel, dict]:
        return load_checkpoint(self.run_dir / "train" / "checkpoint")

    def toy_pipeline(self) -> ToyPipeline:
        encoder, model, _ = self.load_trained()
        bank = load_bank(self.run_dir / "bank" / "store")
        return ToyPipeline(
            cfg=self.toy_cfg, provider=self.provider, bank=bank, encoder=encoder,
            model=model, centroids=class_text_centroids(self.provider, self.toy_cfg.classes),
            eval_prompts=self.eval_prompts, sample_cfg=self.sample_config(),
            seed=self.seed)


def stage_curate(ctx: PipelineContext, stage_dir: Path) -> None:
    """Write the filter decisions and split id lists as newline text."""
    cur = ctx.curation
    sharp = [laplacian_variance(img) for img in ctx.corpus.images]
    (stage_dir / "kept_dedup.txt").write_text(_ids_text(cur.kept_dedup), encoding="utf-8")
    (stage_dir / "kept_sharp.txt").write_text(_ids_text(cur.kept_sharp), encoding="utf-8")
    (stage_dir / "sharpness.txt").write_text(
        "".join(f"{i}\t{s:.12g}\n" for i, s in enumerate(sharp)), encoding="utf-8")
    (stage_dir / "cluster_labels.txt").write_text(
        _ids_text(cur.assignment.labels), encoding="utf-8")
    (stage_dir / "bank_ids.txt").write_text(_ids_text(cur.bank_ids), encoding="utf-8")
    (stage_dir / "test_ids.txt").write_text(_ids_text(cur.test_ids), encoding="utf-8")


def stage_bank(ctx: PipelineContext, stage_dir: Path) -> None:
    bank = make_bank(ctx.corpus, ctx.curation.bank_ids, ctx.provider, ctx.toy_cfg,
                     ctx.seed)
    save_bank(bank, stage_dir / "store")


def stage_train(ctx: PipelineContext, stage_dir: Path) -> None:
    bank = load_bank(ctx.run_dir / "bank" / "store")
    encoder = ConditionEncoder(ctx.msc_config())
    model = FlowModel(ctx.flow_config())
    rcfg = ctx.retrieval_cfg
    toy = ctx.toy_cfg
    large = make_train_items(toy, bank, ctx.provider, encoder, rcfg, toy.train_large,
                             seed=stable_hash64(ctx.seed, "train-data-large"))
    small = make_train_items(toy, bank, ctx.provider, encoder, rcfg, toy.train_small,
                             seed=stable_hash64(ctx.seed, "train-data-small"))
    cfg1, cfg2 = ctx.train_configs()
    history = run_two_stage(encoder, model, large, small, cfg1, cfg2)
    save_checkpoint(stage_dir / "checkpoint", encoder, model,
                    extra={"stage1_final_loss": history["stage1_loss"][-1],
                           "stage2_final_loss": history["stage2_loss"][-1]})
    _write_atomic(stage_dir / "history.json", json.dumps(history, sort_keys=True))


def stage_sample(ctx: PipelineContext, stage_dir: Path) -> None:
    """Generate latents for every eval prompt; one matrix file per prompt."""
    pipe = ctx.toy_pipeline()
    latents_dir = stage_dir / "latents"
    latents_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    summary = []
    for idx, (cls, prompt, kind) in enumerate(ctx.eval_prompts):
        z, n_ids = pipe.sample_prompt(prompt, ctx.retrieval_cfg,
                                      ctx.toy_cfg.samples_per_prompt,
                                      seed=stable_hash64(ctx.seed, "sample", prompt))
        write_matrix(latents_dir / f"{idx:03d}.upbk", z)
        rows.append(f"{idx}\t{cls}\t{kind}\t{n_ids}\t{prompt}")
        mean = z.mean(axis=0)
        summary.append(f"{idx}\tmean=({mean[0]:.6f},{mean[1]:.6f})\tstd={z.std():.6f}")
    (stage_dir / "prompts.tsv").write_text("".join(r + "\n" for r in rows),
                                           encoding="utf-8")
    (stage_dir / "summary.txt").write_text("".join(s + "\n" for s in summary),
                                           encoding="utf-8")


def stage_eval(ctx: PipelineContext, stage_dir: Path) -> None:
    """Score the sampled latents: fidelity, alignment, retrieval, leakage."""
    toy = ctx.toy_cfg
    prompts = ctx.eval_prompts
    sample_dir = ctx.run_dir / "sample"
    latents = [read_matrix(sample_dir / "latents" / f"{idx:03d}.upbk")
               for idx in range(len(prompts))]
    generated = np.concatenate(latents, axis=0)
    means = np.asarray(toy.class_means, dtype=np.float64)[: toy.classes]
    centroids = class_text_centroids(ctx.provider, toy.classes)
    reference = real_latent_reference(
        toy, per_class=toy.eval_prompts_per_class * toy.samples_per_prompt,
        seed=ctx.seed)
    proxies = latent_proxy_embeddings(generated, means, centroids, tau=toy.proxy_tau)
    caption_rows = np.concatenate([
        np.repeat(ctx.provider.encode(prompt)[None, :], len(z), axis=0)
        for (_cls, prompt, _kind), z in zip(prompts, latents)], axis=0)
    metrics = {
        "fid": fid(reference, generated),
        "alignment": alignment_score(caption_rows, proxies),
    }
    kinds = np.concatenate([[kind] * len(z) for (_c, _p, kind), z in zip(prompts, latents)])
    for kind in ("familiar", "novel"):
        mask = kinds == kind
        if mask.any():
            metrics[f"alignment_{kind}"] = alignment_score(caption_rows[mask], proxies[mask])
    for c in range(toy.classes):
        rows = [z for (cls, _p, kind), z in zip(prompts, latents)
                if cls == c and kind == "familiar"]
        if rows:
            err = float(np.linalg.norm(np.concatenate(rows).mean(axis=0) - means[c]))
            metrics[f"mean_error_class{c}"] = err

    # Text-to-sample retrieval: each prompt queries the gallery of
    # per-prompt first samples; its own sample is the relevant item.
    gallery = np.stack([latent_proxy_embeddings(z[:1], means, centroids,
                                                tau=toy.proxy_tau)[0] for z in latents])
    rankings, relevance = [], []
    for idx, (_cls, prompt, _kind) in enumerate(prompts):
        q = ctx.provider.encode(prompt)
        scores = gallery @ q
        order = np.lexsort((np.arange(len(gallery)), -scores))
        rankings.append([int(i) for i in order])
        relevance.append({idx})
    metrics.update(retrieval_metrics(RankedRetrieval(rankings, relevance),
                                     ks=list(ctx.cfg.eval.ks)))

    leak = leakage_check(ctx.corpus.vision[ctx.curation.bank_ids],
                         ctx.corpus.vision[ctx.curation.test_ids],
                         threshold=ctx.cfg.eval.leakage_threshold)
    metrics.update({
        "leakage_max": leak.max_similarity,
        "leakage_mean": leak.mean_similarity,
        "leakage_std": leak.std_similarity,
        "leakage_disjoint": float(leak.disjoint),
    })
    report = MetricReport(name="pipeline-eval", metrics=metrics,
                          metadata={"seed": ctx.seed,
                                    "config_digest": config_digest(ctx.cfg)})
    report.save(stage_dir / "report.txt")


_STAGE_FUNCS = {
    "curate": stage_curate,
    "bank": stage_bank,
    "train": stage_train,
    "sample": stage_sample,
    "eval": stage_eval,
}


def execute_stage(ctx: PipelineContext, stage: str) -> None:
    stage_dir = ctx.run_dir / stage
    stage_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    _STAGE_FUNCS[stage](ctx, stage_dir)
    _write_manifest(stage_dir, stage, config_digest(ctx.cfg), started)


def check_dependencies(run_dir: Path, stages: list[str]) -> None:
    """Raise StageDependencyError unless every stage's deps are satisfied
    either by an earlier requested stage or an existing manifest."""
    planned: set[str] = set()
    for stage in stages:
        for dep in STAGE_DEPS[stage]:
            if dep in planned:
                continue
            if (run_dir / dep / "manifest.json").exists():
                continue
            raise StageDependencyError(
                f"stage {stage!r} requires {dep!r}, which has not run")
        planned.add(stage)


def run_pipeline(config_path=None, stages=None, *, seed: int | None = None,
                 out: str | None = None, echo=print) -> int:
    """Execute the requested stages in canonical order.

    Exit codes: 0 success, 1 stage failure, 2 config error, 3 unmet stage
    dependency.  The resolved config is echoed into the run directory.
    """
    try:
        cfg = load_config(config_path, seed=seed, out=out)
        if stages is None:
            stages = list(STAGE_ORDER)
        unknown = [s for s in stages if s not in STAGE_ORDER]
        if unknown:
            raise ConfigError(f"unknown stage(s): {', '.join(unknown)}")
        stages = [s for s in STAGE_ORDER if s in set(stages)]
    except ConfigError as exc:
        echo(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    run_dir = run_directory(cfg)
    try:
        check_dependencies(run_dir, stages)
    except StageDependencyError as exc:
        echo(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY_ERROR
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_atomic(run_dir / "config.resolved.json",
                  json.dumps(resolved_dict(cfg), indent=2, sort_keys=True))
    if config_path is not None:
        (run_dir / "config.input.toml").write_bytes(Path(config_path).read_bytes())
    ctx = PipelineContext(cfg, run_dir)
    for stage in stages:
        try:
            execute_stage(ctx, stage)
        except Exception as exc:  # noqa: BLE001 - report the failing stage
            echo(f"stage {stage!r} failed: {exc}", file=sys.stderr)
            return EXIT_STAGE_FAILURE
        echo(f"stage {stage!r} done -> {run_dir / stage}")
    return EXIT_OK


@dataclass
class ReproResult:
    equal: bool
    divergence: str | None = None


def _disk_artifacts(stage_dir: Path) -> dict[str, str]:
    return {str(p.relative_to(stage_dir)): sha256_file(p)
            for p in sorted(stage_dir.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def verify_repro(run_dir_a: str | Path, run_dir_b: str | Path) -> ReproResult:
    """Compare artifact checksums of two completed runs stage by stage.

    Checksums are recomputed from the files on disk (so post-hoc tampering
    is caught, not just a recorded divergence).  Returns equality, or the
    first divergence as "stage: path" in stage order then lexicographic
    path order.
    """
    a, b = Path(run_dir_a), Path(run_dir_b)
    for stage in STAGE_ORDER:
        ma, mb = a / stage / "manifest.json", b / stage / "manifest.json"
        if ma.exists() != mb.exists():
            where = run_dir_a if not ma.exists() else run_dir_b
            return ReproResult(False, f"{stage}: missing in {where}")
        if not ma.exists():
            continue
        arts_a = _disk_artifacts(a / stage)
        arts_b = _disk_artifacts(b / stage)
        for path in sorted(set(arts_a) | set(arts_b)):
            if arts_a.get(path) != arts_b.get(path):
                return ReproResult(False, f"{stage}: {path}")
    return ReproResult(True)
