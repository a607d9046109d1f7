"""Command-line entry point.

Verbs: synth, train, sft, refl, distill, sample, edit, eval, ablate,
report. Every command resolves its configuration, writes it (with a
content hash) into the run manifest before doing work, and never mutates
a prior run's directory. Exit codes: 0 ok, 2 config error, 3 numeric
divergence, 4 missing artifact, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import dmd as dmd_mod
from . import evalkit, refl as refl_mod, stages, synthdata
from .config import RunConfig
from .denoiser import DenoiserConfig
from .errors import (ConfigError, MissingArtifactError, NumericError,
                     PairflowError, VocabularyError)
from .pipeline import build_pipeline, run_inference
from .refl import ReflConfig
from .dmd import DmdConfig


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "recipe", None):
        cfg.recipe = args.recipe
    if getattr(args, "profile", None):
        cfg = RunConfig.from_dict({**cfg.to_dict(), "profile": args.profile})
    return cfg


def _run_dir(cfg: RunConfig, verb: str, explicit: str | None = None) -> Path:
    root = cfg.resolved_out_root()
    base = explicit or cfg.name or f"{verb}-{stages.config_hash(cfg.to_dict())[:8]}"
    path = root / base
    n = 0
    while path.exists():
        n += 1
        path = root / f"{base}-{n}"
    path.mkdir(parents=True)
    return path


class _RunLock:
    """Exclusive lock file on a run directory."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"run dir is locked by another process: {self.path}")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _apply_threads(cfg: RunConfig) -> None:
    if cfg.torch_threads:
        torch.set_num_threads(cfg.torch_threads)


def _build_corpus(cfg: RunConfig) -> synthdata.Corpus:
    return synthdata.build_corpus(cfg.seed + cfg.corpus.seed_offset,
                                  cfg.corpus.n_t2i, cfg.corpus.n_edit,
                                  side=cfg.resolution)


def _fresh_pipeline(cfg: RunConfig, corpus: synthdata.Corpus):
    pipe = build_pipeline(DenoiserConfig(**cfg.arch), cfg.resolution, seed=cfg.seed)
    fit_n = min(512, len(corpus.t2i) + len(corpus.edit))
    images = [s.target for s in (corpus.t2i + corpus.edit)[:fit_n]]
    pipe.codec.fit_normalization(np.stack(images))
    return pipe


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    n = args.n if args.n is not None else cfg.corpus.n_t2i + cfg.corpus.n_edit
    n_t2i = (n + 1) // 2
    n_edit = n // 2
    out = Path(args.out) if args.out else _run_dir(cfg, "synth")
    out.mkdir(parents=True, exist_ok=True)
    manifest = stages.RunManifest(cfg.to_dict(), cfg.seed, out / "manifest.json")
    corpus = synthdata.build_corpus(cfg.seed, n_t2i, n_edit, side=cfg.resolution)
    index = synthdata.export_corpus(corpus, out)
    kinds: dict[str, int] = {}
    for s in corpus.edit:
        kinds[s.edit.kind] = kinds.get(s.edit.kind, 0) + 1
    manifest.set_extra("counts", {"t2i": len(corpus.t2i), "edit": len(corpus.edit),
                                  "edit_kinds": kinds})
    print(f"wrote {len(corpus.t2i)} generation and {len(corpus.edit)} edit "
          f"samples to {out}")
    print(f"index: {index}")
    return 0


def _train_stages(pipe, curriculum, corpus, cfg, manifest, run_dir,
                  start_index: int = 0):
    encoded_cache: dict[tuple, stages.EncodedCorpus] = {}
    for i, stage_cfg in enumerate(curriculum):
        if i < start_index:
            continue
        if stage_cfg.mechanism == "pix2pix" and not pipe.dconfig.pix2pix:
            pipe = stages.convert_to_pix2pix(pipe)
        key = (stage_cfg.resolution,)
        if key not in encoded_cache:
            if stage_cfg.resolution != corpus.side:
                stage_corpus = synthdata.build_corpus(
                    cfg.seed + cfg.corpus.seed_offset, cfg.corpus.n_t2i,
                    cfg.corpus.n_edit, side=stage_cfg.resolution)
            else:
                stage_corpus = corpus
            encoded_cache[key] = stages.EncodedCorpus(stage_corpus, pipe)
        metrics = stages.run_stage(pipe, stage_cfg, encoded_cache[key],
                                   run_seed=cfg.seed, stage_index=i)
        ckpt_id = f"stage-{i:02d}-{stage_cfg.name}"
        stages.save_pipeline(pipe, run_dir / "checkpoints" / ckpt_id,
                             {"stage_index": i, "stage_name": stage_cfg.name,
                              "config_hash": manifest.data["config_hash"]})
        manifest.append_stage(stage_cfg, metrics, ckpt_id)
        print(f"stage {stage_cfg.name}: loss "
              f"{metrics.get('initial_loss', float('nan')):.4f} -> "
              f"{metrics.get('final_loss', float('nan')):.4f} "
              f"({stage_cfg.steps} steps)")
    return pipe


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _apply_threads(cfg)
    run_dir = _run_dir(cfg, "train")
    manifest = stages.RunManifest(cfg.to_dict(), cfg.seed, run_dir / "manifest.json")
    curriculum = stages.make_curriculum(cfg.recipe, cfg.resolution,
                                        cfg.stage_overrides(), cfg.progressive_t2i)
    if args.steps is not None:
        for sc in curriculum:
            sc.steps = args.steps
    if args.steps == 0:
        print(f"dry run: config valid; {len(curriculum)} stages "
              f"({', '.join(s.name for s in curriculum)}); run dir {run_dir}")
        return 0
    with _RunLock(run_dir):
        start = 0
        if args.resume:
            pipe = stages.load_pipeline(Path(args.resume))
            _, meta = stages.load_checkpoint(Path(args.resume))
            start = int(meta.get("stage_index", -1)) + 1
            manifest.append_event(f"resumed from {args.resume} at stage {start}")
        else:
            corpus = _build_corpus(cfg)
            pipe = _fresh_pipeline(cfg, corpus)
        if not args.resume:
            manifest.record_environment(pipe)
        else:
            corpus = _build_corpus(cfg)
        _train_stages(pipe, curriculum, corpus, cfg, manifest, run_dir, start)
    print(f"run dir: {run_dir}")
    return 0


def cmd_sft(args) -> int:
    cfg = _load_config(args)
    _apply_threads(cfg)
    run_dir = _run_dir(cfg, "sft")
    manifest = stages.RunManifest(cfg.to_dict(), cfg.seed, run_dir / "manifest.json")
    pipe = stages.load_pipeline(Path(args.ckpt))
    corpus = _build_corpus(cfg)
    curated = stages.curate_corpus(corpus)
    overrides = cfg.stage_overrides().get("sft", {})
    stage_cfg = stages._stage("sft", cfg.resolution, "in-context", **overrides)
    with _RunLock(run_dir):
        encoded = stages.EncodedCorpus(curated, pipe)
        metrics = stages.run_sft(pipe, encoded, stage_cfg, cfg.seed)
        stages.save_pipeline(pipe, run_dir / "checkpoints" / "sft",
                             {"stage_index": 99, "stage_name": "sft"})
        manifest.append_stage(stage_cfg, metrics, "sft")
    print(f"sft done; run dir {run_dir}")
    return 0


def cmd_refl(args) -> int:
    cfg = _load_config(args)
    _apply_threads(cfg)
    run_dir = _run_dir(cfg, "refl")
    manifest = stages.RunManifest(cfg.to_dict(), cfg.seed, run_dir / "manifest.json")
    pipe = stages.load_pipeline(Path(args.ckpt))
    corpus = _build_corpus(cfg)
    rcfg = ReflConfig(**cfg.refl)
    gen_guard = evalkit.build_generation_suite(cfg.eval.suite_seed + 1, 60, cfg.resolution)
    edit_guard = evalkit.build_edit_suite(cfg.eval.suite_seed + 1, 40, cfg.resolution)
    with _RunLock(run_dir):
        metrics = refl_mod.refl_train(pipe, corpus.t2i, corpus.edit, rcfg,
                                      seed=cfg.seed,
                                      guard_suites=(gen_guard, edit_guard),
                                      out_dir=run_dir)
        stages.save_pipeline(pipe, run_dir / "checkpoints" / "refl",
                             {"stage_index": 100, "stage_name": "refl"})
        manifest.set_extra("refl", {k: v for k, v in metrics.items() if k != "curve"})
    print(f"refl done (aborted={metrics['aborted']}); offsets {metrics['offsets']}")
    return 0


def cmd_distill(args) -> int:
    cfg = _load_config(args)
    _apply_threads(cfg)
    run_dir = _run_dir(cfg, "distill")
    manifest = stages.RunManifest(cfg.to_dict(), cfg.seed, run_dir / "manifest.json")
    teacher = stages.load_pipeline(Path(args.ckpt))
    student = stages.load_pipeline(Path(args.ckpt))
    corpus = _build_corpus(cfg)
    dcfg = DmdConfig(**cfg.dmd)
    with _RunLock(run_dir):
        metrics = dmd_mod.distill(teacher, student, corpus.t2i, corpus.edit,
                                  dcfg, seed=cfg.seed)
        stages.save_pipeline(student, run_dir / "checkpoints" / "student",
                             {"stage_index": 101, "stage_name": "distill",
                              "distilled": True, "steps": 4})
        manifest.set_extra("distill", {k: v for k, v in metrics.items()
                                       if k not in ("fake_losses", "gan_losses")})
        # side-by-side comparison grid
        suite = evalkit.build_generation_suite(cfg.eval.suite_seed, 16, cfg.resolution)
        t_imgs = run_inference(teacher, suite, steps=cfg.sampler.steps,
                               cfg_scale=cfg.sampler.cfg_scale, seed=0)
        s_imgs = run_inference(student, suite, seed=0)
        grid = np.concatenate([np.concatenate(list(t_imgs), axis=1),
                               np.concatenate(list(s_imgs), axis=1)], axis=0)
        synthdata.raster_to_png(grid, run_dir / "teacher_vs_student.png")
    print(f"distill done; student at {run_dir / 'checkpoints' / 'student'}")
    return 0


def _load_pipe_or_missing(path: str):
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"checkpoint not found: {p}")
    return stages.load_pipeline(p)


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    _apply_threads(cfg)
    pipe = _load_pipe_or_missing(args.ckpt)
    words = args.prompt.lower().split()
    for w in words:
        pipe.vocab.word_id(w)  # raises VocabularyError on unknown words
    sample = synthdata.TrainSample(
        target=np.zeros((pipe.resolution, pipe.resolution, 3), dtype=np.float32),
        condition=np.zeros((pipe.resolution, pipe.resolution, 3), dtype=np.float32),
        task="generate", caption=words)
    steps, cfg_scale = cfg.sampler.steps, cfg.sampler.cfg_scale
    if pipe.distilled:
        steps, cfg_scale = 4, 0.0
    imgs = run_inference(pipe, [sample], steps=steps, cfg_scale=cfg_scale,
                         seed=args.seed if args.seed is not None else cfg.seed)
    out = Path(args.out or "sample.png")
    synthdata.raster_to_png(imgs[0], out)
    print(f"wrote {out}")
    return 0


def cmd_edit(args) -> int:
    cfg = _load_config(args)
    _apply_threads(cfg)
    pipe = _load_pipe_or_missing(args.ckpt)
    src_path = Path(args.src)
    if not src_path.exists():
        raise MissingArtifactError(f"source image not found: {src_path}")
    src = synthdata.png_to_raster(src_path)
    if src.shape[0] != pipe.resolution or src.shape[1] != pipe.resolution:
        raise ConfigError(
            f"source image is {src.shape[1]}x{src.shape[0]}, checkpoint "
            f"profile expects {pipe.resolution}x{pipe.resolution}"
        )
    words = args.instruction.lower().split()
    for w in words:
        pipe.vocab.word_id(w)
    # inference-only stub: no mask/scope semantics needed for sampling
    sample = synthdata.TrainSample(target=np.zeros_like(src), condition=src,
                                   task="edit", caption=words)
    steps, cfg_scale = cfg.sampler.steps, cfg.sampler.cfg_scale
    if pipe.distilled:
        steps, cfg_scale = 4, 0.0
    imgs = run_inference(pipe, [sample], steps=steps, cfg_scale=cfg_scale,
                         seed=args.seed if args.seed is not None else cfg.seed)
    out = Path(args.out or "edited.png")
    synthdata.raster_to_png(imgs[0], out)
    print(f"wrote {out}")
    return 0


def _evaluate_pipe(pipe, cfg: RunConfig, seed: int) -> dict:
    steps, cfg_scale = cfg.sampler.steps, cfg.sampler.cfg_scale
    if pipe.distilled:
        steps, cfg_scale = 4, 0.0
    out: dict = {}
    gen_suite = evalkit.build_generation_suite(cfg.eval.suite_seed,
                                               cfg.eval.n_generation, pipe.resolution)
    imgs = run_inference(pipe, gen_suite, steps=steps, cfg_scale=cfg_scale, seed=seed)
    gen_results = [evalkit.check_generation(im, s) for im, s in zip(imgs, gen_suite)]
    out["generation"] = (gen_results, list(imgs))
    if pipe.mechanism in ("in-context", "pix2pix"):
        edit_suite = evalkit.build_edit_suite(cfg.eval.suite_seed,
                                              cfg.eval.n_edit, pipe.resolution)
        imgs = run_inference(pipe, edit_suite, steps=steps, cfg_scale=cfg_scale,
                             seed=seed)
        edit_results = [evalkit.check_edit(im, s) for im, s in zip(imgs, edit_suite)]
        out["editing"] = (edit_results, list(imgs))
    return out


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    _apply_threads(cfg)
    pipe = _load_pipe_or_missing(args.ckpt)
    out_dir = Path(args.out) if args.out else _run_dir(cfg, "eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = stages.RunManifest(cfg.to_dict(), cfg.seed, out_dir / "manifest.json")
    results = _evaluate_pipe(pipe, cfg, cfg.seed)
    files = evalkit.report(results, out_dir)
    summary = {}
    if "generation" in results:
        summary["generation"] = evalkit.aggregate_generation(results["generation"][0])
    if "editing" in results:
        summary["editing"] = evalkit.aggregate_editing(results["editing"][0])
    manifest.set_extra("eval", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"report files: {[str(f) for f in files]}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    _apply_threads(cfg)
    recipes = args.recipes.split(",") if args.recipes else list(stages.RECIPES)
    run_dir = _run_dir(cfg, "ablate")
    manifest = stages.RunManifest(cfg.to_dict(), cfg.seed, run_dir / "manifest.json")
    rows = []
    for recipe in recipes:
        curriculum = stages.make_curriculum(recipe, cfg.resolution,
                                            cfg.stage_overrides(), cfg.progressive_t2i)
        corpus = _build_corpus(cfg)
        pipe = _fresh_pipeline(cfg, corpus)
        sub_manifest = stages.RunManifest(cfg.to_dict(), cfg.seed,
                                          run_dir / recipe / "manifest.json")
        pipe = _train_stages(pipe, curriculum, corpus, cfg, sub_manifest,
                             run_dir / recipe)
        results = _evaluate_pipe(pipe, cfg, cfg.seed)
        gen = evalkit.aggregate_generation(results["generation"][0])["overall"]
        edit = (evalkit.aggregate_editing(results["editing"][0])["overall"]
                if "editing" in results else None)
        rows.append({"recipe": recipe, "gen_overall": round(gen, 4),
                     "edit_overall": None if edit is None else round(edit, 4)})
        print(f"{recipe}: gen={gen:.3f} edit={edit if edit is None else round(edit, 3)}")
    manifest.set_extra("ablation", rows)
    with open(run_dir / "ablation.csv", "w") as fh:
        fh.write("recipe,gen_overall,edit_overall\n")
        for r in rows:
            fh.write(f"{r['recipe']},{r['gen_overall']},"
                     f"{'' if r['edit_overall'] is None else r['edit_overall']}\n")
    print(f"ablation table: {run_dir / 'ablation.csv'}")
    return 0


def cmd_report(args) -> int:
    src = Path(args.results)
    if not src.exists():
        raise MissingArtifactError(f"results file not found: {src}")
    data = json.loads(src.read_text())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    rows = ["suite,category,value"]
    for suite, body in sorted(data.items()):
        per = body.get("per_category", {})
        for cat in sorted(per):
            val = per[cat]
            rows.append(f"{suite},{cat},{'n/a' if val is None else f'{val:.4f}'}")
        if "overall" in body:
            rows.append(f"{suite},overall,{body['overall']:.4f}")
    (out_dir / "per_category.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {out_dir / 'metrics.json'} and {out_dir / 'per_category.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pairflow",
                                description="Unified generation + editing "
                                            "flow-matching model, desk scale.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, ckpt=False):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, default=None)
        if ckpt:
            sp.add_argument("--ckpt", required=True, help="checkpoint directory")

    sp = sub.add_parser("synth", help="generate and export a corpus")
    common(sp)
    sp.add_argument("--n", type=int, default=None, help="total sample count")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="run a curriculum recipe")
    common(sp)
    sp.add_argument("--recipe", choices=stages.RECIPES)
    sp.add_argument("--profile", choices=("res32", "res64", "res128"))
    sp.add_argument("--steps", type=int, default=None,
                    help="override steps for every stage; 0 = dry run")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sft", help="supervised fine-tuning on the curated subset")
    common(sp, ckpt=True)
    sp.set_defaults(fn=cmd_sft)

    sp = sub.add_parser("refl", help="reward feedback post-training")
    common(sp, ckpt=True)
    sp.set_defaults(fn=cmd_refl)

    sp = sub.add_parser("distill", help="4-step distillation of a trained model")
    common(sp, ckpt=True)
    sp.set_defaults(fn=cmd_distill)

    sp = sub.add_parser("sample", help="text-to-image sampling")
    common(sp, ckpt=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("edit", help="instruction-based image editing")
    common(sp, ckpt=True)
    sp.add_argument("--src", required=True, help="source PNG")
    sp.add_argument("--instruction", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_edit)

    sp = sub.add_parser("eval", help="run the checker suites on a checkpoint")
    common(sp, ckpt=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="train + evaluate a recipe grid")
    common(sp)
    sp.add_argument("--recipes", help="comma-separated recipe list")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("report", help="re-emit report files from saved metrics")
    sp.add_argument("--results", required=True, help="metrics JSON")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, VocabularyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 4
    except PairflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
