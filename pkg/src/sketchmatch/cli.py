"""Command-line surface: reproducible experiment stages under a run directory.

Every subcommand resolves the experiment config, hashes it, and works inside
``<out>/<hash12>/``; stages read the artifacts earlier stages wrote there.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Failures print a machine-readable JSON line to stderr.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import ExperimentConfig, load_config, write_resolved_config
from .errors import DataError, NumericError

ENVVAR_PREFIX = "SKETCHMATCH"


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="TOML experiment config (defaults apply when omitted).")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override every per-stage seed in the config.")(fn)
    fn = click.option("--out", "out_root", type=click.Path(), default="runs", show_default=True,
                      help="Root directory for run outputs.")(fn)
    fn = click.option("--resume", is_flag=True, default=False,
                      help="Keep partial outputs of a previous run where supported.")(fn)
    return fn


def _load(config_path, seed) -> ExperimentConfig:
    overrides = None
    if seed is not None:
        overrides = {
            section: {"seed": seed}
            for section in ("corpus", "encoders", "diffusion", "train_diffusion", "synthesis", "eval")
        }
    return load_config(config_path, overrides)


def _prepare(config_path, seed, out_root) -> tuple[ExperimentConfig, Path]:
    cfg = _load(config_path, seed)
    run_dir = cfg.run_dir(out_root)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, run_dir)
    return cfg, run_dir


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"{path} missing; run `{hint}` first")
    return path


@click.group()
def cli():
    """Sketch synthesis and cross-modal matching experiments."""


@cli.group()
def corpus():
    """Toy corpus commands."""


@corpus.command("build")
@common_options
def corpus_build(config_path, seed, out_root, resume):
    """Render the procedural corpus and write its manifest."""
    from .corpus import build_corpus

    cfg, run_dir = _prepare(config_path, seed, out_root)
    c = cfg.corpus
    entries = build_corpus(
        c.n_identities, c.photos_per_id, c.sketches_per_id, c.seed, run_dir / "corpus",
        pose_jitter=c.pose_jitter, illumination=c.illumination, noise=c.noise,
    )
    click.echo(f"corpus: {len(entries)} images under {run_dir / 'corpus'}")


@cli.group()
def pretrain():
    """Stand-in encoder pretraining."""


@pretrain.command("encoders")
@common_options
def pretrain_encoders_cmd(config_path, seed, out_root, resume):
    """Fit and freeze the text/semantic/identity encoders on the train split."""
    from .corpus import GEOMETRY_RANGES, derive_seed, sample_identity
    from .manifest import parse_manifest
    from .synthesis import style_captions
    from .training import pretrain_encoders

    cfg, run_dir = _prepare(config_path, seed, out_root)
    manifest = _require(run_dir / "corpus" / "manifest.jsonl", "corpus build")
    entries = parse_manifest(manifest, check_paths=True)

    appearance = None
    if cfg.encoders.use_appearance:
        names = [n for n, _, _ in GEOMETRY_RANGES]
        lows = np.array([lo for _, lo, _ in GEOMETRY_RANGES])
        highs = np.array([hi for _, _, hi in GEOMETRY_RANGES])
        picks = [names.index("skin_tone"), names.index("hair_height")]
        appearance = {}
        for ident in sorted({e.id for e in entries}):
            geo = sample_identity(derive_seed(cfg.corpus.seed, "identity", ident), id=ident).geometry
            appearance[ident] = ((geo - lows) / (highs - lows))[picks].astype(np.float32)

    e = cfg.encoders
    text_enc, semantic_enc, identity_enc = pretrain_encoders(
        entries, run_dir / "corpus", style_captions(),
        text_params={"embed_dim": e.d_text, "steps": e.text_steps, "seed": e.seed},
        identity_params={"embed_dim": e.d_identity, "width": e.identity_width,
                         "epochs": e.identity_epochs, "lr": e.lr, "seed": e.seed,
                         "augment_p": e.identity_augment_p,
                         "augment_copies": e.identity_augment_copies},
        semantic_params={"embed_dim": e.d_semantic, "epochs": e.semantic_epochs, "lr": e.lr, "seed": e.seed},
        appearance=appearance,
    )
    enc_dir = run_dir / "encoders"
    text_enc.save(enc_dir / "text.pt")
    semantic_enc.save(enc_dir / "semantic.pt")
    identity_enc.save(enc_dir / "identity.pt")
    click.echo(f"encoders saved under {enc_dir}")


def _load_encoders(cfg: ExperimentConfig, run_dir: Path):
    from .encoders import IdentityEncoder, SemanticEncoder, TextEncoder

    enc_dir = run_dir / "encoders"
    _require(enc_dir / "identity.pt", "pretrain encoders")
    text_enc = TextEncoder.load(enc_dir / "text.pt", expect_dim=cfg.encoders.d_text)
    semantic_enc = SemanticEncoder.load(enc_dir / "semantic.pt", expect_dim=cfg.encoders.d_semantic)
    identity_enc = IdentityEncoder.load(enc_dir / "identity.pt", expect_dim=cfg.encoders.d_identity)
    return text_enc, semantic_enc, identity_enc


def _model_config(cfg: ExperimentConfig):
    from .backbone import ModelConfig

    d = cfg.diffusion
    return ModelConfig(
        image_size=d.image_size, widths=tuple(d.widths), context_dim=cfg.encoders.d_text,
        combined_dim=cfg.encoders.d_semantic + cfg.encoders.d_identity,
        num_tokens=d.num_tokens, proj_hidden=d.proj_hidden, time_dim=d.time_dim,
        lambda_image=d.lambda_image, seed=d.seed,
    )


def _schedule(cfg: ExperimentConfig):
    from .diffusion import make_schedule

    d = cfg.diffusion
    return make_schedule(d.timesteps, d.beta_start, d.beta_end)


@cli.group()
def train():
    """Model training commands."""


@train.command("diffusion")
@common_options
def train_diffusion_cmd(config_path, seed, out_root, resume):
    """Two-phase diffusion training: text backbone warmup, then adapters."""
    from .backbone import ConditionalDenoiser
    from .manifest import parse_manifest
    from .reports import write_loss_trace
    from .synthesis import style_captions
    from .training import TrainConfig, build_diffusion_data, train_diffusion

    cfg, run_dir = _prepare(config_path, seed, out_root)
    entries = parse_manifest(_require(run_dir / "corpus" / "manifest.jsonl", "corpus build"))
    text_enc, semantic_enc, identity_enc = _load_encoders(cfg, run_dir)

    model = ConditionalDenoiser(_model_config(cfg))
    diff_dir = run_dir / "diffusion"
    diff_dir.mkdir(parents=True, exist_ok=True)
    model.save(diff_dir / "init.pt", extra_meta={"stage": "initialization"})

    t = cfg.train_diffusion
    data = build_diffusion_data(entries, run_dir / "corpus", text_enc, semantic_enc, identity_enc,
                                style_captions())
    result = train_diffusion(
        TrainConfig(batch_size=t.batch_size, epochs=t.epochs, warmup_epochs=t.warmup_epochs,
                    lr=t.lr, decay_every=t.decay_every, decay_factor=t.decay_factor, seed=t.seed),
        data, model, _schedule(cfg), checkpoint_path=diff_dir / "checkpoint.pt",
    )
    write_loss_trace(result.trace.rows, diff_dir / "loss_trace.csv", config_hash=cfg.hash())
    click.echo(f"diffusion trained; best adapter loss {result.best_loss:.4f}")


def _generators(cfg: ExperimentConfig, run_dir: Path, checkpoint: str):
    from .backbone import ConditionalDenoiser
    from .synthesis import Generators

    text_enc, semantic_enc, identity_enc = _load_encoders(cfg, run_dir)
    ckpt = _require(run_dir / "diffusion" / f"{checkpoint}.pt", "train diffusion")
    model = ConditionalDenoiser.load(ckpt)
    model.eval().requires_grad_(False)
    return Generators(
        model=model, schedule=_schedule(cfg), text_encoder=text_enc,
        semantic_encoder=semantic_enc, identity_encoder=identity_enc,
    )


@cli.command("synthesize")
@common_options
@click.option("--checkpoint", type=click.Choice(["checkpoint", "init"]), default="checkpoint",
              show_default=True, help="Generate from the trained model or the untrained init.")
def synthesize_cmd(config_path, seed, out_root, resume, checkpoint):
    """Generate the synthetic sketch dataset (resumable per record)."""
    from .manifest import parse_manifest
    from .reports import _write_csv
    from .synthesis import audit_summary, synthesize_dataset

    cfg, run_dir = _prepare(config_path, seed, out_root)
    entries = parse_manifest(_require(run_dir / "corpus" / "manifest.jsonl", "corpus build"))
    gen = _generators(cfg, run_dir, checkpoint)
    s = cfg.synthesis
    out_dir = run_dir / ("synth" if checkpoint == "checkpoint" else "synth_init")
    if not resume and (out_dir / "manifest.jsonl").exists():
        (out_dir / "manifest.jsonl").unlink()
    produced = synthesize_dataset(
        entries, run_dir / "corpus", gen, out_dir,
        styles=list(s.styles), seeds_per_style=s.seeds_per_style,
        num_steps=s.sample_steps, audit_floor=s.audit_floor, master_seed=s.seed,
    )
    rows = [[e.id, e.style, e.extras["seed_index"], repr(e.extras["identity_similarity"]),
             int(bool(e.extras["flagged"]))] for e in produced]
    _write_csv(out_dir / "audit.csv", {"config_hash": cfg.hash()},
               ["source_id", "style_id", "seed_index", "identity_similarity", "flagged"], rows)
    summary = audit_summary(produced)
    click.echo(
        f"synthesized {summary['records']} records; mean similarity "
        f"{summary['mean_similarity']:.3f}; flagged {summary['flagged_fraction']:.1%}"
    )


@cli.group()
def finetune():
    """Recognition-model fine-tuning."""


@finetune.command("sweep")
@common_options
def finetune_sweep_cmd(config_path, seed, out_root, resume):
    """Fine-tune across synthetic fractions x seeds; emit the sweep table."""
    from .experiments import finetune_sweep
    from .manifest import parse_manifest
    from .metrics import MetricsRecord
    from .reports import write_metrics, write_sweep

    cfg, run_dir = _prepare(config_path, seed, out_root)
    corpus_entries = parse_manifest(_require(run_dir / "corpus" / "manifest.jsonl", "corpus build"))
    synth_manifest = _require(run_dir / "synth" / "manifest.jsonl", "synthesize")
    synth_entries = parse_manifest(synth_manifest)
    _, _, identity_enc = _load_encoders(cfg, run_dir)

    f = cfg.finetune
    outcome = finetune_sweep(
        corpus_entries, run_dir / "corpus", synth_entries, run_dir / "synth", identity_enc,
        fractions=tuple(f.fractions), seeds=tuple(f.seeds), far_target=f.far_target,
        epochs=f.epochs, batch_size=f.batch_size, lr=f.lr, augment_p=f.augment_p,
        mix_ratio=f.mix_ratio, keep_encoders=True,
    )
    ft_dir = run_dir / "finetune"
    write_sweep(outcome.rows, ft_dir / "sweep.csv", config_hash=cfg.hash())
    pre = outcome.pretrained
    write_metrics(
        [MetricsRecord(tag="pretrained", tar_at_far={f.far_target: pre["sketch_photo_tar"]},
                       config_hash=cfg.hash()),
         MetricsRecord(tag="pretrained_photo_photo", tar_at_far={f.far_target: pre["photo_photo_tar"]},
                       config_hash=cfg.hash())],
        ft_dir / "pretrained.csv", config_hash=cfg.hash(),
    )
    for (fraction, sweep_seed), enc in outcome.encoders.items():
        enc.save(ft_dir / f"encoder_f{int(round(fraction * 100)):03d}_s{sweep_seed}.pt")
    click.echo(f"sweep complete: {len(outcome.rows)} rows -> {ft_dir / 'sweep.csv'}")


@cli.command("evaluate")
@common_options
def evaluate_cmd(config_path, seed, out_root, resume):
    """Open/closed-set identification on a distractor gallery."""
    from .encoders import IdentityEncoder
    from .experiments import open_closed_eval
    from .reports import write_metrics

    cfg, run_dir = _prepare(config_path, seed, out_root)
    _, _, identity_enc = _load_encoders(cfg, run_dir)
    systems = [("pretrained", identity_enc)]
    for path in sorted((run_dir / "finetune").glob("encoder_*.pt")):
        systems.append((path.stem, IdentityEncoder.load(path)))
    for tag, path in cfg.eval.extra_systems:
        systems.append((tag, IdentityEncoder.load(Path(path))))

    e = cfg.eval
    records = open_closed_eval(
        systems, gallery_size=e.gallery_size, n_mated=e.n_mated, n_nonmated=e.n_nonmated,
        fpir_targets=tuple(e.fpir_targets), far_targets=tuple(e.far_targets),
        probe_modality=e.probe_modality, probe_style=e.probe_style,
        pose_jitter=e.pose_jitter, illumination=e.illumination, noise=e.noise,
        seed=e.seed, config_hash=cfg.hash(),
    )
    eval_dir = run_dir / "eval"
    write_metrics(records, eval_dir / "metrics.csv", config_hash=cfg.hash(), seed=e.seed)
    payload = [
        {"tag": r.tag, "rank1": r.rank1, "fnir_at_fpir": {str(k): v for k, v in r.fnir_at_fpir.items()},
         "tar_at_far": {str(k): v for k, v in r.tar_at_far.items()}, "dprime": r.dprime}
        for r in records
    ]
    (eval_dir / "metrics.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    for r in records:
        click.echo(f"{r.tag}: rank1={r.rank1:.3f} fnir={ {k: round(v, 3) for k, v in r.fnir_at_fpir.items()} }")


@cli.command("plotdata")
@common_options
def plotdata_cmd(config_path, seed, out_root, resume):
    """Emit realism-analysis CSVs: histograms, ROC/DET curves, 2-D projection."""
    from .experiments import realism_analysis, realism_projection
    from .manifest import parse_manifest
    from .metrics import roc_det_points
    from .reports import _write_csv, write_curve, write_histograms

    cfg, run_dir = _prepare(config_path, seed, out_root)
    entries = parse_manifest(_require(run_dir / "corpus" / "manifest.jsonl", "corpus build"))
    gen = _generators(cfg, run_dir, "checkpoint")
    e = cfg.eval
    result = realism_analysis(
        entries, run_dir / "corpus", gen,
        n_identities=e.realism_identities, style=e.realism_style,
        num_steps=cfg.synthesis.sample_steps, seed=e.seed,
    )
    plots = run_dir / "plots"
    write_histograms(
        {
            "reference_genuine": result.reference_scores.genuine,
            "reference_imposter": result.reference_scores.imposter,
            "generated_genuine": result.generated_scores.genuine,
            "generated_imposter": result.generated_scores.imposter,
        },
        plots / "score_histograms.csv", config_hash=cfg.hash(),
    )
    for tag, scores in (("reference", result.reference_scores), ("generated", result.generated_scores)):
        curve = roc_det_points(scores)
        write_curve(curve.points, plots / f"roc_{tag}.csv", columns=["far", "tar"], config_hash=cfg.hash())
        write_curve(curve.det_points, plots / f"det_{tag}.csv", columns=["fpr", "fnr"], config_hash=cfg.hash())
    proj = realism_projection(result)
    rows = [
        [repr(float(x)), repr(float(y)), tag, ident]
        for (x, y), tag, ident in zip(proj.points, result.embedding_tags, result.embedding_ids)
    ]
    _write_csv(plots / "projection.csv", {"config_hash": cfg.hash()}, ["x", "y", "tag", "id"], rows)
    (plots / "realism.json").write_text(json.dumps({
        "dprime_reference": result.dprime_reference,
        "dprime_generated": result.dprime_generated,
        "dprime_ratio": result.dprime_ratio,
    }, sort_keys=True, indent=2) + "\n")
    click.echo(
        f"realism: d' reference={result.dprime_reference:.3f} generated={result.dprime_generated:.3f}"
    )


def main(argv=None) -> int:
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False, auto_envvar_prefix=ENVVAR_PREFIX)
        return 0
    except click.exceptions.Exit as exc:  # --help and friends
        return int(exc.exit_code)
    except (click.UsageError, click.BadParameter) as exc:
        _emit_error("usage", str(exc))
        return 1
    except (DataError, FileNotFoundError) as exc:
        _emit_error("data", str(exc))
        return 2
    except (NumericError, FloatingPointError, ArithmeticError) as exc:
        _emit_error("numeric", str(exc))
        return 3
    except Exception as exc:  # pragma: no cover - unexpected failure path
        _emit_error(type(exc).__name__, str(exc))
        return 3


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
