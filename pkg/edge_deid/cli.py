#!/usr/bin/env python3
"""Command-line interface for edge-deid."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import pandas as pd
from dotenv import load_dotenv

from . import __version__
from .artifacts import (
    load_mask_png,
    load_png,
    save_diff_png,
    save_png,
    to_json,
    write_case,
    write_csv,
    write_json,
    write_jsonl,
)
from .backends import FlowBackend, GeneratorBackend, OracleBackend
from .config import RunConfig, parse_int_list, parse_theta_grid, resolve
from .errors import EdgeDeidError, StageError, UsageError
from .fedsim import run_federation
from .figures import figure_to_png, histogram_figure, loss_curve_figure
from .flowedit import GuidanceParams, feature_persistence
from .histstats import compare, histogram, histograms_frame
from .colorlab import a_star_plane
from .toyflow import (
    Condition,
    FlowHyperParams,
    Health,
    LatentCode,
    SceneSpec,
    load_model,
    save_model,
    train_flow,
)
from .twinsynth import (
    MANIFEST_SCHEMA,
    PipelineConfig,
    case_seeds,
    differential,
    generate_twins,
    identity_sweep,
    run_pipeline,
    synthesize_original,
)

logger = logging.getLogger(__name__)

# Settings left out of manifests: they do not change any result
_NON_REPLAY_KEYS = ("output_dir", "config_file", "verbose", "workers")


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def _float(value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number: {value!r}")


def _int(value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer: {value!r}")


def version_string() -> str:
    return f"edge-deid {__version__} (scene spec {SceneSpec().spec_hash()})"


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Config file (JSON or key = value lines)")
    common.add_argument("--seed", type=_int, default=None, help="Master seed (default: 0)")
    common.add_argument("--output", "-o", dest="output_dir", default=None,
                        help="Output directory (default: ./edge-deid-out)")
    common.add_argument("--verbose", "-v", action="store_true", default=None,
                        help="Debug logging and progress bars")
    common.add_argument("--workers", type=_int, default=None, help="Thread pool size")
    common.add_argument("--image-size", type=_int, default=None, help="Scene side in pixels (default: 32)")
    common.add_argument("--identity-count", type=_int, default=None, help="Number of identities (default: 4)")

    generator = ArgumentParser(add_help=False)
    generator.add_argument("--backend", default=None, help="oracle | trained (default: oracle)")
    generator.add_argument("--model", default=None, help="Flow checkpoint for --backend trained")
    generator.add_argument("--sample-steps", type=_int, default=None, help="Euler steps (default: 50)")

    guidance = ArgumentParser(add_help=False)
    guidance.add_argument("--gamma-src", type=_float, default=None, help="Source guidance (default: 1.5)")
    guidance.add_argument("--gamma-tgt", type=_float, default=None, help="Target guidance (default: 2.0)")
    guidance.add_argument("--steps", dest="edit_steps", type=_int, default=None,
                          help="Edit ODE steps (default: 50)")
    guidance.add_argument("--s-max", type=_float, default=None, help="Starting noise level (default: 0.9)")
    guidance.add_argument("--src-identity", dest="source_identity", type=_int, default=None,
                          help="Patient identity (default: 0)")
    guidance.add_argument("--tgt-identity", dest="surrogate_identity", type=_int, default=None,
                          help="Surrogate identity (default: 1)")

    pipeline = ArgumentParser(add_help=False)
    pipeline.add_argument("--twin-mode", default=None, help="seed_resample | edit_heal")
    pipeline.add_argument("--theta-grid", type=parse_theta_grid, default=None,
                          help='"default", "start:stop:step" or "a,b,c"')
    pipeline.add_argument("--histogram-region", default=None, help="full | pathology")
    pipeline.add_argument("--diff-metric", default=None, help="a_star | delta_e")
    pipeline.add_argument("--cleanup-radius", type=_int, default=None, help="Mask opening radius (default: 0)")
    pipeline.add_argument("--original", default=None, help="Original image PNG (default: synthesized)")
    pipeline.add_argument("--reference", default=None, help="Reference mask PNG (default: oracle ellipse)")

    parser = ArgumentParser(
        prog="edge-deid",
        description="edge-deid - edge-side de-identification with counterfactual twin masks",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Full pipeline on the procedural oracle
  edge-deid pipeline --backend oracle --seed 3

  # Train the toy flow model, then use it
  edge-deid train-flow --epochs 20 -o runs/flow
  edge-deid pipeline --backend trained --model runs/flow/model.npz

  # Mask stability across surrogate identities
  edge-deid sweep --surrogates 1,2,3 --calibration cohort

  # Compare the a* histograms of two images
  edge-deid stats a.png b.png

  # Federated round-trip
  edge-deid fedsim --clients 4 --rounds 5
        """,
    )
    parser.add_argument("--version", action="version", version=version_string())
    subparsers = parser.add_subparsers(dest="command", help="Commands")

    train = subparsers.add_parser("train-flow", parents=[common], help="Train the toy flow model")
    train.add_argument("--epochs", dest="train_epochs", type=_int, default=None, help="Epochs (default: 20)")
    train.add_argument("--batches", dest="train_batches", type=_int, default=None,
                       help="Batches per epoch (default: 100)")
    train.add_argument("--batch-size", type=_int, default=None, help="Batch size (default: 64)")
    train.add_argument("--hidden", type=_int, default=None, help="Hidden width (default: 256)")
    train.add_argument("--lr", dest="train_lr", type=_float, default=None, help="Adam step (default: 1e-3)")
    train.add_argument("--shards", type=_int, default=None, help="Data-parallel gradient shards (default: 1)")
    train.add_argument("--model", default=None, help="Checkpoint path (default: OUTPUT/model.npz)")

    deid = subparsers.add_parser("deid", parents=[common, generator, guidance], help="De-identify one image")
    deid.add_argument("--input", dest="original", default=None, help="Original image PNG (default: synthesized)")

    subparsers.add_parser("twins", parents=[common, generator, guidance, pipeline],
                          help="Generate counterfactual twins and their difference map")
    subparsers.add_parser("pipeline", parents=[common, generator, guidance, pipeline],
                          help="Run the full pipeline for one case")

    sweep = subparsers.add_parser("sweep", parents=[common, generator, guidance, pipeline],
                                  help="Mask stability across surrogate identities")
    sweep.add_argument("--surrogates", type=parse_int_list, default=None,
                       help="Comma-separated surrogate identities (default: 1,2,3)")
    sweep.add_argument("--calibration", default=None, help="per_image | cohort")

    stats = subparsers.add_parser("stats", parents=[common], help="Compare a* histograms of two images")
    stats.add_argument("inputs", nargs="+", help="Two image files")
    stats.add_argument("--mask", dest="reference", default=None, help="Restrict to this mask PNG")

    fed = subparsers.add_parser("fedsim", parents=[common, generator, guidance, pipeline],
                                help="Simulate federated training on de-identified cases")
    fed.add_argument("--clients", type=_int, default=None, help="Number of clients (default: 4)")
    fed.add_argument("--rounds", type=_int, default=None, help="Synchronous rounds (default: 5)")
    fed.add_argument("--epochs", dest="local_epochs", type=_int, default=None,
                     help="Local epochs per round (default: 50)")
    fed.add_argument("--lr", dest="fed_lr", type=_float, default=None, help="Local step size (default: per-client stable rate)")
    fed.add_argument("--cases-per-client", type=_int, default=None, help="Cases per client (default: 2)")
    return parser


def parse_args(argv: Optional[List[str]] = None) -> RunConfig:
    """Parse argv into a validated RunConfig (flags > config file > env > defaults)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        raise UsageError("a command is required")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    return resolve(args.command, flags, args.config)


# =============================================================================
# HELPERS
# =============================================================================


def replay_dict(config: RunConfig) -> Dict:
    data = config.to_dict()
    for key in _NON_REPLAY_KEYS:
        data.pop(key, None)
    return data


def scene_spec(config: RunConfig) -> SceneSpec:
    return SceneSpec(image_size=config.image_size, identity_count=config.identity_count)


def guidance_params(config: RunConfig) -> GuidanceParams:
    return GuidanceParams(
        gamma_src=config.gamma_src,
        gamma_tgt=config.gamma_tgt,
        steps=config.edit_steps,
        s_max=config.s_max,
        noise_seed=case_seeds(config.seed)["anchor"],
    )


def pipeline_config(config: RunConfig) -> PipelineConfig:
    return PipelineConfig(
        spec=scene_spec(config),
        source_identity=config.source_identity,
        surrogate_identity=config.surrogate_identity,
        guidance=guidance_params(config),
        theta_grid=config.theta_grid,
        twin_mode=config.twin_mode,
        histogram_region=config.histogram_region,
        diff_metric=config.diff_metric,
        cleanup_radius=config.cleanup_radius,
    )


def make_backend(config: RunConfig) -> GeneratorBackend:
    spec = scene_spec(config)
    if config.backend == "trained":
        model = load_model(config.model, expect_spec=spec)
        return FlowBackend(model, config.sample_steps)
    return OracleBackend(spec)


def _output_dir(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _original(config: RunConfig):
    if config.original:
        return load_png(config.original)
    return synthesize_original(scene_spec(config), config.source_identity, config.seed)


# =============================================================================
# COMMANDS
# =============================================================================


def cmd_train_flow(config: RunConfig) -> int:
    spec = scene_spec(config)
    hp = FlowHyperParams(
        learning_rate=config.train_lr,
        batch_size=config.batch_size,
        epochs=config.train_epochs,
        batches_per_epoch=config.train_batches,
        hidden=config.hidden,
        shards=config.shards,
    )
    out = _output_dir(config)
    print(f"Training toy flow on {spec.image_size}x{spec.image_size} scenes "
          f"({hp.epochs} epochs x {hp.batches_per_epoch} batches)")
    try:
        trained = train_flow(spec, hp, config.seed, progress=bool(config.verbose))
    except EdgeDeidError as exc:
        raise StageError("train", exc) from exc

    model_path = save_model(trained.model, config.model or out / "model.npz")
    losses = pd.DataFrame({
        "epoch": range(1, len(trained.epoch_losses) + 1),
        "loss": trained.epoch_losses,
    })
    write_csv(losses, out / "loss_curve.csv")
    (out / "loss_curve.png").write_bytes(figure_to_png(loss_curve_figure(trained.epoch_losses)))
    write_json({
        "schema": MANIFEST_SCHEMA,
        "version": __version__,
        "spec_hash": spec.spec_hash(),
        "initial_loss": trained.initial_loss,
        "final_loss": trained.final_loss,
        "model": str(model_path),
        "run_config": replay_dict(config),
    }, out / "train_manifest.json")
    print(f"✓ Loss {trained.initial_loss:.4f} -> {trained.final_loss:.4f}")
    print(f"✓ Saved model to {model_path}")
    return 0


def cmd_deid(config: RunConfig) -> int:
    spec = scene_spec(config)
    backend = make_backend(config)
    original = _original(config)
    g = guidance_params(config)
    try:
        outcome = backend.de_identify(
            original,
            Condition(config.source_identity, Health.PATHOLOGICAL),
            Condition(config.surrogate_identity, Health.PATHOLOGICAL),
            g,
        )
    except (EdgeDeidError, ValueError) as exc:
        raise StageError("de_identify", exc) from exc

    out = _output_dir(config)
    save_png(outcome.image, out / "deid.png")
    if outcome.trace is not None:
        write_csv(outcome.trace.to_frame(), out / "edit_trace.csv")
    write_json({
        "schema": MANIFEST_SCHEMA,
        "version": __version__,
        "seeds": case_seeds(config.seed),
        "backend": backend.describe(),
        "guidance": g.to_dict(),
        "feature_persistence": feature_persistence(
            outcome.image, spec, config.source_identity, config.surrogate_identity
        ),
        "run_config": replay_dict(config),
    }, out / "deid_manifest.json")
    print(f"✓ Surrogate written to {out / 'deid.png'}")
    return 0


def cmd_twins(config: RunConfig) -> int:
    spec = scene_spec(config)
    backend = make_backend(config)
    g = guidance_params(config)
    anchor = LatentCode.from_seed(g.noise_seed, spec.dim)
    try:
        twins = generate_twins(backend, anchor, config.surrogate_identity, config.twin_mode, g)
        diff = differential(twins, config.diff_metric)
    except (EdgeDeidError, ValueError) as exc:
        raise StageError("twins", exc) from exc

    out = _output_dir(config)
    save_png(twins.path_image, out / "twin_path.png")
    save_png(twins.healthy_image, out / "twin_healthy.png")
    save_diff_png(diff, out / "diff.png")
    write_json({
        "schema": MANIFEST_SCHEMA,
        "version": __version__,
        "seeds": case_seeds(config.seed),
        "backend": backend.describe(),
        "diff": {"max": float(diff.values.max()), "mean": float(diff.values.mean())},
        "run_config": replay_dict(config),
    }, out / "twins_manifest.json")
    print(f"✓ Twins written to {out}")
    return 0


def cmd_pipeline(config: RunConfig) -> int:
    backend = make_backend(config)
    original = _original(config)
    reference = load_mask_png(config.reference) if config.reference else None
    result = run_pipeline(pipeline_config(config), backend, config.seed, original, reference)
    result.manifest["run_config"] = replay_dict(config)

    out = _output_dir(config)
    write_case(result, out)
    mask = result.manifest["mask"]
    print(f"✓ theta* = {result.calibration.theta_star}  IoU vs reference = {mask['iou_vs_reference']:.4f}")
    print(f"✓ Case written to {out}")
    return 0


def cmd_sweep(config: RunConfig) -> int:
    surrogates = list(config.surrogates)
    for identity in surrogates:
        if identity == config.source_identity or not 0 <= identity < config.identity_count:
            raise UsageError(
                f"--surrogates entries must differ from --src-identity and lie in "
                f"[0, {config.identity_count - 1}], got {identity}"
            )
    backend = make_backend(config)
    report = identity_sweep(
        pipeline_config(config), backend, surrogates, config.seed,
        workers=config.workers, calibration=config.calibration,
    )
    out = _output_dir(config)
    for identity, result, overlay in zip(report.identities, report.results, report.overlays):
        result.manifest["run_config"] = replay_dict(config)
        write_case(result, out / f"surrogate_{identity}", overlay)
    summary = report.summary()
    summary["run_config"] = replay_dict(config)
    write_json(summary, out / "sweep.json")
    print(f"✓ Pairwise IoU {report.stability.mean:.4f} ± {report.stability.std:.4f} "
          f"over {len(surrogates)} surrogates")
    return 0


def cmd_stats(config: RunConfig) -> int:
    if len(config.inputs) != 2:
        raise UsageError(f"stats needs exactly two images, got {len(config.inputs)}")
    first, second = (load_png(path) for path in config.inputs)
    restrict = load_mask_png(config.reference) if config.reference else None
    histograms = {
        "first": histogram(a_star_plane(first), restrict),
        "second": histogram(a_star_plane(second), restrict),
    }
    report = compare(histograms["first"], histograms["second"]).to_dict()
    report["inputs"] = list(config.inputs)

    out = _output_dir(config)
    write_json(report, out / "stats.json")
    write_csv(histograms_frame(histograms), out / "histograms.csv")
    (out / "histograms.png").write_bytes(figure_to_png(
        histogram_figure(histograms, panels=(("first", "second", "a* histograms"),))
    ))
    print(to_json(report))
    return 0


def cmd_fedsim(config: RunConfig) -> int:
    backend = make_backend(config)
    result = run_federation(
        config.clients,
        config.rounds,
        pipeline_config(config),
        config.seed,
        generator=backend,
        epochs=config.local_epochs,
        lr=config.fed_lr,
        cases_per_client=config.cases_per_client,
        workers=config.workers,
    )
    out = _output_dir(config)
    write_csv(result.to_frame(), out / "rounds.csv")
    write_jsonl(result.audit_log, out / "audit.jsonl")
    write_json({
        "schema": MANIFEST_SCHEMA,
        "version": __version__,
        "global_weights": [float(w) for w in result.global_model.weights],
        "heldout_iou": [r.heldout_iou for r in result.reports],
        "client_round1_iou": {str(k): v for k, v in result.client_round1_iou.items()},
        "run_config": replay_dict(config),
    }, out / "fedsim_manifest.json")
    print(f"✓ {len(result.audit_log)} wire messages passed the audit")
    print(f"✓ Final held-out IoU {result.reports[-1].heldout_iou:.4f}")
    return 0


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "train-flow": cmd_train_flow,
    "deid": cmd_deid,
    "twins": cmd_twins,
    "pipeline": cmd_pipeline,
    "sweep": cmd_sweep,
    "stats": cmd_stats,
    "fedsim": cmd_fedsim,
}


def dispatch(config: RunConfig) -> int:
    """Run the configured command; 0 success, 1 runtime or stage failure, 2 usage."""
    try:
        return COMMANDS[config.command](config)
    except UsageError as exc:
        print(f"❌ Usage error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"❌ Error: stage '{exc.stage}' failed: {exc.cause}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"❌ Error: {exc}", file=sys.stderr)
        return 1
    except (EdgeDeidError, ValueError) as exc:
        print(f"❌ Error: {exc}", file=sys.stderr)
        return 1


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    load_dotenv()
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        config = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"❌ Usage error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"❌ Error: {exc}", file=sys.stderr)
        return 1

    logging.basicConfig(
        level=logging.DEBUG if config.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return dispatch(config)


if __name__ == "__main__":
    sys.exit(main())
