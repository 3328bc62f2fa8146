"""Command-line entry point: merge, sweep, eval and inspect workflows."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import __version__
from .assembly import AssemblyPlan, assemble_vlrm, file_digest, write_merged
from .components import MODEL_KINDS, Role, classify_tensors, classify_triple, load_manifest_config, validate_triple
from .errors import RecipeError, VlrmergeError
from .evaluation import evaluate_bon, evaluate_pairwise, load_bon_dataset, load_pairwise_dataset
from .merging import MergeMethod, MergeRecipe
from .scoring import RecordingScorer, ReplayScorer, SubprocessScorer, stub_scorer_loop
from .sweep import SweepConfig, run_sweep
from .tensorstore import default_vocab_path, read_checkpoint

log = logging.getLogger("vlrmerge")

METHOD_CHOICES = [m.value for m in MergeMethod]


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")


def _echo_config(name: str, resolved: dict) -> None:
    # every run states its fully resolved configuration before acting
    click.echo(f"{name} config: {json.dumps(resolved, sort_keys=True, default=str)}", err=True)


def _hash_inputs(paths: dict[str, Path]) -> dict[str, str]:
    provenance = {}
    for label, path in paths.items():
        provenance[f"input.{label}.sha256"] = file_digest(path)
        vocab = default_vocab_path(path)
        if vocab.exists():
            provenance[f"input.{label}_vocab.sha256"] = file_digest(vocab)
    return provenance


def _load_triple(pre, lvlm, rm, pre_vocab, lvlm_vocab, rm_vocab, manifest):
    config = load_manifest_config(manifest)
    ckpts = {
        "pre": read_checkpoint(pre, pre_vocab),
        "lvlm": read_checkpoint(lvlm, lvlm_vocab),
        "rm": read_checkpoint(rm, rm_vocab),
    }
    triple = classify_triple(ckpts["pre"], ckpts["lvlm"], ckpts["rm"], config)
    provenance = _hash_inputs({"pre": Path(pre), "lvlm": Path(lvlm), "rm": Path(rm)})
    return triple, provenance


@click.group()
@click.version_option(version=__version__)
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for debug.")
def main(verbose: int) -> None:
    """Build and evaluate vision-language reward models by checkpoint merging."""
    _setup_logging(verbose)


triple_options = [
    click.option("--pre", "pre_path", required=True, type=click.Path(exists=True, dir_okay=False)),
    click.option("--lvlm", "lvlm_path", required=True, type=click.Path(exists=True, dir_okay=False)),
    click.option("--rm", "rm_path", required=True, type=click.Path(exists=True, dir_okay=False)),
    click.option("--pre-vocab", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option("--lvlm-vocab", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option("--rm-vocab", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option(
        "--manifest",
        type=click.Path(exists=True, dir_okay=False),
        envvar="VLRMERGE_MANIFEST",
        default=None,
        help="Component classification rules (JSON); built-in defaults if omitted.",
    ),
]


def _with_options(options):
    def wrap(func):
        for option in reversed(options):
            func = option(func)
        return func
    return wrap


@main.command()
@_with_options(triple_options)
@click.option("--method", required=True, type=click.Choice(METHOD_CHOICES))
@click.option("--lambda", "lam", required=True, type=float, help="Merge weight.")
@click.option("--density", type=float, default=None, help="Retained fraction for ties/dare methods.")
@click.option("--seed", type=int, default=None, help="Drop-mask seed for dare methods.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--jobs", type=int, default=None, help="Worker threads for per-tensor merging.")
def merge(pre_path, lvlm_path, rm_path, pre_vocab, lvlm_vocab, rm_vocab, manifest,
          method, lam, density, seed, out_path, jobs):
    """Merge a checkpoint triple into a vision-language reward model."""
    recipe = MergeRecipe(MergeMethod(method), lam=lam, density=density, seed=seed)
    try:
        recipe.validate()
    except RecipeError as exc:
        raise click.UsageError(str(exc)) from exc
    _echo_config("merge", {
        "pre": pre_path, "lvlm": lvlm_path, "rm": rm_path, "manifest": manifest or "<builtin>",
        "method": method, "lambda": lam, "density": density, "seed": seed,
        "out": out_path, "jobs": jobs or "auto",
    })
    try:
        triple, provenance = _load_triple(
            pre_path, lvlm_path, rm_path, pre_vocab, lvlm_vocab, rm_vocab, manifest
        )
        report = validate_triple(triple)
        if report:
            for entry in report:
                click.echo(f"validation: {entry}", err=True)
            raise click.ClickException(f"triple validation failed with {len(report)} violation(s)")
        plan = AssemblyPlan(recipe=recipe, triple=triple, provenance=provenance)
        merged = assemble_vlrm(plan, jobs=jobs)
        write_merged(merged, out_path)
    except (VlrmergeError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"validation: ok ({len(merged.tensors)} tensors)")
    for label in ("pre", "lvlm", "rm"):
        click.echo(f"{label} sha256: {provenance[f'input.{label}.sha256']}")
    click.echo(f"wrote {out_path} (+ vocabulary sidecar, {len(merged.vocab)} tokens)")


def _make_scorer_factory(scorer_cmd, replay_dir, record_dir, timeout):
    def factory(recipe, variant_path):
        slug = recipe.slug()
        if replay_dir is not None:
            return ReplayScorer(Path(replay_dir) / f"transcript-{slug}.jsonl")
        command = scorer_cmd.replace("{checkpoint}", str(variant_path))
        scorer = SubprocessScorer(command, timeout_per_record=timeout)
        if record_dir is not None:
            transcript = Path(record_dir) / f"transcript-{slug}.jsonl"
            transcript.parent.mkdir(parents=True, exist_ok=True)
            transcript.unlink(missing_ok=True)
            scorer = RecordingScorer(scorer, transcript)
        return scorer
    return factory


@main.command()
@_with_options(triple_options)
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Pairwise validation set (JSONL).")
@click.option("--scorer", "scorer_cmd", default=None,
              help="Scorer command; '{checkpoint}' expands to the variant path.")
@click.option("--replay-dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Serve rewards from recorded transcripts instead of a live scorer.")
@click.option("--record-dir", type=click.Path(file_okay=False), default=None,
              help="Record one transcript per recipe while scoring live.")
@click.option("--scorer-timeout", type=float, default=30.0, show_default=True,
              help="Seconds allowed per scored record.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--jobs", type=int, default=None)
def sweep(pre_path, lvlm_path, rm_path, pre_vocab, lvlm_vocab, rm_vocab, manifest,
          config_path, data_path, scorer_cmd, replay_dir, record_dir, scorer_timeout,
          out_dir, jobs):
    """Grid-search merge hyperparameters against a validation set."""
    if (scorer_cmd is None) == (replay_dir is None):
        raise click.UsageError("exactly one of --scorer or --replay-dir is required")
    try:
        config = SweepConfig.from_json(config_path)
        _echo_config("sweep", {
            "method": config.method.value, "lambda_grid": list(config.lambda_grid),
            "density_grid": list(config.density_grid) if config.density_grid else None,
            "primary_size": config.primary_size, "tiebreak_size": config.tiebreak_size,
            "sampling_seed": config.sampling_seed, "data": data_path,
            "scorer": scorer_cmd or f"replay:{replay_dir}", "out_dir": out_dir,
        })
        triple, provenance = _load_triple(
            pre_path, lvlm_path, rm_path, pre_vocab, lvlm_vocab, rm_vocab, manifest
        )
        report = validate_triple(triple)
        if report:
            for entry in report:
                click.echo(f"validation: {entry}", err=True)
            raise click.ClickException(f"triple validation failed with {len(report)} violation(s)")
        dataset = load_pairwise_dataset(data_path)
        factory = _make_scorer_factory(scorer_cmd, replay_dir, record_dir, scorer_timeout)
        result = run_sweep(
            config, triple, dataset, factory, out_dir, provenance=provenance, jobs=jobs
        )
    except (VlrmergeError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc
    failed = [e for e in result.entries if e.status != "ok"]
    for entry in failed:
        click.echo(f"failed: {entry.recipe.slug()}: {entry.error}", err=True)
    if result.winner is None:
        raise click.ClickException("all recipes failed")
    winner_entry = next(e for e in result.entries if e.recipe is result.winner)
    click.echo(f"winner: {result.winner.slug()}")
    click.echo(f"primary accuracy: {100.0 * winner_entry.primary_accuracy:.1f}")
    if winner_entry.tiebreak_accuracy is not None:
        click.echo(f"tiebreak accuracy: {100.0 * winner_entry.tiebreak_accuracy:.1f}")
    click.echo(f"manifest: {Path(out_dir) / 'sweep-manifest.jsonl'}")


@main.command("eval")
@click.option("--mode", required=True, type=click.Choice(["pairwise", "bon"]))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scorer", "scorer_cmd", default=None, help="Scorer command line.")
@click.option("--replay", "replay_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Serve rewards from a recorded transcript.")
@click.option("--record", "record_path", type=click.Path(dir_okay=False), default=None,
              help="Record the scoring transcript to this file.")
@click.option("--scorer-timeout", type=float, default=30.0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
@click.option("--json", "as_json", is_flag=True, help="Emit a JSON report instead of a table.")
def eval_cmd(mode, data_path, scorer_cmd, replay_path, record_path, scorer_timeout, out_path, as_json):
    """Score an evaluation file and aggregate accuracies."""
    if (scorer_cmd is None) == (replay_path is None):
        raise click.UsageError("exactly one of --scorer or --replay is required")
    _echo_config("eval", {
        "mode": mode, "data": data_path, "scorer": scorer_cmd or f"replay:{replay_path}",
        "record": record_path, "out": out_path, "json": as_json,
    })
    if replay_path is not None:
        scorer = ReplayScorer(replay_path)
    else:
        scorer = SubprocessScorer(scorer_cmd, timeout_per_record=scorer_timeout)
        if record_path is not None:
            Path(record_path).unlink(missing_ok=True)
            scorer = RecordingScorer(scorer, record_path)
    try:
        if mode == "pairwise":
            report = evaluate_pairwise(load_pairwise_dataset(data_path), scorer)
            text = json.dumps(report.to_json(), indent=2, sort_keys=True) if as_json else report.render()
        else:
            accuracy = evaluate_bon(load_bon_dataset(data_path), scorer)
            text = json.dumps({"accuracy": accuracy}, sort_keys=True) if as_json else f"accuracy: {100.0 * accuracy:.1f}"
    except (VlrmergeError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(text)
    if out_path is not None:
        Path(out_path).write_text(text + "\n", encoding="utf-8")


@main.command()
@click.argument("ckpt_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False),
              envvar="VLRMERGE_MANIFEST", default=None)
@click.option("--kind", type=click.Choice(list(MODEL_KINDS)), default="merged", show_default=True,
              help="Which rule set of the manifest to classify against.")
@click.option("--json", "as_json", is_flag=True)
def inspect(ckpt_path, manifest, kind, as_json):
    """Print a checkpoint's tensor table, component roles and metadata."""
    _echo_config("inspect", {"ckpt": ckpt_path, "manifest": manifest or "<builtin>", "kind": kind})
    try:
        ckpt = read_checkpoint(ckpt_path)
        rules = load_manifest_config(manifest)[kind]
        cmap = classify_tensors(ckpt, rules)
    except (VlrmergeError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc
    if as_json:
        payload = {
            "tensors": [
                {
                    "name": t.name,
                    "dtype": t.dtype.value,
                    "shape": list(t.shape),
                    "bytes": len(t.data),
                    "role": cmap.assignments[t.name].value,
                }
                for t in ckpt.tensors.values()
            ],
            "role_counts": {role.value: count for role, count in cmap.counts().items()},
            "metadata": ckpt.metadata,
            "vocab_size": len(ckpt.vocab) if ckpt.vocab is not None else None,
        }
        click.echo(json.dumps(payload, indent=2, sort_keys=True))
        return
    rows = [
        (t.name, t.dtype.value, "x".join(map(str, t.shape)) or "scalar",
         str(len(t.data)), cmap.assignments[t.name].value)
        for t in ckpt.tensors.values()
    ]
    widths = [max(len(r[i]) for r in rows + [("name", "dtype", "shape", "bytes", "role")]) for i in range(5)]
    header = ("name", "dtype", "shape", "bytes", "role")
    click.echo("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        click.echo("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    counts = cmap.counts()
    summary = ", ".join(f"{role.value}={counts[role]}" for role in Role if counts[role])
    click.echo(f"roles: {summary}")
    if ckpt.vocab is not None:
        click.echo(f"vocabulary: {len(ckpt.vocab)} tokens")
    for key in sorted(ckpt.metadata):
        click.echo(f"metadata {key}: {ckpt.metadata[key]}")


@main.command("stub-scorer")
def stub_scorer():
    """Deterministic hash-of-text scorer speaking the wire protocol on stdin/stdout."""
    stub_scorer_loop(sys.stdin, sys.stdout)


if __name__ == "__main__":
    main()
