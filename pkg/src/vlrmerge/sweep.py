"""Hyperparameter grid enumeration, accuracy collection and winner selection.

Selection maximizes accuracy on a primary validation slice; exact ties at the
maximum are re-scored on a disjoint tie-break slice, and any residual tie is
broken by grid order (lambda ascending, then density descending).
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .assembly import AssemblyPlan, assemble_vlrm, write_merged
from .components import ModelTriple
from .errors import DatasetError, ScorerError, VlrmergeError
from .evaluation import PairwiseExample, evaluate_pairwise
from .merging import MergeMethod, MergeRecipe

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRIDS = {
    MergeMethod.LINEAR: tuple(round(0.1 * i, 1) for i in range(11)),
    MergeMethod.TASK_ARITHMETIC: tuple(round(0.1 * i, 1) for i in range(11)),
    MergeMethod.TIES: (0.5, 0.7, 1.0),
    MergeMethod.DARE_TASK_ARITHMETIC: (0.5, 0.7, 1.0),
    MergeMethod.DARE_TIES: (0.5, 0.7, 1.0),
}
DEFAULT_DENSITY_GRID = (0.2, 0.4, 0.6, 0.8)
LAMBDA_CAP = 1.5


@dataclass
class SweepConfig:
    method: MergeMethod
    lambda_grid: tuple[float, ...] | None = None
    density_grid: tuple[float, ...] | None = None
    primary_size: int = 400
    tiebreak_size: int = 100
    sampling_seed: int = 0
    tie_rounding_decimals: int | None = None

    def __post_init__(self):
        # an omitted grid takes the defaults; an explicitly empty one is an error
        if self.lambda_grid is None:
            self.lambda_grid = DEFAULT_LAMBDA_GRIDS[self.method]
        if self.method.needs_density and self.density_grid is None:
            self.density_grid = DEFAULT_DENSITY_GRID
        self.validate()

    def validate(self) -> None:
        if self.method.needs_density:
            if not self.density_grid:
                raise VlrmergeError(f"method {self.method.value} needs a density grid")
        elif self.density_grid is not None:
            raise VlrmergeError(f"method {self.method.value} does not take a density grid")
        if not self.lambda_grid:
            raise VlrmergeError("lambda grid is empty")
        for lam in self.lambda_grid:
            if not 0.0 <= lam <= LAMBDA_CAP:
                raise VlrmergeError(f"lambda {lam} outside [0, {LAMBDA_CAP}]")
            if self.method is MergeMethod.LINEAR and lam > 1.0:
                raise VlrmergeError(f"lambda {lam} outside [0, 1] for linear merging")
        for d in self.density_grid or ():
            if not 0.0 < d <= 1.0:
                raise VlrmergeError(f"density {d} outside (0, 1]")
        if self.primary_size <= 0 or self.tiebreak_size < 0:
            raise VlrmergeError("validation slice sizes must be positive")

    @classmethod
    def from_json(cls, path: str | Path) -> "SweepConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise VlrmergeError(f"{path}: sweep config must be a JSON object")
        known = {
            "method", "lambda_grid", "density_grid", "primary_size",
            "tiebreak_size", "sampling_seed", "tie_rounding_decimals",
        }
        unknown = set(raw) - known
        if unknown:
            raise VlrmergeError(f"{path}: unknown sweep config key(s): {sorted(unknown)}")
        if "method" not in raw:
            raise VlrmergeError(f"{path}: sweep config needs a 'method'")
        try:
            method = MergeMethod(raw["method"])
        except ValueError:
            raise VlrmergeError(f"{path}: unknown method {raw['method']!r}") from None
        return cls(
            method=method,
            lambda_grid=tuple(raw["lambda_grid"]) if "lambda_grid" in raw else None,
            density_grid=tuple(raw["density_grid"]) if raw.get("density_grid") is not None else None,
            primary_size=raw.get("primary_size", 400),
            tiebreak_size=raw.get("tiebreak_size", 100),
            sampling_seed=raw.get("sampling_seed", 0),
            tie_rounding_decimals=raw.get("tie_rounding_decimals"),
        )


def derive_recipe_seed(sampling_seed: int) -> int:
    """Stable per-config seed for the random-drop recipes."""
    digest = hashlib.sha256(b"recipe-seed\x00" + int(sampling_seed).to_bytes(8, "little")).digest()
    return int.from_bytes(digest[:8], "little")


def generate_grid(config: SweepConfig) -> list[MergeRecipe]:
    """Cartesian product of the grids: lambda ascending outer, density descending inner."""
    seed = derive_recipe_seed(config.sampling_seed) if config.method.needs_seed else None
    recipes = []
    for lam in sorted(config.lambda_grid):
        if config.method.needs_density:
            for d in sorted(config.density_grid, reverse=True):
                recipes.append(MergeRecipe(config.method, lam=lam, density=d, seed=seed))
        else:
            recipes.append(MergeRecipe(config.method, lam=lam))
    if not recipes:
        raise VlrmergeError("hyperparameter grid is empty")
    for recipe in recipes:
        recipe.validate()
    return recipes


@dataclass
class SweepEntry:
    recipe: MergeRecipe
    primary_accuracy: float | None = None
    tiebreak_accuracy: float | None = None
    status: str = "ok"
    variant_path: str | None = None
    error: str | None = None


@dataclass
class SweepResult:
    entries: list[SweepEntry]
    winner: MergeRecipe | None


def select_best(
    entries: list[tuple[MergeRecipe, float]],
    tiebreak_provider: Callable[[MergeRecipe], float],
    tie_rounding_decimals: int | None = None,
) -> SweepResult:
    """Pick the winner; the tie-break provider runs only for exact ties at the top.

    ``tie_rounding_decimals`` switches tie detection from exact equality to
    equality after rounding.
    """
    if not entries:
        raise VlrmergeError("cannot select from an empty entry list")

    def tie_key(acc: float) -> float:
        return acc if tie_rounding_decimals is None else round(acc, tie_rounding_decimals)

    best_key = max(tie_key(acc) for _, acc in entries)
    tied = [(recipe, acc) for recipe, acc in entries if tie_key(acc) == best_key]
    result_entries = [SweepEntry(recipe=recipe, primary_accuracy=acc) for recipe, acc in entries]
    by_recipe = {id(entry.recipe): entry for entry in result_entries}

    if len(tied) == 1:
        return SweepResult(entries=result_entries, winner=tied[0][0])

    tiebreak: dict[int, float] = {}
    for recipe, _ in tied:
        value = tiebreak_provider(recipe)
        tiebreak[id(recipe)] = value
        by_recipe[id(recipe)].tiebreak_accuracy = value
    best_tb = max(tiebreak.values())
    finalists = [recipe for recipe, _ in tied if tiebreak[id(recipe)] == best_tb]
    # residual ties resolve by grid order: lambda ascending, then density descending
    winner = min(finalists, key=lambda r: (r.lam, -(r.density if r.density is not None else 0.0)))
    return SweepResult(entries=result_entries, winner=winner)


def sample_validation_slices(
    examples: list[PairwiseExample], seed: int, primary_size: int, tiebreak_size: int
) -> tuple[list[PairwiseExample], list[PairwiseExample]]:
    """Deterministic disjoint primary and tie-break slices of the validation set."""
    needed = primary_size + tiebreak_size
    if len(examples) < needed:
        raise DatasetError(
            f"validation set has {len(examples)} examples; "
            f"need {primary_size} + {tiebreak_size}"
        )
    order = np.random.default_rng(seed).permutation(len(examples))
    primary = [examples[i] for i in order[:primary_size]]
    tiebreak = [examples[i] for i in order[primary_size:needed]]
    return primary, tiebreak


def _inputs_digest(triple: ModelTriple, provenance: dict[str, str]) -> str:
    hashes = [provenance.get(f"input.{kind}.sha256") for kind in ("pre", "lvlm", "rm")]
    h = hashlib.sha256()
    if all(hashes):
        for value in hashes:
            h.update(value.encode("ascii"))
    else:
        for model in (triple.pre, triple.lvlm, triple.rm):
            for name in sorted(model.ckpt.tensors):
                h.update(name.encode("utf-8"))
                h.update(model.ckpt.tensors[name].data)
    return h.hexdigest()[:12]


def run_sweep(
    config: SweepConfig,
    triple: ModelTriple,
    dataset: list[PairwiseExample],
    scorer_factory: Callable[[MergeRecipe, Path], object],
    out_dir: str | Path,
    provenance: dict[str, str] | None = None,
    jobs: int | None = None,
    manifest_name: str = "sweep-manifest.jsonl",
) -> SweepResult:
    """Assemble and score every grid point, then select the winner.

    Variants are cached on disk keyed by (input digest, recipe); a recipe whose
    scorer fails is recorded as failed and excluded from selection.
    """
    provenance = dict(provenance or {})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = generate_grid(config)
    primary_slice, tiebreak_slice = sample_validation_slices(
        dataset, config.sampling_seed, config.primary_size, config.tiebreak_size
    )
    digest = _inputs_digest(triple, provenance)

    entries: dict[int, SweepEntry] = {}
    scorers: dict[int, object] = {}

    def assemble_and_score(recipe: MergeRecipe) -> None:
        entry = entries[id(recipe)]
        variant = out_dir / entry.variant_path
        if not variant.exists():
            plan = AssemblyPlan(recipe=recipe, triple=triple, provenance=provenance)
            write_merged(assemble_vlrm(plan, jobs=jobs), variant)
            log.info("assembled %s", variant.name)
        else:
            log.info("reusing cached %s", variant.name)
        scorer = scorer_factory(recipe, variant)
        scorers[id(recipe)] = scorer
        try:
            report = evaluate_pairwise(primary_slice, scorer)
            entry.primary_accuracy = report.overall_accuracy
        except ScorerError as exc:
            entry.status = "failed"
            entry.error = str(exc)
            log.warning("recipe %s failed: %s", recipe.slug(), exc)

    for recipe in grid:
        variant = out_dir / f"variant-{recipe.slug()}-{digest}.safetensors"
        entries[id(recipe)] = SweepEntry(recipe=recipe, variant_path=variant.name)
    # recipes are independent; the manifest is written only after all settle
    if jobs is not None and jobs <= 1:
        for recipe in grid:
            assemble_and_score(recipe)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(assemble_and_score, grid))

    scoreable = [(e.recipe, e.primary_accuracy) for e in entries.values() if e.status == "ok"]

    def tiebreak_provider(recipe: MergeRecipe) -> float:
        report = evaluate_pairwise(tiebreak_slice, scorers[id(recipe)])
        return report.overall_accuracy

    winner = None
    if scoreable:
        selection = select_best(scoreable, tiebreak_provider, config.tie_rounding_decimals)
        winner = selection.winner
        for sel in selection.entries:
            if sel.tiebreak_accuracy is not None:
                entries[id(sel.recipe)].tiebreak_accuracy = sel.tiebreak_accuracy

    result = SweepResult(entries=[entries[id(r)] for r in grid], winner=winner)
    _write_manifest(out_dir / manifest_name, result)
    return result


def _recipe_fields(recipe: MergeRecipe) -> dict:
    return {
        "method": recipe.method.value,
        "lambda": recipe.lam,
        "density": recipe.density,
        "seed": recipe.seed,
    }


def _write_manifest(path: Path, result: SweepResult) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for entry in result.entries:
            record = {
                "record": "entry",
                **_recipe_fields(entry.recipe),
                "status": entry.status,
                "variant": entry.variant_path,
                "primary_accuracy": entry.primary_accuracy,
                "tiebreak_accuracy": entry.tiebreak_accuracy,
            }
            if entry.error is not None:
                record["error"] = entry.error
            f.write(json.dumps(record, sort_keys=True) + "\n")
        if result.winner is not None:
            winner_entry = next(e for e in result.entries if e.recipe is result.winner)
            f.write(
                json.dumps(
                    {
                        "record": "winner",
                        **_recipe_fields(result.winner),
                        "primary_accuracy": winner_entry.primary_accuracy,
                        "tiebreak_accuracy": winner_entry.tiebreak_accuracy,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
