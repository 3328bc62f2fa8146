import json

import pytest

from vlrmerge import (
    MergeMethod,
    MergeRecipe,
    ReplayScorer,
    RecordingScorer,
    StubScorer,
    SweepConfig,
    generate_grid,
    run_sweep,
    select_best,
)
from vlrmerge.errors import DatasetError, ScorerError, VlrmergeError
from vlrmerge.evaluation import load_pairwise_dataset
from vlrmerge.sweep import sample_validation_slices

from helpers import classified_toy_triple, write_pairwise_dataset


class TestGenerateGrid:
    def test_linear_defaults_are_eleven_recipes(self):
        grid = generate_grid(SweepConfig(MergeMethod.LINEAR))
        assert [r.lam for r in grid] == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]

    def test_sparsifying_defaults_are_twelve_recipes(self):
        grid = generate_grid(SweepConfig(MergeMethod.TIES))
        assert len(grid) == 12
        assert [(r.lam, r.density) for r in grid][:4] == [(0.5, 0.8), (0.5, 0.6), (0.5, 0.4), (0.5, 0.2)]
        assert grid[-1].lam == 1.0 and grid[-1].density == 0.2

    def test_singleton_grid(self):
        config = SweepConfig(MergeMethod.DARE_TIES, lambda_grid=(0.5,), density_grid=(0.4,))
        grid = generate_grid(config)
        assert len(grid) == 1
        assert grid[0].seed is not None

    def test_dare_recipes_share_a_config_derived_seed(self):
        grid = generate_grid(SweepConfig(MergeMethod.DARE_TASK_ARITHMETIC, sampling_seed=5))
        seeds = {r.seed for r in grid}
        assert len(seeds) == 1
        other = generate_grid(SweepConfig(MergeMethod.DARE_TASK_ARITHMETIC, sampling_seed=6))
        assert other[0].seed != grid[0].seed

    def test_density_grid_for_linear_rejected(self):
        with pytest.raises(VlrmergeError, match="does not take a density grid"):
            SweepConfig(MergeMethod.LINEAR, density_grid=(0.4,))

    def test_lambda_cap(self):
        with pytest.raises(VlrmergeError, match="outside"):
            SweepConfig(MergeMethod.TASK_ARITHMETIC, lambda_grid=(0.5, 1.6))

    def test_config_file_round_trip(self, tmp_path):
        path = tmp_path / "sweep.json"
        path.write_text(
            json.dumps({"method": "ties", "lambda_grid": [0.7], "density_grid": [0.4, 0.2]}),
            encoding="utf-8",
        )
        config = SweepConfig.from_json(path)
        assert config.method is MergeMethod.TIES
        assert len(generate_grid(config)) == 2

    def test_config_file_unknown_key(self, tmp_path):
        path = tmp_path / "sweep.json"
        path.write_text('{"method": "ties", "lambdas": [0.7]}', encoding="utf-8")
        with pytest.raises(VlrmergeError, match="unknown sweep config key"):
            SweepConfig.from_json(path)


def lam_entries(method, accuracies):
    grid = generate_grid(SweepConfig(method, sampling_seed=1))
    assert len(grid) == len(accuracies)
    return [(recipe, accuracies[i]) for i, recipe in enumerate(grid)]


def density_entries(method, table):
    # table maps lambda -> accuracies for densities [0.8, 0.6, 0.4, 0.2]
    grid = generate_grid(SweepConfig(method, sampling_seed=1))
    densities = [0.8, 0.6, 0.4, 0.2]
    entries = []
    for recipe in grid:
        entries.append((recipe, table[recipe.lam][densities.index(recipe.density)]))
    return entries


# Ten recorded hyperparameter-selection runs for the two supported reward models.
# "winner" is the bold cell; "starred" marks the recipe that won the 100-sample
# tie-break among equal top scores.
LAMBDA_TABLES = [
    (
        "linear/tulu-2.5",
        MergeMethod.LINEAR,
        [49.8, 52.3, 50.3, 52.5, 52.0, 49.0, 47.3, 46.5, 46.5, 50.3, 47.0],
        0.3,
        None,
    ),
    (
        "task-vec/tulu-2.5",
        MergeMethod.TASK_ARITHMETIC,
        [55.3, 50.0, 53.3, 54.5, 53.5, 49.3, 52.8, 54.0, 53.8, 54.8, 55.3],
        1.0,
        {0.0, 1.0},
    ),
    (
        "linear/tulu-3",
        MergeMethod.LINEAR,
        [51.5, 46.8, 50.3, 49.3, 52.0, 50.8, 49.3, 47.3, 49.5, 49.3, 51.3],
        0.4,
        None,
    ),
    (
        "task-vec/tulu-3",
        MergeMethod.TASK_ARITHMETIC,
        [49.3, 53.5, 49.8, 49.8, 51.0, 51.0, 53.8, 53.0, 53.0, 50.3, 55.3],
        1.0,
        None,
    ),
]

DENSITY_TABLES = [
    (
        "ties/tulu-2.5",
        MergeMethod.TIES,
        {1.0: [53.5, 53.8, 52.3, 50.0], 0.7: [53.5, 53.8, 52.3, 50.3], 0.5: [53.5, 53.8, 52.3, 50.0]},
        (1.0, 0.6),
        {(1.0, 0.6), (0.7, 0.6), (0.5, 0.6)},
    ),
    (
        "dare-task-vec/tulu-2.5",
        MergeMethod.DARE_TASK_ARITHMETIC,
        {1.0: [55.3, 56.5, 54.5, 55.3], 0.7: [54.5, 54.0, 53.5, 55.8], 0.5: [49.0, 49.3, 51.8, 54.8]},
        (1.0, 0.6),
        None,
    ),
    (
        "dare-ties/tulu-2.5",
        MergeMethod.DARE_TIES,
        {1.0: [55.5, 56.0, 56.0, 55.5], 0.7: [53.3, 54.3, 53.8, 52.3], 0.5: [51.5, 49.8, 51.5, 51.8]},
        (1.0, 0.6),
        {(1.0, 0.6), (1.0, 0.4)},
    ),
    (
        "ties/tulu-3",
        MergeMethod.TIES,
        {1.0: [53.5, 53.3, 54.0, 51.0], 0.7: [53.8, 54.3, 54.3, 51.5], 0.5: [53.5, 53.3, 54.0, 51.0]},
        (0.7, 0.4),
        {(0.7, 0.6), (0.7, 0.4)},
    ),
    (
        "dare-task-vec/tulu-3",
        MergeMethod.DARE_TASK_ARITHMETIC,
        {1.0: [54.8, 55.8, 55.3, 58.0], 0.7: [53.8, 53.8, 52.3, 50.3], 0.5: [50.0, 50.3, 51.0, 51.5]},
        (1.0, 0.2),
        None,
    ),
    (
        "dare-ties/tulu-3",
        MergeMethod.DARE_TIES,
        {1.0: [55.8, 55.8, 56.0, 56.8], 0.7: [52.8, 52.5, 52.5, 52.3], 0.5: [55.3, 53.8, 48.0, 54.5]},
        (1.0, 0.2),
        None,
    ),
]


def run_selection(entries, starred_slugs):
    calls = []

    def provider(recipe):
        calls.append(recipe)
        return 1.0 if recipe.slug() in starred_slugs else 0.0

    result = select_best(entries, provider)
    return result, calls


class TestRecordedSelectionTables:
    @pytest.mark.parametrize("name,method,accuracies,winner_lam,tied", LAMBDA_TABLES,
                             ids=[t[0] for t in LAMBDA_TABLES])
    def test_lambda_tables(self, name, method, accuracies, winner_lam, tied):
        entries = lam_entries(method, accuracies)
        starred = {r.slug() for r, _ in entries if r.lam == winner_lam}
        result, calls = run_selection(entries, starred)
        assert result.winner.lam == winner_lam
        if tied is None:
            assert calls == []
        else:
            assert {r.lam for r in calls} == tied

    @pytest.mark.parametrize("name,method,table,winner,tied", DENSITY_TABLES,
                             ids=[t[0] for t in DENSITY_TABLES])
    def test_density_tables(self, name, method, table, winner, tied):
        entries = density_entries(method, table)
        starred = {r.slug() for r, _ in entries if (r.lam, r.density) == winner}
        result, calls = run_selection(entries, starred)
        assert (result.winner.lam, result.winner.density) == winner
        if tied is None:
            assert calls == []
        else:
            assert {(r.lam, r.density) for r in calls} == tied


class TestSelectBest:
    def test_single_entry_needs_no_tiebreak(self):
        recipe = MergeRecipe(MergeMethod.LINEAR, lam=0.5)
        result, calls = run_selection([(recipe, 0.4)], set())
        assert result.winner is recipe and calls == []

    def test_provider_untouched_when_max_is_unique(self):
        recipes = [MergeRecipe(MergeMethod.LINEAR, lam=l) for l in (0.0, 0.5, 1.0)]
        entries = list(zip(recipes, [0.2, 0.9, 0.2]))
        result, calls = run_selection(entries, set())
        assert result.winner.lam == 0.5 and calls == []

    def test_residual_tie_resolves_by_grid_order(self):
        grid = generate_grid(SweepConfig(MergeMethod.TIES, lambda_grid=(0.5, 1.0), density_grid=(0.2, 0.8)))
        entries = [(r, 0.5) for r in grid]

        def flat_provider(recipe):
            return 0.25

        result = select_best(entries, flat_provider)
        assert (result.winner.lam, result.winner.density) == (0.5, 0.8)

    def test_rounded_tie_mode(self):
        a = MergeRecipe(MergeMethod.LINEAR, lam=0.0)
        b = MergeRecipe(MergeMethod.LINEAR, lam=1.0)
        entries = [(a, 0.5534), (b, 0.5530)]
        exact, calls_exact = run_selection(entries, set())
        assert exact.winner is a and calls_exact == []
        calls = []

        def provider(recipe):
            calls.append(recipe)
            return 1.0 if recipe is b else 0.0

        rounded = select_best(entries, provider, tie_rounding_decimals=2)
        assert rounded.winner is b and len(calls) == 2

    def test_tiebreak_values_recorded_on_entries(self):
        a = MergeRecipe(MergeMethod.LINEAR, lam=0.0)
        b = MergeRecipe(MergeMethod.LINEAR, lam=1.0)
        result, _ = run_selection([(a, 0.5), (b, 0.5)], {a.slug()})
        values = {e.recipe.lam: e.tiebreak_accuracy for e in result.entries}
        assert values == {0.0: 1.0, 1.0: 0.0}

    def test_empty_entries_rejected(self):
        with pytest.raises(VlrmergeError, match="empty"):
            select_best([], lambda r: 0.0)


class TestValidationSampling:
    def test_deterministic_and_disjoint(self, tmp_path):
        examples = load_pairwise_dataset(write_pairwise_dataset(tmp_path / "v.jsonl", 40))
        a_primary, a_tiebreak = sample_validation_slices(examples, seed=3, primary_size=20, tiebreak_size=10)
        b_primary, b_tiebreak = sample_validation_slices(examples, seed=3, primary_size=20, tiebreak_size=10)
        assert [e.id for e in a_primary] == [e.id for e in b_primary]
        assert [e.id for e in a_tiebreak] == [e.id for e in b_tiebreak]
        assert not {e.id for e in a_primary} & {e.id for e in a_tiebreak}

    def test_different_seed_changes_slices(self, tmp_path):
        examples = load_pairwise_dataset(write_pairwise_dataset(tmp_path / "v.jsonl", 40))
        a, _ = sample_validation_slices(examples, seed=3, primary_size=20, tiebreak_size=10)
        b, _ = sample_validation_slices(examples, seed=4, primary_size=20, tiebreak_size=10)
        assert [e.id for e in a] != [e.id for e in b]

    def test_too_small_dataset_rejected(self, tmp_path):
        examples = load_pairwise_dataset(write_pairwise_dataset(tmp_path / "v.jsonl", 10))
        with pytest.raises(DatasetError, match="need 20"):
            sample_validation_slices(examples, seed=0, primary_size=20, tiebreak_size=10)


class FailFor:
    def __init__(self, inner, fail_density):
        self.inner = inner
        self.fail_density = fail_density

    def score(self, requests):
        raise ScorerError("synthetic failure")


def small_config(**overrides):
    defaults = dict(
        lambda_grid=(0.5, 1.0),
        density_grid=(0.4, 0.2),
        primary_size=8,
        tiebreak_size=4,
        sampling_seed=7,
    )
    defaults.update(overrides)
    return SweepConfig(MergeMethod.TIES, **defaults)


class TestRunSweep:
    def test_stub_scorer_manifest(self, rng, tmp_path):
        triple = classified_toy_triple(rng)
        dataset = load_pairwise_dataset(write_pairwise_dataset(tmp_path / "v.jsonl", 16))
        config = small_config()
        result = run_sweep(
            config, triple, dataset, lambda recipe, path: StubScorer(), tmp_path / "out", jobs=1
        )
        manifest = (tmp_path / "out" / "sweep-manifest.jsonl").read_text().splitlines()
        records = [json.loads(line) for line in manifest]
        entries = [r for r in records if r["record"] == "entry"]
        assert len(entries) == 4
        assert all(r["status"] == "ok" for r in entries)
        assert records[-1]["record"] == "winner"
        assert result.winner is not None
        for entry in entries:
            assert (tmp_path / "out" / entry["variant"]).exists()

    def test_failed_recipe_is_flagged_and_excluded(self, rng, tmp_path):
        triple = classified_toy_triple(rng)
        dataset = load_pairwise_dataset(write_pairwise_dataset(tmp_path / "v.jsonl", 16))

        def factory(recipe, path):
            if recipe.density == 0.2 and recipe.lam == 0.5:
                return FailFor(None, 0.2)
            return StubScorer()

        result = run_sweep(small_config(), triple, dataset, factory, tmp_path / "out", jobs=1)
        statuses = {(e.recipe.lam, e.recipe.density): e.status for e in result.entries}
        assert statuses[(0.5, 0.2)] == "failed"
        assert result.winner is not None
        assert (result.winner.lam, result.winner.density) != (0.5, 0.2)

    def test_all_failed_leaves_no_winner(self, rng, tmp_path):
        triple = classified_toy_triple(rng)
        dataset = load_pairwise_dataset(write_pairwise_dataset(tmp_path / "v.jsonl", 16))
        result = run_sweep(
            small_config(), triple, dataset, lambda r, p: FailFor(None, None), tmp_path / "out", jobs=1
        )
        assert result.winner is None
        assert all(e.status == "failed" for e in result.entries)

    def test_record_then_replay_reproduces_manifest(self, rng, tmp_path):
        triple = classified_toy_triple(rng)
        dataset = load_pairwise_dataset(write_pairwise_dataset(tmp_path / "v.jsonl", 16))
        config = small_config()
        transcripts = tmp_path / "transcripts"
        transcripts.mkdir()

        def recording_factory(recipe, path):
            return RecordingScorer(StubScorer(), transcripts / f"{recipe.slug()}.jsonl")

        run_sweep(config, triple, dataset, recording_factory, tmp_path / "run1", jobs=1)

        def replay_factory(recipe, path):
            return ReplayScorer(transcripts / f"{recipe.slug()}.jsonl")

        run_sweep(config, triple, dataset, replay_factory, tmp_path / "run2", jobs=1)
        first = (tmp_path / "run1" / "sweep-manifest.jsonl").read_bytes()
        second = (tmp_path / "run2" / "sweep-manifest.jsonl").read_bytes()
        assert first == second

    def test_linear_defaults_give_eleven_entry_manifest(self, rng, tmp_path):
        triple = classified_toy_triple(rng)
        dataset = load_pairwise_dataset(write_pairwise_dataset(tmp_path / "v.jsonl", 500))
        config = SweepConfig(MergeMethod.LINEAR)  # default grid and 400/100 split
        result = run_sweep(
            config, triple, dataset, lambda r, p: StubScorer(), tmp_path / "out", jobs=2
        )
        manifest = (tmp_path / "out" / "sweep-manifest.jsonl").read_text().splitlines()
        entries = [json.loads(l) for l in manifest if '"record": "entry"' in l]
        assert len(entries) == 11
        assert result.winner is not None

    def test_manifest_is_independent_of_worker_count(self, rng, tmp_path):
        triple = classified_toy_triple(rng)
        dataset = load_pairwise_dataset(write_pairwise_dataset(tmp_path / "v.jsonl", 16))
        config = small_config()
        run_sweep(config, triple, dataset, lambda r, p: StubScorer(), tmp_path / "a", jobs=1)
        run_sweep(config, triple, dataset, lambda r, p: StubScorer(), tmp_path / "b", jobs=4)
        assert (tmp_path / "a" / "sweep-manifest.jsonl").read_bytes() == (
            tmp_path / "b" / "sweep-manifest.jsonl"
        ).read_bytes()
        for variant in (tmp_path / "a").glob("variant-*"):
            assert variant.read_bytes() == (tmp_path / "b" / variant.name).read_bytes()

    def test_cached_variants_are_reused(self, rng, tmp_path, caplog):
        triple = classified_toy_triple(rng)
        dataset = load_pairwise_dataset(write_pairwise_dataset(tmp_path / "v.jsonl", 16))
        config = small_config()
        out = tmp_path / "out"
        run_sweep(config, triple, dataset, lambda r, p: StubScorer(), out, jobs=1)
        mtimes = {p.name: p.stat().st_mtime_ns for p in out.glob("variant-*")}
        run_sweep(config, triple, dataset, lambda r, p: StubScorer(), out, jobs=1)
        assert {p.name: p.stat().st_mtime_ns for p in out.glob("variant-*")} == mtimes
