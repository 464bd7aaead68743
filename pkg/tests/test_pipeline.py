import dataclasses
import json
import math
import warnings

import numpy as np
import pytest

from conftest import cached_run, kg, variant_run
from kgalign.annotator import OracleBackend, name_similarity
from kgalign.errors import BackendError, ConfigError, DataError
from kgalign.kg import KgPair
from kgalign.pipeline import (
    RunConfig,
    PipelineAborted,
    ablate,
    budget_schedule,
    dump_config,
    load_config,
    parse_config_text,
    run,
)
from kgalign.synth import SynthSpec, synth_pair

SMALL = dict(synth_entities=150, synth_degree=6.0, epochs=60)


def test_synth_noise_free_copy():
    pair = synth_pair(SynthSpec(entity_count=60, relation_count=5, mean_degree=4, seed=3))
    src, tgt, truth = pair.source, pair.target, pair.ground_truth
    assert sorted(truth.values()) == list(range(60))
    tgt_set = set(map(tuple, tgt.triples.tolist()))
    # each source relation must map to exactly one target relation
    rel_map = {}
    for h, r, t in src.triples.tolist():
        options = {r2 for r2 in range(tgt.num_relations) if (truth[h], r2, truth[t]) in tgt_set}
        rel_map[r] = rel_map.get(r, options) & options
    assert all(len(v) == 1 for v in rel_map.values())
    pi = {r: next(iter(v)) for r, v in rel_map.items()}
    assert len(set(pi.values())) == len(pi)
    assert {(truth[h], pi[r], truth[t]) for h, r, t in src.triples.tolist()} == tgt_set
    assert all(name_similarity(src.entity_names[s], tgt.entity_names[t]) == 1.0 for s, t in truth.items())


def test_synth_is_reproducible():
    spec = SynthSpec(entity_count=80, edge_dropout=0.2, name_noise=0.3, seed=9)
    a, b = synth_pair(spec), synth_pair(spec)
    assert np.array_equal(a.source.triples, b.source.triples)
    assert np.array_equal(a.target.triples, b.target.triples)
    assert a.target.entity_names == b.target.entity_names


def test_synth_dropout_within_three_sigma():
    p = 0.2
    pair = synth_pair(SynthSpec(entity_count=500, mean_degree=6.0, edge_dropout=p, seed=0))
    n = pair.source.num_triples
    mean, sd = (1 - p) * n, math.sqrt(n * p * (1 - p))
    assert abs(pair.target.num_triples - mean) <= 3 * sd


def test_synth_name_noise_changes_names():
    pair = synth_pair(SynthSpec(entity_count=200, name_noise=0.5, seed=1))
    changed = sum(pair.source.entity_names[s] != pair.target.entity_names[t] for s, t in pair.ground_truth.items())
    assert 60 <= changed <= 140


def test_synth_warns_on_isolated_majority():
    with pytest.warns(UserWarning, match="without triples"):
        synth_pair(SynthSpec(entity_count=100, mean_degree=1.0, edge_dropout=0.9, seed=0))


def test_synth_validation():
    with pytest.raises(ConfigError):
        SynthSpec(entity_count=1)
    with pytest.raises(ConfigError):
        SynthSpec(edge_dropout=1.0)


def test_budget_schedule():
    assert budget_schedule(50, 3) == [16, 16, 18]
    assert budget_schedule(2, 3) == [0, 0, 2]
    assert sum(budget_schedule(17, 4)) == 17


def test_zero_budget_is_a_config_error():
    with pytest.raises(ConfigError):
        run(RunConfig(budget_fraction=0.001, synth_entities=100))


def test_run_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(strategy="best")
    with pytest.raises(ConfigError):
        RunConfig(delta0=0.95)
    with pytest.raises(ConfigError):
        RunConfig(iterations=0)
    with pytest.raises(ConfigError):
        RunConfig(backend="human")


def test_config_text():
    cfg = parse_config_text("# comment\niterations = 2\nuse-refiner = false\nmax_tokens =\np_true=0.7 # inline\n")
    assert (cfg.iterations, cfg.use_refiner, cfg.max_tokens, cfg.p_true) == (2, False, None, 0.7)
    assert parse_config_text(dump_config(cfg)) == cfg
    with pytest.raises(ConfigError):
        parse_config_text("colour = blue")
    with pytest.raises(ConfigError):
        parse_config_text("iterations two")
    with pytest.raises(ConfigError):
        parse_config_text("iterations = two")


def test_missing_config_file(tmp_path):
    with pytest.raises(DataError):
        load_config(str(tmp_path / "absent.cfg"))


def _check_conservation(report, pool):
    assert report.spent_queries <= report.budget
    if pool >= report.budget:
        assert report.spent_queries == report.budget
    assert sum(rec.queries for rec in report.iterations) == report.spent_queries
    assert len(report.annotated) == len(set(report.annotated))


@pytest.mark.parametrize("iterations", [1, 3])
def test_small_runs_complete_and_conserve_budget(iterations):
    cfg = RunConfig(iterations=iterations, **SMALL)
    report = run(cfg)
    assert len(report.iterations) == iterations
    _check_conservation(report, cfg.synth_entities)


def test_budget_larger_than_pool_stops_at_pool():
    pair = KgPair(kg(["a", "b", "c"], ["r"], [(0, 0, 1)]), kg(["a", "b", "c"], ["r"], [(0, 0, 1)]), {0: 0, 1: 1, 2: 2})
    report = run(RunConfig(budget_fraction=1.0, iterations=2, epochs=5), pair)
    assert report.spent_queries == 3 and sorted(report.annotated) == [0, 1, 2]


def test_oracle_run_beats_random_guessing():
    cfg = RunConfig(backend="oracle")
    report = cached_run(cfg)
    assert report.final.hit1 > 1 / cfg.synth_entities
    _check_conservation(report, cfg.synth_entities)


def test_refiner_helps_under_noisy_annotation():
    on, off = [], []
    for seed in range(3):
        cfg = RunConfig(seed=seed, p_true=0.5)
        on.append(variant_run(cfg, "full").final.hit1)
        off.append(variant_run(cfg, "no-refiner").final.hit1)
    assert np.mean(on) > np.mean(off)


def test_hit1_does_not_fall_below_first_iteration():
    hits = np.array([[rec.hit1 for rec in cached_run(RunConfig(seed=s)).iterations] for s in range(3)])
    means = hits.mean(axis=0)
    assert all(m >= means[0] for m in means)


@pytest.mark.parametrize("seed", [0, 3])
def test_perfect_annotation_gives_perfect_refined_labels(seed):
    n = 500
    cfg = RunConfig(seed=seed, backend="oracle", k=n, synth_entities=n, synth_dropout=0.0, synth_noise=0.0)
    for rec in cached_run(cfg).iterations:
        assert rec.tpr_refined == 1.0


def test_run_is_deterministic():
    cfg = RunConfig(seed=4, **SMALL)
    assert run(cfg).to_json() == run(cfg).to_json()
    assert run(cfg).to_csv() == run(cfg).to_csv()


def test_report_formats(tmp_path):
    report = run(RunConfig(iterations=2, **SMALL))
    data = json.loads(report.to_json())
    assert data["final"]["hit1"] == report.final.hit1
    assert "wall_time" not in data["final"]
    assert "wall_time" in json.loads(report.to_json(include_timing=True))["final"]
    lines = report.to_csv().splitlines()
    assert lines[0].startswith("iteration,queries,labels")
    assert len(lines) == 3
    report.write(str(tmp_path / "r.csv"), str(tmp_path / "r.json"))
    assert (tmp_path / "r.json").read_text() == report.to_json()


def test_ablate_full_equals_run():
    cfg = RunConfig(**SMALL)
    assert ablate(cfg, "full").to_json() == run(cfg).to_json()


def test_no_refiner_trains_on_raw_labels():
    report = ablate(RunConfig(**SMALL), "no-refiner")
    for rec in report.iterations:
        assert rec.refined == rec.labels
        assert rec.tpr_refined == rec.tpr_labels


def test_unknown_variant():
    with pytest.raises(ConfigError):
        ablate(RunConfig(), "no-matcher")


@pytest.mark.parametrize("variant", ["no-active", "ur-only", "nu-only", "degree", "funcSum", "random-select"])
def test_every_variant_runs(variant):
    report = ablate(RunConfig(iterations=2, **SMALL), variant)
    _check_conservation(report, SMALL["synth_entities"])


def test_degree_variant_picks_star_hub_first():
    d = 9
    names = [f"e{i}" for i in range(d + 1)]
    star = kg(names, ["r"], [(0, 0, i) for i in range(1, d + 1)])
    pair = KgPair(star, kg(names, ["r"], [(0, 0, i) for i in range(1, d + 1)]), {i: i for i in range(d + 1)})
    report = ablate(RunConfig(budget_fraction=0.1, iterations=1, epochs=5), "degree", pair)
    assert report.annotated == [0]


class _Failing:
    name = "failing"

    def __init__(self, truth, fail_after):
        self.oracle = OracleBackend(truth)
        self.calls = 0
        self.fail_after = fail_after

    def answer(self, source, candidates, prompt):
        self.calls += 1
        if self.calls > self.fail_after:
            raise BackendError("service unavailable")
        return self.oracle.answer(source, candidates, prompt)


def test_backend_failure_aborts_with_partial_report():
    cfg = RunConfig(iterations=3, **SMALL)
    pair = synth_pair(cfg.synth_spec())
    with pytest.raises(PipelineAborted) as info:
        run(cfg, pair, _Failing(pair.ground_truth, fail_after=8))
    report = info.value.report
    assert len(report.iterations) == 1
    assert report.spent_queries == 8 and report.aborted
    assert isinstance(info.value, BackendError)


def test_llm_backend_requires_endpoint():
    with pytest.raises(ConfigError):
        run(dataclasses.replace(RunConfig(**SMALL), backend="llm"))


def test_no_warnings_on_standard_fixture():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        synth_pair(RunConfig().synth_spec())
