import json
import math

import pytest

from campus.corpus import Dataset, EncodedCorpus, InstructionSample
from campus.probe import NGramProbe
from campus.runner import (
    Convergence,
    RunConfig,
    RunnerError,
    composition_report,
    convergence_report,
    corpus_cross_entropy,
    run,
)
from campus.scheduler import ScopeConfig

from synth import synth_dataset


def small_cfg(**kw):
    base = dict(scope=ScopeConfig(T=20), metrics=("d1", "d2"), policy="min", seed=0)
    base.update(kw)
    return RunConfig(**base)


def consumed_by_schedule(trace):
    out = {}
    for step in trace.steps:
        out.setdefault(step.schedule, []).append(step)
    return out


class TestRun:
    def test_single_metric_degenerates_to_plain_curriculum(self, small_corpus):
        probe = NGramProbe(small_corpus.vocab.size)
        trace = run(small_corpus.dataset, probe, None, small_cfg(metrics=("d1",)), corpus=small_corpus)
        assert trace.steps
        assert {s.schedule for s in trace.steps} == {1}
        ts = [s.t for s in trace.steps]
        assert ts == sorted(ts)

    def test_step_count_bounded_by_metrics_times_T(self, small_corpus):
        probe = NGramProbe(small_corpus.vocab.size)
        trace = run(small_corpus.dataset, probe, None, small_cfg(), corpus=small_corpus)
        assert len(trace.steps) <= 2 * 20
        per_schedule = consumed_by_schedule(trace)
        for steps in per_schedule.values():
            assert len(steps) <= 20

    def test_in_order_consumption(self, small_corpus):
        probe = NGramProbe(small_corpus.vocab.size)
        trace = run(small_corpus.dataset, probe, None, small_cfg(), corpus=small_corpus)
        for steps in consumed_by_schedule(trace).values():
            ts = [s.t for s in steps]
            assert ts == sorted(ts) and len(set(ts)) == len(ts)
            his = [s.hi for s in steps]
            assert all(a < b for a, b in zip(his, his[1:]))

    def test_coverage_without_dedup(self, small_corpus):
        probe = NGramProbe(small_corpus.vocab.size)
        trace = run(small_corpus.dataset, probe, None, small_cfg(), corpus=small_corpus)
        all_ids = sorted(small_corpus.by_id)
        for steps in consumed_by_schedule(trace).values():
            consumed = [sid for s in steps for sid in s.ids]
            assert sorted(consumed) == all_ids  # exactly once per schedule

    def test_dedup_trains_each_sample_at_most_once(self, small_corpus):
        probe = NGramProbe(small_corpus.vocab.size)
        trace = run(small_corpus.dataset, probe, None, small_cfg(dedup=True), corpus=small_corpus)
        trained = trace.trained_ids()
        assert len(trained) == len(set(trained))
        assert set(trained) == set(small_corpus.by_id)
        assert any(s.skipped for s in trace.steps)
        for s in trace.steps:
            if s.skipped:
                assert s.ids == [] and s.loss is None

    def test_deterministic_traces(self, small_corpus):
        a = run(small_corpus.dataset, NGramProbe(small_corpus.vocab.size), None, small_cfg(), corpus=small_corpus)
        b = run(small_corpus.dataset, NGramProbe(small_corpus.vocab.size), None, small_cfg(), corpus=small_corpus)
        assert a.to_jsonl() == b.to_jsonl()

    def test_ppl_snapshot_covers_live_candidates(self, small_corpus):
        probe = NGramProbe(small_corpus.vocab.size)
        trace = run(small_corpus.dataset, probe, None, small_cfg(), corpus=small_corpus)
        first = trace.steps[0]
        assert set(first.ppl) == {1, 2}
        assert first.ppl[first.schedule] == min(first.ppl.values())

    def test_max_steps_convergence(self, small_corpus):
        cfg = small_cfg(convergence=Convergence(mode="max_steps", max_steps=5))
        trace = run(small_corpus.dataset, NGramProbe(small_corpus.vocab.size), None, cfg, corpus=small_corpus)
        assert len(trace.steps) == 5

    def test_plateau_convergence_stops_early(self):
        # constant-content corpus: loss flattens immediately
        ds = Dataset([InstructionSample(id=i, instruction="a a", output="b b") for i in range(40)])
        corpus = EncodedCorpus.build(ds)
        cfg = small_cfg(
            metrics=("d1",),
            scope=ScopeConfig(T=20),
            convergence=Convergence(mode="plateau", rel_tol=1e-4, patience=3),
        )
        trace = run(ds, NGramProbe(corpus.vocab.size), None, cfg, corpus=corpus)
        assert len(trace.steps) < 20

    def test_trace_metadata(self, small_corpus):
        probe = NGramProbe(small_corpus.vocab.size)
        trace = run(small_corpus.dataset, probe, None, small_cfg(), corpus=small_corpus)
        assert trace.metadata["dataset_digest"] == small_corpus.dataset.digest()
        assert trace.metadata["n_samples"] == len(small_corpus.dataset)
        assert [s["metric"] for s in trace.metadata["schedules"]] == ["d1", "d2"]

    def test_trace_file_written_and_flushed(self, small_corpus, tmp_path):
        path = tmp_path / "trace.jsonl"
        probe = NGramProbe(small_corpus.vocab.size)
        trace = run(small_corpus.dataset, probe, None, small_cfg(), trace_path=str(path), corpus=small_corpus)
        lines = path.read_text().splitlines()
        assert len(lines) == len(trace.steps)
        assert json.loads(lines[0])["step"] == 0

    def test_probe_failure_preserves_partial_trace(self, small_corpus, tmp_path):
        class FailingProbe(NGramProbe):
            def __init__(self, vocab_size):
                super().__init__(vocab_size)
                self.updates = 0

            def update(self, batch):
                self.updates += 1
                if self.updates > 3:
                    raise RuntimeError("probe died")
                super().update(batch)

        path = tmp_path / "trace.jsonl"
        with pytest.raises(RuntimeError, match="probe died"):
            run(small_corpus.dataset, FailingProbe(small_corpus.vocab.size), None, small_cfg(), trace_path=str(path), corpus=small_corpus)
        assert len(path.read_text().splitlines()) == 3

    def test_scorer_without_d4_rejected(self, small_corpus):
        from campus.scorer import Mlp

        with pytest.raises(RunnerError, match="d4"):
            run(small_corpus.dataset, NGramProbe(small_corpus.vocab.size), Mlp.zeros(16, 8), small_cfg(), corpus=small_corpus)

    def test_competence_run_with_resort_window(self, small_corpus):
        probe = NGramProbe(small_corpus.vocab.size)
        cfg = small_cfg(metrics=("d1", "d3"), resort_window=10)
        trace = run(small_corpus.dataset, probe, None, cfg, corpus=small_corpus)
        all_ids = sorted(small_corpus.by_id)
        for steps in consumed_by_schedule(trace).values():
            assert sorted(sid for s in steps for sid in s.ids) == all_ids

    def test_refresh_all_differs_from_stale(self, synth_corpus):
        cfg_stale = small_cfg(scope=ScopeConfig(T=25))
        cfg_all = small_cfg(scope=ScopeConfig(T=25), refresh_ppl="all")
        a = run(synth_corpus.dataset, NGramProbe(synth_corpus.vocab.size), None, cfg_stale, corpus=synth_corpus)
        b = run(synth_corpus.dataset, NGramProbe(synth_corpus.vocab.size), None, cfg_all, corpus=synth_corpus)
        assert a.to_jsonl() != b.to_jsonl()


class TestReports:
    def _trace(self, corpus, **kw):
        return run(corpus.dataset, NGramProbe(corpus.vocab.size), None, small_cfg(**kw), corpus=corpus)

    def test_single_source_fractions(self):
        ds = Dataset([InstructionSample(id=i, instruction=f"q {i}", output="a b c", source="math") for i in range(30)])
        corpus = EncodedCorpus.build(ds)
        trace = self._trace(corpus, metrics=("d1",), scope=ScopeConfig(T=5))
        rep = composition_report(trace, ds, 10)
        assert rep["first"] == {"math": 1.0}
        assert rep["last"] == {"math": 1.0}

    def test_fractions_sum_to_one(self, small_corpus):
        trace = self._trace(small_corpus)
        rep = composition_report(trace, small_corpus.dataset, 50)
        assert sum(rep["first"].values()) == pytest.approx(1.0, abs=1e-9)
        assert sum(rep["last"].values()) == pytest.approx(1.0, abs=1e-9)

    def test_full_window_first_equals_last(self, small_corpus):
        trace = self._trace(small_corpus)
        total = len(trace.trained_ids())
        rep = composition_report(trace, small_corpus.dataset, total)
        assert rep["first"] == rep["last"]
        assert not rep["clamped"]

    def test_clamping_flag(self, small_corpus):
        trace = self._trace(small_corpus)
        rep = composition_report(trace, small_corpus.dataset, 10**9)
        assert rep["clamped"]
        assert rep["k"] == len(trace.trained_ids())

    def test_k_must_be_positive(self, small_corpus):
        trace = self._trace(small_corpus)
        with pytest.raises(RunnerError):
            composition_report(trace, small_corpus.dataset, 0)

    def test_convergence_report_shape(self, small_corpus):
        trace = self._trace(small_corpus)
        csv = convergence_report(trace)
        lines = csv.splitlines()
        assert lines[0] == "step,mean_probe_loss,batch_ppl"
        assert len(lines) == 1 + len(trace.steps)
        for line, step in zip(lines[1:], trace.steps):
            cols = line.split(",")
            assert int(cols[0]) == step.step
            assert float(cols[1]) == step.loss
            assert float(cols[2]) == step.ppl[step.schedule]

    def test_corpus_cross_entropy_uniform(self, small_corpus):
        probe = NGramProbe(64)
        assert corpus_cross_entropy(small_corpus, probe) == pytest.approx(math.log(64), abs=1e-9)
