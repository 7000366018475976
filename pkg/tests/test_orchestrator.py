"""Token bucket, AIMD governor, journal replay, and the run lifecycle."""

import json
import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from conftest import ECHO_SCRIPT, echo_benchmark, scripted_card, write_benchmark, write_model_card
from depkit.adapter import open_endpoint
from depkit.clock import VirtualClock
from depkit.orchestrator import (
    ConcurrencyGovernor,
    JournalError,
    Orchestrator,
    RunJournal,
    TokenBucket,
    replay_journal,
)
from depkit.protocol import LifecycleState, ProtocolError, encode_message, record_to_body
from depkit.transport import ServerBinding, serve


class TestTokenBucket:
    def test_full_bucket_grants_capacity_then_waits(self):
        clock = VirtualClock()
        bucket = TokenBucket(10, 5.0, clock=clock)
        for _ in range(10):
            assert bucket.acquire_nowait() == 0.0
        wait = bucket.acquire_nowait()
        assert wait == pytest.approx(1 / 5.0)

    def test_empty_bucket_wait_is_one_over_rate(self):
        clock = VirtualClock()
        bucket = TokenBucket(1, 5.0, clock=clock)
        assert bucket.acquire_nowait() == 0.0
        assert bucket.acquire_nowait() == pytest.approx(0.2)

    def test_blocking_acquire_advances_clock(self):
        clock = VirtualClock()
        bucket = TokenBucket(10, 20.0, clock=clock)
        for _ in range(100):
            bucket.acquire()
        # (100 - 10) / 20 = 4.5 seconds of refill needed
        assert clock.now() >= 4.5
        assert clock.now() <= 5.5

    def test_level_clamped_at_capacity(self):
        clock = VirtualClock()
        bucket = TokenBucket(4, 100.0, clock=clock)
        clock.advance(60)
        assert bucket.level == 4.0

    def test_refill_is_linear(self):
        clock = VirtualClock()
        bucket = TokenBucket(10, 2.0, clock=clock)
        for _ in range(10):
            bucket.acquire()
        clock.advance(1.5)
        assert bucket.level == pytest.approx(3.0)

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            TokenBucket(0, 1.0)
        with pytest.raises(ValueError):
            TokenBucket(5, 0.0)

    @given(st.lists(st.one_of(
        st.just("acquire"),
        st.floats(min_value=0.0, max_value=2.0)), min_size=1, max_size=80))
    @settings(max_examples=150, deadline=None)
    def test_burst_bound_over_any_window(self, actions):
        # permits granted in any window of length w never exceed capacity + rate*w
        clock = VirtualClock()
        capacity, rate = 5, 8.0
        bucket = TokenBucket(capacity, rate, clock=clock)
        grants = []
        for action in actions:
            if action == "acquire":
                bucket.acquire()
                grants.append(clock.now())
            else:
                clock.advance(action)
        for i in range(len(grants)):
            for j in range(i, len(grants)):
                window = grants[j] - grants[i]
                count = j - i + 1
                assert count <= capacity + rate * window + 1e-6


class TestGovernor:
    def test_429_halves_limit(self):
        governor = ConcurrencyGovernor(max_limit=8, decrease_factor=0.5)
        assert governor.on_status(429) == 4

    def test_floor_clamp_at_one(self):
        governor = ConcurrencyGovernor(max_limit=8, start_limit=1)
        assert governor.on_status(429) == 1

    def test_cooldown_successes_raise_limit(self):
        governor = ConcurrencyGovernor(max_limit=8, start_limit=2, cooldown_successes=10)
        for _ in range(9):
            governor.on_status(200)
        assert governor.current_limit == 2
        governor.on_status(200)
        assert governor.current_limit == 3

    def test_failure_breaks_the_streak(self):
        governor = ConcurrencyGovernor(max_limit=8, start_limit=2, cooldown_successes=3)
        governor.on_status(200)
        governor.on_status(200)
        governor.on_status(500)
        governor.on_status(200)
        governor.on_status(200)
        assert governor.current_limit == 2  # streak restarted, no increase yet

    def test_never_exceeds_max(self):
        governor = ConcurrencyGovernor(max_limit=3, cooldown_successes=1)
        for _ in range(50):
            governor.on_status(200)
        assert governor.current_limit == 3

    @given(st.lists(st.sampled_from([200, 429, 500, 503, 400]), max_size=300))
    @settings(max_examples=200)
    def test_bounds_under_arbitrary_streams(self, statuses):
        governor = ConcurrencyGovernor(max_limit=8)
        for status in statuses:
            governor.on_status(status)
            assert 1 <= governor.current_limit <= 8


class TestJournalReplay:
    def test_partial_trailing_line_discarded(self, tmp_path):
        path = tmp_path / "j.ndjson"
        with RunJournal(path) as journal:
            journal.append({"entry": "task-created", "evaluation_id": "e", "state": "paused",
                            "manifest": {}, "at": 1.0})
            journal.append({"entry": "sample-generated", "sample_id": "s1",
                            "prediction": {"sample_id": "s1", "raw_output": "x"}, "at": 2.0})
        with path.open("a") as handle:
            handle.write('{"entry": "sample-generated", "sample_id": "s2", "predi')
        state = replay_journal(path)
        assert list(state.predictions) == ["s1"]

    def test_corrupt_middle_line_names_line_number(self, tmp_path):
        path = tmp_path / "j.ndjson"
        path.write_text(
            '{"entry": "task-created", "evaluation_id": "e", "state": "paused", "manifest": {}, "at": 1}\n'
            "{broken}\n"
            '{"entry": "rate-event", "status": 429, "at": 2}\n')
        with pytest.raises(JournalError) as exc:
            replay_journal(path)
        assert exc.value.line_number == 2

    def test_duplicate_sample_rejected(self, tmp_path):
        path = tmp_path / "j.ndjson"
        entry = ('{"entry": "sample-generated", "sample_id": "s1", '
                 '"prediction": {"sample_id": "s1", "raw_output": "x"}, "at": 2}\n')
        path.write_text(entry + entry)
        with pytest.raises(JournalError) as exc:
            replay_journal(path)
        assert exc.value.line_number == 2

    def test_replay_reports_journaled_state_verbatim(self, tmp_path):
        path = tmp_path / "j.ndjson"
        path.write_text(
            '{"entry": "task-created", "evaluation_id": "e", "state": "paused", "manifest": {}, "at": 1}\n'
            '{"entry": "state-changed", "from": "paused", "to": "running", "progress": {}, "at": 2}\n')
        # a live (or crashed) run reads as running; run() owns the stale case
        assert replay_journal(path).state is LifecycleState.RUNNING

    def test_missing_journal_404(self, tmp_path):
        with pytest.raises(ProtocolError) as exc:
            replay_journal(tmp_path / "nope.ndjson")
        assert exc.value.code == 404


@pytest.fixture
def orchestra(tmp_path):
    """Orchestrator on a virtual clock plus a 20-sample echo fixture."""
    bench = echo_benchmark(tmp_path / "bench", n=20)
    models = tmp_path / "models"
    write_model_card(models, "echo", ECHO_SCRIPT)
    clock = VirtualClock()
    orch = Orchestrator(home=tmp_path / "home", clock=clock)
    return orch, bench, models, clock


class TestCreate:
    def test_initial_state_and_progress(self, orchestra):
        orch, bench, models, _ = orchestra
        task = orch.create_evaluation("echo", "toy", ServerBinding.local(bench),
                                      model_dirs=[models])
        assert task.state is LifecycleState.PAUSED
        assert task.progress.to_dict() == {"fetched": 0, "generated": 0, "submitted": 0}

    def test_unknown_model_names_id(self, orchestra):
        orch, bench, models, _ = orchestra
        with pytest.raises(ProtocolError) as exc:
            orch.create_evaluation("missing-model", "toy", ServerBinding.local(bench),
                                   model_dirs=[models])
        assert exc.value.code == 404 and "missing-model" in exc.value.message

    def test_unknown_dataset_404(self, orchestra):
        orch, bench, models, _ = orchestra
        with pytest.raises(ProtocolError) as exc:
            orch.create_evaluation("echo", "missing-ds", ServerBinding.local(bench),
                                   model_dirs=[models])
        assert exc.value.code == 404

    def test_two_creations_distinct_ids(self, orchestra):
        orch, bench, models, _ = orchestra
        binding = ServerBinding.local(bench)
        a = orch.create_evaluation("echo", "toy", binding, model_dirs=[models])
        b = orch.create_evaluation("echo", "toy", binding, model_dirs=[models])
        assert a.id != b.id

    def test_invalid_config_422(self, orchestra):
        orch, bench, models, _ = orchestra
        with pytest.raises(ProtocolError) as exc:
            orch.create_evaluation("echo", "toy", ServerBinding.local(bench),
                                   model_dirs=[models], concurrency={"max_limit": 0})
        assert exc.value.code == 422


class CountingEndpoint:
    """Wraps an endpoint; optionally fires an interrupt after N successes."""

    def __init__(self, inner, interrupt=None, after=None):
        self.inner = inner
        self.calls = 0
        self._interrupt = interrupt
        self._after = after
        self._lock = threading.Lock()

    def generate(self, request):
        response = self.inner.generate(request)
        with self._lock:
            self.calls += 1
            if self._after is not None and self.calls >= self._after and self._interrupt:
                self._interrupt.set()
        return response


class TestRunLifecycle:
    def test_full_run_completes(self, orchestra):
        orch, bench, models, _ = orchestra
        task = orch.create_evaluation("echo", "toy", ServerBinding.local(bench),
                                      model_dirs=[models])
        task = orch.run(task.id)
        assert task.state is LifecycleState.COMPLETED
        assert task.progress.to_dict() == {"fetched": 20, "generated": 20, "submitted": 20}
        report = orch.stored_report(task.id)
        assert report.overall["acc"] == 0.5
        assert report.counts == {"served": 20, "submitted": 20, "scored": 20}

    def test_interrupt_then_resume_exact_call_split(self, orchestra):
        orch, bench, models, _ = orchestra
        task = orch.create_evaluation("echo", "toy", ServerBinding.local(bench),
                                      model_dirs=[models], concurrency={"max_limit": 1})
        interrupt = threading.Event()
        first = CountingEndpoint(open_endpoint(scripted_card("echo", ECHO_SCRIPT)),
                                 interrupt=interrupt, after=8)
        task = orch.run(task.id, interrupt=interrupt, endpoint=first)
        assert task.state is LifecycleState.PAUSED
        assert first.calls == 8
        assert orch.status(task.id).progress["generated"] == 8

        second = CountingEndpoint(open_endpoint(scripted_card("echo", ECHO_SCRIPT)))
        task = orch.run(task.id, endpoint=second)
        assert task.state is LifecycleState.COMPLETED
        assert second.calls == 12
        assert first.calls + second.calls == 20

    def test_resume_of_completed_is_noop(self, orchestra):
        orch, bench, models, _ = orchestra
        task = orch.create_evaluation("echo", "toy", ServerBinding.local(bench),
                                      model_dirs=[models])
        orch.run(task.id)
        counting = CountingEndpoint(open_endpoint(scripted_card("echo", ECHO_SCRIPT)))
        task = orch.resume(task.id, endpoint=counting)
        assert task.state is LifecycleState.COMPLETED
        assert counting.calls == 0

    def test_truncated_journal_redispatches_that_sample_only(self, orchestra):
        orch, bench, models, _ = orchestra
        task = orch.create_evaluation("echo", "toy", ServerBinding.local(bench),
                                      model_dirs=[models])
        orch.run(task.id)
        journal_path = orch._journal_path(task.id)
        lines = journal_path.read_text().splitlines(keepends=True)
        sample_lines = [l for l in lines if '"sample-generated"' in l]
        # drop everything after the last sample entry, then truncate it mid-write
        cut = lines.index(sample_lines[-1])
        journal_path.write_text("".join(lines[:cut]) + sample_lines[-1][:40])
        counting = CountingEndpoint(open_endpoint(scripted_card("echo", ECHO_SCRIPT)))
        task = orch.resume(task.id, endpoint=counting)
        assert task.state is LifecycleState.COMPLETED
        assert counting.calls == 1

    def test_pause_request_file(self, orchestra):
        orch, bench, models, _ = orchestra
        task = orch.create_evaluation("echo", "toy", ServerBinding.local(bench),
                                      model_dirs=[models], concurrency={"max_limit": 1})
        orch.request_pause(task.id)
        task = orch.run(task.id)
        assert task.state is LifecycleState.PAUSED
        assert orch.status(task.id).progress["generated"] == 0
        # the request is consumed: a fresh run goes to completion
        task = orch.run(task.id)
        assert task.state is LifecycleState.COMPLETED

    def test_conflicting_submission_fails_with_journaled_cause(self, orchestra):
        orch, bench, models, _ = orchestra
        task = orch.create_evaluation("echo", "toy", ServerBinding.local(bench),
                                      model_dirs=[models])
        # a different client already submitted a different payload for this ID
        from depkit.protocol import PredictionRecord
        from depkit.transport import bind
        foreign = bind(ServerBinding.local(bench))
        foreign.open_evaluation(task.id, "toy", "echo")
        batch = foreign.fetch_samples("toy", 0, 64)
        foreign.submit(task.id, [PredictionRecord(sample_id=s.sample_id, raw_output="hijack")
                                 for s in batch.samples])
        task = orch.run(task.id)
        assert task.state is LifecycleState.FAILED
        assert "409" in task.last_error
        snapshot = orch.status(task.id)
        assert snapshot.state is LifecycleState.FAILED
        assert "409" in snapshot.last_error

    def test_submission_rejected_with_422_fails_with_journaled_cause(self, orchestra, monkeypatch):
        import depkit.orchestrator as orchestrator_mod
        orch, bench, models, _ = orchestra
        task = orch.create_evaluation("echo", "toy", ServerBinding.local(bench),
                                      model_dirs=[models])

        real_bind = orchestrator_mod.bind

        class RejectingHandle:
            def __init__(self, inner):
                self._inner = inner

            def __getattr__(self, name):
                return getattr(self._inner, name)

            def submit(self, *args, **kwargs):
                raise ProtocolError(422, "predictions do not match served samples")

        monkeypatch.setattr(orchestrator_mod, "bind",
                            lambda *a, **kw: RejectingHandle(real_bind(*a, **kw)))
        task = orch.run(task.id)
        assert task.state is LifecycleState.FAILED
        assert "422" in task.last_error
        assert "422" in orch.status(task.id).last_error  # cause survives replay

    def test_exactly_once_across_repeated_interrupts(self, orchestra):
        orch, bench, models, _ = orchestra
        task = orch.create_evaluation("echo", "toy", ServerBinding.local(bench),
                                      model_dirs=[models], concurrency={"max_limit": 1})
        total = 0
        for stop_after in (5, 4, 7):
            interrupt = threading.Event()
            endpoint = CountingEndpoint(open_endpoint(scripted_card("echo", ECHO_SCRIPT)),
                                        interrupt=interrupt, after=stop_after)
            task = orch.run(task.id, interrupt=interrupt, endpoint=endpoint)
            total += endpoint.calls
            assert task.state is LifecycleState.PAUSED
        endpoint = CountingEndpoint(open_endpoint(scripted_card("echo", ECHO_SCRIPT)))
        task = orch.run(task.id, endpoint=endpoint)
        total += endpoint.calls
        assert task.state is LifecycleState.COMPLETED
        assert total == 20
        state = replay_journal(orch._journal_path(task.id))
        assert len(state.predictions) == 20

    def test_replay_equals_in_memory_state_after_run(self, orchestra):
        orch, bench, models, _ = orchestra
        task = orch.create_evaluation("echo", "toy", ServerBinding.local(bench),
                                      model_dirs=[models])
        task = orch.run(task.id)
        state = replay_journal(orch._journal_path(task.id))
        assert state.state is task.state
        assert state.generated == task.progress.generated
        assert state.submitted == task.progress.submitted

    def test_crashed_run_is_resumable(self, orchestra):
        orch, bench, models, _ = orchestra
        task = orch.create_evaluation("echo", "toy", ServerBinding.local(bench),
                                      model_dirs=[models], concurrency={"max_limit": 1})
        interrupt = threading.Event()
        endpoint = CountingEndpoint(open_endpoint(scripted_card("echo", ECHO_SCRIPT)),
                                    interrupt=interrupt, after=8)
        orch.run(task.id, interrupt=interrupt, endpoint=endpoint)
        # simulate a scheduler that died right after transitioning to running
        journal = RunJournal(orch._journal_path(task.id))
        journal.append({"entry": "state-changed", "from": "paused", "to": "running",
                        "progress": {}, "at": 99.0})
        journal.close()
        assert orch.status(task.id).state is LifecycleState.RUNNING
        task = orch.resume(task.id)
        assert task.state is LifecycleState.COMPLETED
        assert orch.status(task.id).progress["generated"] == 20

    def test_unreachable_server_pauses_instead_of_failing(self, orchestra, tmp_path):
        orch, bench, models, _ = orchestra
        server = serve([bench])
        task = orch.create_evaluation("echo", "toy", ServerBinding.remote(server.base_url),
                                      model_dirs=[models])
        server.shutdown()
        task = orch.run(task.id)
        # a down server is transient: the task stays resumable, not failed
        assert task.state is LifecycleState.PAUSED
        assert "503" in task.last_error

    def test_failed_task_can_be_retried_explicitly(self, orchestra):
        orch, bench, models, _ = orchestra
        task = orch.create_evaluation("echo", "toy", ServerBinding.local(bench),
                                      model_dirs=[models])
        journal = RunJournal(orch._journal_path(task.id))
        journal.append({"entry": "state-changed", "from": "paused", "to": "running",
                        "progress": {}, "at": 1.0})
        journal.append({"entry": "state-changed", "from": "running", "to": "failed",
                        "progress": {}, "cause": "injected", "at": 2.0})
        journal.close()
        assert orch.load_task(task.id).state is LifecycleState.FAILED
        task = orch.run(task.id)
        assert task.state is LifecycleState.COMPLETED

    def test_status_unknown_id_404(self, orchestra):
        orch, *_ = orchestra
        with pytest.raises(ProtocolError) as exc:
            orch.status("0" * 32)
        assert exc.value.code == 404

    def test_report_determinism_across_runs(self, orchestra):
        orch, bench, models, _ = orchestra
        binding = ServerBinding.local(bench)
        bodies = []
        for _ in range(2):
            task = orch.create_evaluation("echo", "toy", binding, model_dirs=[models])
            orch.run(task.id)
            body = record_to_body(orch.stored_report(task.id))
            body.pop("evaluation_id")
            bodies.append(body)
        assert bodies[0] == bodies[1]


class TestCongestionIntegration:
    def test_429_storm_completes_all_samples(self, tmp_path):
        bench = echo_benchmark(tmp_path / "bench", n=30)
        clock = VirtualClock()
        orch = Orchestrator(home=tmp_path / "home", clock=clock)
        card = scripted_card("flaky", {
            "responses": {"*": {"status": 200, "echo": True}},
            "fault_injection": {"status": 429, "probability": 0.3, "seed": 5},
        })
        task = orch.create_evaluation(card, "toy", ServerBinding.local(bench),
                                      concurrency={"max_limit": 8})
        task = orch.run(task.id, rng=random.Random(1))
        assert task.state is LifecycleState.COMPLETED
        snapshot = orch.status(task.id)
        assert snapshot.rate_events > 0
        # every journaled prediction succeeded despite the 429s
        state = replay_journal(orch._journal_path(task.id))
        assert all(p.status == 200 for p in state.predictions.values())
        for event in state.rate_events:
            assert event["limit_after"] <= event["limit_before"]
            if event["limit_before"] > 1:
                assert event["limit_after"] < event["limit_before"]

    def test_bounded_retry_exhaustion_journals_failure(self, tmp_path):
        bench = echo_benchmark(tmp_path / "bench", n=2)
        clock = VirtualClock()
        orch = Orchestrator(home=tmp_path / "home", clock=clock)
        card = scripted_card("broken", {"responses": {"*": {"status": 503, "error": "down"}}})
        task = orch.create_evaluation(card, "toy", ServerBinding.local(bench),
                                      concurrency={"max_limit": 1})
        task = orch.run(task.id, rng=random.Random(2))
        # samples fail permanently but the run still completes and submits
        assert task.state is LifecycleState.COMPLETED
        state = replay_journal(orch._journal_path(task.id))
        assert all(p.status == 503 and p.attempt_count == 5 for p in state.predictions.values())
        report = orch.stored_report(task.id)
        assert report.overall["acc"] == 0.0
        assert report.counts == {"served": 2, "submitted": 2, "scored": 0}


class TestAdapterUniformity:
    def test_run_unchanged_over_http_chat_endpoint(self, tmp_path):
        # the scheduler never perceives the model kind: the same run flow
        # completes against an HTTP chat endpoint exactly as with a script
        from test_adapter import _StubChat
        from http.server import ThreadingHTTPServer
        from depkit.protocol import ModelCard

        httpd = ThreadingHTTPServer(("127.0.0.1", 0), _StubChat)
        thread = threading.Thread(target=httpd.serve_forever, daemon=True)
        thread.start()
        _StubChat.behavior = {"status": 200, "body": None, "sleep": 0.0}
        try:
            rows = [{"q": f"v{i}", "a": f"stub says: v{i}"} for i in range(5)]
            bench = write_benchmark(tmp_path / "bench", rows=rows, template="{q}")
            card = ModelCard(model_id="chatty", endpoint={
                "kind": "http-chat",
                "base_url": f"http://127.0.0.1:{httpd.server_address[1]}/chat"})
            orch = Orchestrator(home=tmp_path / "home")
            task = orch.create_evaluation(card, "toy", ServerBinding.local(bench))
            task = orch.run(task.id)
            assert task.state is LifecycleState.COMPLETED
            assert orch.stored_report(task.id).overall["acc"] == 1.0
        finally:
            httpd.shutdown()
            thread.join(timeout=2)
            httpd.server_close()


class TestAggregate:
    def build_home(self, tmp_path):
        clock = VirtualClock()
        orch = Orchestrator(home=tmp_path / "home", clock=clock)
        benches = {}
        for ds in ("ds-a", "ds-b"):
            benches[ds] = write_benchmark(
                tmp_path / ds, dataset_id=ds, template="{q}",
                rows=[{"q": "q0", "a": "right"}, {"q": "q1", "a": "right"}])
        scripts = {
            "model-hi": {"responses": {"*": {"status": 200, "text": "right"}}},
            "model-lo": {"responses": [["*q0*", {"status": 200, "text": "right"}],
                                       ["*", {"status": 200, "text": "wrong"}]]},
            "model-tie": {"responses": {"*": {"status": 200, "text": "right"}}},
        }
        for model_id, script in scripts.items():
            for ds, bench in benches.items():
                task = orch.create_evaluation(scripted_card(model_id, script), ds,
                                              ServerBinding.local(bench))
                orch.run(task.id)
        return orch

    def test_grid_and_ordering(self, tmp_path):
        orch = self.build_home(tmp_path)
        board = orch.aggregate()
        assert board.columns == (("ds-a", "acc"), ("ds-b", "acc"))
        models = [model for model, _ in board.rows]
        # descending by first column; tie between hi and tie broken alphabetically
        assert models == ["model-hi", "model-tie", "model-lo"]
        scores = dict(board.rows)
        assert scores["model-lo"][("ds-a", "acc")] == 0.5
        assert scores["model-hi"][("ds-b", "acc")] == 1.0
        # 3 models x 2 datasets fully populated
        assert all(len(row) == 2 for row in scores.values())

    def test_empty_selection_is_empty_table(self, tmp_path):
        orch = Orchestrator(home=tmp_path / "empty-home")
        board = orch.aggregate()
        assert board.columns == () and board.rows == ()

    def test_filter_by_dataset(self, tmp_path):
        orch = self.build_home(tmp_path)
        board = orch.aggregate(dataset_id="ds-a")
        assert board.columns == (("ds-a", "acc"),)


class TestDiscoverPlugAndPlay:
    def test_mixed_tree_counts(self, tmp_path):
        root = tmp_path / "tree"
        for name in ("alpha", "beta", "gamma"):
            write_benchmark(root / name, dataset_id=name)
        write_model_card(root / "models", "m-one", ECHO_SCRIPT)
        write_model_card(root / "models", "m-two", ECHO_SCRIPT)
        orch = Orchestrator(home=tmp_path / "home")
        models, datasets, warnings = orch.discover([root])
        assert (len(models), len(datasets)) == (2, 3)
        assert warnings == []

    def test_add_and_remove_changes_count_by_one(self, tmp_path):
        import shutil
        root = tmp_path / "tree"
        write_benchmark(root / "first", dataset_id="first")
        write_model_card(root / "models", "m-one", ECHO_SCRIPT)
        write_model_card(root / "models", "m-two", ECHO_SCRIPT)
        orch = Orchestrator(home=tmp_path / "home")

        models, datasets, _ = orch.discover([root])
        assert (len(models), len(datasets)) == (2, 1)

        write_benchmark(root / "second", dataset_id="second")
        models, datasets, _ = orch.discover([root])
        assert (len(models), len(datasets)) == (2, 2)

        shutil.rmtree(root / "second")
        models, datasets, _ = orch.discover([root])
        assert (len(models), len(datasets)) == (2, 1)
