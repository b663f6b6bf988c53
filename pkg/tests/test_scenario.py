import asyncio
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fabricbench.scenario import (ActionRegistry, Scenario, ScenarioAction, ScenarioRangeError,
                                  ScenarioSyntaxError, benchmark_scenario, parse_ids, parse_scenario,
                                  render_ids, resolve_all, schedule)

from conftest import run_async


def test_canonical_line():
    s = parse_scenario("@8 init_blockchain_config {1-10}")
    assert s.actions == (ScenarioAction(8, "init_blockchain_config", frozenset(range(1, 11))),)


def test_singleton_range():
    (a,) = parse_scenario("@0 stop {1-1}").actions
    assert a.at == 0 and a.action == "stop" and a.targets == {1}


def test_union_of_items():
    (a,) = parse_scenario("@5 start_client {1,3,5-7}").actions
    assert a.targets == {1, 3, 5, 6, 7}


def test_missing_targets_mean_everyone(fixtures):
    s = parse_scenario((fixtures / "canonical.scn").read_text())
    assert s.actions[-1].targets is None
    assert s.actions[-1].applies_to(17)
    s = parse_scenario((fixtures / "canonical.scn").read_text(), all_instances=range(1, 21))
    assert s.actions[-1].targets == frozenset(range(1, 21))


def test_comments_and_blank_lines():
    s = parse_scenario("# header\n\n@1 start_validator {2}  # trailing\n   \n@3 stop\n")
    assert [a.action for a in s.actions] == ["start_validator", "stop"]
    assert s.actions[0].lineno == 3


@pytest.mark.parametrize("line", ["8 init {1}", "@x init {1}", "@1.5 init {1}", "@1 {1}", "@1 init {1-}",
                                  "@1 init {}", "@1 init {1,,2}", "@1 init {a}"])
def test_syntax_errors_carry_line_numbers(line):
    with pytest.raises(ScenarioSyntaxError) as err:
        parse_scenario("@0 ok {1}\n" + line)
    assert err.value.lineno == 2


@pytest.mark.parametrize("line", ["@1 init {10-1}", "@1 init {0}", "@1 init {0-3}"])
def test_range_errors(line):
    with pytest.raises(ScenarioRangeError):
        parse_scenario(line)


def test_unknown_action_warns(caplog):
    parse_scenario("@1 launch_rockets {1}", vocabulary={"stop"})
    assert "launch_rockets" in caplog.text


def test_validate():
    parse_scenario("@1 a {1}\n@2 stop").validate()
    with pytest.raises(ValueError):
        parse_scenario("@1 a {1}").validate()
    with pytest.raises(ValueError):
        parse_scenario("@3 stop\n@4 a {1}").validate()
    with pytest.raises(ValueError):
        parse_scenario("@1 stop\n@1 stop").validate()


def test_render_ids():
    assert render_ids({1, 2, 3, 5, 7, 8}) == "1-3,5,7-8"
    assert render_ids({4}) == "4"


id_sets = st.frozensets(st.integers(1, 60), min_size=1, max_size=20)
actions = st.lists(st.tuples(st.integers(0, 500), st.sampled_from(["start_client", "stop_validator", "x.y-z"]),
                             st.one_of(st.none(), id_sets)), max_size=12)


@given(actions)
def test_parse_render_parse_is_stable(items):
    text = "\n".join(ScenarioAction(at, name, t).render() for at, name, t in items)
    once = parse_scenario(text)
    assert parse_scenario(once.render()) == once


@given(id_sets)
def test_ids_round_trip(ids):
    assert parse_ids(render_ids(ids)) == ids


def test_benchmark_scenario_shape():
    s = benchmark_scenario(4, 4, 20, 10)
    s.validate()
    assert s.stop_at == 33
    assert s.for_instance(5)[0].action == "start_client"


# scheduling ---------------------------------------------------------------


def _collect(scenario, self_id, time_scale=0.01, registry=None):
    got = []

    def dispatch(act):
        got.append((act.action, time.time()))

    async def go():
        epoch = int(time.time() * 1000)
        res = await schedule(scenario, self_id, registry or dispatch, epoch, time_scale)
        return epoch, res

    epoch, res = run_async(go())
    return got, epoch, res


def test_canonical_schedule_validator(fixtures):
    s = parse_scenario((fixtures / "canonical.scn").read_text())
    got, epoch, res = _collect(s, 5)
    assert [a for a, _ in got] == ["init_blockchain_config", "start_validator", "stop"]
    assert res.stopped


def test_canonical_schedule_client(fixtures):
    s = parse_scenario((fixtures / "canonical.scn").read_text())
    got, epoch, res = _collect(s, 15)
    assert [a for a, _ in got] == ["start_client", "start_creating_transactions", "stop"]
    for (name, t), rec in zip(got, res.records):
        assert rec.lateness_ms >= 0
        assert t * 1000 >= epoch + rec.scheduled_ms - 1


def test_empty_then_stop_terminates_immediately():
    t0 = time.time()
    got, _, res = _collect(parse_scenario("@0 stop"), 1, time_scale=1.0)
    assert [a for a, _ in got] == ["stop"] and res.stopped
    assert time.time() - t0 < 0.5


def test_stop_ends_schedule_early():
    got, _, _ = _collect(parse_scenario("@1 stop {1}\n@2 start_client {1}"), 1)
    assert [a for a, _ in got] == ["stop"]


def test_failing_callback_is_recorded_and_schedule_continues():
    reg = ActionRegistry()
    reg.register("boom", lambda a: 1 / 0)
    seen = []
    reg.register("stop", lambda a: seen.append(a.action))
    _, _, res = _collect(parse_scenario("@0 boom {1}\n@0 nothing_registered {1}\n@1 stop"), 1, registry=reg)
    assert [r.ok for r in res.records] == [False, False, True]
    assert "ZeroDivisionError" in res.records[0].error
    assert "DispatchError" in res.records[1].error
    assert seen == ["stop"]


def test_async_callbacks_are_awaited():
    order = []

    async def slow(act):
        await asyncio.sleep(0.05)
        order.append(act.action)

    reg = ActionRegistry()
    reg.register("slow", slow)
    reg.register("stop", lambda a: order.append("stop"))
    _collect(parse_scenario("@0 slow {1}\n@0 stop {1}"), 1, registry=reg)
    assert order == ["slow", "stop"]


def test_halt_event_interrupts_wait():
    async def go():
        halt = asyncio.Event()
        asyncio.get_running_loop().call_later(0.05, halt.set)
        t0 = time.time()
        res = await schedule(parse_scenario("@30 stop {1}"), 1, lambda a: None, int(time.time() * 1000), 1.0, halt)
        return time.time() - t0, res

    dt, res = run_async(go())
    assert dt < 1.0 and not res.stopped and res.records == []


@settings(max_examples=25, deadline=None)
@given(actions, st.integers(1, 60))
def test_dispatched_multiset_matches_targets(items, me):
    items = [(at % 3, name, t) for at, name, t in items]
    text = "\n".join(ScenarioAction(at, name, t).render() for at, name, t in items)
    scenario = parse_scenario(text)
    ordered = sorted(scenario.actions, key=lambda a: a.at)
    expected = [a.action for a in ordered if a.applies_to(me)]
    got, _, _ = _collect(Scenario(tuple(ordered)), me, time_scale=0.001)
    assert sorted(a for a, _ in got) == sorted(expected)
    assert [a for a, _ in got] == [a.action for a in ordered if a.applies_to(me)]


def test_resolve_all():
    s = resolve_all(parse_scenario("@1 stop"), [1, 2])
    assert s.actions[0].targets == {1, 2}
