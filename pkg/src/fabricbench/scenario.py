"""Scenario files: parsing, rendering and per-instance scheduling.

Grammar, one action per line::

    @<int-seconds> <action-name> [{<id-spec>(,<id-spec>)*}]

where ``id-spec`` is ``a`` or an inclusive range ``a-b``. Blank lines and
``#`` comments are ignored; a missing target clause means every instance.
"""

from __future__ import annotations

import asyncio
import inspect
import logging
import math
import re
import time
from dataclasses import dataclass, field
from typing import Awaitable, Callable, Iterable, Optional, Union

log = logging.getLogger(__name__)


class ScenarioSyntaxError(SyntaxError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class ScenarioRangeError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class DispatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioAction:
    at: int
    action: str
    targets: Optional[frozenset]  # None: every instance
    lineno: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.at < 0:
            raise ValueError("offset must be >= 0")
        if self.targets is not None and not self.targets:
            raise ValueError("targets must be non-empty")

    def applies_to(self, instance: int) -> bool:
        return self.targets is None or instance in self.targets

    def render(self) -> str:
        if self.targets is None:
            return f"@{self.at} {self.action}"
        return f"@{self.at} {self.action} {{{render_ids(self.targets)}}}"


@dataclass(frozen=True)
class Scenario:
    actions: tuple

    def for_instance(self, instance: int) -> list:
        return [a for a in self.actions if a.applies_to(instance)]

    @property
    def stop_at(self) -> int:
        return max(a.at for a in self.actions if a.action == "stop")

    def render(self) -> str:
        return "\n".join(a.render() for a in self.actions) + "\n"

    def validate(self) -> None:
        """Check ordering and the single-final-stop rule."""
        ats = [a.at for a in self.actions]
        if ats != sorted(ats):
            raise ValueError("scenario actions are not sorted by offset")
        stops = [a for a in self.actions if a.action == "stop"]
        if len(stops) != 1:
            raise ValueError(f"scenario must contain exactly one stop action, found {len(stops)}")
        if stops[0].at != max(ats):
            raise ValueError("the stop action must have the largest offset")


_LINE = re.compile(r"^@(?P<at>\S+)\s+(?P<action>[A-Za-z_][\w.-]*)\s*(?P<targets>\{.*\})?\s*$")


def parse_ids(spec: str, lineno: int = 0) -> frozenset:
    ids = set()
    for item in spec.split(","):
        item = item.strip()
        if not item:
            raise ScenarioSyntaxError(lineno, "empty id in target set")
        lo, sep, hi = item.partition("-")
        try:
            a = int(lo)
            b = int(hi) if sep else a
        except ValueError:
            raise ScenarioSyntaxError(lineno, f"bad id spec {item!r}") from None
        if a < 1 or b < 1:
            raise ScenarioRangeError(lineno, f"instance ids must be >= 1 (got {item!r})")
        if b < a:
            raise ScenarioRangeError(lineno, f"descending range {item!r}")
        ids.update(range(a, b + 1))
    return frozenset(ids)


def render_ids(ids: Iterable[int]) -> str:
    """Compact ``1-3,5`` rendering of an id set."""
    ordered = sorted(ids)
    parts = []
    start = prev = ordered[0]
    for i in ordered[1:]:
        if i == prev + 1:
            prev = i
            continue
        parts.append(f"{start}-{prev}" if prev > start else str(start))
        start = prev = i
    parts.append(f"{start}-{prev}" if prev > start else str(start))
    return ",".join(parts)


def parse_scenario(text: str, all_instances: Optional[Iterable[int]] = None,
                   vocabulary: Optional[Iterable[str]] = None) -> Scenario:
    """Parse scenario text into actions in file order.

    Lines without a target clause apply to ``all_instances`` when given;
    otherwise their targets stay ``None``, meaning every instance.
    """
    everyone = frozenset(all_instances) if all_instances is not None else None
    vocab = set(vocabulary) if vocabulary is not None else None
    actions = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE.match(line)
        if not m:
            raise ScenarioSyntaxError(lineno, f"malformed line {raw.strip()!r}")
        try:
            at = int(m["at"])
        except ValueError:
            raise ScenarioSyntaxError(lineno, f"offset must be integer seconds, got {m['at']!r}") from None
        if at < 0:
            raise ScenarioRangeError(lineno, "negative offset")
        if m["targets"] is not None:
            targets = parse_ids(m["targets"][1:-1], lineno)
        else:
            targets = everyone
        if vocab is not None and m["action"] not in vocab:
            log.warning("line %d: unknown action %r", lineno, m["action"])
        actions.append(ScenarioAction(at, m["action"], targets, lineno))
    return Scenario(tuple(actions))


def resolve_all(scenario: Scenario, all_instances: Iterable[int]) -> Scenario:
    everyone = frozenset(all_instances)
    return Scenario(tuple(
        ScenarioAction(a.at, a.action, everyone if a.targets is None else a.targets, a.lineno)
        for a in scenario.actions
    ))


def benchmark_scenario(n_validators: int, n_clients: int, issue_duration: float,
                       drain_duration: float, lead_in: int = 3) -> Scenario:
    """Standard run: configure, start validators, start clients, issue, stop."""
    validators = frozenset(range(1, n_validators + 1))
    clients = frozenset(range(n_validators + 1, n_validators + n_clients + 1))
    issue_at = lead_in
    stop_at = issue_at + math.ceil(issue_duration + drain_duration)
    return Scenario((
        ScenarioAction(0, "init_blockchain_config", validators),
        ScenarioAction(max(issue_at - 2, 0), "start_validator", validators),
        ScenarioAction(max(issue_at - 1, 0), "start_client", clients),
        ScenarioAction(issue_at, "start_creating_transactions", clients),
        ScenarioAction(stop_at, "stop", validators | clients),
    ))


# scheduling ----------------------------------------------------------------

Callback = Callable[[ScenarioAction], Union[None, Awaitable[None]]]


class ActionRegistry:
    """Action name -> callback; unknown names are an error at dispatch time."""

    def __init__(self):
        self._actions: dict = {}

    def register(self, name: str, callback: Callback) -> None:
        self._actions[name] = callback

    def action(self, name: str):
        def deco(fn):
            self.register(name, fn)
            return fn
        return deco

    def __contains__(self, name: str) -> bool:
        return name in self._actions

    def names(self) -> list:
        return sorted(self._actions)

    def get(self, name: str) -> Callback:
        try:
            return self._actions[name]
        except KeyError:
            raise DispatchError(f"unknown action {name!r}") from None


@dataclass
class DispatchRecord:
    action: str
    scheduled_ms: int
    dispatched_ms: int
    ok: bool = True
    error: str = ""

    @property
    def lateness_ms(self) -> int:
        return self.dispatched_ms - self.scheduled_ms

    CSV_HEADER = "action,scheduled_ms,dispatched_ms,lateness_ms,status,error"

    def csv_row(self) -> str:
        err = self.error.replace(",", ";").replace("\n", " ")
        return f"{self.action},{self.scheduled_ms},{self.dispatched_ms},{self.lateness_ms},{'ok' if self.ok else 'error'},{err}"


@dataclass
class ScheduleResult:
    records: list
    stopped: bool

    @property
    def errors(self) -> list:
        return [r for r in self.records if not r.ok]


async def schedule(scenario: Scenario, self_id: int, dispatch: Union[ActionRegistry, Callback],
                   epoch_ms: int, time_scale: float = 1.0,
                   halt: Optional[asyncio.Event] = None,
                   on_record: Optional[Callable[[DispatchRecord], None]] = None) -> ScheduleResult:
    """Dispatch this instance's actions at their offsets from ``epoch_ms``.

    Offsets are multiplied by ``time_scale``. A failing callback is recorded
    and scheduling continues; dispatching ``stop`` ends the schedule, as does
    setting ``halt``.
    """
    records = []
    mine = sorted(scenario.for_instance(self_id), key=lambda a: a.at)
    stopped = False
    for act in mine:
        due_ms = int(round(act.at * 1000 * time_scale))
        delay = (epoch_ms + due_ms) / 1000.0 - time.time()
        if delay > 0:
            if halt is not None:
                try:
                    await asyncio.wait_for(halt.wait(), delay)
                    break
                except asyncio.TimeoutError:
                    pass
            else:
                await asyncio.sleep(delay)
        elif halt is not None and halt.is_set():
            break
        rec = DispatchRecord(act.action, due_ms, int(time.time() * 1000) - epoch_ms)
        try:
            cb = dispatch.get(act.action) if isinstance(dispatch, ActionRegistry) else dispatch
            result = cb(act)
            if inspect.isawaitable(result):
                await result
        except Exception as exc:  # noqa: BLE001 - recorded, schedule carries on
            log.exception("action %s failed", act.action)
            rec.ok = False
            rec.error = f"{type(exc).__name__}: {exc}"
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        if act.action == "stop":
            stopped = True
            break
    return ScheduleResult(records, stopped)
