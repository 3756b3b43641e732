from __future__ import annotations

import pytest

from ice_gateway.control_store import ControlBank, ControlStore, SelectionStrategy
from ice_gateway.gateway import Gateway, InProcessUpstream
from ice_gateway.mock_llm import MockBehavior, MockLLM
from ice_gateway.scheduler import IcePolicy
from ice_gateway.tokenizer import TokenCounter

# acceptance criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def anyio_backend():
    return "asyncio"


def words(prefix: str, n: int, start: int = 0) -> str:
    return " ".join(f"{prefix}{i}" for i in range(start, start + n))


def script_tokens(n: int, prefix: str = "w") -> list[str]:
    return [f"{prefix}0"] + [f" {prefix}{i}" for i in range(1, n)]


def make_store(texts: dict[str, str], counter: TokenCounter | None = None) -> ControlStore:
    return ControlStore.from_records(
        [{"id": k, "text": v} for k, v in texts.items()], counter or TokenCounter()
    )


def make_gateway(*, t: int = 400, s_ice: int = 20, scope=("conversation",), visibility="hidden",
                 mock: MockLLM | None = None, store: ControlStore | None = None,
                 counter: TokenCounter | None = None, upstream=None, **kwargs) -> Gateway:
    counter = counter or TokenCounter()
    store = store or make_store({"ice": words("RULE", s_ice)}, counter)
    policy = IcePolicy(t, s_ice, scope=frozenset(scope), visibility=visibility)
    if upstream is None:
        upstream = InProcessUpstream(mock or MockLLM(MockBehavior()))
    return Gateway(policy, ControlBank(store), upstream, counter=counter,
                   strategy=kwargs.pop("strategy", SelectionStrategy()), **kwargs)


async def drain(events):
    return [ev async for ev in events]


def payload_text(events) -> str:
    return "".join(ev.text for ev in events if ev.kind in ("reasoning", "content"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
