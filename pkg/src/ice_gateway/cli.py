"""``ice`` command line: serve, plan, replay, sweep and a standalone mock upstream."""

from __future__ import annotations

import argparse
import json
import logging
import re
import signal
import sys
from pathlib import Path

from ice_gateway.errors import IceError
from ice_gateway.scheduler import Infeasible, as_fraction, asymptotic_q, solve_period
from ice_gateway.tokenizer import TokenCounter

logger = logging.getLogger("ice_gateway")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_plan(args) -> int:
    try:
        t = solve_period(args.q, args.s_ice)
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    q = asymptotic_q(args.s_ice, t)
    print(f"t={t}")
    print(f"asymptotic_q={float(q)!r} ({q})")
    return 0


def cmd_sweep(args) -> int:
    from ice_gateway.metrics import SweepSpec, sweep_csv

    text = sweep_csv(SweepSpec(args.t, args.s_ice, args.s_p, args.l_max), args.out)
    if args.out is None:
        sys.stdout.write(text)
    return 0


def cmd_replay(args) -> int:
    from ice_gateway.metrics import replay

    period, nominal = args.t, args.s_ice
    counter = TokenCounter.from_config(
        {"mode": args.tokenizer, **({"chars_per_token": args.chars_per_token} if args.chars_per_token else {})}
    )
    if args.config:
        from ice_gateway.control_store import ControlBank, SelectionStrategy
        from ice_gateway.gateway.config import GatewayConfig

        cfg = GatewayConfig.load(args.config)
        counter = cfg.counter()
        strategy = SelectionStrategy.from_config(cfg.get("control_store.strategy"))
        policy = cfg.policy(ControlBank.from_path(cfg.path("control_store.path"), counter), strategy)
        period = period or policy.period_t
        if nominal is None:
            nominal = policy.nominal_s_ice if policy.enabled else 0
    if not period:
        print("error: give --t or --config", file=sys.stderr)
        return 2
    result = replay(args.transcript, period, counter, nominal or 0)
    for line, stored, recounted in result.mismatches:
        print(f"warning: line {line}: stored token_count {stored}, recounted {recounted}", file=sys.stderr)
    if args.out:
        result.trajectory_csv(args.out)
    print(json.dumps(result.report.to_json(), indent=2))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from ice_gateway.gateway.app import create_app
    from ice_gateway.gateway.config import GatewayConfig

    cfg = GatewayConfig.load(args.config)
    gateway = cfg.build()
    host, port = cfg.listen

    def on_hup(signum, frame):
        try:
            logger.info("reloaded control store: %d sentences", gateway.reload_store())
        except IceError as exc:
            logger.error("control store reload rejected: %s", exc)

    if hasattr(signal, "SIGHUP"):
        signal.signal(signal.SIGHUP, on_hup)
    uvicorn.run(create_app(gateway), host=host, port=port, log_level=args.log_level)
    return 0


def _script_tokens(text: str) -> list[str]:
    """Split into whitespace-led words; joining them gives back ``text`` exactly."""
    tokens = re.findall(r"\s*\S+", text)
    tail = text[sum(map(len, tokens)):]
    if tail:
        if tokens:
            tokens[-1] += tail
        else:
            tokens = [tail]
    return tokens


def cmd_mock(args) -> int:
    import uvicorn

    from ice_gateway.mock_llm import MockBehavior, MockLLM, create_app

    behavior = MockBehavior().override(args.behavior) if args.behavior else MockBehavior()
    script = _script_tokens(Path(args.script).read_text(encoding="utf-8")) if args.script else ()
    probe_texts: list[str] = []
    if args.probe_texts:
        data = json.loads(Path(args.probe_texts).read_text(encoding="utf-8"))
        probe_texts = [d["text"] if isinstance(d, dict) else str(d) for d in data]
    mock = MockLLM(behavior, script=script, final_content=args.final_content, probe_texts=probe_texts)
    uvicorn.run(create_app(mock), host=args.host, port=args.port, log_level=args.log_level)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ice", description="Control-text injecting LLM gateway")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the gateway")
    p.add_argument("--config", required=True)
    p.add_argument("--log-level", default="info")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("plan", help="period t reaching a target control ratio")
    p.add_argument("--q", required=True, type=as_fraction, help="target ratio, e.g. 0.05 or 1/20")
    p.add_argument("--s-ice", required=True, type=int)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("replay", help="recount a persisted transcript")
    p.add_argument("--transcript", required=True)
    p.add_argument("--t", type=int, help="injection period the run used")
    p.add_argument("--s-ice", type=int, default=None, help="nominal control length (when no injection fired)")
    p.add_argument("--config", help="take t, s_ice and tokenizer from a gateway config")
    p.add_argument("--tokenizer", default="whitespace", choices=["whitespace", "byte", "fixed_chars"])
    p.add_argument("--chars-per-token", type=int)
    p.add_argument("--out", help="write the ratio trajectory CSV here")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("sweep", help="tabulate ratio and overhead over (t, s_ice)")
    p.add_argument("--t", required=True, type=_int_list)
    p.add_argument("--s-ice", required=True, type=_int_list)
    p.add_argument("--s-p", type=int, default=0)
    p.add_argument("--l-max", type=int, default=100_000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("mock", help="serve the deterministic mock upstream")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8081)
    p.add_argument("--behavior", help="mode name or JSON object of MockBehavior fields")
    p.add_argument("--script", help="text file replayed in scripted mode")
    p.add_argument("--probe-texts", help="JSON array of control texts for compliance_probe mode")
    p.add_argument("--final-content", default="")
    p.add_argument("--log-level", default="info")
    p.set_defaults(func=cmd_mock)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except IceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
