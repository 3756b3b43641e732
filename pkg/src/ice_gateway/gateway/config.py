"""Gateway configuration file.

A JSON object. Keys may be nested (``{"policy": {"t": 400}}``) or written
dotted (``{"policy.t": 400}``); both spellings mean the same key.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from ice_gateway.control_store import ControlBank, SelectionStrategy
from ice_gateway.errors import ConfigError, PolicyInvalid
from ice_gateway.gateway.core import DEFAULT_CONTINUATION_INSTRUCTION, Gateway
from ice_gateway.gateway.upstream import HttpUpstream, Upstream, UpstreamEndpoint
from ice_gateway.scheduler import IcePolicy, Scope
from ice_gateway.tokenizer import TokenCounter

KNOWN_KEYS = {
    "listen_addr",
    "upstream.base_url", "upstream.model", "upstream.auth_env",
    "policy.t", "policy.target_q", "policy.scope", "policy.visibility", "policy.s_ice",
    "control_store.path", "control_store.strategy",
    "tokenizer.mode", "tokenizer.chars_per_token",
    "continuation_instruction", "transcript_dir",
}


def flatten(obj: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in obj.items():
        name = f"{prefix}{key}"
        # control_store.strategy may itself be an object
        if isinstance(value, Mapping) and name not in KNOWN_KEYS:
            flat.update(flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


@dataclass
class GatewayConfig:
    values: dict[str, Any]
    base_dir: Path

    @classmethod
    def load(cls, path: str | Path) -> GatewayConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_mapping(raw, path.parent)

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any], base_dir: str | Path = ".") -> GatewayConfig:
        if not isinstance(raw, Mapping):
            raise ConfigError("config must be a JSON object")
        values = flatten(raw)
        unknown = sorted(set(values) - KNOWN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(values, Path(base_dir))

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def path(self, key: str) -> Path | None:
        value = self.get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def listen(self) -> tuple[str, int]:
        addr = str(self.get("listen_addr", "127.0.0.1:8080"))
        host, _, port = addr.rpartition(":")
        try:
            return host or "127.0.0.1", int(port)
        except ValueError:
            raise ConfigError(f"listen_addr must look like host:port, got {addr!r}") from None

    def counter(self) -> TokenCounter:
        section = {"mode": self.get("tokenizer.mode", "whitespace")}
        if self.get("tokenizer.chars_per_token") is not None:
            section["chars_per_token"] = self.get("tokenizer.chars_per_token")
        return TokenCounter.from_config(section)

    def endpoint(self) -> UpstreamEndpoint:
        base_url = self.get("upstream.base_url")
        if not base_url:
            raise ConfigError("upstream.base_url is required")
        auth = None
        env = self.get("upstream.auth_env")
        if env:
            secret = os.environ.get(env)
            if secret is None:
                raise ConfigError(f"environment variable {env} named by upstream.auth_env is not set")
            auth = f"Bearer {secret}"
        return UpstreamEndpoint(base_url, self.get("upstream.model", "default"), auth)

    def policy(self, bank: ControlBank, strategy: SelectionStrategy) -> IcePolicy:
        scope = self.get("policy.scope", ["conversation"])
        if not isinstance(scope, list):
            raise ConfigError("policy.scope must be an array")
        try:
            scope = frozenset(Scope(s) for s in scope)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        visibility = self.get("policy.visibility", "hidden")
        s_ice = self.get("policy.s_ice")
        if s_ice is None:
            store = bank.store
            store.validate(strategy)
            s_ice = min(s.token_count for s in store.candidates(strategy))
        t, q = self.get("policy.t"), self.get("policy.target_q")
        common = dict(scope=scope, visibility=visibility, ice_source=strategy)
        if q is not None:
            if t is not None:
                raise ConfigError("set either policy.t or policy.target_q, not both")
            return IcePolicy.for_target(q, s_ice, **common)
        if not isinstance(t, int) or isinstance(t, bool):
            raise ConfigError("policy.t must be an integer (or give policy.target_q)")
        return IcePolicy(period_t=t, nominal_s_ice=s_ice, **common)

    def build(self, upstream: Upstream | None = None) -> Gateway:
        counter = self.counter()
        store_path = self.path("control_store.path")
        if store_path is None:
            raise ConfigError("control_store.path is required")
        bank = ControlBank.from_path(store_path, counter)
        strategy = SelectionStrategy.from_config(self.get("control_store.strategy"))
        policy = self.policy(bank, strategy)
        endpoint = self.endpoint() if upstream is None or self.get("upstream.base_url") else None
        if upstream is None:
            upstream = HttpUpstream(endpoint)
        return Gateway(
            policy, bank, upstream,
            strategy=strategy,
            counter=counter,
            endpoint=endpoint,
            continuation_instruction=self.get("continuation_instruction", DEFAULT_CONTINUATION_INSTRUCTION),
            transcript_dir=self.path("transcript_dir"),
        )


__all__ = ["GatewayConfig", "PolicyInvalid"]
