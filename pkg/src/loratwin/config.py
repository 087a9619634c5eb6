from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .estimators import H100_SYNTHETIC, Estimators, LoadSource

DEFAULT_CONFIG_ENV = "LORATWIN_CONFIG"


@dataclass(frozen=True)
class ServerConfig:
    slots: int
    estimators: Estimators = H100_SYNTHETIC
    # vLLM lets requests of already-loaded adapters jump slot-blocked ones;
    # False keeps strict FCFS (head-of-line blocking on slots).
    loaded_adapter_priority: bool = True
    load_source: LoadSource = LoadSource.CPU
    max_iterations: int = 100_000_000
    # "offered": tokens of the requests that actually arrived in the window;
    # "nominal": sum(rate * mean output) from the workload description.
    ideal_basis: str = "offered"
    ideal_includes_input: bool = False
    starvation_threshold: float = 0.9
    drain: bool = True
    # slots are sized for the largest served rank (vLLM's max_lora_rank)
    slot_rank: int | None = None

    def __post_init__(self):
        if self.slots < 1:
            raise ConfigError("slots must be >= 1")
        if self.ideal_basis not in ("offered", "nominal"):
            raise ConfigError("ideal.basis must be 'offered' or 'nominal'")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        object.__setattr__(self, "load_source", LoadSource(self.load_source))

    def with_slots(self, slots: int) -> "ServerConfig":
        return replace(self, slots=slots)

    def to_json(self) -> dict:
        doc = {
            "slots": self.slots,
            "estimators": self.estimators.to_json(),
            "policy": {
                "loaded_adapter_priority": self.loaded_adapter_priority,
                "load_source": self.load_source.value,
                "drain": self.drain,
            },
            "max_iterations": self.max_iterations,
            "ideal": {
                "basis": self.ideal_basis,
                "includes_input": self.ideal_includes_input,
                "starvation_threshold": self.starvation_threshold,
            },
        }
        if self.slot_rank is not None:
            doc["slot_rank"] = self.slot_rank
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ServerConfig":
        from .schemas import validate

        validate(doc, "server_config")
        policy = doc.get("policy", {})
        ideal = doc.get("ideal", {})
        est = Estimators.from_json(doc["estimators"]) if "estimators" in doc else H100_SYNTHETIC
        return cls(
            slots=int(doc["slots"]),
            estimators=est,
            loaded_adapter_priority=bool(policy.get("loaded_adapter_priority", True)),
            load_source=LoadSource(policy.get("load_source", "cpu")),
            drain=bool(policy.get("drain", True)),
            max_iterations=int(doc.get("max_iterations", 100_000_000)),
            ideal_basis=ideal.get("basis", "offered"),
            ideal_includes_input=bool(ideal.get("includes_input", False)),
            starvation_threshold=float(ideal.get("starvation_threshold", 0.9)),
            slot_rank=doc.get("slot_rank"),
        )

    @classmethod
    def load(cls, path=None) -> "ServerConfig":
        if path is None:
            path = os.environ.get(DEFAULT_CONFIG_ENV)
            if not path:
                raise ConfigError(f"no config path given and ${DEFAULT_CONFIG_ENV} is unset")
        with Path(path).open() as fh:
            return cls.from_json(json.load(fh))


def preset_config(slots: int = 8, **overrides) -> ServerConfig:
    return ServerConfig(slots=slots, **overrides)
