from __future__ import annotations


class ThfemError(Exception):
    """Base class; ``kind`` is the machine-readable category used by the CLI."""

    kind = "error"


class ConfigurationError(ThfemError, ValueError):
    kind = "configuration"


class InputError(ThfemError, ValueError):
    kind = "input"


class OutOfRangeError(InputError, IndexError):
    kind = "out_of_range"


class CapabilityError(ThfemError, RuntimeError):
    """An operation needs information the given object cannot supply."""

    kind = "capability"


class TrainingDivergedError(ThfemError, RuntimeError):
    kind = "diverged"

    def __init__(self, step: int | None, terms: dict[str, float]):
        self.step = step
        self.terms = dict(terms)
        detail = ", ".join(f"{k}={v:.6g}" for k, v in terms.items())
        where = "" if step is None else f" at step {step}"
        super().__init__(f"non-finite loss{where}: {detail}")
