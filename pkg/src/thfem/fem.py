"""Expression-manipulation stand-ins operating on ground-truth face parameters.

``OracleFEM`` swaps in the reference expression and keeps the mouth exactly;
``LossyFEM`` additionally drags the mouth open in proportion to the strength
of the mouth-corner expression, which is the failure the talking-head stage
has to repair.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CapabilityError, InputError
from .media import Frame, FrameSequence
from .synth import DEFAULT_RESOLUTION, FaceParams, render_face


@dataclass(frozen=True)
class ExpressionCode:
    code: tuple[float, float, float]

    def __post_init__(self) -> None:
        c = tuple(float(v) for v in self.code)
        if len(c) != 3 or any(not -1.0 <= v <= 1.0 for v in c):
            raise InputError(f"expression code must be 3 values in [-1,1], got {c}")
        object.__setattr__(self, "code", c)

    def __iter__(self):
        return iter(self.code)


def _params(frame: Frame) -> FaceParams:
    if not isinstance(frame.params, FaceParams):
        raise CapabilityError("frame carries no ground-truth face parameters")
    return frame.params


def mouth_coupling(code: ExpressionCode) -> float:
    """How strongly an expression drags the mouth open: |mouth-corner curvature|."""
    return abs(code.code[1])


class FemStage:
    """Manipulator plus renderer; ``edit`` is always ``render_edited(extract_expression(...))``."""

    def __init__(self, resolution: Optional[int] = None):
        self.resolution = resolution

    def extract_expression(self, source: Frame, reference: Frame) -> ExpressionCode:
        _params(source)
        return ExpressionCode(_params(reference).expression)

    def edited_params(self, source: Frame, code: ExpressionCode) -> FaceParams:
        return _params(source).replace(expression=code.code)

    def render_edited(self, source: Frame, code: ExpressionCode) -> Frame:
        res = self.resolution or source.shape[0] or DEFAULT_RESOLUTION
        return render_face(self.edited_params(source, code), res, source.index, source.fps)

    def edit(self, source: Frame, reference: Frame) -> Frame:
        return self.render_edited(source, self.extract_expression(source, reference))

    def edit_sequence(self, source: FrameSequence, reference: Frame) -> FrameSequence:
        return FrameSequence([self.edit(f, reference) for f in source.frames], fps=source.fps)

    def describe(self) -> str:
        return "oracle"


class OracleFEM(FemStage):
    pass


class LossyFEM(FemStage):
    def __init__(self, beta: float, resolution: Optional[int] = None):
        super().__init__(resolution)
        if beta < 0:
            raise InputError("beta must be non-negative")
        self.beta = float(beta)

    def edited_params(self, source: Frame, code: ExpressionCode) -> FaceParams:
        p = _params(source)
        mouth = float(np.clip(p.mouth_open + self.beta * mouth_coupling(code), 0.0, 1.0))
        return p.replace(expression=code.code, mouth_open=mouth)

    def describe(self) -> str:
        return f"lossy({self.beta:g})"


def make_fem(variant: str = "oracle", beta: float = 0.0, resolution: Optional[int] = None) -> FemStage:
    if variant == "oracle":
        return OracleFEM(resolution)
    if variant == "lossy":
        return LossyFEM(beta, resolution)
    raise InputError(f"unknown FEM variant {variant!r}")


def fem_edit(source: Frame, reference: Frame, fem: Optional[FemStage] = None) -> Frame:
    return (fem or OracleFEM()).edit(source, reference)
