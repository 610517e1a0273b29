"""Generator backends behind one protocol.

`OracleBackend` renders scenes procedurally, so every artifact it produces has an
exact ground truth. `FlowBackend` wraps a trained toy flow model and uses the
Euler sampler and the displacement-ODE editor.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Protocol, Union, runtime_checkable

from .colorlab import RgbImage
from .flowedit import EditTrace, GuidanceParams, anchor_for, check_distinct_identities, flow_edit
from .toyflow import Condition, FlowModel, LatentCode, SceneSpec, model_digest, oracle_generate, sample

logger = logging.getLogger(__name__)


@dataclass
class DeidOutcome:
    image: RgbImage
    anchor: LatentCode
    trace: Optional[EditTrace] = None


@runtime_checkable
class GeneratorBackend(Protocol):
    """What the pipeline needs from an image generator."""

    name: str
    spec: SceneSpec

    def de_identify(
        self, original: RgbImage, src_c: Condition, surrogate_c: Condition, g: GuidanceParams
    ) -> DeidOutcome:
        ...

    def generate(self, anchor: LatentCode, c: Condition) -> RgbImage:
        ...

    def edit(self, image: RgbImage, c_src: Condition, c_tgt: Condition, g: GuidanceParams) -> RgbImage:
        ...

    def describe(self) -> Dict:
        ...


class OracleBackend:
    """Procedural generator; edits re-render the anchor under the target condition."""

    name = "oracle"

    def __init__(self, spec: Optional[SceneSpec] = None):
        self.spec = spec or SceneSpec()

    def de_identify(self, original, src_c, surrogate_c, g):
        check_distinct_identities(src_c, surrogate_c)
        anchor = anchor_for(g, self.spec.dim)
        surrogate = oracle_generate(self.spec, anchor, surrogate_c.with_health(src_c.health))
        return DeidOutcome(image=surrogate, anchor=anchor)

    def generate(self, anchor, c):
        return oracle_generate(self.spec, anchor, c)

    def edit(self, image, c_src, c_tgt, g):
        return oracle_generate(self.spec, anchor_for(g, self.spec.dim), c_tgt)

    def describe(self) -> Dict:
        return {"name": self.name, "spec_hash": self.spec.spec_hash()}


class FlowBackend:
    """Trained toy flow: sampling for twins, displacement-ODE editing for de-identification."""

    name = "trained"

    def __init__(self, model: FlowModel, sample_steps: int = 50):
        if model.spec is None:
            raise ValueError("flow backend needs a model trained on a SceneSpec")
        if sample_steps < 1:
            raise ValueError("sample_steps must be >= 1")
        self.model = model
        self.spec = model.spec
        self.sample_steps = sample_steps

    def de_identify(self, original, src_c, surrogate_c, g):
        check_distinct_identities(src_c, surrogate_c)
        result = flow_edit(self.model, original, src_c, surrogate_c.with_health(src_c.health), g)
        return DeidOutcome(image=result.image, anchor=anchor_for(g, self.model.dim), trace=result.trace)

    def generate(self, anchor, c):
        return sample(self.model, anchor, c, self.sample_steps)

    def edit(self, image, c_src, c_tgt, g):
        return flow_edit(self.model, image, c_src, c_tgt, g).image

    def describe(self) -> Dict:
        return {
            "name": self.name,
            "spec_hash": self.spec.spec_hash(),
            "model_digest": model_digest(self.model),
            "sample_steps": self.sample_steps,
        }


def as_backend(generator: Union[GeneratorBackend, FlowModel], sample_steps: int = 50) -> GeneratorBackend:
    """Accept either a backend or a bare flow model."""
    if isinstance(generator, FlowModel):
        return FlowBackend(generator, sample_steps)
    return generator
