"""Dry-run unfolding of the multigrid back-projection recursion.

:func:`unfold` walks the recursion without touching any data and records every
module instance it would call, in call order.  Each instance is identified by
its kind, its level and the loop-step path that led to it from the root, so no
two instances ever share parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

from .tensor import ConvSpec

ANALYSIS = "Analysis"
SYNTHESIS = "Synthesis"
DOWNSCALE = "Downscale"
UPSCALE = "Upscale"
KINDS = (ANALYSIS, SYNTHESIS, DOWNSCALE, UPSCALE)

DEFAULT_SCHEDULE = (256, 192, 128, 92, 48, 9)
DESK_SCHEDULE = (32, 24, 16, 8)
IMAGE_CHANNELS = 3
NOISE_CHANNELS = 1


class ModuleTag(NamedTuple):
    kind: str
    level: int
    path: tuple = ()

    def __str__(self):
        return f"{self.kind}/{self.level}/{'.'.join(map(str, self.path))}"

    @classmethod
    def parse(cls, text):
        kind, level, path = text.split("/")
        if kind not in KINDS:
            raise ValueError(f"unknown module kind in tag {text!r}")
        steps = tuple(int(s) for s in path.split(".")) if path else ()
        return cls(kind, int(level), steps)


class Instance(NamedTuple):
    tag: ModuleTag
    spec: ConvSpec


@dataclass(frozen=True)
class NetworkPlan:
    mu: int
    levels: int
    feature_schedule: tuple
    filter_size: int
    instances: tuple = field(repr=False)
    noise_channels: int = NOISE_CHANNELS

    def __iter__(self):
        return iter(self.instances)

    def __len__(self):
        return len(self.instances)

    @property
    def tags(self):
        return [inst.tag for inst in self.instances]

    def spec(self, tag):
        return self._index()[tag]

    def _index(self):
        # frozen dataclass: cache the lookup table on first use
        try:
            return self.__dict__["_spec_index"]
        except KeyError:
            table = {inst.tag: inst.spec for inst in self.instances}
            object.__setattr__(self, "_spec_index", table)
            return table

    def count(self, kind):
        return sum(1 for inst in self.instances if inst.tag.kind == kind)

    def min_size(self):
        """Smallest spatial size the generator accepts for this plan."""
        return 4 * 2 ** (self.levels - 1)

    def descriptor(self):
        """One-line text form used by the weight container header."""
        schedule = ",".join(map(str, self.feature_schedule))
        return (
            f"mu={self.mu} levels={self.levels} schedule={schedule} "
            f"filter={self.filter_size} noise={self.noise_channels}"
        )

    @classmethod
    def from_descriptor(cls, text):
        fields = dict(item.split("=", 1) for item in text.split())
        try:
            plan = unfold(
                int(fields["mu"]),
                int(fields["levels"]),
                tuple(int(w) for w in fields["schedule"].split(",")),
                int(fields["filter"]),
            )
        except KeyError as exc:
            raise ValueError(f"plan descriptor is missing {exc.args[0]!r}: {text!r}") from None
        if int(fields.get("noise", NOISE_CHANNELS)) != plan.noise_channels:
            raise ValueError(f"unsupported noise channel count in {text!r}")
        return plan


def expected_bp_modules(mu, levels):
    """Closed form for the number of Upscale (= Downscale) instances."""
    return sum(mu ** (levels - k + 1) for k in range(2, levels + 1))


def _analysis_spec(k, levels, width, filter_size):
    stride = 2 ** (levels - k)
    if stride > 1:
        return ConvSpec(IMAGE_CHANNELS + NOISE_CHANNELS, width, 2 * stride, stride, stride // 2, ceil_mode=True)
    return ConvSpec(IMAGE_CHANNELS + NOISE_CHANNELS, width, filter_size, 1, (filter_size - 1) // 2)


def unfold(mu, levels, feature_schedule=None, filter_size=3):
    """Dry-run the recursion and return the plan of tagged module instances.

    ``feature_schedule`` lists channel counts from the lowest to the highest
    resolution level.
    """
    if mu < 1:
        raise ValueError(f"mu must be >= 1, got {mu}")
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if feature_schedule is None:
        feature_schedule = DEFAULT_SCHEDULE[-levels:] if levels <= len(DEFAULT_SCHEDULE) else None
        if feature_schedule is None:
            raise ValueError(f"no default feature schedule for {levels} levels")
    feature_schedule = tuple(int(w) for w in feature_schedule)
    if len(feature_schedule) != levels:
        raise ValueError(
            f"feature schedule has {len(feature_schedule)} entries but levels={levels}"
        )
    if filter_size < 1 or filter_size % 2 == 0:
        raise ValueError(f"filter_size must be odd and positive, got {filter_size}")

    width = {k: feature_schedule[k - 1] for k in range(1, levels + 1)}
    f = filter_size
    instances = [
        Instance(ModuleTag(ANALYSIS, k), _analysis_spec(k, levels, width[k], f))
        for k in range(1, levels + 1)
    ]

    def back_project(k, path):
        if k <= 1:
            return
        for s in range(1, mu + 1):
            step = path + (s,)
            instances.append(
                Instance(
                    ModuleTag(DOWNSCALE, k, step),
                    ConvSpec(width[k], width[k - 1], f + 1, 2, (f - 1) // 2, ceil_mode=True),
                )
            )
            back_project(k - 1, step)
            instances.append(
                Instance(
                    ModuleTag(UPSCALE, k, step),
                    ConvSpec(2 * width[k - 1], width[k], f + 1, 2, f // 2, transposed=True),
                )
            )

    back_project(levels, ())
    instances.append(
        Instance(ModuleTag(SYNTHESIS, levels), ConvSpec(width[levels], IMAGE_CHANNELS, f, 1, (f - 1) // 2))
    )
    return NetworkPlan(mu, levels, feature_schedule, filter_size, tuple(instances))


def desk_plan(filter_size=3):
    return unfold(2, len(DESK_SCHEDULE), DESK_SCHEDULE, filter_size)


def level_size(size, level, levels):
    """Spatial size of the level-``level`` feature maps for an input of ``size``."""
    return -(-size // 2 ** (levels - level))


def trace_shapes(plan, height, width):
    """Replay the plan on shapes only.

    Returns ``[(tag, in_hw, out_hw)]`` in execution order, where Upscale
    ``out_hw`` is the cropped size (the partner shape on the way down).
    """
    L = plan.levels
    trace = []
    for inst in plan:
        tag, spec = inst
        k = tag.level
        if tag.kind == ANALYSIS:
            in_hw = (height, width)
            out_hw = (spec.out_size(height), spec.out_size(width))
        elif tag.kind == DOWNSCALE:
            in_hw = (level_size(height, k, L), level_size(width, k, L))
            out_hw = (spec.out_size(in_hw[0]), spec.out_size(in_hw[1]))
        elif tag.kind == UPSCALE:
            in_hw = (level_size(height, k - 1, L), level_size(width, k - 1, L))
            out_hw = (level_size(height, k, L), level_size(width, k, L))
        else:
            in_hw = out_hw = (height, width)
        trace.append((tag, in_hw, out_hw))
    return trace


def count_cost(plan, height, width):
    """Total multiply-accumulates for one forward pass at the given input size."""
    total = 0
    for (tag, spec), (_, in_hw, _) in zip(plan, trace_shapes(plan, height, width)):
        total += spec.macs(*in_hw)
    return total


def parameter_count(plan):
    return sum(spec.params() for _, spec in plan)


def describe(plan, height=None, width=None):
    """Human-readable listing of the plan."""
    lines = [
        f"mu: {plan.mu}",
        f"levels: {plan.levels}",
        f"feature_schedule: {list(plan.feature_schedule)}",
        f"filter_size: {plan.filter_size}",
        f"analysis_modules: {plan.count(ANALYSIS)}",
        f"downscale_modules: {plan.count(DOWNSCALE)}",
        f"upscale_modules: {plan.count(UPSCALE)}",
        f"synthesis_modules: {plan.count(SYNTHESIS)}",
        f"parameters: {parameter_count(plan)}",
    ]
    if height is not None:
        lines.append(f"macs@{height}x{width}: {count_cost(plan, height, width)}")
    lines.append("instances:")
    for tag, spec in plan:
        kind = "convT" if spec.transposed else "conv"
        lines.append(
            f"  {str(tag):<24} {kind} {spec.in_channels}->{spec.out_channels} "
            f"k{spec.kernel} s{spec.stride} p{spec.padding} params={spec.params()}"
        )
    return "\n".join(lines)
