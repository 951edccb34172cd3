"""The fixed desk-scale source/target benchmark used by the experiments."""
from __future__ import annotations

from dataclasses import dataclass

from .preprocess import clip_normalize
from .synth import DomainSpec, IntensityMap, Sample, generate_set

SOURCE = DomainSpec(
    name="source",
    intensity=IntensityMap(fg=110.0, bg=-40.0, fg_core=130.0, bg_far=0.0),
    noise_sigma=25.0,
    texture_frequency=0.20,
    spacing=(1.0, 1.0, 1.0),
    seed=11,
)

TARGET = DomainSpec(
    name="target",
    intensity=IntensityMap(fg=170.0, bg=40.0, fg_core=160.0, bg_far=70.0),
    noise_sigma=40.0,
    texture_frequency=0.35,
    spacing=(2.0, 1.0, 1.0),
    seed=23,
    distractors=3,
    distractor_level=170.0,
)


@dataclass
class Benchmark:
    source_train: list[Sample]
    source_test: list[Sample]
    target_train: list[Sample]
    target_test: list[Sample]
    seeds: dict

    def __iter__(self):
        yield from (self.source_train, self.source_test, self.target_train, self.target_test)


def _prep(samples):
    return [s.replace(image=clip_normalize(s.image)) for s in samples]


def make_benchmark(seed: int = 0, size: int = 32, n_source=(60, 20), n_target=(40, 20),
                   source: DomainSpec = SOURCE, target: DomainSpec = TARGET) -> Benchmark:
    """Generate and normalise the four splits.

    Shape seeds are disjoint across splits and offset by ``seed * 100000`` so
    different experiment seeds draw different organs.
    """
    base = seed * 100_000
    seeds = {
        "source_train": list(range(base, base + n_source[0])),
        "source_test": list(range(base + 1000, base + 1000 + n_source[1])),
        "target_train": list(range(base + 2000, base + 2000 + n_target[0])),
        "target_test": list(range(base + 3000, base + 3000 + n_target[1])),
    }
    return Benchmark(
        _prep(generate_set(seeds["source_train"], source, size, "src-train")),
        _prep(generate_set(seeds["source_test"], source, size, "src-test")),
        _prep(generate_set(seeds["target_train"], target, size, "tgt-train")),
        _prep(generate_set(seeds["target_test"], target, size, "tgt-test")),
        seeds,
    )
