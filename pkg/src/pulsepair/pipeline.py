"""Stage orchestration: simulate, first level, excision, second level, variants.

Frame generation and first-level processing run over fixed chunks of
trigger indices.  Chunk boundaries do not depend on the worker count and
per-window random streams depend only on ``(seed, frame, window)``, so any
number of workers reproduces the serial output exactly.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import InstrumentConfig
from .diagnostics import TestVariant, run_variant
from .first_level import FirstLevelResult, process_frames
from .rfi import ExcisionRegion, ExcisionResult, run_excision
from .scenario import Scenario, generate_run
from .stats import ExposureModel, build_exposure

CHUNK_FRAMES = 4096


def _first_level_chunk(args):
    scenario, start, stop = args
    return process_frames(generate_run(scenario, start, stop), scenario.config)


def chunk_bounds(n_frames: int, chunk: int = CHUNK_FRAMES) -> list:
    return [(a, min(a + chunk, n_frames)) for a in range(0, n_frames, chunk)]


def run_first_level(scenario: Scenario, workers: int = 1, chunk: int = CHUNK_FRAMES) -> FirstLevelResult:
    """Simulate and process every trigger of the scenario."""
    bounds = chunk_bounds(scenario.n_frames, chunk)
    jobs = [(scenario, a, b) for a, b in bounds]
    if workers <= 1 or len(jobs) <= 1:
        parts = [_first_level_chunk(j) for j in jobs]
    else:
        scenario._model = None  # rebuilt lazily in each worker
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_first_level_chunk, jobs))
    return FirstLevelResult.concat(parts)


def sun_region_for(scenario: Scenario, config: InstrumentConfig | None = None) -> ExcisionRegion | None:
    """Excision region built from the scenario's Sun table, if it has one."""
    if scenario.sun is None:
        return None
    cfg = config or scenario.config
    return ExcisionRegion(scenario.sun.ra_hr_by_mjd[:, :2], cfg.sun_ra_halfwidth_hr, cfg.sun_mjd_min)


def exposure_for(windows: np.ndarray, config: InstrumentConfig, region: ExcisionRegion | None) -> ExposureModel:
    masks = [region] if region is not None else []
    return build_exposure(windows["mjd"], windows["beam_ra_hr"], config, masks)


@dataclass
class RunOutputs:
    scenario: Scenario
    first: FirstLevelResult
    excision: ExcisionResult
    exposure: ExposureModel
    variants: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def baseline(self):
        return self.variants["baseline"].result


def analyze(first: FirstLevelResult, config: InstrumentConfig, region: ExcisionRegion | None, variants) -> tuple:
    """Excision, exposure and second level for each variant."""
    exc = run_excision(first.pulses, first.candidates, config, region)
    exposure = exposure_for(first.windows, config, region)
    out = {}
    for v in variants:
        out[v.label] = run_variant(exc.candidates, exposure, config, v)
    return exc, exposure, out


def run_pipeline(scenario: Scenario, variants=(TestVariant("baseline"),), workers: int = 1, region="auto") -> RunOutputs:
    t0 = time.perf_counter()
    first = run_first_level(scenario, workers)
    t1 = time.perf_counter()
    reg = sun_region_for(scenario) if region == "auto" else region
    exc, exposure, res = analyze(first, scenario.config, reg, variants)
    t2 = time.perf_counter()
    return RunOutputs(scenario, first, exc, exposure, res, {"first_level_s": t1 - t0, "second_level_s": t2 - t1})
