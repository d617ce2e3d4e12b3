"""Command-line runner.

Each verb reads and writes files in a run directory, so any stage can be
rerun from persisted inputs::

    pulsepair simulate --scenario null --days 1 --out run1/
    pulsepair detect   --in run1/ --workers 4
    pulsepair excise   --in run1/
    pulsepair analyze  --in run1/ --variant baseline,phase_noise:1..4,tau_zero
    pulsepair diagnose --in run1/
    pulsepair report   --in run1/ --figure fig3,fig20,fig23

``pulsepair run`` chains all six.  ``--scenario`` takes a preset name, a
scenario JSON file, or an INI file whose ``[scenario]`` section names a
preset (``preset``, ``days``, ``seed``) and whose other sections are
instrument settings.  ``--config`` applies an INI file over the scenario's
instrument settings.  ``PULSEPAIR_<SETTING>`` environment variables apply
last; ``PULSEPAIR_WORKERS`` and ``PULSEPAIR_SEED`` set the defaults of
``--workers`` and ``--seed``.

Every verb updates ``manifest.json`` with input digests, per-stage counts
and timing, and a sha256 for every file in the run directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, InstrumentConfig, config_from_mapping, desk_config, load_config, read_ini, save_config
from .diagnostics import (
    TestVariant,
    VariantResult,
    audit_differences,
    classify_source,
    comparison_rows,
    high_visibility_scan,
    parse_variants,
    run_variant,
)
from .figures import FIGURE_CLASSES, AnalysisBundle, emit_figure_data
from .first_level import CANDIDATE_DTYPE, PULSE_DTYPE, WINDOW_DTYPE, FirstLevelResult, process_windows
from .geometry import ra_bin_of
from .io import file_digest, load_frames, read_table, save_frames, write_table
from .pipeline import CHUNK_FRAMES, chunk_bounds, run_first_level, sun_region_for
from .rfi import SEGCOUNT_DTYPE, SUNMASK_DTYPE, TAG_DTYPE, run_excision
from .scenario import PRESETS, Scenario, generate_run, load_scenario, preset, save_scenario
from .stats import BIN_DTYPE, HEAP_DTYPE, DoiReport, ExposureModel, SecondLevelResult, mean_count_per_bin

MANIFEST_SCHEMA = "pulsepair.manifest/1"
DOIS_SCHEMA = "pulsepair.dois/1"
VARIANTS_SCHEMA = "pulsepair.variants/1"
EXCISION_SCHEMA = "pulsepair.excision/1"

CLASS_DTYPE = np.dtype([
    ("bin", "i8"), ("default_strength", "f8"), ("modified_strength", "f8"), ("rfi_like", "?"), ("origin", "U32"),
])

EXPOSURE_DTYPE = np.dtype([
    ("bin", "i8"), ("p", "f8"), ("event_p", "f8"), ("exposure_seconds", "f8"),
])

THRESHOLD_DEFINITIONS = {
    "snr_threshold_db": "per-element pulse SNR 10 log10(P / floor) must exceed this on both elements",
    "log10_pulse_snr_like_threshold": "log10 likelihood of a pulse SNR pair under AWGN, -(s_e + s_w - 2 theta)/ln 10",
    "log10_pair_snr_like_threshold": "sum of the two pulse log10 likelihoods",
    "ew_window": "accepted per-pulse east-west phase residual, radians",
    "ddf_window": "accepted difference of the two pulse residuals, radians",
    "rfi_concentration_threshold": "triggers with a pulse in one 954 Hz segment per tagging window",
    "rfi_margin": "spectral distance in segments from a candidate to the nearest tagged segment",
    "count_d_gt_m2": "per-bin count of heap events with Cohen's d > -2.0",
    "doi_count_threshold": "max(binomial, overdispersed normal) family-wise count bound + 1",
}


class CliError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# inputs


def _env_int(name: str, default: int) -> int:
    text = os.environ.get(name)
    if text is None:
        return default
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(name, f"cannot parse {text!r}") from exc


def resolve_scenario(spec: str, config_path=None, seed: int | None = None, days: float | None = None,
                     env=None) -> Scenario:
    """Build the scenario named by ``--scenario`` with config layering applied."""
    path = Path(spec)
    if spec in PRESETS:
        cfg = load_config(config_path, env, base=desk_config())
        return preset(spec, cfg, seed=1 if seed is None else seed, days=days)
    if not path.exists():
        raise CliError(f"scenario {spec!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    if path.suffix == ".json":
        sc = load_scenario(path)
        cfg = load_config(config_path, env, base=sc.config)
        sc = dataclasses.replace(sc, config=cfg, seed=sc.seed if seed is None else seed)
        return sc
    values, extras = read_ini(path, extra_sections=("scenario",))
    meta = extras.get("scenario", {})
    name = meta.get("preset", "null")
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}")
    base = desk_config() if meta.get("band", "desk") == "desk" else InstrumentConfig()
    cfg = load_config(config_path, env, base=config_from_mapping(values, base))
    try:
        s = int(meta.get("seed", 1)) if seed is None else seed
        d = (float(meta["days"]) if "days" in meta else None) if days is None else days
    except ValueError as exc:
        raise ConfigError("seed/days", str(exc)) from exc
    return preset(name, cfg, seed=s, days=d)


# --------------------------------------------------------------------------
# manifest


def _versions() -> dict:
    import pandas
    import scipy

    return {"pulsepair": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pandas.__version__, "python": platform.python_version()}


def _json_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def update_manifest(run: Path, stage: str, counts: dict, seconds: float, scenario: Scenario | None = None) -> dict:
    """Record a stage and re-digest every file in the run directory."""
    path = run / "manifest.json"
    m = json.loads(path.read_text()) if path.exists() else {"schema": MANIFEST_SCHEMA, "stages": {}}
    if scenario is not None:
        from .scenario import scenario_to_dict

        m["scenario_digest"] = _json_digest(scenario_to_dict(scenario))
        m["config_digest"] = scenario.config.digest()
        m["duty_cycle_note"] = scenario.duty_cycle_note()
        m["thresholds"] = {k: {"definition": v, "value": _threshold_value(scenario.config, k)}
                           for k, v in THRESHOLD_DEFINITIONS.items()}
    m["versions"] = _versions()
    m["stages"][stage] = {"counts": counts, "seconds": round(seconds, 3)}
    m["files"] = {str(p.relative_to(run)): file_digest(p)
                  for p in sorted(run.rglob("*")) if p.is_file() and p.name != "manifest.json"}
    path.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    return m


def _threshold_value(cfg: InstrumentConfig, key: str):
    from .rfi import concentration_threshold
    from .stats import default_windows

    if key == "rfi_concentration_threshold":
        return concentration_threshold(cfg)
    if key in ("ew_window", "ddf_window"):
        return list(default_windows(cfg)[0 if key == "ew_window" else 1])
    if key == "rfi_margin":
        return cfg.rfi_margin_segments
    return getattr(cfg, key, None)


def verify_manifest(run: Path) -> list:
    """Files whose digest no longer matches the manifest."""
    m = json.loads((run / "manifest.json").read_text())
    return [f for f, h in m["files"].items() if not (run / f).exists() or file_digest(run / f) != h]


# --------------------------------------------------------------------------
# run directory access


def _scenario_of(run: Path) -> Scenario:
    sc_path = run / "scenario.json"
    if not sc_path.exists():
        raise CliError(f"{run}: no scenario.json (run simulate first)")
    return load_scenario(sc_path, config=load_config(run / "config.ini", env={}))


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise CliError(f"{path} is missing (run {stage} first)")
    return path


def load_first_level(run: Path) -> FirstLevelResult:
    return FirstLevelResult(
        read_table(_need(run / "pulses.csv", "detect"), PULSE_DTYPE, "pulses"),
        read_table(_need(run / "candidates.csv", "detect"), CANDIDATE_DTYPE, "candidates"),
        read_table(_need(run / "windows.csv", "detect"), WINDOW_DTYPE, "windows"),
    )


def load_exposure(run: Path) -> ExposureModel:
    e = read_table(_need(run / "exposure.csv", "excise"), EXPOSURE_DTYPE, "exposure")
    meta = json.loads((run / "excision.json").read_text())
    return ExposureModel(e["p"], e["exposure_seconds"], int(meta["n_windows"]), int(meta["n_masked"]), e["event_p"])


def _doi_to_dict(d: DoiReport) -> dict:
    out = dataclasses.asdict(d)
    for k, v in out.items():
        if isinstance(v, tuple):
            out[k] = list(v)
    return out


def _doi_from_dict(d: dict) -> DoiReport:
    return DoiReport(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def load_variants(run: Path, config: InstrumentConfig, exposure: ExposureModel) -> dict:
    meta = json.loads(_need(run / "variants.json", "analyze").read_text())
    out = {}
    for label, info in meta["variants"].items():
        v = TestVariant(info["kind"], info.get("seed"), info.get("tau_override_s", 0.0))
        heap = read_table(run / f"heap_{label}.csv", HEAP_DTYPE, "heap")
        bins = read_table(run / f"bins_{label}.csv", BIN_DTYPE, "bins")
        dois = [_doi_from_dict(d) for d in json.loads((run / f"dois_{label}.json").read_text())["dois"]]
        res = SecondLevelResult(heap, bins, dois, exposure, info["n_candidates"], info["n_hypotheses"],
                                info["overrides"], info.get("warnings", []))
        out[label] = VariantResult(v, res, info["audit"])
    return out


def _pool_map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


# --------------------------------------------------------------------------
# stages


def _simulate_chunk(job):
    sc, a, b, path = job
    save_frames(path, [w for fr in generate_run(sc, a, b) for w in fr.windows])
    return path


def stage_simulate(sc: Scenario, run: Path, workers: int = 1, frames: bool = True) -> dict:
    run.mkdir(parents=True, exist_ok=True)
    save_scenario(sc, run / "scenario.json")
    save_config(sc.config, run / "config.ini")
    counts = {"triggers": sc.n_frames, "windows": sc.n_frames * sc.config.windows_per_trigger, "frame_files": 0}
    if frames:
        fdir = run / "frames"
        fdir.mkdir(exist_ok=True)
        for old in fdir.glob("frames_*.npz"):
            old.unlink()
        sc._model = None
        jobs = [(sc, a, b, fdir / f"frames_{i:05d}.npz") for i, (a, b) in enumerate(chunk_bounds(sc.n_frames, CHUNK_FRAMES))]
        counts["frame_files"] = len(_pool_map(_simulate_chunk, jobs, workers))
    return counts


def _detect_chunk(job):
    path, cfg = job
    return process_windows(load_frames(path), cfg)


def stage_detect(run: Path, workers: int = 1) -> dict:
    sc = _scenario_of(run)
    files = sorted((run / "frames").glob("frames_*.npz"))
    if files:
        first = FirstLevelResult.concat(_pool_map(_detect_chunk, [(f, sc.config) for f in files], workers))
        source = "frames"
    else:
        first = run_first_level(sc, workers)
        source = "regenerated"
    write_table(run / "pulses.csv", first.pulses, "pulses")
    write_table(run / "candidates.csv", first.candidates, "candidates")
    write_table(run / "windows.csv", first.windows, "windows")
    return {"windows": int(first.windows.size), "pulses": int(first.pulses.size),
            "pairs_formed": int(first.n_pairs_formed), "candidates": int(first.candidates.size), "input": source}


def stage_excise(run: Path) -> dict:
    sc = _scenario_of(run)
    first = load_first_level(run)
    region = sun_region_for(sc)
    exc = run_excision(first.pulses, first.candidates, sc.config, region)
    from .pipeline import exposure_for

    exposure = exposure_for(first.windows, sc.config, region)
    write_table(run / "tags.csv", exc.tags.astype(TAG_DTYPE, copy=False), "tags")
    write_table(run / "segment_counts.csv", exc.counts.astype(SEGCOUNT_DTYPE, copy=False), "segment_counts")
    write_table(run / "candidates_excised.csv", exc.candidates, "candidates")
    mask = exc.sun_mask.rows if exc.sun_mask is not None else np.empty(0, SUNMASK_DTYPE)
    write_table(run / "sun_mask.csv", mask, "sun_mask")
    e = np.empty(exposure.p.size, EXPOSURE_DTYPE)
    e["bin"] = np.arange(e.size)
    e["p"], e["event_p"], e["exposure_seconds"] = exposure.p, exposure.event_p, exposure.exposure_seconds
    write_table(run / "exposure.csv", e, "exposure")
    counts = {"candidates_in": exc.n_in, "rfi_removed": exc.n_rfi_removed, "sun_removed": exc.n_sun_removed,
              "both_removed": exc.n_both, "kept": int(exc.candidates.size), "tagged_segments": int(exc.tags.size),
              "concentration_threshold": int(exc.threshold), "n_windows": exposure.n_windows,
              "n_masked": exposure.n_masked, "active_bins": exposure.active_bins}
    (run / "excision.json").write_text(json.dumps({"schema": EXCISION_SCHEMA, **counts}, indent=2, sort_keys=True) + "\n")
    return counts


def stage_analyze(run: Path, variants: list) -> dict:
    sc = _scenario_of(run)
    cands = read_table(_need(run / "candidates_excised.csv", "excise"), CANDIDATE_DTYPE, "candidates")
    exposure = load_exposure(run)
    meta = {"schema": VARIANTS_SCHEMA, "variants": {}}
    counts = {}
    for v in variants:
        vr = run_variant(cands, exposure, sc.config, v)
        r = vr.result
        write_table(run / f"heap_{v.label}.csv", r.heap, "heap")
        write_table(run / f"bins_{v.label}.csv", r.bins, "bins")
        (run / f"dois_{v.label}.json").write_text(
            json.dumps({"schema": DOIS_SCHEMA, "dois": [_doi_to_dict(d) for d in r.dois]}, indent=2, sort_keys=True) + "\n")
        meta["variants"][v.label] = {
            "kind": v.kind, "seed": v.seed, "tau_override_s": v.tau_override_s,
            "n_candidates": r.n_candidates, "n_hypotheses": r.n_hypotheses,
            "overrides": r.overrides, "warnings": r.warnings, "audit": vr.audit,
        }
        counts[v.label] = {"heap_records": int(r.heap.size), "dois": len(r.dois)}
    (run / "variants.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return counts


def stage_diagnose(run: Path, highvis_db: float = 144.0) -> dict:
    sc = _scenario_of(run)
    cfg = sc.config
    exposure = load_exposure(run)
    results = load_variants(run, cfg, exposure)
    write_table(run / "comparison.csv", comparison_rows(results), "comparison")
    audit = {label: {"declared_override": vr.audit.get("declared_override", {}),
                     "differs_from_baseline": sorted(audit_differences(cfg, vr.variant))}
             for label, vr in results.items()}
    (run / "audit.json").write_text(json.dumps({"schema": "pulsepair.audit/1", "config_digest": cfg.digest(),
                                                "variants": audit}, indent=2, sort_keys=True) + "\n")
    windows = read_table(_need(run / "windows.csv", "detect"), WINDOW_DTYPE, "windows")
    hv = high_visibility_scan(windows, highvis_db)
    write_table(run / "highvis.csv", hv, "highvis")
    counts = {"variants": len(results), "highvis_windows": int(hv.size)}
    if "baseline" in results and "modified_filter" in results:
        base, mod = results["baseline"].result, results["modified_filter"].result
        bins = {d.central_bin for d in base.dois}
        bins |= {int(ra_bin_of(s.ra_hr, cfg)) for s in sc.sources}
        rows = []
        for k in sorted(bins):
            row = classify_source(base, mod, k, cfg)
            row["origin"] = " ".join(([f"source:{s.name}" for s in sc.sources if int(ra_bin_of(s.ra_hr, cfg)) == k])
                                     + (["doi"] if k in {d.central_bin for d in base.dois} else []))
            rows.append(row)
        write_table(run / "classification.csv", rows if rows else np.empty(0, CLASS_DTYPE), "classification")
        counts["classified_bins"] = len(rows)
    return counts


def stage_report(run: Path, figures: list, highvis_db: float = 144.0) -> dict:
    sc = _scenario_of(run)
    cfg = sc.config
    exposure = load_exposure(run)
    results = load_variants(run, cfg, exposure)
    variants = {label: vr.result for label, vr in results.items()}
    bundle = AnalysisBundle(
        cfg, read_table(run / "candidates_excised.csv", CANDIDATE_DTYPE, "candidates"),
        read_table(run / "windows.csv", WINDOW_DTYPE, "windows"), exposure, variants,
        read_table(run / "sun_mask.csv", SUNMASK_DTYPE, "sun_mask"), highvis_db,
    )
    skipped = []
    if figures == ["all"]:
        figures = []
        for f in FIGURE_CLASSES:
            need = {"fig24": any(l.startswith("phase_noise") for l in variants), "fig25": "modified_filter" in variants}
            if need.get(f, "baseline" in variants):
                figures.append(f)
            else:
                skipped.append(f)
    paths = emit_figure_data(bundle, figures, run / "figures") if figures else []
    exc = json.loads((run / "excision.json").read_text())
    lines = ["# pulsepair report v1", f"scenario: {sc.name} (seed {sc.seed})",
             f"config digest: {cfg.digest()}", f"duty cycle: {sc.duty_cycle_note()}",
             f"excision: {exc['candidates_in']} in, {exc['rfi_removed']} rfi, {exc['sun_removed']} sun, {exc['kept']} kept",
             f"active bins: {exposure.active_bins}"]
    for label, r in variants.items():
        lines.append(f"[{label}] heap records {r.heap.size}, mean count per bin {mean_count_per_bin(r.heap, cfg):.2f}, DOIs {len(r.dois)}")
        for d in r.dois:
            lines.append(f"  DOI bin {d.central_bin} RA {d.center_ra_hr:.4f} h: count {d.total_count} "
                         f"(guard {d.count_threshold}), median d {d.median_d:.2f}, alias counts {list(d.alias_counts)}")
    if skipped:
        lines.append("figures skipped (variant not analyzed): " + " ".join(skipped))
    (run / "report.txt").write_text("\n".join(lines) + "\n")
    return {"figures": [p.name for p in paths], "skipped": skipped}


# --------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pulsepair", description="Pulse-pair drift-scan simulator and pipeline.")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, need_in=True):
        if need_in:
            p.add_argument("--in", dest="indir", required=True, help="run directory")
        p.add_argument("--workers", type=int, default=None, help="process count (default $PULSEPAIR_WORKERS or 1)")
        return p

    def scenario_args(p):
        p.add_argument("--scenario", required=True, help=f"preset ({', '.join(PRESETS)}), scenario .json, or .cfg/.ini")
        p.add_argument("--config", default=None, help="INI settings applied over the scenario's")
        p.add_argument("--seed", type=int, default=None, help="simulator seed (default $PULSEPAIR_SEED or the scenario's)")
        p.add_argument("--days", type=float, default=None, help="run length in days (transit arcs for source presets)")
        p.add_argument("--out", required=True, help="run directory to create")
        p.add_argument("--no-frames", action="store_true", help="skip frame archives; detect regenerates them")

    scenario_args(common(sub.add_parser("simulate", help="write scenario, config and frame archives"), need_in=False))
    common(sub.add_parser("detect", help="first level: pulses, pairs, candidates"))
    common(sub.add_parser("excise", help="RFI tagging, Sun mask, exposure"))
    p = common(sub.add_parser("analyze", help="second level per variant"))
    p.add_argument("--variant", default="baseline", help="e.g. baseline,phase_noise:1..4,tau_zero,modified_filter")
    p = common(sub.add_parser("diagnose", help="variant comparison, audit, classification, high-visibility scan"))
    p.add_argument("--highvis-db", type=float, default=144.0)
    p = common(sub.add_parser("report", help="figure data and a text summary"))
    p.add_argument("--figure", default="all", help=f"comma list of {', '.join(FIGURE_CLASSES)} or 'all'")
    p.add_argument("--highvis-db", type=float, default=144.0)
    p = sub.add_parser("run", help="simulate through report in one go")
    scenario_args(common(p, need_in=False))
    p.add_argument("--variant", default="baseline,phase_noise:1..4,tau_zero,modified_filter")
    p.add_argument("--figure", default="all")
    p.add_argument("--highvis-db", type=float, default=144.0)
    return ap


def _figures(text: str) -> list:
    names = [t.strip() for t in text.split(",") if t.strip()]
    if names == ["all"]:
        return names
    bad = [n for n in names if n not in FIGURE_CLASSES]
    if bad:
        raise CliError(f"unknown figure class {bad[0]!r}; choose from {', '.join(FIGURE_CLASSES)}")
    return names


def execute(args) -> None:
    workers = args.workers if args.workers is not None else _env_int("PULSEPAIR_WORKERS", 1)
    if workers < 1:
        raise ConfigError("workers", "must be at least 1")

    def timed(stage, run, fn, *a, scenario=None):
        t = time.perf_counter()
        counts = fn(*a)
        update_manifest(run, stage, counts, time.perf_counter() - t, scenario)
        print(f"{stage}: {json.dumps(counts, sort_keys=True)}")
        return counts

    if args.verb in ("simulate", "run"):
        seed = args.seed
        if seed is None and "PULSEPAIR_SEED" in os.environ:
            seed = _env_int("PULSEPAIR_SEED", 1)
        sc = resolve_scenario(args.scenario, args.config, seed, args.days)
        run = Path(args.out)
        timed("simulate", run, stage_simulate, sc, run, workers, not args.no_frames, scenario=sc)
        if args.verb == "simulate":
            return
        variants = parse_variants(args.variant)
        figures = _figures(args.figure)
        timed("detect", run, stage_detect, run, workers)
        timed("excise", run, stage_excise, run)
        timed("analyze", run, stage_analyze, run, variants)
        timed("diagnose", run, stage_diagnose, run, args.highvis_db)
        timed("report", run, stage_report, run, figures, args.highvis_db)
        return
    run = Path(args.indir)
    if args.verb == "detect":
        timed("detect", run, stage_detect, run, workers)
    elif args.verb == "excise":
        timed("excise", run, stage_excise, run)
    elif args.verb == "analyze":
        timed("analyze", run, stage_analyze, run, parse_variants(args.variant))
    elif args.verb == "diagnose":
        timed("diagnose", run, stage_diagnose, run, args.highvis_db)
    elif args.verb == "report":
        timed("report", run, stage_report, run, _figures(args.figure), args.highvis_db)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        execute(args)
    except ConfigError as exc:
        print(f"pulsepair: config error: {exc}", file=sys.stderr)
        return 2
    except (CliError, ValueError, KeyError, OSError) as exc:
        print(f"pulsepair: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
