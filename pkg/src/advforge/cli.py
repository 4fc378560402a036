"""The forge command line: one entry point over the whole pipeline.

Subcommands cover validation, mutation campaigns, worker orchestration,
scoring, verdict submission, candidate selection, dataset analytics, and
the poisoning grid.  Configuration comes from a single JSON file given
via --config or the FORGE_CONFIG environment variable; unknown keys are
rejected.  Exit codes: 0 success, 1 partial per-item failures, 2 config
or usage errors.
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
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, analytics, gbdt, harness, mutator, pe, poisonlab
from . import scoring, selector


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class GlobalConfig:
    rng_seed: int = 0
    work_dir: str = "."
    selection: selector.SelectionConstants = field(
        default_factory=selector.SelectionConstants)
    harness: harness.HarnessConfig | None = None
    scorer: dict | None = None
    quota: dict | None = None
    gbdt: gbdt.Hyperparams = field(default_factory=gbdt.Hyperparams)

    @classmethod
    def from_dict(cls, obj: dict) -> "GlobalConfig":
        known = {"rng_seed", "work_dir", "selection", "harness", "scorer",
                 "quota", "gbdt"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict = {}
        try:
            if "rng_seed" in obj:
                kwargs["rng_seed"] = int(obj["rng_seed"])
                if kwargs["rng_seed"] < 0:
                    raise ConfigError("rng_seed must be non-negative")
            if "work_dir" in obj:
                kwargs["work_dir"] = str(obj["work_dir"])
            if "selection" in obj:
                kwargs["selection"] = _typed_section(
                    selector.SelectionConstants, obj["selection"], "selection")
            if "harness" in obj and obj["harness"] is not None:
                kwargs["harness"] = harness.HarnessConfig.from_dict(
                    obj["harness"])
            if "scorer" in obj and obj["scorer"] is not None:
                kwargs["scorer"] = _checked_keys(
                    obj["scorer"], "scorer",
                    {"kind", "model_path", "endpoint", "timeout_ms",
                     "threshold"})
            if "quota" in obj and obj["quota"] is not None:
                kwargs["quota"] = _checked_keys(
                    obj["quota"], "quota",
                    {"daily_limit", "state_path", "service",
                     "max_report_age", "poll_interval"})
            if "gbdt" in obj:
                kwargs["gbdt"] = _typed_section(
                    gbdt.Hyperparams, obj["gbdt"], "gbdt")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {"rng_seed": self.rng_seed, "work_dir": self.work_dir,
               "selection": dataclasses.asdict(self.selection),
               "gbdt": dataclasses.asdict(self.gbdt)}
        if self.harness is not None:
            out["harness"] = dataclasses.asdict(self.harness)
        if self.scorer is not None:
            out["scorer"] = dict(self.scorer)
        if self.quota is not None:
            out["quota"] = dict(self.quota)
        return out


def _typed_section(klass, obj: dict, name: str):
    fields = {f.name for f in dataclasses.fields(klass)}
    unknown = set(obj) - fields
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    return klass(**obj)


def _checked_keys(obj: dict, name: str, allowed: set) -> dict:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    return dict(obj)


def load_config(path: str | None) -> GlobalConfig:
    path = path or os.environ.get("FORGE_CONFIG")
    if not path:
        return GlobalConfig()
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return GlobalConfig.from_dict(obj)


def build_scorer(config: GlobalConfig) -> scoring.ScorerHandle:
    section = config.scorer
    if not section:
        raise ConfigError("this subcommand needs a scorer config section")
    kind = section.get("kind")
    threshold = section.get("threshold", scoring.DEFAULT_SCORE_THRESHOLD)
    if kind == "local":
        path = section.get("model_path")
        if not path:
            raise ConfigError("local scorer needs model_path")
        model = gbdt.TrainedModel.load(path)
        return scoring.ScorerHandle.local(model, threshold=threshold)
    if kind == "http":
        endpoint = section.get("endpoint")
        if not endpoint:
            raise ConfigError("http scorer needs endpoint")
        return scoring.ScorerHandle.http(
            endpoint, timeout_ms=section.get("timeout_ms", 10_000),
            threshold=threshold)
    raise ConfigError(f"unknown scorer kind: {kind!r}")


def write_run_manifest(out_dir, command: str, argv, config: GlobalConfig,
                       inputs: dict) -> None:
    """Record what ran: inputs, seeds, and versions, for reproducibility."""
    manifest = {
        "command": command,
        "argv": list(argv),
        "rng_seed": config.rng_seed,
        "config": config.to_dict(),
        "inputs": inputs,
        "versions": {"advforge": __version__,
                     "python": platform.python_version(),
                     "numpy": np.__version__},
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1))


def _digest_path(path) -> str:
    p = Path(path)
    if p.is_file():
        return hashlib.sha256(p.read_bytes()).hexdigest()
    if p.is_dir():
        names = sorted(x.name for x in p.iterdir())
        return hashlib.sha256("\n".join(names).encode()).hexdigest()
    return ""


def _read_jsonl(path) -> list:
    rows = []
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _input_files(dir_path) -> list:
    root = Path(dir_path)
    if not root.is_dir():
        raise ConfigError(f"not a directory: {dir_path}")
    return sorted(p for p in root.iterdir() if p.is_file())


# ---------------------------------------------------------------- commands


def cmd_validate(args, config: GlobalConfig) -> int:
    files = _input_files(args.input_dir)
    rows = []
    failures = 0
    for path in files:
        try:
            data = path.read_bytes()
        except OSError as exc:
            rows.append({"path": str(path), "error": str(exc)})
            failures += 1
            continue
        report = pe.validate(data)
        rows.append({"path": str(path), "sha256": report.sha256,
                     "file_size": report.file_size,
                     "is_valid_pe": report.is_valid_pe,
                     "reasons": list(report.reasons)})
    text = "\n".join(json.dumps(r) for r in rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "reports.jsonl").write_text(text + "\n" if text else "")
        write_run_manifest(out, "validate", sys.argv[1:], config,
                           {"input_dir": str(args.input_dir),
                            "input_digest": _digest_path(args.input_dir)})
    else:
        print(text)
    return 1 if failures else 0


def cmd_mutate(args, config: GlobalConfig) -> int:
    handle = build_scorer(config)
    files = _input_files(args.input_dir)
    out = Path(args.out)
    files_dir = out / "files"
    files_dir.mkdir(parents=True, exist_ok=True)
    pool = (mutator.ContentPool.from_dir(args.pool) if args.pool
            else mutator.ContentPool.fallback())

    rows = []
    failures = 0
    for path in files:
        data = path.read_bytes()
        sha = hashlib.sha256(data).hexdigest()
        # stable per-file seed: order of files must not matter
        seed = (config.rng_seed ^ int(sha[:16], 16)) & ((1 << 64) - 1)
        campaign = mutator.CampaignConfig(
            max_steps=args.max_steps,
            score_threshold=args.threshold,
            rng_seed=seed)
        try:
            result = mutator.run_campaign(
                data, lambda b: scoring.score(handle, b), campaign, pool)
        except (mutator.MutatorError, scoring.ScoringError) as exc:
            rows.append({"path": str(path), "sha256": sha,
                         "error": str(exc)})
            failures += 1
            continue
        (files_dir / path.name).write_bytes(result.final_bytes)
        rows.append({"path": str(path), "sha256": sha,
                     "evaded": result.evaded,
                     "steps_used": result.steps_used,
                     "final_score": result.score_trace[-1][1],
                     "plan": result.plan.to_dict()})
    (out / "campaigns.jsonl").write_text(
        "\n".join(json.dumps(r) for r in rows) + "\n")
    write_run_manifest(out, "mutate", sys.argv[1:], config,
                       {"input_dir": str(args.input_dir),
                        "input_digest": _digest_path(args.input_dir),
                        "pool": str(args.pool) if args.pool else None})
    return 1 if failures else 0


def cmd_harness_run(args, config: GlobalConfig) -> int:
    if config.harness is None:
        raise ConfigError("harness run needs a harness config section")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = harness.split_dataset(args.input_dir,
                                     config.harness.chunk_count)
    manifest.save(out / "chunks.json")
    summary = harness.run(config.harness, manifest, out / "work",
                          status_stream=sys.stdout)
    index = harness.merge_outputs(manifest, summary, out / "work",
                                  out / "merged")
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=1))
    write_run_manifest(out, "harness run", sys.argv[1:], config,
                       {"input_dir": str(args.input_dir),
                        "input_digest": _digest_path(args.input_dir),
                        "merged_files": len(index)})
    discarded = [c for c, s in summary.chunk_states.items()
                 if s == "discarded"]
    if discarded:
        print(f"forge: {len(discarded)} chunk(s) discarded", file=sys.stderr)
        return 1
    return 0


def cmd_score(args, config: GlobalConfig) -> int:
    handle = build_scorer(config)
    report, errors = scoring.classify_dir(handle, args.input_dir,
                                          parallelism=args.parallelism)
    payload = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "scores.json").write_text(payload)
        write_run_manifest(out, "score", sys.argv[1:], config,
                           {"input_dir": str(args.input_dir),
                            "input_digest": _digest_path(args.input_dir)})
    else:
        print(payload)
    for problem in errors:
        print(f"forge: {problem}", file=sys.stderr)
    return 1 if errors else 0


def _load_service(spec: str) -> scoring.VerdictService:
    module_name, _, attr = spec.partition(":")
    if not module_name or not attr:
        raise ConfigError(f"service must look like module:factory, got {spec!r}")
    import importlib
    try:
        module = importlib.import_module(module_name)
        factory = getattr(module, attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load service {spec!r}: {exc}") from exc
    service = factory()
    if not isinstance(service, scoring.VerdictService):
        raise ConfigError(f"{spec!r} did not produce a VerdictService")
    return service


def cmd_verdicts(args, config: GlobalConfig) -> int:
    section = config.quota
    if not section:
        raise ConfigError("verdicts needs a quota config section")
    spec = args.service or section.get("service")
    if not spec:
        raise ConfigError("verdicts needs a service (flag or quota.service)")
    if "state_path" not in section or "daily_limit" not in section:
        raise ConfigError("quota config needs state_path and daily_limit")
    service = _load_service(spec)
    state_path = section["state_path"]
    if Path(state_path).exists():
        state = scoring.QuotaState.load(state_path)
    else:
        state = scoring.QuotaState.new(int(section["daily_limit"]))
        state.save(state_path)
    vconfig = scoring.VerdictConfig(
        service=service, state_path=state_path,
        max_report_age=section.get("max_report_age",
                                   scoring.DEFAULT_REPORT_AGE),
        poll_interval=section.get("poll_interval", 1.0))
    files = _input_files(args.input_dir)
    state = scoring.verdicts_submit_poll(state, files, vconfig)
    print(json.dumps({"used_today": state.used_today,
                      "pending": len(state.pending),
                      "completed": len(state.completed)}))
    return 0


def cmd_select(args, config: GlobalConfig) -> int:
    try:
        sources = [selector.SourceSample(**row)
                   for row in _read_jsonl(args.sources)]
        candidates = [selector.CandidateRecord.from_dict(row)
                      for row in _read_jsonl(args.candidates)]
        summary = selector.assemble_dataset(sources, candidates, args.out,
                                            constants=config.selection)
    except (TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad selection input: {exc}") from exc
    write_run_manifest(args.out, "select", sys.argv[1:], config,
                       {"sources": _digest_path(args.sources),
                        "candidates": _digest_path(args.candidates)})
    print(json.dumps(summary))
    return 1 if summary["failed_count"] else 0


def cmd_stats(args, config: GlobalConfig) -> int:
    pairs = _read_jsonl(args.pairs)
    if not pairs:
        raise ConfigError(f"no rows in {args.pairs}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"pairs": len(pairs)}

    verdict_rows = [p for p in pairs if "orig_verdict_malicious" in p
                    and "adv_score" in p]
    if verdict_rows:
        summary["evasion_rate"] = analytics.evasion_rate(
            verdict_rows, args.threshold)

    drop_rows = [p for p in pairs if "orig_score" in p and "adv_score" in p]
    if drop_rows:
        bins = analytics.score_drop_bins(drop_rows, bin_count=args.bins)
        analytics.write_score_drop_csv(bins, out / "score_drops.csv")
        summary["score_drop_rows"] = bins.sample_count

    ratio_rows = [p for p in pairs if "generator" in p and "orig_size" in p
                  and "modified_size" in p]
    if ratio_rows:
        stats = analytics.size_ratio_stats(ratio_rows)
        analytics.write_size_ratio_csv(stats, out / "size_ratios.csv")
        summary["generators"] = len(stats)

    (out / "stats.json").write_text(json.dumps(summary, indent=1))
    write_run_manifest(out, "stats", sys.argv[1:], config,
                       {"pairs": _digest_path(args.pairs)})
    print(json.dumps(summary))
    return 0


def _load_bundle(path, keys) -> dict:
    try:
        bundle = np.load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read data bundle {path}: {exc}") from exc
    missing = [k for k in keys if k not in bundle.files]
    if missing:
        raise ConfigError(f"data bundle {path} lacks arrays: {missing}")
    return {k: bundle[k] for k in keys}


SMALL_GRID = {"tau_list": (0.0, 0.5, 1.0), "fraction_list": (0.01, 0.1)}


def cmd_poison_run(args, config: GlobalConfig) -> int:
    data = _load_bundle(args.data, ["train_x", "train_y", "test_x",
                                    "test_y", "adv_pool", "adv_test"])
    grids = SMALL_GRID if args.grid == "small" else {}
    result = poisonlab.run_grid(
        data["train_x"], data["train_y"], data["test_x"], data["test_y"],
        data["adv_pool"], data["adv_test"], config.gbdt,
        rng_seed=config.rng_seed, out_dir=args.out, **grids)
    write_run_manifest(args.out, "poison run", sys.argv[1:], config,
                       {"data": _digest_path(args.data),
                        "grid": args.grid})
    print(json.dumps({"cells": len(result["cells"]),
                      "failures": len(result["failures"])}))
    return 1 if result["failures"] else 0


def cmd_poison_cross_eval(args, config: GlobalConfig) -> int:
    model = gbdt.TrainedModel.load(args.model)
    data = _load_bundle(args.data, ["test_x", "test_y"])
    report = poisonlab.cross_evaluate(model, data["test_x"], data["test_y"])
    print(json.dumps(report.to_dict(), indent=1))
    return 0


# ---------------------------------------------------------------- dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forge",
        description="Adversarial PE pipeline: validate, mutate, "
                    "orchestrate, score, select, analyze, poison.")
    parser.add_argument("--config", help="path to JSON config "
                        "(fallback: FORGE_CONFIG env var)")
    parser.add_argument("--version", action="version",
                        version=f"forge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="structural PE validation reports")
    p.add_argument("input_dir")
    p.add_argument("--out", help="write reports.jsonl here instead of stdout")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("mutate", help="hill-climbing evasion campaigns")
    p.add_argument("--in", dest="input_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int, default=200)
    p.add_argument("--threshold", type=float,
                   default=mutator.DEFAULT_THRESHOLD)
    p.add_argument("--pool", help="directory of benign content donors")
    p.set_defaults(func=cmd_mutate)

    p = sub.add_parser("harness", help="generator worker orchestration")
    hsub = p.add_subparsers(dest="harness_command", required=True)
    hr = hsub.add_parser("run", help="split, supervise, and merge")
    hr.add_argument("--input", dest="input_dir", required=True)
    hr.add_argument("--out", required=True)
    hr.set_defaults(func=cmd_harness_run)

    p = sub.add_parser("score", help="classify a directory of binaries")
    p.add_argument("--in", dest="input_dir", required=True)
    p.add_argument("--out")
    p.add_argument("--parallelism", type=int, default=1)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("verdicts", help="quota-limited verdict submission")
    p.add_argument("--in", dest="input_dir", required=True)
    p.add_argument("--service", help="module:factory for the verdict service")
    p.set_defaults(func=cmd_verdicts)

    p = sub.add_parser("select", help="assemble the final dataset")
    p.add_argument("--sources", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("stats", help="evasion, score drop, and size stats")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float,
                   default=scoring.DEFAULT_SCORE_THRESHOLD)
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("poison", help="poisoning experiments")
    psub = p.add_subparsers(dest="poison_command", required=True)
    pr = psub.add_parser("run", help="tau x fraction grid")
    pr.add_argument("--data", required=True,
                    help="npz bundle: train_x/train_y/test_x/test_y/"
                         "adv_pool/adv_test")
    pr.add_argument("--out", required=True)
    pr.add_argument("--grid", choices=["table4", "small"], default="table4")
    pr.set_defaults(func=cmd_poison_run)
    pc = psub.add_parser("cross-eval", help="evaluate a saved model")
    pc.add_argument("--model", required=True)
    pc.add_argument("--data", required=True)
    pc.set_defaults(func=cmd_poison_cross_eval)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except ConfigError as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return 2
    except (pe.PeError, mutator.MutatorError, scoring.ScoringError,
            harness.HarnessError, poisonlab.PoisonLabError,
            gbdt.GbdtError) as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
