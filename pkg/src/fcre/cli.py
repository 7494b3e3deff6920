"""Command-line front end: ``generate``, ``run``, and ``report``.

A run is identified by a short hash of the fully-resolved config plus
the seed, and owns a directory ``<out>/<run-id>/`` containing
``config.json``, ``metrics.csv``, and one checkpoint per task under
``checkpoints/``.  Re-running the same config and seed rewrites the
same directory with byte-identical contents.  Seeds are independent
replicates; ``FCRE_THREADS`` caps how many run as parallel worker
processes (default: serial).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from fcre.continual import init_state, run_task, write_checkpoint
from fcre.datagen import SyntheticSpec, generate_stream, ingest_dataset, write_dataset
from fcre.descriptions import DescriptionSet, ingest_descriptions, synth_descriptions
from fcre.geometry import unit_normalize
from fcre.inference import HEADS, MetricsReport
from fcre.losses import HyperParams

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class EncoderConfig:
    feature_dim: int = 32
    hidden_dim: int = 32
    embed_dim: int = 16

    def validate(self) -> "EncoderConfig":
        for name, value in asdict(self).items():
            if value < 1:
                raise ValueError(f"encoder.{name} must be >= 1, got {value}")
        return self


@dataclass
class ExperimentConfig:
    """Fully-resolved description of one experiment (all seeds)."""

    data_mode: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    dataset_path: str | None = None
    descriptions_path: str | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hyper: HyperParams = field(default_factory=HyperParams)
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    heads: tuple[str, ...] = HEADS
    description_source: str = "k-set"
    description_spread: float = 0.1
    out_dir: str = "runs"

    def validate(self) -> "ExperimentConfig":
        if self.data_mode not in ("synthetic", "files"):
            raise ValueError(
                f"data_mode must be 'synthetic' or 'files', got {self.data_mode!r}"
            )
        if self.data_mode == "files":
            if not self.dataset_path or not self.descriptions_path:
                raise ValueError(
                    "data_mode 'files' requires both dataset_path and descriptions_path"
                )
        else:
            self.synthetic.validate()
            if self.synthetic.feature_dim != self.encoder.feature_dim:
                raise ValueError(
                    f"synthetic feature_dim {self.synthetic.feature_dim} does not "
                    f"match encoder feature_dim {self.encoder.feature_dim}"
                )
        self.encoder.validate()
        self.hyper.validate()
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"duplicate seeds: {self.seeds}")
        if not self.heads:
            raise ValueError("at least one prediction head is required")
        for head in self.heads:
            if head not in HEADS:
                raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
        if len(set(self.heads)) != len(self.heads):
            raise ValueError(f"duplicate heads: {self.heads}")
        if self.description_source not in ("k-set", "raw-mean"):
            raise ValueError(
                f"description_source must be 'k-set' or 'raw-mean', "
                f"got {self.description_source!r}"
            )
        if self.description_spread < 0.0:
            raise ValueError(
                f"description_spread must be >= 0, got {self.description_spread}"
            )
        return self


def config_to_dict(config: ExperimentConfig) -> dict:
    return {
        "data": {
            "mode": config.data_mode,
            "synthetic": asdict(config.synthetic),
            "dataset_path": config.dataset_path,
            "descriptions_path": config.descriptions_path,
        },
        "encoder": asdict(config.encoder),
        "hyperparams": asdict(config.hyper),
        "seeds": list(config.seeds),
        "heads": list(config.heads),
        "description_source": config.description_source,
        "description_spread": config.description_spread,
        "out_dir": config.out_dir,
    }


def _take_section(obj: dict, name: str, allowed: set[str]) -> dict:
    section = obj.get(name, {})
    if not isinstance(section, dict):
        raise ValueError(f"config section {name!r} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ValueError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    return section


def config_from_dict(obj: dict) -> ExperimentConfig:
    """Build a config from parsed JSON; unknown keys are rejected."""
    if not isinstance(obj, dict):
        raise ValueError("config must be a JSON object")
    top_allowed = {
        "data", "encoder", "hyperparams", "seeds", "heads",
        "description_source", "description_spread", "out_dir",
    }
    unknown = set(obj) - top_allowed
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    data = _take_section(obj, "data", {"mode", "synthetic", "dataset_path", "descriptions_path"})
    synth_fields = set(SyntheticSpec.__dataclass_fields__)
    synth_section = data.get("synthetic", {})
    if not isinstance(synth_section, dict):
        raise ValueError("config section 'data.synthetic' must be an object")
    unknown = set(synth_section) - synth_fields
    if unknown:
        raise ValueError(f"unknown keys in config section 'data.synthetic': {sorted(unknown)}")
    enc_section = _take_section(obj, "encoder", set(EncoderConfig.__dataclass_fields__))
    hyper_section = _take_section(obj, "hyperparams", set(HyperParams.__dataclass_fields__))
    defaults = ExperimentConfig()
    config = ExperimentConfig(
        data_mode=data.get("mode", defaults.data_mode),
        synthetic=replace(defaults.synthetic, **synth_section),
        dataset_path=data.get("dataset_path"),
        descriptions_path=data.get("descriptions_path"),
        encoder=replace(defaults.encoder, **enc_section),
        hyper=replace(defaults.hyper, **hyper_section),
        seeds=tuple(int(s) for s in obj.get("seeds", defaults.seeds)),
        heads=tuple(obj.get("heads", defaults.heads)),
        description_source=obj.get("description_source", defaults.description_source),
        description_spread=float(obj.get("description_spread", defaults.description_spread)),
        out_dir=str(obj.get("out_dir", defaults.out_dir)),
    )
    return config.validate()


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(obj)


def run_id(config: ExperimentConfig, seed: int) -> str:
    """Short stable identifier; the output location does not affect it."""
    ident = config_to_dict(config)
    ident.pop("out_dir")
    payload = json.dumps(ident, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(f"{payload}|seed={seed}".encode("utf-8")).hexdigest()
    return digest[:12]


def _derived_seeds(seed: int) -> tuple[int, int]:
    """Independent sub-seeds for description-center projection and jitter."""
    children = np.random.SeedSequence(seed).spawn(2)
    return tuple(int(c.generate_state(1)[0]) for c in children)


def _description_centers(
    center_map: dict[int, np.ndarray], embed_dim: int, seed: int
) -> dict[int, np.ndarray]:
    """Project feature-space class centers to unit vectors in embedding space."""
    rng = np.random.default_rng(seed)
    feature_dim = next(iter(center_map.values())).size
    proj = rng.standard_normal((embed_dim, feature_dim)) / math.sqrt(feature_dim)
    return {
        rel: unit_normalize(proj @ center_map[rel], name=f"projected center {rel}")
        for rel in sorted(center_map)
    }


def _synthetic_data(config: ExperimentConfig, seed: int):
    spec = replace(config.synthetic, seed=seed)
    stream, center_map = generate_stream(spec)
    proj_seed, desc_seed = _derived_seeds(seed)
    centers_d = _description_centers(center_map, config.encoder.embed_dim, proj_seed)
    descriptions = synth_descriptions(
        desc_seed, centers_d, config.hyper.k_desc, config.description_spread
    )
    return stream, descriptions


def _file_data(config: ExperimentConfig):
    stream = ingest_dataset(config.dataset_path)
    descriptions = ingest_descriptions(
        config.descriptions_path, expected_dim=config.encoder.embed_dim
    )
    missing = set(stream.relations) - set(descriptions.relations)
    if missing:
        raise ValueError(
            f"description file covers no vectors for relations {sorted(missing)}"
        )
    return stream, descriptions


def run_single_seed(config: ExperimentConfig, seed: int) -> dict:
    """Execute one replicate and write its run directory.

    Returns a summary dict: run_dir plus final accuracy and drop per head.
    """
    config.validate()
    if config.data_mode == "synthetic":
        stream, descriptions = _synthetic_data(config, seed)
    else:
        stream, descriptions = _file_data(config)
    if stream.feature_dim != config.encoder.feature_dim:
        raise ValueError(
            f"dataset feature dimension {stream.feature_dim} does not match "
            f"encoder feature_dim {config.encoder.feature_dim}"
        )
    state = init_state(
        config.encoder.feature_dim,
        config.encoder.hidden_dim,
        config.encoder.embed_dim,
        config.hyper,
        seed,
    )
    run_dir = Path(config.out_dir) / run_id(config, seed)
    checkpoints = run_dir / "checkpoints"
    checkpoints.mkdir(parents=True, exist_ok=True)
    for task in stream.tasks:
        run_task(
            state,
            task,
            descriptions,
            config.hyper,
            heads=config.heads,
            description_source=config.description_source,
        )
        write_checkpoint(checkpoints / f"task_{task.index:02d}.json", state)
        logger.info("seed %d: finished task %d/%d", seed, task.index, stream.n_tasks)
    resolved = config_to_dict(config)
    resolved["seed"] = seed
    with open(run_dir / "config.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(resolved, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(run_dir / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(state.report.to_csv(n_tasks=stream.n_tasks))
    summary = {"seed": seed, "run_dir": str(run_dir), "final": {}, "drop": {}}
    for head in config.heads:
        rows = state.report.head_rows(head)
        summary["final"][head] = rows[-1].acc_avg
        summary["drop"][head] = state.report.final_drop(head)
    return summary


def cmd_generate(config: ExperimentConfig, out_dir: str) -> int:
    """Write dataset.jsonl and descriptions.jsonl for the synthetic spec."""
    config.validate()
    if config.data_mode != "synthetic":
        raise ValueError("generate requires a synthetic data config")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = config.synthetic
    stream, center_map = generate_stream(spec)
    proj_seed, desc_seed = _derived_seeds(spec.seed)
    centers_d = _description_centers(center_map, config.encoder.embed_dim, proj_seed)
    descriptions = synth_descriptions(
        desc_seed, centers_d, config.hyper.k_desc, config.description_spread
    )
    dataset_path = out / "dataset.jsonl"
    descriptions_path = out / "descriptions.jsonl"
    write_dataset(stream, dataset_path)
    descriptions.write(descriptions_path)
    print(f"wrote {dataset_path}")
    print(f"wrote {descriptions_path}")
    return 0


def cmd_run(config: ExperimentConfig) -> int:
    """Run every seed, print per-seed and aggregate summaries."""
    config.validate()
    threads = _worker_count(len(config.seeds))
    results: dict[int, dict] = {}
    failures: dict[int, str] = {}
    if threads > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = {
                seed: pool.submit(run_single_seed, config, seed)
                for seed in config.seeds
            }
        for seed, future in futures.items():
            try:
                results[seed] = future.result()
            except Exception as exc:  # noqa: BLE001 - report and keep going
                failures[seed] = str(exc)
    else:
        for seed in config.seeds:
            try:
                results[seed] = run_single_seed(config, seed)
            except Exception as exc:  # noqa: BLE001
                failures[seed] = str(exc)
    for seed in config.seeds:
        if seed in results:
            summary = results[seed]
            finals = "  ".join(
                f"{head}={summary['final'][head]:.4f}" for head in config.heads
            )
            print(f"seed {seed}: {finals}  -> {summary['run_dir']}")
        else:
            print(f"seed {seed}: FAILED: {failures[seed]}", file=sys.stderr)
    if results:
        print("aggregate over", len(results), "seed(s):")
        for head in config.heads:
            finals = [results[s]["final"][head] for s in config.seeds if s in results]
            drops = [results[s]["drop"][head] for s in config.seeds if s in results]
            mean = sum(finals) / len(finals)
            std = _sample_std(finals)
            mean_drop = sum(drops) / len(drops)
            print(
                f"  {head}: final_acc {mean:.4f} +/- {std:.4f}  "
                f"drop {mean_drop:.4f}  signed_delta {-mean_drop:.4f}"
            )
    return 1 if failures else 0


def _sample_std(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / (len(values) - 1))


def _worker_count(n_seeds: int) -> int:
    raw = os.environ.get("FCRE_THREADS", "").strip()
    if not raw:
        return 1
    try:
        threads = int(raw)
    except ValueError:
        raise ValueError(f"FCRE_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(threads, n_seeds))


def cmd_report(run_dirs: list[str], out: str | None) -> int:
    """Aggregate metrics.csv across run dirs; print and optionally save."""
    reports = []
    for dirname in run_dirs:
        path = Path(dirname) / "metrics.csv"
        if not path.exists():
            raise ValueError(f"no metrics.csv under {dirname}")
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reports.append(MetricsReport.from_csv(fh.read()))
    cells: dict[tuple[int, str], list[float]] = {}
    for report in reports:
        for row in report.rows:
            cells.setdefault((row.task_index, row.head), []).append(row.acc_avg)
    heads = sorted({head for _, head in cells})
    tasks = sorted({task for task, _ in cells})
    lines = [["task", "head", "mean_acc_avg", "std_acc_avg", "n_runs"]]
    for task in tasks:
        for head in heads:
            values = cells.get((task, head))
            if not values:
                continue
            mean = sum(values) / len(values)
            lines.append([str(task), head, repr(mean), repr(_sample_std(values)), str(len(values))])
    rendered = "\r\n".join(",".join(row) for row in lines) + "\r\n"
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(rendered)
        print(f"wrote {out}")
    print(f"aggregated {len(reports)} run(s):")
    for head in heads:
        first = cells.get((tasks[0], head))
        last = cells.get((tasks[-1], head))
        if not first or not last:
            continue
        mean_first = sum(first) / len(first)
        mean_last = sum(last) / len(last)
        print(
            f"  {head}: final_acc {mean_last:.4f} +/- {_sample_std(last):.4f}  "
            f"drop {mean_first - mean_last:.4f}  signed_delta {mean_last - mean_first:.4f}"
        )
    return 0


def _parse_seed_list(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in raw.split(",") if part.strip() != "")
    except ValueError:
        raise ValueError(f"--seed expects an integer or comma list, got {raw!r}") from None


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    hyper = config.hyper
    if getattr(args, "no_sc", False):
        hyper = replace(hyper, beta_sc=0.0)
    if getattr(args, "no_st", False):
        hyper = replace(hyper, beta_st=0.0)
    if getattr(args, "no_hm", False):
        hyper = replace(hyper, beta_hm=0.0)
    if getattr(args, "no_mi", False):
        hyper = replace(hyper, beta_mi=0.0)
    if getattr(args, "k_desc", None) is not None:
        hyper = replace(hyper, k_desc=args.k_desc)
    if getattr(args, "alpha", None) is not None:
        hyper = replace(hyper, alpha=args.alpha)
    if getattr(args, "epsilon", None) is not None:
        hyper = replace(hyper, epsilon=args.epsilon)
    config = replace(config, hyper=hyper)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seeds=_parse_seed_list(args.seed))
    if getattr(args, "head", None) is not None:
        config = replace(config, heads=tuple(h.strip() for h in args.head.split(",") if h.strip()))
    if getattr(args, "out", None) is not None:
        config = replace(config, out_dir=args.out)
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fcre",
        description="Few-shot continual classification experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write synthetic dataset/description files")
    gen.add_argument("--config", help="experiment config JSON")
    gen.add_argument("--out", default="data", help="output directory (default: data)")
    gen.add_argument("--seed", help="override the generator seed")
    gen.add_argument("--k-desc", type=int, dest="k_desc", help="descriptions per relation")

    run = sub.add_parser("run", help="train and evaluate over the task stream")
    run.add_argument("--config", help="experiment config JSON")
    run.add_argument("--seed", help="comma-separated seed list (default 0,1,2,3,4)")
    run.add_argument("--head", help="comma-separated heads among: ncm,dri")
    run.add_argument("--no-sc", action="store_true", help="disable the contrastive term")
    run.add_argument("--no-st", action="store_true", help="disable the hardest-pair term")
    run.add_argument("--no-hm", action="store_true", help="disable the hard-mining term")
    run.add_argument("--no-mi", action="store_true", help="disable the mutual-information term")
    run.add_argument("--k-desc", type=int, dest="k_desc", help="descriptions per relation")
    run.add_argument("--alpha", type=float, help="rank-fusion weight in [0, 1]")
    run.add_argument("--epsilon", type=float, help="rank-fusion smoothing > 0")
    run.add_argument("--out", help="output directory (default: runs)")

    rep = sub.add_parser("report", help="aggregate metrics across run directories")
    rep.add_argument("run_dirs", nargs="+", help="run directories with metrics.csv")
    rep.add_argument("--out", help="write the combined CSV here")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            config = load_config(args.config) if args.config else ExperimentConfig()
            if args.seed is not None:
                seeds = _parse_seed_list(args.seed)
                if len(seeds) != 1:
                    raise ValueError("generate takes a single --seed")
                config = replace(config, synthetic=replace(config.synthetic, seed=seeds[0]))
            if args.k_desc is not None:
                config = replace(config, hyper=replace(config.hyper, k_desc=args.k_desc))
            return cmd_generate(config, args.out)
        if args.command == "run":
            config = load_config(args.config) if args.config else ExperimentConfig()
            config = _apply_overrides(config, args).validate()
            return cmd_run(config)
        if args.command == "report":
            return cmd_report(args.run_dirs, args.out)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
