"""Experiment runner: config files, corpus ingestion, result emission.

An experiment is a single JSON file: one denoiser spec, one task (prompts
and an optional target), and a grid of decoding configs. Every grid entry
is run for every (trial, prompt) pair with a seed derived as
``base_seed + flat_run_index``, and the results land in three files whose
bytes are reproducible run over run:

* ``<prefix>_summary.csv``   one row per run
* ``<prefix>_aggregate.csv`` one row per grid entry
* ``<prefix>_steps.jsonl``   one record per decoding step

``BLOCKDEC_JOBS`` sets the worker-thread count for runs within a grid
entry; output order never depends on it.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    DecodingConfig,
    TccfConfig,
    Vocab,
    lint_config,
    validate_config,
)
from .denoisers import MarkovDenoiser, OracleDenoiser, load_scripted, markov_fit
from .metrics import Category, RunSummary, aggregate, summarize
from .scheduler import generate, generate_tccf

__all__ = [
    "ConfigError",
    "Corpus",
    "ExperimentConfig",
    "Tokenization",
    "config_from_dict",
    "config_to_dict",
    "ingest_corpus",
    "load_experiment",
    "load_markov",
    "run_experiment",
    "save_markov",
]

JOBS_ENV_VAR = "BLOCKDEC_JOBS"

SUMMARY_COLUMNS = [
    "grid_index", "trial", "prompt_index", "seed",
    "algorithm", "block_size", "steps", "tau", "tau_l", "tau_h", "gamma",
    "temperature", "b_think", "b_critic",
    "tpf", "mean_confidence", "category", "output_len", "forward_passes",
    "stop_reason",
]

AGGREGATE_COLUMNS = [
    "grid_index",
    "algorithm", "block_size", "steps", "tau", "tau_l", "tau_h", "gamma",
    "temperature", "b_think", "b_critic",
    "runs", "mean_tpf", "mean_confidence",
    "freq_answer_match", "freq_answer_mismatch", "freq_repetition",
    "freq_insufficient_length", "freq_unchecked",
]


class ConfigError(ValueError):
    """An experiment file, corpus, or decoding config is unusable."""


class Tokenization(str, Enum):
    CHARS = "chars"
    WHITESPACE_INTS = "whitespace_ints"


@dataclass(frozen=True)
class Corpus:
    """Ingested corpus: ordinary token ids plus the symbol table that maps
    ids back to source characters (None for integer corpora)."""

    tokens: tuple[int, ...]
    vocab: Vocab
    symbols: tuple[str, ...] | None = None


def ingest_corpus(path, tokenization: Tokenization) -> Corpus:
    """Read a corpus file into token ids.

    ``chars`` assigns ids by first appearance, one per distinct character;
    ``whitespace_ints`` parses nonnegative integers and sizes the vocab as
    max + 1. Malformed input raises :class:`ConfigError` naming the line.
    """
    tokenization = Tokenization(tokenization)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read corpus {path}: {exc}") from exc

    if tokenization is Tokenization.CHARS:
        ids: dict[str, int] = {}
        tokens = []
        for ch in text:
            if ch not in ids:
                ids[ch] = len(ids)
            tokens.append(ids[ch])
        if not tokens:
            raise ConfigError(f"corpus {path} is empty")
        vocab = Vocab.standard(max(2, len(ids)))
        return Corpus(tuple(tokens), vocab, tuple(ids))

    tokens = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        for field in line.split():
            try:
                value = int(field)
            except ValueError as exc:
                raise ConfigError(
                    f"corpus {path}: line {lineno}: {field!r} is not an integer"
                ) from exc
            if value < 0:
                raise ConfigError(f"corpus {path}: line {lineno}: negative token {value}")
            tokens.append(value)
    if not tokens:
        raise ConfigError(f"corpus {path} is empty")
    return Corpus(tuple(tokens), Vocab.standard(max(2, max(tokens) + 1)), None)


def save_markov(denoiser: MarkovDenoiser, path) -> None:
    """Serialize a fitted Markov backend as deterministic JSON."""
    payload = {
        "kind": "markov",
        "order": denoiser.order,
        "smoothing": denoiser.smoothing,
        "vocab_size": denoiser.vocab.size,
        "counts": {
            ",".join(map(str, ctx)): {str(t): c for t, c in sorted(table.items())}
            for ctx, table in denoiser._counts.items()
        },
    }
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n",
        encoding="utf-8",
    )


def load_markov(path) -> MarkovDenoiser:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load markov model {path}: {exc}") from exc
    if payload.get("kind") != "markov":
        raise ConfigError(f"{path} is not a markov model file")
    counts: dict[tuple[int, ...], dict[int, int]] = {}
    for key, table in payload["counts"].items():
        ctx = tuple(int(x) for x in key.split(",")) if key else ()
        counts[ctx] = {int(t): int(c) for t, c in table.items()}
    return MarkovDenoiser(
        order=int(payload["order"]),
        smoothing=float(payload["smoothing"]),
        vocab=Vocab.standard(int(payload["vocab_size"])),
        counts=counts,
    )


_CONFIG_KEYS = {
    "algorithm", "block_size", "steps", "tau", "tau_h", "tau_l", "gamma",
    "temperature", "seed", "max_new_tokens", "tccf", "bacd_cross_block_history",
}
_TCCF_KEYS = {"b_think", "b_critic", "marker", "transition", "stage1_max_tokens"}


def config_from_dict(data: dict) -> DecodingConfig:
    """Parse one grid entry; unknown keys and violations are errors."""
    if not isinstance(data, dict):
        raise ConfigError("each grid entry must be an object")
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "algorithm" not in data:
        raise ConfigError("config entry is missing 'algorithm'")
    kwargs = dict(data)
    tccf_data = kwargs.pop("tccf", None)
    if tccf_data is not None:
        bad = set(tccf_data) - _TCCF_KEYS
        if bad:
            raise ConfigError(f"unknown tccf keys: {sorted(bad)}")
        try:
            kwargs["tccf"] = TccfConfig(
                b_think=int(tccf_data["b_think"]),
                b_critic=int(tccf_data["b_critic"]),
                marker=tuple(int(t) for t in tccf_data["marker"]),
                transition=tuple(int(t) for t in tccf_data.get("transition", ())),
                stage1_max_tokens=(
                    int(tccf_data["stage1_max_tokens"])
                    if tccf_data.get("stage1_max_tokens") is not None
                    else None
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad tccf section: {exc}") from exc
    try:
        for key in ("tau", "tau_h", "tau_l", "gamma", "temperature"):
            if kwargs.get(key) is not None:
                kwargs[key] = float(kwargs[key])
        cfg = DecodingConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config entry: {exc}") from exc
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    return cfg


def config_to_dict(cfg: DecodingConfig) -> dict:
    """Inverse of :func:`config_from_dict` (structural round-trip)."""
    out = {
        "algorithm": cfg.algorithm.value,
        "block_size": cfg.block_size,
        "steps": cfg.steps,
        "tau": cfg.tau,
        "tau_h": cfg.tau_h,
        "tau_l": cfg.tau_l,
        "gamma": cfg.gamma,
        "temperature": cfg.temperature,
        "seed": cfg.seed,
        "max_new_tokens": cfg.max_new_tokens,
        "bacd_cross_block_history": cfg.bacd_cross_block_history,
        "tccf": None,
    }
    if cfg.tccf is not None:
        out["tccf"] = {
            "b_think": cfg.tccf.b_think,
            "b_critic": cfg.tccf.b_critic,
            "marker": list(cfg.tccf.marker),
            "transition": list(cfg.tccf.transition),
            "stage1_max_tokens": cfg.tccf.stage1_max_tokens,
        }
    return out


@dataclass
class ExperimentConfig:
    """Parsed experiment file; relative paths resolve against ``root``."""

    base_seed: int
    trials: int
    denoiser: dict
    task: dict
    target: tuple[int, ...] | None
    grid: list[DecodingConfig]
    output_dir: Path
    prefix: str
    root: Path


def _build_prompts(spec, corpus: Corpus | None) -> list[tuple[int, ...]]:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("task.prompts must be an object with a 'kind'")
    kind = spec["kind"]
    if kind == "tokens":
        values = spec.get("values")
        if not values:
            raise ConfigError("task.prompts.values must be a nonempty list of token lists")
        return [tuple(int(t) for t in row) for row in values]
    if kind == "corpus_snippets":
        if corpus is None:
            raise ConfigError("corpus_snippets prompts need a markov corpus denoiser")
        count = int(spec.get("count", 1))
        length = int(spec.get("length", 4))
        if count < 1 or length < 1:
            raise ConfigError("corpus_snippets count and length must be positive")
        if length > len(corpus.tokens):
            raise ConfigError("corpus_snippets length exceeds the corpus")
        rng = np.random.default_rng(int(spec.get("seed", 0)))
        starts = rng.integers(0, len(corpus.tokens) - length + 1, size=count)
        return [tuple(corpus.tokens[s : s + length]) for s in starts]
    raise ConfigError(f"unknown prompts kind {kind!r}")


class _DenoiserFactory:
    """Builds the per-run backend; shares immutable backends across runs."""

    def __init__(self, spec: dict, root: Path):
        self.spec = spec
        self.corpus: Corpus | None = None
        self._shared = None
        kind = spec.get("kind")
        if kind == "markov":
            self.corpus = ingest_corpus(root / spec["corpus"], spec.get("tokenization", "chars"))
            self._shared = markov_fit(
                list(self.corpus.tokens),
                order=int(spec.get("order", 1)),
                smoothing=float(spec.get("smoothing", 0.01)),
                vocab=self.corpus.vocab,
            )
        elif kind == "markov_model":
            self._shared = load_markov(root / spec["path"])
        elif kind == "oracle":
            self.vocab = Vocab.standard(int(spec["vocab_size"]))
            self.target = tuple(int(t) for t in spec["target"])
            self.base_confidence = float(spec.get("base_confidence", 0.9))
            self.decay = float(spec.get("decay", 0.9))
        elif kind == "scripted":
            self.vocab = Vocab.standard(int(spec["vocab_size"]))
            self.fixture = root / spec["fixture"]
            # Parse once to fail fast; per-run instances are rebuilt fresh.
            load_scripted(self.fixture, self.vocab)
        else:
            raise ConfigError(f"unknown denoiser kind {spec.get('kind')!r}")
        self.kind = kind

    @property
    def vocab_size(self) -> int:
        if self._shared is not None:
            return self._shared.vocab.size
        return self.vocab.size

    def for_run(self, prompt: tuple[int, ...]):
        if self._shared is not None:
            return self._shared
        if self.kind == "oracle":
            return OracleDenoiser(
                self.target, self.vocab, self.base_confidence, self.decay,
                prompt_len=len(prompt),
            )
        return load_scripted(self.fixture, self.vocab, prompt_len=len(prompt))


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read experiment {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"experiment {path} is not valid JSON: {exc}") from exc

    allowed = {"base_seed", "trials", "denoiser", "task", "grid", "output"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
    for required in ("denoiser", "task", "grid"):
        if required not in data:
            raise ConfigError(f"experiment is missing {required!r}")
    grid_data = data["grid"]
    if not isinstance(grid_data, list) or not grid_data:
        raise ConfigError("grid must be a nonempty list")
    grid = [config_from_dict(entry) for entry in grid_data]

    task = data["task"]
    if not isinstance(task, dict) or "prompts" not in task:
        raise ConfigError("task must be an object with 'prompts'")
    target = task.get("target")
    output = data.get("output", {})
    trials = int(data.get("trials", 1))
    if trials < 1:
        raise ConfigError("trials must be positive")
    return ExperimentConfig(
        base_seed=int(data.get("base_seed", 0)),
        trials=trials,
        denoiser=dict(data["denoiser"]),
        task=task,
        target=tuple(int(t) for t in target) if target is not None else None,
        grid=grid,
        output_dir=path.parent / output.get("dir", "out"),
        prefix=str(output.get("prefix", path.stem)),
        root=path.parent,
    )


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Enum):
        return value.value
    return str(value)


def _config_cells(cfg: DecodingConfig) -> dict[str, str]:
    tc = cfg.tccf
    return {
        "algorithm": cfg.algorithm.value,
        "block_size": _format_cell(cfg.block_size),
        "steps": _format_cell(cfg.steps),
        "tau": _format_cell(cfg.tau),
        "tau_l": _format_cell(cfg.tau_l),
        "tau_h": _format_cell(cfg.tau_h),
        "gamma": _format_cell(cfg.gamma),
        "temperature": _format_cell(cfg.temperature),
        "b_think": _format_cell(tc.b_think if tc else None),
        "b_critic": _format_cell(tc.b_critic if tc else None),
    }


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> list[Path]:
    """Execute the grid and write summary/aggregate/step files.

    Returns the written paths. Reruns with an identical experiment file
    produce byte-identical outputs; partial files are removed if anything
    fails mid-write.
    """
    factory = _DenoiserFactory(cfg.denoiser, cfg.root)
    prompts = _build_prompts(cfg.task["prompts"], factory.corpus)
    for prompt in prompts:
        for tok in prompt:
            if not 0 <= tok < factory.vocab_size:
                raise ConfigError(f"prompt token {tok} outside the ordinary range")

    jobs = max(1, int(os.environ.get(JOBS_ENV_VAR, "1")))
    out_dir = Path(output_dir) if output_dir is not None else cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    def one_run(args):
        grid_index, trial, prompt_index, seed = args
        run_cfg = replace(cfg.grid[grid_index], seed=seed)
        denoiser = factory.for_run(prompts[prompt_index])
        runner = generate_tccf if run_cfg.tccf is not None else generate
        result = runner(denoiser, prompts[prompt_index], run_cfg)
        return summarize(result, cfg.target), result

    summary_rows: list[dict[str, str]] = []
    step_lines: list[str] = []
    cells: dict[str, list[RunSummary]] = {}
    grid_keys: dict[str, int] = {}
    for grid_index, run_cfg in enumerate(cfg.grid):
        runs = [
            (grid_index, trial, prompt_index,
             cfg.base_seed + trial * len(prompts) + prompt_index)
            for trial in range(cfg.trials)
            for prompt_index in range(len(prompts))
        ]
        if jobs == 1:
            outcomes = [one_run(r) for r in runs]
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(one_run, runs))

        key = f"g{grid_index:04d}"
        grid_keys[key] = grid_index
        cells[key] = [summary for summary, _ in outcomes]
        for (gi, trial, prompt_index, seed), (summary, result) in zip(runs, outcomes):
            run_id = f"g{gi}-t{trial}-p{prompt_index}"
            row = {"grid_index": str(gi), "trial": str(trial),
                   "prompt_index": str(prompt_index), "seed": str(seed)}
            row.update(_config_cells(run_cfg))
            row.update(
                tpf=repr(summary.tpf),
                mean_confidence=repr(summary.mean_confidence),
                category=summary.category.value,
                output_len=str(summary.output_len),
                forward_passes=str(result.forward_passes),
                stop_reason=result.stop_reason.value,
            )
            summary_rows.append(row)
            for rec in result.steps:
                step_lines.append(json.dumps(
                    {
                        "run_id": run_id,
                        "grid_index": gi,
                        "trial": trial,
                        "prompt_index": prompt_index,
                        "block_index": rec.block_index,
                        "step_index": rec.step_index,
                        "threshold_used": rec.threshold_used,
                        "unmasked_positions": list(rec.unmasked_positions),
                        "confidences": list(rec.confidences),
                        "fallback_fired": rec.fallback_fired,
                    },
                    sort_keys=True, separators=(",", ":"),
                ))

    agg_rows = aggregate(cells)
    summary_path = out_dir / f"{cfg.prefix}_summary.csv"
    aggregate_path = out_dir / f"{cfg.prefix}_aggregate.csv"
    steps_path = out_dir / f"{cfg.prefix}_steps.jsonl"
    written = [summary_path, aggregate_path, steps_path]
    try:
        with open(summary_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(summary_rows)
        with open(aggregate_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=AGGREGATE_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in agg_rows:
                gi = grid_keys[row.key]
                record = {"grid_index": str(gi), "runs": str(row.runs),
                          "mean_tpf": repr(row.mean_tpf),
                          "mean_confidence": repr(row.mean_confidence)}
                record.update(_config_cells(cfg.grid[gi]))
                for cat in Category:
                    record[f"freq_{cat.value}"] = repr(row.frequencies.get(cat, 0.0))
                writer.writerow(record)
        with open(steps_path, "w", encoding="utf-8", newline="") as fh:
            for line in step_lines:
                fh.write(line + "\n")
    except BaseException:
        for p in written:
            Path(p).unlink(missing_ok=True)
        raise
    return written


def lint_experiment(cfg: ExperimentConfig) -> list[str]:
    notes = []
    for i, entry in enumerate(cfg.grid):
        for note in lint_config(entry):
            notes.append(f"grid[{i}]: {note}")
    return notes
