"""Config-driven experiment pipeline: data, training, evaluation, reports.

A run is identified by the sha256 hash of its canonical config (output
directory excluded), and every artifact lands under
output_dir/<config-hash>/<strategy>/<seed>/. The manifest at the run root
records artifact paths, content hashes, and wall-clock durations; entries
are flagged incomplete while a step is in flight.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__, corpus, evaluation, judge, model, training
from .errors import DataError, EvaluationError, UsageError


@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float = 3e-4
    # second stage fine-tunes an already-trained model; None reuses learning_rate
    learning_rate_stage2: float = None
    warmup_epochs: float = 0.5
    weight_decay: float = 0.1
    epochs_stage1: int = 3
    epochs_stage2: int = 3
    batch_size: int = 32
    clip_norm: float = 1.0


@dataclass(frozen=True)
class EvalSettings:
    alpha: float = 0.7
    max_new_tokens: int = 64
    mode: str = "greedy"
    temperature: float = 1.0
    matcher: str = "local"  # "local" | "judge"
    judge: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    task: corpus.SyntheticTaskSpec
    model: model.ModelConfig
    train: TrainSettings
    eval: EvalSettings
    strategies: tuple
    seeds: tuple
    output_dir: str

    def validate(self) -> None:
        self.task.validate()
        self.model.validate()
        if not self.strategies:
            raise UsageError("config needs at least one strategy")
        for s in self.strategies:
            if s not in training.STRATEGIES:
                raise UsageError(f"unknown strategy {s!r}; expected one of {training.STRATEGIES}")
        if not self.seeds:
            raise UsageError("config needs at least one seed")
        if self.eval.matcher not in ("local", "judge"):
            raise UsageError("eval.matcher must be 'local' or 'judge'")


def _dataclass_from(cls, data: dict, where: str):
    fields = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - fields
    if unknown:
        raise UsageError(f"unknown key(s) in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise UsageError(f"bad {where} section: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    known = {"task", "model", "train", "eval", "strategies", "seeds", "output_dir"}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown top-level config key(s): {sorted(unknown)}")
    if "task" not in raw:
        raise UsageError("config is missing the task section")
    model_section = dict(raw.get("model", {}))
    model_section.setdefault("vocab_size", corpus.build_vocabulary().size)
    cfg = ExperimentConfig(
        task=_dataclass_from(corpus.SyntheticTaskSpec, raw["task"], "task"),
        model=_dataclass_from(model.ModelConfig, model_section, "model"),
        train=_dataclass_from(TrainSettings, raw.get("train", {}), "train"),
        eval=_dataclass_from(EvalSettings, raw.get("eval", {}), "eval"),
        strategies=tuple(raw.get("strategies", list(training.STRATEGIES))),
        seeds=tuple(raw.get("seeds", [0])),
        output_dir=raw.get("output_dir", "runs"),
    )
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def canonical_config_dict(config: ExperimentConfig) -> dict:
    # None means "unset"; dropping it keeps hashes stable when optional knobs appear
    d = {
        "task": asdict(config.task),
        "model": asdict(config.model),
        "train": {k: v for k, v in asdict(config.train).items() if v is not None},
        "eval": asdict(config.eval),
        "strategies": list(config.strategies),
        "seeds": list(config.seeds),
    }
    return d


def config_hash(config: ExperimentConfig) -> str:
    """Identity of the run; independent of where artifacts are written."""
    canon = json.dumps(canonical_config_dict(config), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# layout and manifest


class RunPaths:
    def __init__(self, config: ExperimentConfig):
        self.root = Path(config.output_dir) / config_hash(config)
        self.data = self.root / "data"

    def strategy_dir(self, strategy: str, seed: int) -> Path:
        return self.root / strategy / str(seed)

    def manifest(self) -> Path:
        return self.root / "manifest.json"


def _load_manifest(paths: RunPaths, config: ExperimentConfig) -> dict:
    if paths.manifest().exists():
        with open(paths.manifest(), encoding="utf-8") as fh:
            return json.load(fh)
    return {
        "config_hash": config_hash(config),
        "code_version": __version__,
        "config": canonical_config_dict(config),
        "data": {},
        "runs": {},
    }


def _save_manifest(paths: RunPaths, manifest: dict) -> None:
    paths.root.mkdir(parents=True, exist_ok=True)
    with open(paths.manifest(), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def verify_manifest(config: ExperimentConfig) -> list:
    """Missing or hash-mismatched artifacts for completed entries."""
    paths = RunPaths(config)
    manifest = _load_manifest(paths, config)
    problems = []
    sections = []
    if manifest["data"]:
        sections.append(("data", manifest["data"]))
    for key, entry in manifest["runs"].items():
        if entry.get("status") == "complete":
            sections.append((key, entry))
        else:
            problems.append(f"{key}: incomplete")
    for key, entry in sections:
        for rel, digest in entry.get("sha256", {}).items():
            target = paths.root / rel
            if not target.exists():
                problems.append(f"{key}: missing {rel}")
            elif file_sha256(target) != digest:
                problems.append(f"{key}: hash mismatch for {rel}")
    return problems


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(config: ExperimentConfig) -> dict:
    """Generate and persist the train/eval splits; idempotent given the seed."""
    config.validate()
    paths = RunPaths(config)
    paths.data.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    split = corpus.generate_corpus(config.task)
    train_path = paths.data / "train.jsonl"
    eval_path = paths.data / "eval.jsonl"
    corpus.save_dataset(train_path, split.train)
    corpus.save_dataset(eval_path, split.eval)
    overlap = {ex.prompt for ex in split.train} & {ex.prompt for ex in split.eval}
    if overlap:
        raise DataError(f"train/eval prompt overlap: {len(overlap)} collisions")
    manifest = _load_manifest(paths, config)
    manifest["data"] = {
        "train": "data/train.jsonl",
        "eval": "data/eval.jsonl",
        "counts": {"train": len(split.train), "eval": len(split.eval)},
        "sha256": {
            "data/train.jsonl": file_sha256(train_path),
            "data/eval.jsonl": file_sha256(eval_path),
        },
        "duration_s": round(time.perf_counter() - started, 3),
    }
    _save_manifest(paths, manifest)
    return manifest["data"]


def _load_splits(config: ExperimentConfig):
    paths = RunPaths(config)
    train_path = paths.data / "train.jsonl"
    eval_path = paths.data / "eval.jsonl"
    if not train_path.exists() or not eval_path.exists():
        raise DataError(f"datasets missing under {paths.data}; run gen-data first")
    return corpus.load_dataset(train_path), corpus.load_dataset(eval_path)


def build_plan(config: ExperimentConfig, strategy: str, seed: int) -> training.TrainPlan:
    """Per-stage hyperparameters; stage seeds and epochs derive from the run seed."""
    t = config.train
    epochs = (t.epochs_stage1, t.epochs_stage2)
    lrs = (t.learning_rate, t.learning_rate_stage2 if t.learning_rate_stage2 is not None else t.learning_rate)
    stages = []
    for i in range(len(training.STRATEGY_STAGES[strategy])):
        stages.append(
            training.StageHyperparams(
                learning_rate=lrs[i] if strategy == "SFTKey-Tag" else lrs[0],
                warmup_epochs=t.warmup_epochs,
                weight_decay=t.weight_decay,
                epochs=epochs[i] if strategy == "SFTKey-Tag" else epochs[0],
                batch_size=t.batch_size,
                clip_norm=t.clip_norm,
                seed=seed * 1000 + i,
            )
        )
    return training.TrainPlan(strategy=strategy, stages=tuple(stages))


def _model_config_for_seed(config: ExperimentConfig, seed: int) -> model.ModelConfig:
    # each run seed gets its own initialization stream
    base = asdict(config.model)
    base["init_seed"] = config.model.init_seed + 7919 * seed
    return model.ModelConfig(**base)


def cmd_train(config: ExperimentConfig, strategy: str, seed: int) -> dict:
    """Train one strategy/seed; writes stage checkpoints, logs, manifest entry."""
    config.validate()
    if strategy not in config.strategies:
        raise UsageError(f"strategy {strategy!r} is not listed in the config")
    if seed not in config.seeds:
        raise UsageError(f"seed {seed} is not listed in the config")
    train_raw, eval_raw = _load_splits(config)
    vocab = corpus.build_vocabulary()
    train_examples = [corpus.reconstruct(ex, vocab) for ex in train_raw]
    eval_examples = [corpus.reconstruct(ex, vocab) for ex in eval_raw]
    paths = RunPaths(config)
    out_dir = paths.strategy_dir(strategy, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    key = f"{strategy}/{seed}"
    manifest = _load_manifest(paths, config)
    manifest["runs"][key] = {"status": "incomplete"}
    _save_manifest(paths, manifest)

    started = time.perf_counter()
    plan = build_plan(config, strategy, seed)
    result = training.run_strategy(
        plan,
        train_examples,
        _model_config_for_seed(config, seed),
        eval_examples=eval_examples,
    )
    rel_dir = out_dir.relative_to(paths.root)
    artifacts = {}
    for i, stage_params in enumerate(result.stage_params, start=1):
        name = f"checkpoint_stage{i}.npz"
        model.save_checkpoint(
            stage_params, out_dir / name, extra={"strategy": strategy, "stage": i, "seed": seed}
        )
        artifacts[str(rel_dir / name)] = out_dir / name
    model.save_checkpoint(
        result.final_params,
        out_dir / "checkpoint_final.npz",
        extra={"strategy": strategy, "stage": len(result.stage_params), "seed": seed},
    )
    artifacts[str(rel_dir / "checkpoint_final.npz")] = out_dir / "checkpoint_final.npz"
    result.log.to_csv(out_dir / "trainlog.csv")
    artifacts[str(rel_dir / "trainlog.csv")] = out_dir / "trainlog.csv"
    result.log.snapshots_to_csv(out_dir / "snapshots.csv")
    artifacts[str(rel_dir / "snapshots.csv")] = out_dir / "snapshots.csv"

    manifest = _load_manifest(paths, config)
    manifest["runs"][key] = {
        "status": "complete",
        "kind": "train",
        "checkpoints": [str(rel_dir / f"checkpoint_stage{i}.npz") for i in range(1, len(result.stage_params) + 1)],
        "final_checkpoint": str(rel_dir / "checkpoint_final.npz"),
        "trainlog": str(rel_dir / "trainlog.csv"),
        "snapshots": str(rel_dir / "snapshots.csv"),
        "sha256": {rel: file_sha256(p) for rel, p in artifacts.items()},
        "duration_s": round(time.perf_counter() - started, 3),
    }
    _save_manifest(paths, manifest)
    return manifest["runs"][key]


def _matcher_for(config: ExperimentConfig):
    if config.eval.matcher == "local":
        return None
    judge_cfg = judge.JudgeConfig(**config.eval.judge)
    return judge.JudgeMatcher(judge_cfg)


def cmd_eval(config: ExperimentConfig, strategy: str, seed: int, checkpoint=None) -> evaluation.EvalReport:
    """Evaluate a trained checkpoint; writes report JSON and judgments CSV."""
    config.validate()
    paths = RunPaths(config)
    out_dir = paths.strategy_dir(strategy, seed)
    ckpt_path = Path(checkpoint) if checkpoint else out_dir / "checkpoint_final.npz"
    if not ckpt_path.exists():
        raise EvaluationError(f"checkpoint {ckpt_path} does not exist; train first")
    params, _ = model.load_checkpoint(ckpt_path)
    _, eval_raw = _load_splits(config)
    vocab = corpus.build_vocabulary()
    settings = evaluation.GenerationSettings(
        max_new_tokens=config.eval.max_new_tokens,
        mode=config.eval.mode,
        temperature=config.eval.temperature,
    )
    started = time.perf_counter()
    report = evaluation.evaluate(
        params,
        eval_raw,
        vocab,
        settings=settings,
        alpha=config.eval.alpha,
        matcher=_matcher_for(config),
        tagged=strategy != "SFT",
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_report_json(report, out_dir / "report.json")
    evaluation.write_judgments_csv(report, out_dir / "judgments.csv")
    rel_dir = out_dir.relative_to(paths.root)
    manifest = _load_manifest(paths, config)
    key = f"{strategy}/{seed}"
    entry = manifest["runs"].setdefault(key, {"status": "complete"})
    entry.update(
        {
            "report": str(rel_dir / "report.json"),
            "judgments": str(rel_dir / "judgments.csv"),
            "eval_duration_s": round(time.perf_counter() - started, 3),
        }
    )
    entry.setdefault("sha256", {})
    entry["sha256"][str(rel_dir / "report.json")] = file_sha256(out_dir / "report.json")
    entry["sha256"][str(rel_dir / "judgments.csv")] = file_sha256(out_dir / "judgments.csv")
    _save_manifest(paths, manifest)
    return report


def _mean(values):
    return sum(values) / len(values)


def cmd_report(config: ExperimentConfig) -> str:
    """Cross-strategy table plus long-format answer-loss curves CSV."""
    config.validate()
    paths = RunPaths(config)
    rows = []
    curves = []
    for strategy in config.strategies:
        reports = []
        for seed in config.seeds:
            report_path = paths.strategy_dir(strategy, seed) / "report.json"
            if report_path.exists():
                with open(report_path, encoding="utf-8") as fh:
                    reports.append(json.load(fh))
            log_path = paths.strategy_dir(strategy, seed) / "trainlog.csv"
            if log_path.exists():
                with open(log_path, newline="", encoding="utf-8") as fh:
                    global_step = 0
                    for rec in csv.DictReader(fh):
                        curves.append(
                            {
                                "strategy": strategy,
                                "seed": seed,
                                "stage": rec["stage"],
                                "step": global_step,
                                "loss_answer": rec["loss_answer"],
                            }
                        )
                        global_step += 1
        if reports:
            rows.append(
                {
                    "strategy": strategy,
                    "n_seeds": len(reports),
                    "acc": _mean([r["acc"] for r in reports]),
                    "fmt": _mean([r["fmt"] for r in reports]),
                    "score": _mean([r["score"] for r in reports]),
                    "answer_nll": _mean([r["mean_answer_nll"] for r in reports]),
                }
            )
    if not rows:
        raise EvaluationError("no completed evaluations to report")
    baseline = next((r["score"] for r in rows if r["strategy"] == "SFT"), None)
    for r in rows:
        if r["strategy"] == "SFT":
            r["improvement"] = None
            r["improvement_label"] = "baseline"
        elif baseline is None or baseline <= 0:
            # percentage change over a zero baseline is undefined
            r["improvement"] = None
            r["improvement_label"] = "unavailable"
        else:
            r["improvement"] = evaluation.relative_improvement(r["score"], baseline)
            r["improvement_label"] = evaluation.format_improvement(r["improvement"])

    header = f"{'strategy':<12} {'seeds':>5} {'Acc':>8} {'Fmt':>8} {'Score':>8} {'AnsNLL':>8} {'vs SFT':>12}"
    lines = [header, "-" * len(header)]
    for r in rows:
        imp = r["improvement_label"]
        lines.append(
            f"{r['strategy']:<12} {r['n_seeds']:>5} {r['acc']:>8.4f} {r['fmt']:>8.4f} "
            f"{r['score']:>8.4f} {r['answer_nll']:>8.4f} {imp:>12}"
        )
    table = "\n".join(lines) + "\n"
    with open(paths.root / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(table)
    with open(paths.root / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "n_seeds", "acc", "fmt", "score", "answer_nll", "improvement_pct"])
        for r in rows:
            writer.writerow(
                [
                    r["strategy"],
                    r["n_seeds"],
                    repr(r["acc"]),
                    repr(r["fmt"]),
                    repr(r["score"]),
                    repr(r["answer_nll"]),
                    "" if r["improvement"] is None else repr(r["improvement"]),
                ]
            )
    with open(paths.root / "curves.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "seed", "stage", "step", "loss_answer"])
        for c in curves:
            writer.writerow([c["strategy"], c["seed"], c["stage"], c["step"], c["loss_answer"]])
    return table


def cmd_judge_test(config: ExperimentConfig, fixture=None) -> list:
    """Offline exercise of the judge protocol; returns (description, ok) pairs."""
    judge_kwargs = dict(config.eval.judge)
    if fixture:
        judge_kwargs["fixture_path"] = str(fixture)
    judge_cfg = judge.JudgeConfig(**judge_kwargs)
    checks = []
    template = judge.judge_template()
    checks.append(("template has all three fields", all(f"{{{f}}}" in template for f in ("question", "answer1", "answer2"))))
    rendered = judge.render_judge_prompt("2+2?", "4", "4")
    checks.append(("render substitutes fields", "2+2?" in rendered and "{question}" not in rendered))
    checks.append(("yes parses", judge.parse_verdict("Yes, they match.") is True))
    checks.append(("no parses", judge.parse_verdict("no.") is False))
    checks.append(("garbage does not parse", judge.parse_verdict("It depends") is None))
    if judge_cfg.fixture_path or judge_cfg.endpoint:
        verdict = judge.judge(judge_cfg, "2+2?", "4", "4")
        checks.append(("live/fixture verdict obtained", isinstance(verdict.same, bool)))
    return checks
