"""Masked NLL losses, AdamW with linear warmup/decay, and the four strategies.

Supervision strategies over tagged targets <Thinking>y</Thinking><Answer>a</Answer>EOS:

  SFT         one stage, untagged targets, every response token carries loss
  SFT-Tag     one stage, tagged targets, every response token carries loss
  Key-Tag     one stage, tagged targets, loss only on positions after the
              </Thinking> boundary (the <Answer> span and EOS); thinking
              tokens still condition every prediction
  SFTKey-Tag  SFT-Tag stage, then the answer-only stage initialized from the
              stage-1 parameters

Prompt tokens never carry loss. Losses are means over unmasked target
positions per example, averaged over the batch (deliberate deviation from a
plain sum: keeps gradient scale comparable between full-response and
answer-only stages).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .corpus import TaggedExample
from .errors import TrainingDivergedError, UsageError

STRATEGY_STAGES = {
    "SFT": (("untagged", "full"),),
    "SFT-Tag": (("tagged", "full"),),
    "Key-Tag": (("tagged", "answer"),),
    "SFTKey-Tag": (("tagged", "full"), ("tagged", "answer")),
}
STRATEGIES = tuple(STRATEGY_STAGES)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Parameters excluded from weight decay: layer norms and both embeddings.
_NO_DECAY_SUFFIXES = ("_g", "_b")
_NO_DECAY_NAMES = ("wte", "wpe")


@dataclass(frozen=True)
class LossMask:
    """Per-target-position binary weights, aligned with one target id list."""

    weights: np.ndarray
    tagged: bool

    def validate(self, example: TaggedExample) -> None:
        targets = example.target_ids if self.tagged else example.untagged_target_ids
        if len(self.weights) != len(targets):
            raise ValueError(
                f"mask length {len(self.weights)} != target length {len(targets)}"
            )
        if not np.isin(self.weights, (0.0, 1.0)).all():
            raise ValueError("mask weights must be 0 or 1")
        if self.weights.sum() == 0:
            raise ValueError("mask must have at least one nonzero entry")


def build_mask(example: TaggedExample, scope: str, tagged: bool) -> LossMask:
    """Full-response or answer-only weights over the chosen target ids."""
    if scope not in ("full", "answer"):
        raise UsageError(f"unknown mask scope {scope!r}; expected 'full' or 'answer'")
    if scope == "answer" and not tagged:
        raise UsageError(
            "answer-only scope requires tagged targets (untagged targets have no boundary)"
        )
    targets = example.target_ids if tagged else example.untagged_target_ids
    weights = np.zeros(len(targets))
    if scope == "full":
        weights[:] = 1.0
    else:
        weights[example.boundary_T + 1 :] = 1.0
    mask = LossMask(weights=weights, tagged=tagged)
    mask.validate(example)
    return mask


def _answer_span_weights(example: TaggedExample, tagged: bool) -> np.ndarray:
    """Answer-level weights for logging: the span whose NLL Fig-style curves track.

    Tagged: positions after boundary_T (<Answer> answer </Answer> EOS).
    Untagged: the answer tokens plus EOS at the end of the plain target.
    """
    if tagged:
        w = np.zeros(len(example.target_ids))
        w[example.boundary_T + 1 :] = 1.0
        return w
    n_answer = len(example.target_ids) - example.boundary_T - 4
    w = np.zeros(len(example.untagged_target_ids))
    w[len(w) - (n_answer + 1) :] = 1.0
    return w


# ---------------------------------------------------------------------------
# batched teacher-forced loss


@dataclass
class _Batch:
    prefix: np.ndarray
    inputs: np.ndarray  # (B, Ls) right-padded suffix inputs
    labels: np.ndarray  # (B, Ls)
    train_weights: np.ndarray  # (B, Ls), already normalized to sum to 1
    answer_weights: np.ndarray  # (B, Ls), normalized likewise
    example_indices: list


def _assemble(examples, indices, tagged: bool, scope: str, pad_id: int) -> _Batch:
    """Pack examples into a shared-prefix batch of teacher-forced sequences."""
    seqs, tweights, aweights, prompt_lens = [], [], [], []
    for i in indices:
        ex = examples[i]
        targets = ex.target_ids if tagged else ex.untagged_target_ids
        seq = np.asarray(ex.prompt_ids + list(targets), dtype=np.int64)
        tw = np.zeros(seq.size - 1)
        tw[len(ex.prompt_ids) - 1 :] = build_mask(ex, scope, tagged).weights
        tw /= tw.sum()
        aw = np.zeros(seq.size - 1)
        aw[len(ex.prompt_ids) - 1 :] = _answer_span_weights(ex, tagged)
        aw /= aw.sum()
        seqs.append(seq)
        tweights.append(tw)
        aweights.append(aw)
        prompt_lens.append(len(ex.prompt_ids))
    b = len(seqs)
    # Longest common prefix of the sequences, capped below every prompt end so
    # each row keeps all its supervised positions in its own suffix.
    lcp = min(prompt_lens) - 1
    first = seqs[0]
    for seq in seqs[1:]:
        limit = min(lcp, seq.size, first.size)
        diff = np.nonzero(seq[:limit] != first[:limit])[0]
        if diff.size:
            lcp = int(diff[0])
    max_len = max(s.size for s in seqs)
    ls = max_len - 1 - lcp
    inputs = np.full((b, ls), pad_id, dtype=np.int64)
    labels = np.full((b, ls), pad_id, dtype=np.int64)
    tw_arr = np.zeros((b, ls))
    aw_arr = np.zeros((b, ls))
    for r, seq in enumerate(seqs):
        n = seq.size - 1 - lcp
        inputs[r, :n] = seq[lcp:-1]
        labels[r, :n] = seq[lcp + 1 :]
        tw_arr[r, :n] = tweights[r][lcp:]
        aw_arr[r, :n] = aweights[r][lcp:]
    return _Batch(
        prefix=first[:lcp],
        inputs=inputs,
        labels=labels,
        train_weights=tw_arr / b,
        answer_weights=aw_arr / b,
        example_indices=list(indices),
    )


@dataclass
class _BatchLosses:
    loss_total: float
    loss_answer: float
    nll: np.ndarray  # (B, Ls) per-label NLL
    grads: dict | None


def _batch_losses(params, batch: _Batch, need_grads: bool) -> _BatchLosses:
    """Teacher-forced losses; optionally exact gradients of the train loss."""
    logits, trace = model_mod.forward_batch(params, batch.prefix, batch.inputs)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    sumexp = e.sum(axis=-1)
    label_logit = np.take_along_axis(shifted, batch.labels[..., None], -1)[..., 0]
    nll = np.log(sumexp) - label_logit
    loss_total = float((batch.train_weights * nll).sum())
    loss_answer = float((batch.answer_weights * nll).sum())
    if not need_grads:
        return _BatchLosses(loss_total, loss_answer, nll, None)
    dlogits = e / sumexp[..., None]
    np.put_along_axis(
        dlogits,
        batch.labels[..., None],
        np.take_along_axis(dlogits, batch.labels[..., None], -1) - 1.0,
        -1,
    )
    dlogits *= batch.train_weights[..., None]
    grads = model_mod.backward(trace, dlogits)
    return _BatchLosses(loss_total, loss_answer, nll, grads)


@dataclass
class MaskedLoss:
    loss: float
    grads: dict
    position_terms: np.ndarray


def masked_nll(params, example: TaggedExample, mask: LossMask) -> MaskedLoss:
    """Mean NLL over unmasked target positions of one example, with gradients.

    position_terms holds each target position's contribution to the loss;
    masked positions contribute exactly 0. The full context, thinking tokens
    included, conditions every prediction regardless of the mask.
    """
    mask.validate(example)
    targets = example.target_ids if mask.tagged else example.untagged_target_ids
    batch = _assemble_single(example, targets, mask.weights)
    result = _batch_losses(params, batch, need_grads=True)
    # Suffix starts at the last prompt token, so label row 0 is target 0 and
    # the weighted NLL row aligns with target positions one-to-one.
    per_target = (batch.train_weights * result.nll)[0]
    return MaskedLoss(loss=result.loss_total, grads=result.grads, position_terms=per_target)


def _assemble_single(example, targets, weights) -> _Batch:
    seq = np.asarray(example.prompt_ids + list(targets), dtype=np.int64)
    tw = np.zeros(seq.size - 1)
    tw[len(example.prompt_ids) - 1 :] = weights
    tw /= tw.sum()
    aw = tw  # answer split is irrelevant for the single-example op
    lcp = len(example.prompt_ids) - 1
    return _Batch(
        prefix=seq[:lcp],
        inputs=seq[lcp:-1][None, :],
        labels=seq[lcp + 1 :][None, :],
        train_weights=tw[lcp:][None, :],
        answer_weights=aw[lcp:][None, :],
        example_indices=[0],
    )


def dataset_nll(params, examples, tagged: bool, batch_size: int = 32) -> tuple[float, float]:
    """Mean per-example (answer-span NLL, full-response NLL) over a dataset."""
    pad_id = 0
    total_answer, total_full = 0.0, 0.0
    n = len(examples)
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        batch = _assemble(examples, idx, tagged, "full", pad_id)
        # full-response weights are in train_weights; answer span in answer_weights
        result = _batch_losses(params, batch, need_grads=False)
        k = len(batch.example_indices)
        total_full += result.loss_total * k
        total_answer += result.loss_answer * k
    return total_answer / n, total_full / n


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class StageHyperparams:
    learning_rate: float = 3e-4
    warmup_epochs: float = 0.5
    weight_decay: float = 0.1
    epochs: int = 3
    batch_size: int = 32
    clip_norm: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise UsageError("learning rate must be >= 0")
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise UsageError("warmup must satisfy 0 <= warmup_epochs < epochs")
        if self.batch_size < 1:
            raise UsageError("batch size must be >= 1")

    @property
    def warmup_frac(self) -> float:
        return self.warmup_epochs / self.epochs


def schedule_lr(base_lr: float, step: int, total_steps: int, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then linear decay toward zero at total_steps."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)


class AdamW:
    """Decoupled-weight-decay Adam; decay skips layer norms and embeddings."""

    def __init__(self, params: model_mod.ModelParams, weight_decay: float):
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    @staticmethod
    def decays(name: str) -> bool:
        return not (name in _NO_DECAY_NAMES or name.split(".")[-1].endswith(_NO_DECAY_SUFFIXES))

    def update(self, params: model_mod.ModelParams, grads: dict, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - ADAM_BETA1**self.step_count
        bc2 = 1.0 - ADAM_BETA2**self.step_count
        for name in params.tensors:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            if self.weight_decay and self.decays(name):
                update = update + self.weight_decay * params.tensors[name]
            params.tensors[name] -= lr * update


def clip_gradients(grads: dict, clip_norm: float) -> float:
    """Scale grads in place to the global-norm ball; returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if clip_norm > 0 and norm > clip_norm:
        factor = clip_norm / norm
        for g in grads.values():
            g *= factor
    return norm


# ---------------------------------------------------------------------------
# logs


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    def add_step(self, stage, step, epoch, lr, loss_total, loss_answer):
        if self.steps and self.steps[-1]["stage"] == stage and self.steps[-1]["step"] >= step:
            raise ValueError("steps must be strictly increasing within a stage")
        self.steps.append(
            {
                "stage": stage,
                "step": step,
                "epoch": epoch,
                "lr": lr,
                "loss_total": loss_total,
                "loss_answer": loss_answer,
            }
        )

    def add_snapshot(self, stage, epoch, eval_answer_nll, eval_total_nll):
        self.snapshots.append(
            {
                "stage": stage,
                "epoch": epoch,
                "eval_answer_nll": eval_answer_nll,
                "eval_total_nll": eval_total_nll,
            }
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "step", "epoch", "lr", "loss_total", "loss_answer"])
            for rec in self.steps:
                writer.writerow(
                    [
                        rec["stage"],
                        rec["step"],
                        rec["epoch"],
                        repr(rec["lr"]),
                        repr(rec["loss_total"]),
                        repr(rec["loss_answer"]),
                    ]
                )

    def snapshots_to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "epoch", "eval_answer_nll", "eval_total_nll"])
            for rec in self.snapshots:
                writer.writerow(
                    [
                        rec["stage"],
                        rec["epoch"],
                        repr(rec["eval_answer_nll"]),
                        repr(rec["eval_total_nll"]),
                    ]
                )


@dataclass(frozen=True)
class TrainPlan:
    strategy: str
    stages: tuple

    def __post_init__(self):
        if self.strategy not in STRATEGY_STAGES:
            raise UsageError(
                f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}"
            )
        expected = len(STRATEGY_STAGES[self.strategy])
        if len(self.stages) != expected:
            raise UsageError(
                f"{self.strategy} takes exactly {expected} stage(s), got {len(self.stages)}"
            )
        for hp in self.stages:
            hp.validate()
            if hp.learning_rate <= 0:
                raise UsageError("training requires learning rate > 0")


# ---------------------------------------------------------------------------
# stage loop and strategies


def train_stage(
    params: model_mod.ModelParams,
    examples,
    tagged: bool,
    scope: str,
    hp: StageHyperparams,
    log: TrainLog,
    stage_name: str = "stage1",
    eval_examples=None,
) -> model_mod.ModelParams:
    """Run AdamW over the dataset for hp.epochs; returns updated parameters.

    The loss for each logged step is measured before that step's update, so
    step 0 reflects the incoming parameters. Every step also logs the
    answer-span NLL of the same batch regardless of the training scope.
    """
    if not examples:
        raise UsageError("train_stage requires a non-empty dataset")
    hp.validate()
    params = params.copy()
    n = len(examples)
    batches_per_epoch = math.ceil(n / hp.batch_size)
    total_steps = hp.epochs * batches_per_epoch
    warmup_steps = round(hp.warmup_frac * total_steps)
    optimizer = AdamW(params, hp.weight_decay)
    rng = np.random.default_rng(hp.seed)
    pad_id = 0
    step = 0
    for epoch in range(hp.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            indices = perm[start : start + hp.batch_size]
            batch = _assemble(examples, indices, tagged, scope, pad_id)
            result = _batch_losses(params, batch, need_grads=True)
            if not math.isfinite(result.loss_total):
                raise TrainingDivergedError(
                    f"non-finite loss at stage {stage_name} step {step} "
                    f"(examples {batch.example_indices})"
                )
            lr = schedule_lr(hp.learning_rate, step, total_steps, warmup_steps)
            log.add_step(stage_name, step, epoch, lr, result.loss_total, result.loss_answer)
            clip_gradients(result.grads, hp.clip_norm)
            optimizer.update(params, result.grads, lr)
            step += 1
        if eval_examples:
            answer_nll, total_nll = dataset_nll(
                params, eval_examples, tagged=tagged, batch_size=hp.batch_size
            )
            log.add_snapshot(stage_name, epoch, answer_nll, total_nll)
    if not params.all_finite():
        raise TrainingDivergedError(f"non-finite parameters after stage {stage_name}")
    return params


@dataclass
class RunResult:
    final_params: model_mod.ModelParams
    stage_params: list
    log: TrainLog


def run_strategy(
    plan: TrainPlan,
    train_examples,
    config: model_mod.ModelConfig,
    eval_examples=None,
    init: model_mod.ModelParams | None = None,
) -> RunResult:
    """Execute all stages of one strategy from a fresh or given initialization."""
    params = init.copy() if init is not None else model_mod.init_params(config)
    log = TrainLog()
    stage_params = []
    for i, (target_kind, scope) in enumerate(STRATEGY_STAGES[plan.strategy]):
        params = train_stage(
            params,
            train_examples,
            tagged=target_kind == "tagged",
            scope=scope,
            hp=plan.stages[i],
            log=log,
            stage_name=f"stage{i + 1}",
            eval_examples=eval_examples,
        )
        stage_params.append(params.copy())
    return RunResult(final_params=params, stage_params=stage_params, log=log)
