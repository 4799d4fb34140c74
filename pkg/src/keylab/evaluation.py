"""Generation, format checking, answer extraction, and Acc/Fmt/Score reports.

Score = alpha * Acc + (1 - alpha) * Fmt with alpha defaulting to 0.7. Format
adherence is purely structural: the output must spell
<Thinking>...</Thinking><Answer>...</Answer> with each tag exactly once, in
order, nothing before the first tag, </Thinking> and <Answer> adjacent, and
at most trailing whitespace after </Answer>.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources as importlib_resources

import numpy as np

from . import model as model_mod
from . import training
from .corpus import (
    ANSWER_CLOSE,
    ANSWER_OPEN,
    TAG_LITERALS,
    THINK_CLOSE,
    THINK_OPEN,
    RawExample,
    Vocabulary,
    detokenize,
    reconstruct,
)
from .errors import EvaluationError

_NUMERAL_RE = re.compile(r"^[+-]?\d+$")


@dataclass(frozen=True)
class GenerationSettings:
    max_new_tokens: int = 64
    mode: str = "greedy"  # "greedy" | "sampled"
    temperature: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.max_new_tokens < 1:
            raise EvaluationError("max_new_tokens must be >= 1")
        if self.mode not in ("greedy", "sampled"):
            raise EvaluationError(f"unknown decoding mode {self.mode!r}")
        if self.mode == "sampled" and self.temperature <= 0:
            raise EvaluationError("sampling requires temperature > 0")


def generate_batch(params, prompts, settings: GenerationSettings, eos_id: int, pad_id: int = 0):
    """Greedy or sampled continuations for a batch of prompts.

    Prompts share their longest common prefix, which is computed once; the
    full suffix is re-run each step (no cross-step caching). Returns only the
    generated ids per prompt, EOS included when produced.
    """
    settings.validate()
    cfg = params.config
    seqs = [np.asarray(p, dtype=np.int64) for p in prompts]
    if any(s.size < 1 for s in seqs):
        raise EvaluationError("empty prompt")
    if any(s.size + settings.max_new_tokens > cfg.max_seq_len for s in seqs):
        raise EvaluationError(
            f"prompt plus max_new_tokens exceeds max_seq_len={cfg.max_seq_len}"
        )
    b = len(seqs)
    lcp = min(s.size for s in seqs) - 1
    first = seqs[0]
    for seq in seqs[1:]:
        diff = np.nonzero(seq[:lcp] != first[:lcp])[0]
        if diff.size:
            lcp = int(diff[0])
    prefix = first[:lcp]
    lens = np.array([s.size - lcp for s in seqs])
    width = int(lens.max()) + settings.max_new_tokens
    suffix = np.full((b, width), pad_id, dtype=np.int64)
    for r, seq in enumerate(seqs):
        suffix[r, : lens[r]] = seq[lcp:]
    done = np.zeros(b, dtype=bool)
    rng = np.random.default_rng(settings.seed)
    out = [[] for _ in range(b)]
    for _ in range(settings.max_new_tokens):
        cur = int(lens.max())
        logits, _ = model_mod.forward_batch(params, prefix, suffix[:, :cur])
        rows = logits[np.arange(b), lens - 1]
        if settings.mode == "greedy":
            nxt = rows.argmax(axis=-1)
        else:
            shifted = rows / settings.temperature
            shifted = shifted - shifted.max(axis=-1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=-1, keepdims=True)
            nxt = np.array([rng.choice(cfg.vocab_size, p=p) for p in probs])
        for r in range(b):
            if done[r]:
                continue
            token = int(nxt[r])
            out[r].append(token)
            suffix[r, lens[r]] = token
            lens[r] += 1
            if token == eos_id:
                done[r] = True
        if done.all():
            break
    return out


def generate(params, prompt_ids, settings: GenerationSettings, eos_id: int, pad_id: int = 0):
    """Autoregressive continuation of one prompt; stops at EOS or max_new_tokens."""
    return generate_batch(params, [prompt_ids], settings, eos_id, pad_id)[0]


def render_output(ids, vocab: Vocabulary) -> str:
    """Decode generated ids, dropping EOS and everything after it."""
    kept = []
    for i in ids:
        if int(i) == vocab.eos_id:
            break
        kept.append(int(i))
    return detokenize(kept, vocab)


def check_format(text: str) -> bool:
    """Purely structural check of the tagged output skeleton."""
    if any(text.count(tag) != 1 for tag in TAG_LITERALS):
        return False
    i_to = text.find(THINK_OPEN)
    i_tc = text.find(THINK_CLOSE)
    i_ao = text.find(ANSWER_OPEN)
    i_ac = text.find(ANSWER_CLOSE)
    if i_to != 0:
        return False
    if not (i_to < i_tc < i_ao < i_ac):
        return False
    if i_ao != i_tc + len(THINK_CLOSE):
        return False
    return text[i_ac + len(ANSWER_CLOSE) :].strip() == ""


def extract_answer(text: str):
    """Answer span between the first <Answer> and its closing tag, trimmed.

    Untagged outputs (no tag literal anywhere) fall back to the final
    non-empty line. Returns None when no answer can be extracted.
    """
    if any(tag in text for tag in TAG_LITERALS):
        start = text.find(ANSWER_OPEN)
        if start < 0:
            return None
        start += len(ANSWER_OPEN)
        end = text.find(ANSWER_CLOSE, start)
        if end < 0:
            return None
        span = text[start:end].strip()
        return span or None
    lines = [line.strip() for line in text.splitlines()]
    lines = [line for line in lines if line]
    return lines[-1] if lines else None


def _normalize(value: str) -> str:
    collapsed = " ".join(value.split())
    if _NUMERAL_RE.match(collapsed):
        return str(int(collapsed))
    return collapsed.casefold()


def local_match(predicted: str, gold: str) -> bool:
    """Normalized string equality: trim, collapse whitespace, strip leading
    zeros on pure numerals, case-fold."""
    return _normalize(predicted) == _normalize(gold)


def local_matcher(index: int, question: str, predicted: str, gold: str):
    return local_match(predicted, gold), "local-match"


@dataclass(frozen=True)
class Judgment:
    index: int
    predicted: str | None
    gold: str
    correct: bool
    format_ok: bool
    judge_source: str

    def __post_init__(self):
        if self.correct and self.predicted is None:
            raise ValueError("a judgment cannot be correct without a predicted answer")


@dataclass(frozen=True)
class EvalReport:
    n: int
    acc: float
    fmt: float
    alpha: float
    score: float
    mean_answer_nll: float
    judgments: tuple

    def to_json(self) -> str:
        payload = {
            "n": self.n,
            "acc": self.acc,
            "fmt": self.fmt,
            "alpha": self.alpha,
            "score": self.score,
            "mean_answer_nll": self.mean_answer_nll,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def aggregate(judgments, alpha: float, mean_answer_nll: float) -> EvalReport:
    n = len(judgments)
    if n == 0:
        raise EvaluationError("cannot aggregate an empty evaluation")
    acc = sum(1 for j in judgments if j.correct) / n
    fmt = sum(1 for j in judgments if j.format_ok) / n
    return EvalReport(
        n=n,
        acc=acc,
        fmt=fmt,
        alpha=alpha,
        score=alpha * acc + (1.0 - alpha) * fmt,
        mean_answer_nll=mean_answer_nll,
        judgments=tuple(judgments),
    )


def question_of(prompt: str) -> str:
    """The user question inside a framed prompt; the prompt itself if unframed."""
    marker = "\nUser: "
    start = prompt.rfind(marker)
    if start < 0:
        return prompt
    body = prompt[start + len(marker) :]
    end = body.rfind("\nAssistant:")
    return body[:end] if end >= 0 else body


def evaluate(
    params,
    examples,
    vocab: Vocabulary,
    settings: GenerationSettings | None = None,
    alpha: float = 0.7,
    matcher=None,
    tagged: bool = True,
    batch_size: int = 64,
) -> EvalReport:
    """Generate, check format, extract and match answers, and aggregate.

    Per-example generation failures are recorded as incorrect with
    format_ok=False rather than aborting the run.
    """
    if not examples:
        raise EvaluationError("evaluation set is empty")
    if not 0 <= alpha <= 1:
        raise EvaluationError("alpha must lie in [0, 1]")
    settings = settings or GenerationSettings()
    matcher = matcher or local_matcher
    tagged_examples = [reconstruct(ex, vocab) for ex in examples]
    records = []
    for start in range(0, len(examples), batch_size):
        chunk = tagged_examples[start : start + batch_size]
        prompts = [te.prompt_ids for te in chunk]
        try:
            outputs = generate_batch(params, prompts, settings, vocab.eos_id, vocab.pad_id)
        except Exception:
            # retry one-by-one so a single bad prompt fails alone
            outputs = []
            for p in prompts:
                try:
                    outputs.append(generate(params, p, settings, vocab.eos_id, vocab.pad_id))
                except Exception:
                    outputs.append(None)
        for offset, generated in enumerate(outputs):
            index = start + offset
            if generated is None:
                records.append({"index": index, "failed": True, "predicted": None})
                continue
            text = render_output(generated, vocab)
            records.append(
                {
                    "index": index,
                    "failed": False,
                    "format_ok": check_format(text),
                    "predicted": extract_answer(text),
                }
            )
    # matching phase; matchers may expose match_many for bounded concurrency
    tasks = [
        (r["index"], question_of(examples[r["index"]].prompt), r["predicted"], examples[r["index"]].answer)
        for r in records
        if not r["failed"] and r["predicted"] is not None
    ]
    if hasattr(matcher, "match_many"):
        outcomes = matcher.match_many(tasks)
    else:
        outcomes = {t[0]: matcher(*t) for t in tasks}
    judgments = []
    for r in records:
        index = r["index"]
        if r["failed"]:
            judgments.append(
                Judgment(
                    index=index,
                    predicted=None,
                    gold=examples[index].answer,
                    correct=False,
                    format_ok=False,
                    judge_source="generation-error",
                )
            )
            continue
        correct, source = outcomes.get(index, (False, "local-match"))
        judgments.append(
            Judgment(
                index=index,
                predicted=r["predicted"],
                gold=examples[index].answer,
                correct=bool(correct),
                format_ok=r["format_ok"],
                judge_source=source,
            )
        )
    # gold-target NLL is only measurable for examples that fit the context
    fitting = [
        te
        for te in tagged_examples
        if len(te.prompt_ids) + len(te.target_ids) <= params.config.max_seq_len
    ]
    if not fitting:
        raise EvaluationError("no example fits max_seq_len; answer NLL is undefined")
    answer_nll, _ = training.dataset_nll(params, fitting, tagged=tagged)
    return aggregate(judgments, alpha, answer_nll)


def relative_improvement(score_a: float, score_b: float) -> float:
    """Percentage change of score_a over baseline score_b."""
    if score_b <= 0:
        raise EvaluationError("relative improvement needs a positive baseline score")
    return 100.0 * (score_a - score_b) / score_b


def format_improvement(percentage: float) -> str:
    return f"{percentage:+.2f}%"


# ---------------------------------------------------------------------------
# published-table cross-checks


def load_published_scores() -> dict:
    ref = importlib_resources.files("keylab.resources").joinpath("published_scores.json")
    return json.loads(ref.read_text(encoding="utf-8"))


@dataclass(frozen=True)
class CrosscheckResult:
    triples: tuple  # dicts: model, dataset, method, acc, fmt, score, computed, consistent
    avg_anomalies: tuple  # dicts: table, model, method, avg, mean
    improvement_anomalies: tuple  # dicts: model, published_pct, computed_pct

    @property
    def inconsistent(self):
        return tuple(t for t in self.triples if not t["consistent"])


def crosscheck_published_scores(tolerance: float = 0.0005) -> CrosscheckResult:
    """Recompute alpha*Acc + (1-alpha)*Fmt for every published triple.

    Covers each (model, dataset, method) present in both the composite-score
    table and the accuracy/format summaries, flags rows whose published
    average is not the mean of their listed values, and recomputes the
    relative-improvement column.
    """
    data = load_published_scores()
    alpha = data["alpha"]
    triples = []
    for model_name in data["fmt"]:
        for method in data["methods"]:
            accs = data["acc"][model_name][method]["values"]
            fmts = data["fmt"][model_name][method]["values"]
            scores = data["score"][model_name][method]["values"]
            for i, dataset in enumerate(data["datasets"]):
                computed = alpha * accs[i] + (1.0 - alpha) * fmts[i]
                triples.append(
                    {
                        "model": model_name,
                        "dataset": dataset,
                        "method": method,
                        "acc": accs[i],
                        "fmt": fmts[i],
                        "score": scores[i],
                        "computed": computed,
                        "consistent": abs(computed - scores[i]) <= tolerance,
                    }
                )
    avg_anomalies = []
    for table in ("score", "acc", "fmt"):
        for model_name, methods in data[table].items():
            for method, row in methods.items():
                mean = sum(row["values"]) / len(row["values"])
                if abs(mean - row["avg"]) > tolerance:
                    avg_anomalies.append(
                        {
                            "table": table,
                            "model": model_name,
                            "method": method,
                            "avg": row["avg"],
                            "mean": mean,
                        }
                    )
    improvement_anomalies = []
    for model_name, methods in data["score"].items():
        published = methods["SFTKey-Tag"]["improvement_pct"]
        computed = relative_improvement(methods["SFTKey-Tag"]["avg"], methods["SFT"]["avg"])
        if abs(computed - published) > 0.05:
            improvement_anomalies.append(
                {
                    "model": model_name,
                    "published_pct": published,
                    "computed_pct": computed,
                }
            )
    return CrosscheckResult(
        triples=tuple(triples),
        avg_anomalies=tuple(avg_anomalies),
        improvement_anomalies=tuple(improvement_anomalies),
    )


# ---------------------------------------------------------------------------
# report files


def write_report_json(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())


def write_judgments_csv(report: EvalReport, path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "predicted", "gold", "correct", "format_ok", "judge_source"])
        for j in report.judgments:
            writer.writerow(
                [
                    j.index,
                    "" if j.predicted is None else j.predicted,
                    j.gold,
                    int(j.correct),
                    int(j.format_ok),
                    j.judge_source,
                ]
            )


def read_judgments_csv(path) -> list:
    import csv

    judgments = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            judgments.append(
                Judgment(
                    index=int(row["index"]),
                    predicted=row["predicted"] or None,
                    gold=row["gold"],
                    correct=bool(int(row["correct"])),
                    format_ok=bool(int(row["format_ok"])),
                    judge_source=row["judge_source"],
                )
            )
    return judgments
