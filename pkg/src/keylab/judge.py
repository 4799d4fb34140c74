"""Client for an external chat-completion judge of answer equivalence.

The judge receives a fixed instruction template with the question and the
two answers substituted and must reply with a leading yes or no. Model
output is always Response 1, the gold reference Response 2. A fixture
transport replays canned replies from a file so tests never touch the
network. Failed judgments downgrade to local string matching, recorded as
such in the judgment's source field.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources as importlib_resources

import requests

from .errors import (
    JudgeError,
    JudgeRequestError,
    MissingApiKeyError,
    UnparseableVerdictError,
)
from .evaluation import local_match

_VERDICT_RE = re.compile(r"^\s*(yes|no)\b", re.IGNORECASE)
_template_cache = None


def judge_template() -> str:
    """The verbatim judging instruction with {question}/{answer1}/{answer2} slots."""
    global _template_cache
    if _template_cache is None:
        ref = importlib_resources.files("keylab.resources").joinpath("judge_prompt.txt")
        _template_cache = ref.read_text(encoding="utf-8")
    return _template_cache


def render_judge_prompt(question: str, answer1: str, answer2: str) -> str:
    """Template with the three fields substituted; byte-stable."""
    for name, value in (("question", question), ("answer1", answer1), ("answer2", answer2)):
        if not value:
            raise JudgeError(f"judge prompt field {name!r} must be non-empty")
    return (
        judge_template()
        .replace("{question}", question)
        .replace("{answer1}", answer1)
        .replace("{answer2}", answer2)
    )


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def parse_verdict(reply: str):
    """True/False from the leading yes/no token; None when unparseable."""
    m = _VERDICT_RE.match(reply)
    if not m:
        return None
    return m.group(1).lower() == "yes"


@dataclass(frozen=True)
class JudgeConfig:
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "JUDGE_API_KEY"
    timeout_s: float = 30.0
    max_retries: int = 2
    temperature: float = 0.0
    backoff_s: float = 0.5
    concurrency: int = 4
    fixture_path: str | None = None
    audit_path: str | None = None

    def validate(self) -> None:
        if self.timeout_s <= 0:
            raise JudgeError("timeout must be > 0")
        if self.max_retries < 0:
            raise JudgeError("retries must be >= 0")
        if self.concurrency < 1:
            raise JudgeError("concurrency must be >= 1")


@dataclass(frozen=True)
class JudgeVerdict:
    same: bool
    raw_reply: str
    latency_s: float


class HttpTransport:
    """Single-turn chat-completion POST; raises JudgeRequestError on transport trouble."""

    def __init__(self, config: JudgeConfig):
        if not config.endpoint:
            raise JudgeError("judge endpoint is not configured")
        api_key = os.environ.get(config.api_key_env, "")
        if not api_key:
            raise MissingApiKeyError(
                f"environment variable {config.api_key_env} is unset or empty"
            )
        self._config = config
        self._headers = {"Authorization": f"Bearer {api_key}"}

    def send(self, prompt: str) -> str:
        cfg = self._config
        try:
            response = requests.post(
                cfg.endpoint,
                json={
                    "model": cfg.model,
                    "messages": [{"role": "user", "content": prompt}],
                    "temperature": cfg.temperature,
                },
                headers=self._headers,
                timeout=cfg.timeout_s,
            )
            response.raise_for_status()
            payload = response.json()
            return payload["choices"][0]["message"]["content"]
        except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
            raise JudgeRequestError(f"judge request failed: {exc}") from exc


class FixtureTransport:
    """Replays canned replies keyed by sha256(prompt); '*' is the default reply."""

    def __init__(self, path):
        with open(path, encoding="utf-8") as fh:
            self._replies = json.load(fh)

    def send(self, prompt: str) -> str:
        digest = prompt_digest(prompt)
        if digest in self._replies:
            return self._replies[digest]
        if "*" in self._replies:
            return self._replies["*"]
        raise JudgeRequestError(f"no fixture reply for prompt digest {digest[:12]}")


def make_transport(config: JudgeConfig):
    if config.fixture_path:
        return FixtureTransport(config.fixture_path)
    return HttpTransport(config)


def judge(config: JudgeConfig, question: str, answer1: str, answer2: str, transport=None) -> JudgeVerdict:
    """One judged comparison with retries and exponential backoff."""
    config.validate()
    prompt = render_judge_prompt(question, answer1, answer2)
    if transport is None:
        transport = make_transport(config)
    last_error = None
    for attempt in range(config.max_retries + 1):
        if attempt and config.backoff_s > 0:
            time.sleep(config.backoff_s * 2 ** (attempt - 1))
        start = time.perf_counter()
        try:
            reply = transport.send(prompt)
        except MissingApiKeyError:
            raise
        except JudgeRequestError as exc:
            last_error = exc
            continue
        latency = time.perf_counter() - start
        verdict = parse_verdict(reply)
        if verdict is None:
            last_error = UnparseableVerdictError(
                f"judge reply carried no leading yes/no: {reply[:80]!r}"
            )
            continue
        return JudgeVerdict(same=verdict, raw_reply=reply, latency_s=latency)
    raise last_error if last_error is not None else JudgeRequestError("no attempts made")


class JudgeMatcher:
    """Evaluation matcher backed by the external judge.

    Model output is Response 1, the gold answer Response 2. A judge failure
    downgrades that example to local_match and records the downgrade. All
    verdicts append to a JSONL audit log ordered by example index.
    """

    def __init__(self, config: JudgeConfig, transport=None):
        config.validate()
        self.config = config
        self.transport = transport if transport is not None else make_transport(config)

    def _one(self, index, question, predicted, gold):
        prompt = render_judge_prompt(question, predicted, gold)
        try:
            verdict = judge(self.config, question, predicted, gold, transport=self.transport)
            return index, {
                "correct": verdict.same,
                "source": "external-judge",
                "prompt_sha256": prompt_digest(prompt),
                "verdict": "yes" if verdict.same else "no",
                "latency_s": verdict.latency_s,
            }
        except MissingApiKeyError:
            raise
        except JudgeError:
            return index, {
                "correct": local_match(predicted, gold),
                "source": "local-match-downgrade",
                "prompt_sha256": prompt_digest(prompt),
                "verdict": "downgraded",
                "latency_s": 0.0,
            }

    def match_many(self, tasks):
        """tasks: (index, question, predicted, gold) tuples; returns {index: (correct, source)}."""
        if not tasks:
            return {}
        results = {}
        if self.config.concurrency > 1 and len(tasks) > 1:
            with ThreadPoolExecutor(max_workers=self.config.concurrency) as pool:
                for index, outcome in pool.map(lambda t: self._one(*t), tasks):
                    results[index] = outcome
        else:
            for t in tasks:
                index, outcome = self._one(*t)
                results[index] = outcome
        if self.config.audit_path:
            with open(self.config.audit_path, "a", encoding="utf-8") as fh:
                for index in sorted(results):
                    o = results[index]
                    fh.write(
                        json.dumps(
                            {
                                "index": index,
                                "prompt_sha256": o["prompt_sha256"],
                                "verdict": o["verdict"],
                                "latency_s": round(o["latency_s"], 6),
                            },
                            sort_keys=True,
                        )
                        + "\n"
                    )
        return {i: (o["correct"], o["source"]) for i, o in results.items()}

    def __call__(self, index, question, predicted, gold):
        outcome = self.match_many([(index, question, predicted, gold)])
        return outcome[index]
