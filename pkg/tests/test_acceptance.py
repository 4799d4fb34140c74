"""Acceptance gate: ten externally checkable criteria, one test each.

Each test prints one `[criterion NN] PASS|FAIL` line with the runtime it is
billed against its budget. The two trend criteria share a session-scoped set
of runs (four strategies x three seeds on a 5,000/500 synthetic corpus) and
bill themselves from the wall-clock durations the runner recorded in its
manifest, not from fixture caching order.
"""

import contextlib
import csv
import dataclasses
import json
import time

import numpy as np
import pytest

from keylab import corpus, evaluation, experiment, judge, model, training


@contextlib.contextmanager
def _criterion(n, budget_s, title):
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException:
        print(f"[criterion {n:02d}] FAIL ({time.perf_counter() - t0:.2f} s) {title}")
        raise
    billed = info.pop("billed_s", time.perf_counter() - t0)
    ok = billed < budget_s
    detail = "; ".join(f"{k}={v}" for k, v in info.items())
    print(
        f"[criterion {n:02d}] {'PASS' if ok else 'FAIL'} "
        f"({billed:.2f} s of {budget_s:.0f} s budget) {title}"
        + (f" :: {detail}" if detail else "")
    )
    assert ok, f"criterion {n} took {billed:.2f} s, budget {budget_s} s"


# ---------------------------------------------------------------------------
# 1-2: published-table arithmetic


def test_criterion_01_composite_score_crosschecks_published_tables():
    with _criterion(1, 1.0, "0.7*Acc + 0.3*Fmt recomputation over published triples") as info:
        res = evaluation.crosscheck_published_scores(tolerance=0.0005)
        assert len(res.triples) == 48
        inconsistent = {(t["model"], t["dataset"], t["method"]) for t in res.inconsistent}
        # enumerated, not silently passed: exactly these two rows disagree
        assert inconsistent == {
            ("Qwen3-8B-Base", "GSM8K", "SFT"),
            ("Qwen3-8B-Base", "CoT-Collection", "Key-Tag"),
        }
        anchors = ((0.8309, 1.0, 0.8816), (0.7589, 0.9977, 0.8305), (0.7885, 0.0, 0.5519))
        for acc, fmt, score in anchors:
            hits = [
                t
                for t in res.triples
                if abs(t["acc"] - acc) < 1e-9 and abs(t["fmt"] - fmt) < 1e-9
            ]
            assert hits, (acc, fmt)
            assert any(abs(t["score"] - score) < 1e-9 for t in hits)
            assert all(abs(0.7 * acc + 0.3 * fmt - t["score"]) <= 0.0005 for t in hits)
        info["triples"] = len(res.triples)
        info["inconsistent"] = sorted(inconsistent)


def test_criterion_02_relative_improvement_reproduces_published_column():
    with _criterion(2, 1.0, "relative-improvement formula against published percentages") as info:
        pct = evaluation.relative_improvement(0.8441, 0.7670)
        assert evaluation.format_improvement(pct) == "+10.05%"
        data = evaluation.load_published_scores()
        row = data["score"]["Qwen2.5-7B"]
        recomputed = evaluation.relative_improvement(row["SFTKey-Tag"]["avg"], row["SFT"]["avg"])
        assert abs(recomputed - row["SFTKey-Tag"]["improvement_pct"]) <= 0.05
        info["formatted"] = evaluation.format_improvement(pct)
        info["qwen2.5-7b_delta"] = f"{recomputed - row['SFTKey-Tag']['improvement_pct']:+.3f}"


# ---------------------------------------------------------------------------
# 3: gradient correctness


def _loss_and_grads(p, ids, targets):
    logits, trace = model.forward(p, ids)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1)) + logits.max(axis=-1)
    nll = logz - logits[np.arange(len(targets)), targets]
    probs = np.exp(logits - logz[:, None])
    dlogits = probs.copy()
    dlogits[np.arange(len(targets)), targets] -= 1.0
    return nll.sum(), model.backward(trace, dlogits)


def test_criterion_03_gradients_match_finite_differences():
    with _criterion(3, 60.0, "analytic vs central finite-difference gradients") as info:
        conf = model.ModelConfig(
            n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=23, max_seq_len=32, init_seed=11
        )
        p = model.init_params(conf)
        rng = np.random.default_rng(17)
        ids = rng.integers(1, conf.vocab_size, size=12)
        targets = rng.integers(1, conf.vocab_size, size=12)
        loss, grads = _loss_and_grads(p, ids, targets)
        eps = 1e-5
        # central differences carry cancellation noise ~ eps_mach*|loss|/eps;
        # the relative criterion is only decidable for gradients above it
        noise_floor = np.finfo(float).eps * abs(loss) / eps * 10
        names = sorted(p.tensors)
        decidable, worst, attempts = 0, 0.0, 0
        seen = set()
        while decidable < 200 and attempts < 600:
            k = names[attempts % len(names)]
            attempts += 1
            flat = int(rng.integers(p.tensors[k].size))
            if (k, flat) in seen:
                continue
            seen.add((k, flat))
            idx = np.unravel_index(flat, p.tensors[k].shape)
            orig = p.tensors[k][idx]
            p.tensors[k][idx] = orig + eps
            up, _ = _loss_and_grads(p, ids, targets)
            p.tensors[k][idx] = orig - eps
            down, _ = _loss_and_grads(p, ids, targets)
            p.tensors[k][idx] = orig
            fd = (up - down) / (2 * eps)
            analytic = grads[k][idx]
            assert abs(fd - analytic) < noise_floor + 1e-4 * max(abs(fd), abs(analytic)), (k, idx)
            if max(abs(fd), abs(analytic)) > noise_floor / 1e-4:
                rel = abs(fd - analytic) / max(abs(fd), abs(analytic))
                worst = max(worst, rel)
                assert rel < 1e-4, (k, idx, fd, analytic)
                decidable += 1
        assert decidable >= 200
        info["sampled_params"] = attempts
        info["decidable"] = decidable
        info["max_rel_err"] = f"{worst:.3e}"


# ---------------------------------------------------------------------------
# 4: mask semantics


def test_criterion_04_answer_mask_semantics():
    with _criterion(4, 10.0, "masked positions zero; moved boundary equals full loss; mask pattern") as info:
        vocab = corpus.build_vocabulary()
        conf = model.ModelConfig(
            n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=vocab.size, max_seq_len=64, init_seed=1
        )
        params = model.init_params(conf)
        te = corpus.reconstruct(corpus.RawExample("3+4=", "abc", "de"), vocab)
        mask = training.build_mask(te, "answer", tagged=True)
        res = training.masked_nll(params, te, mask)
        assert np.all(res.position_terms[mask.weights == 0] == 0.0)  # exactly zero
        moved = dataclasses.replace(te, boundary_T=-1)
        full = training.masked_nll(params, te, training.build_mask(te, "full", tagged=True))
        start = training.masked_nll(params, moved, training.build_mask(moved, "answer", tagged=True))
        assert abs(full.loss - start.loss) < 1e-12
        nine = corpus.reconstruct(corpus.RawExample("3+4=", "ab", "cd"), vocab)
        assert len(nine.target_ids) == 9 and nine.boundary_T == 3
        pattern = training.build_mask(nine, "answer", tagged=True).weights
        assert pattern.tolist() == [0, 0, 0, 0, 1, 1, 1, 1, 1]
        info["boundary_moved_delta"] = f"{abs(full.loss - start.loss):.2e}"
        info["pattern"] = "".join(str(int(w)) for w in pattern)


# ---------------------------------------------------------------------------
# 5: two-stage hand-off


def test_criterion_05_two_stage_handoff():
    with _criterion(5, 120.0, "stage-2 starts bit-identically from stage-1 parameters") as info:
        vocab = corpus.build_vocabulary()
        conf = model.ModelConfig(
            n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=vocab.size, max_seq_len=64, init_seed=2
        )
        data = [
            corpus.reconstruct(corpus.RawExample(f"{a}+1=", f"{a}+1", str(a + 1)), vocab)
            for a in range(8)
        ]
        hp1 = training.StageHyperparams(
            learning_rate=1e-3, warmup_epochs=0.5, weight_decay=0.1, epochs=1, batch_size=4, clip_norm=1.0, seed=0
        )
        hp2 = dataclasses.replace(hp1, seed=5)
        plan = training.TrainPlan(strategy="SFTKey-Tag", stages=(hp1, hp2))
        sftkey = training.run_strategy(plan, data, conf)
        # replaying stage 2 alone from the recorded stage-1 parameters must
        # land on the exact same final parameters
        replay = training.train_stage(
            sftkey.stage_params[0], data, tagged=True, scope="answer", hp=hp2, log=training.TrainLog(), stage_name="stage2"
        )
        for k in replay.tensors:
            assert np.array_equal(replay.tensors[k], sftkey.final_params.tensors[k]), k
        standalone = training.run_strategy(
            training.TrainPlan(strategy="Key-Tag", stages=(hp2,)), data, conf, init=sftkey.stage_params[0]
        )
        stage2_first = next(r for r in sftkey.log.steps if r["stage"] == "stage2")
        key_first = standalone.log.steps[0]
        delta = abs(stage2_first["loss_total"] - key_first["loss_total"])
        assert delta < 1e-12
        info["step0_loss_delta"] = f"{delta:.2e}"


# ---------------------------------------------------------------------------
# 6-7: trend reproduction (shared runs)

TREND_SETTINGS = {
    "task": {"kind": "arithmetic-addition", "digits": 2, "train_count": 5000, "eval_count": 500, "seed": 20260815},
    "train": {"learning_rate_stage2": 3e-5},
    "eval": {"max_new_tokens": 64},
    "strategies": ["SFT", "SFT-Tag", "Key-Tag", "SFTKey-Tag"],
    "seeds": [0, 1, 2],
}


@pytest.fixture(scope="session")
def trend_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("trend-runs")
    config = experiment.config_from_dict({**TREND_SETTINGS, "output_dir": str(out)})
    experiment.cmd_gen_data(config)
    for seed in config.seeds:
        for strategy in config.strategies:
            experiment.cmd_train(config, strategy, seed)
            experiment.cmd_eval(config, strategy, seed)
    return config


def _first_step_answer_loss(paths, strategy, seed):
    with open(paths.strategy_dir(strategy, seed) / "trainlog.csv", newline="") as fh:
        return float(next(csv.DictReader(fh))["loss_answer"])


def _report_of(paths, strategy, seed):
    return json.loads((paths.strategy_dir(strategy, seed) / "report.json").read_text())


def test_criterion_06_answer_nll_ordering_across_seeds(trend_runs):
    with _criterion(6, 1800.0, "final answer-span NLL: answer-only below full-loss per seed") as info:
        paths = experiment.RunPaths(trend_runs)
        manifest = json.loads(paths.manifest().read_text())
        finals, early, costs = [], [], []
        for seed in trend_runs.seeds:
            key_nll = _report_of(paths, "Key-Tag", seed)["mean_answer_nll"]
            tag_nll = _report_of(paths, "SFT-Tag", seed)["mean_answer_nll"]
            assert key_nll < tag_nll, (seed, key_nll, tag_nll)
            finals.append((seed, round(key_nll, 4), round(tag_nll, 4)))
            # early-phase ordering at the first logged step: reported, not asserted
            early.append(
                (
                    seed,
                    round(_first_step_answer_loss(paths, "Key-Tag", seed), 4),
                    round(_first_step_answer_loss(paths, "SFT-Tag", seed), 4),
                )
            )
            costs.append(
                sum(
                    manifest["runs"][f"{s}/{seed}"]["duration_s"]
                    + manifest["runs"][f"{s}/{seed}"]["eval_duration_s"]
                    for s in ("Key-Tag", "SFT-Tag")
                )
            )
        info["final_nll_key_vs_sfttag"] = finals
        info["step0_answer_loss_key_vs_sfttag"] = early
        info["billed_s"] = max(costs)


def test_criterion_07_format_score_tradeoff(trend_runs):
    with _criterion(7, 7200.0, "format collapse of answer-only training; staged recovery") as info:
        paths = experiment.RunPaths(trend_runs)
        manifest = json.loads(paths.manifest().read_text())
        fmts = {}
        for seed in trend_runs.seeds:
            key_fmt = _report_of(paths, "Key-Tag", seed)["fmt"]
            tag_fmt = _report_of(paths, "SFT-Tag", seed)["fmt"]
            assert key_fmt < 0.5, (seed, key_fmt)
            assert tag_fmt > 0.9, (seed, tag_fmt)
            fmts[seed] = (key_fmt, tag_fmt)
        means = {
            strategy: float(
                np.mean([_report_of(paths, strategy, seed)["score"] for seed in trend_runs.seeds])
            )
            for strategy in trend_runs.strategies
        }
        assert means["SFTKey-Tag"] >= means["SFT"], means
        assert means["SFTKey-Tag"] >= means["Key-Tag"], means
        total = manifest["data"]["duration_s"] + sum(
            run["duration_s"] + run["eval_duration_s"] for run in manifest["runs"].values()
        )
        info["fmt_key_vs_sfttag"] = {s: (round(a, 3), round(b, 3)) for s, (a, b) in fmts.items()}
        info["mean_scores"] = {k: round(v, 4) for k, v in means.items()}
        info["billed_s"] = total


# ---------------------------------------------------------------------------
# 8: format checker fixtures

_T, _TC, _A, _AC = "<Thinking>", "</Thinking>", "<Answer>", "</Answer>"

FORMAT_FIXTURES = [
    (f"{_T}x{_TC}{_A}4{_AC}", True),
    (f"{_T}x{_TC}{_A}4{_AC}\n", True),
    (f"{_T}x{_TC}{_A}4{_AC}   ", True),
    (f"{_T}x{_TC}{_A}4{_AC}\t\n ", True),
    (f"{_T}{_TC}{_A}4{_AC}", True),  # empty thinking
    (f"{_T}x{_TC}{_A}{_AC}", True),  # empty answer span is structurally fine
    (f"{_T}{_TC}{_A}{_AC}", True),
    (f"{_T}a\nb\n{_TC}{_A}12{_AC}", True),
    (f"{_T}3+4=7; carry 0{_TC}{_A}7{_AC}", True),
    (f"{_T}x{_TC}{_A}4 0{_AC}", True),
    ("", False),
    ("42", False),
    (f"{_A}4{_AC}", False),  # thinking block missing
    (f"{_T}x{_TC}", False),  # answer block missing
    (f"{_T}x{_TC} {_A}4{_AC}", False),  # gap between the blocks
    (f"{_T}x{_TC}\n{_A}4{_AC}", False),
    (f"{_A}4{_AC}{_T}x{_TC}", False),  # blocks reversed
    (f"{_T}{_T}x{_TC}{_A}4{_AC}", False),  # duplicate open tag
    (f"{_T}x{_TC}{_A}4{_AC}{_AC}", False),  # duplicate close tag
    (f"{_T}x{_TC}{_A}4{_AC}{_T}y{_TC}{_A}5{_AC}", False),  # whole block twice
    (f"{_T}x{_A}4{_AC}", False),  # thinking never closed
    (f"{_T}x{_TC}{_A}4", False),  # answer never closed
    (f"x{_TC}{_A}4{_AC}", False),  # thinking never opened
    (f" {_T}x{_TC}{_A}4{_AC}", False),  # leading whitespace
    (f"ok {_T}x{_TC}{_A}4{_AC}", False),  # leading text
    (f"{_T}x{_TC}{_A}4{_AC} done", False),  # trailing text
    (f"{_T}x{_A}4{_AC}y{_TC}", False),  # interleaved blocks
    (f"{_T}x{_TC}{_A}4{_AC}{_A}5{_AC}", False),  # second answer block
    ("<thinking>x</thinking><Answer>4</Answer>", False),  # case matters
    ("< Thinking>x</Thinking><Answer>4</Answer>", False),
    (f"{_TC}x{_T}{_A}4{_AC}", False),  # close before open
    (f"{_T}x{_TC}{_AC}4{_A}", False),
    (f"{_T}x </Thinking >{_A}4{_AC}", False),  # malformed close tag
    (f"{_T}x{_TC}{_A}4{_AC} ", True),  # unicode trailing space
]


def test_criterion_08_format_checker_fixture_suite():
    with _criterion(8, 1.0, "structural format checker agrees on crafted outputs") as info:
        assert len(FORMAT_FIXTURES) >= 30
        disagreements = [
            (text, expected, evaluation.check_format(text))
            for text, expected in FORMAT_FIXTURES
            if evaluation.check_format(text) != expected
        ]
        assert disagreements == []
        # structural truth must guarantee an extractable answer span position
        for text, expected in FORMAT_FIXTURES:
            if expected and f"{_A}{_AC}" not in text:
                assert evaluation.extract_answer(text) is not None
        info["fixtures"] = len(FORMAT_FIXTURES)


# ---------------------------------------------------------------------------
# 9: determinism


def test_criterion_09_pipeline_reruns_byte_identical(tmp_path):
    with _criterion(9, 600.0, "repeated pipeline produces byte-identical evaluation report") as info:
        settings = {
            "task": {"kind": "arithmetic-addition", "digits": 2, "train_count": 400, "eval_count": 80, "seed": 7},
            "eval": {"max_new_tokens": 64},
            "strategies": ["SFTKey-Tag"],
            "seeds": [0],
        }
        blobs = []
        for name in ("first", "second"):
            config = experiment.config_from_dict({**settings, "output_dir": str(tmp_path / name)})
            experiment.cmd_gen_data(config)
            experiment.cmd_train(config, "SFTKey-Tag", 0)
            experiment.cmd_eval(config, "SFTKey-Tag", 0)
            paths = experiment.RunPaths(config)
            blobs.append((paths.strategy_dir("SFTKey-Tag", 0) / "report.json").read_bytes())
        assert blobs[0] == blobs[1]
        info["report_bytes"] = len(blobs[0])


# ---------------------------------------------------------------------------
# 10: judge protocol (offline)


def test_criterion_10_judge_protocol_offline(tmp_path):
    with _criterion(10, 5.0, "judge template fidelity, verdict parsing, downgrade") as info:
        template = judge.judge_template()
        rendered = judge.render_judge_prompt("12+7?", "19", "nineteen")
        assert rendered == (
            template.replace("{question}", "12+7?").replace("{answer1}", "19").replace("{answer2}", "nineteen")
        )
        assert "{question}" not in rendered and "{answer1}" not in rendered and "{answer2}" not in rendered
        for line in ("**Question**:", "**Response 1**:", "**Response 2**:"):
            assert line in rendered
        assert "just reply with yes or no" in rendered.lower()

        verdicts = [
            ("Yes, they agree.", True),
            ("  YES", True),
            ("no.", False),
            ("No", False),
            ("It depends", None),
            ("yesterday", None),
            ("", None),
        ]
        for reply, expected in verdicts:
            assert judge.parse_verdict(reply) is expected, reply

        yes_prompt = judge.render_judge_prompt("q1", "7", "7")
        fixture = tmp_path / "fixture.json"
        fixture.write_text(json.dumps({judge.prompt_digest(yes_prompt): "yes", "*": "no"}), encoding="utf-8")
        cfg = judge.JudgeConfig(
            max_retries=1, backoff_s=0.0, fixture_path=str(fixture), audit_path=str(tmp_path / "audit.jsonl")
        )
        matcher = judge.JudgeMatcher(cfg)
        outcome = matcher.match_many([(0, "q1", "7", "7"), (1, "q2", "a", "b")])
        assert outcome[0] == (True, "external-judge")
        assert outcome[1] == (False, "external-judge")

        # all requests failing -> verdicts downgrade to local matching
        empty = tmp_path / "empty.json"
        empty.write_text("{}", encoding="utf-8")
        down_cfg = judge.JudgeConfig(
            max_retries=0, backoff_s=0.0, fixture_path=str(empty), audit_path=str(tmp_path / "audit2.jsonl")
        )
        downgraded = judge.JudgeMatcher(down_cfg).match_many([(0, "q", "007", "7"), (1, "q", "13", "31")])
        assert downgraded[0] == (True, "local-match-downgrade")
        assert downgraded[1] == (False, "local-match-downgrade")
        info["verdict_cases"] = len(verdicts)
