"""Acceptance gate: one test per release criterion, one verdict line each.

Every test prints `PASS criterion N: ...` (or FAIL) with the measured value
before asserting, so a plain `pytest -v` run doubles as the sign-off sheet.
Tolerances and budgets are pinned here on purpose; loosening them is a
release decision, not a test fix.
"""

import math
import os
import time
from collections import Counter

import numpy as np
import pytest

from test_model import chain_tree, reference_chain_utterance_encoder
from threadsum.autodiff import Tensor, grad_check, no_grad
from threadsum.checkpoint import load_checkpoint
from threadsum.conversation import (
    ConversationTree,
    Utterance,
    num_relation_buckets,
    relation_index,
)
from threadsum.corpus import TrainingInstance, build_corpus, read_post_dump
from threadsum.decoding import beam_search, generate_summary, has_repeated_trigram
from threadsum.model import (
    Model,
    ModelInput,
    _parameter_spec,
    count_parameters,
    encode_instance,
    paper_config,
    thread_attention_scores,
    toy_config,
)
from threadsum.objectives import (
    clm_loss,
    instance_loss,
    pair_probabilities,
    sample_thread_pairs,
    thread_pred_loss,
)
from threadsum.rouge import rouge_l, rouge_n, rouge_su4, rouge_tokenize
from threadsum.tokenizer import Tokenizer
from threadsum.training import (
    OptimizerState,
    TrainRunConfig,
    derive_rng,
    run_training,
    train_step,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def _verdict(ok: bool, n: int, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, f"criterion {n}: {detail}"


def five_utterance_tree() -> ConversationTree:
    return ConversationTree([
        Utterance(0, "a", "root", 0, None),
        Utterance(1, "b", "u1", 1, 0),
        Utterance(2, "c", "u2", 2, 0),
        Utterance(3, "d", "u3", 3, 1),
        Utterance(4, "e", "u4", 4, 3),
    ])


def synthetic_model_input(cfg, seed=0):
    tree = five_utterance_tree()
    rng = derive_rng(seed, "gradcheck")
    token_ids = [[0] + rng.integers(2, cfg.vocab_size, size=4).tolist()
                 for _ in range(len(tree))]
    full = [0] + rng.integers(2, cfg.vocab_size, size=5).tolist() + [1]
    mi = ModelInput(token_ids=token_ids,
                    relation_buckets=relation_index(tree, cfg.clip_k),
                    ancestors=tree.ancestor_matrix(),
                    summary_input=np.asarray(full[:-1], dtype=np.int64),
                    summary_target=np.asarray(full[1:], dtype=np.int64))
    return mi, tree


def test_c01_parameter_count_within_5pct_of_180m():
    t0 = time.perf_counter()
    count = count_parameters(paper_config())
    elapsed = time.perf_counter() - t0
    rel = abs(count - 180_000_000) / 180_000_000
    _verdict(rel < 0.05 and elapsed < 1.0, 1,
             f"count={count:,} ({rel:+.2%} of 180M) in {elapsed * 1000:.1f} ms")


def test_c02_exactly_twenty_relation_embeddings_at_k9():
    assert paper_config().clip_k == 9
    rows = dict((name, shape) for name, shape, _ in
                _parameter_spec(paper_config()))["thread.rel"][0]
    params = Model.init(toy_config(clip_k=9), seed=1).params
    ok = (num_relation_buckets(9) == 20 and rows == 20
          and params["thread.rel"].data.shape[0] == 20)
    _verdict(ok, 2, f"bucket count {num_relation_buckets(9)}, "
                    f"embedding rows {rows} (spec) / "
                    f"{params['thread.rel'].data.shape[0]} (materialized)")


def test_c03_full_gradient_check_on_toy_model():
    cfg = toy_config()  # 2 layers, 2 heads, d=16, vocab 50, clip 3
    model = Model.init(cfg, seed=11)
    mi, tree = synthetic_model_input(cfg)
    batch = sample_thread_pairs(tree, derive_rng(0, "pairs"))

    def f():
        loss, _ = instance_loss(model, mi, pair_batch=batch)
        return loss

    t0 = time.perf_counter()
    report = grad_check(f, list(model.params.values()), eps=1e-3, tol=1e-3)
    elapsed = time.perf_counter() - t0
    worst = max(e.max_rel_err for e in report.entries)
    _verdict(report.passed and elapsed < 120.0, 3,
             f"{sum(p.data.size for p in model.params.values())} parameters, "
             f"worst rel err {worst:.2e} (tol 1e-3) in {elapsed:.1f}s")


def test_c04_attention_scores_match_unexpanded_form():
    # 3-utterance chain, d_z = 2: compare against the literal
    # ((q+r)(k+r)^T - r r^T)/sqrt(d_z) computed pairwise
    rng = np.random.default_rng(42)
    n, dz, k = 3, 2, 3
    h = rng.normal(size=(n, dz))
    wq, wk = rng.normal(size=(dz, dz)), rng.normal(size=(dz, dz))
    table = rng.normal(size=(num_relation_buckets(k), dz))
    buckets = relation_index(chain_tree(n), k)
    got = thread_attention_scores(
        Tensor(h @ wq), Tensor(h @ wk), Tensor(table), buckets, dz).data
    worst = 0.0
    for i in range(n):
        for j in range(n):
            r = table[buckets[i, j]]
            want = ((h[i] @ wq + r) @ (h[j] @ wk + r) - r @ r) / math.sqrt(dz)
            worst = max(worst, abs(got[i, j] - want))
    _verdict(worst < 1e-10, 4, f"max |score - literal form| = {worst:.2e}")


def test_c05_chain_degenerates_to_relative_position_attention():
    cfg = toy_config()
    model = Model.init(cfg, seed=9)
    n = 7
    x = np.random.default_rng(77).normal(size=(n, cfg.d_hidden))
    with no_grad():
        got = model.utterance_encode(Tensor(x), relation_index(chain_tree(n), cfg.clip_k)).data
    want = reference_chain_utterance_encoder(
        model.params, x, cfg.clip_k, cfg.num_layers, cfg.num_heads)
    worst = float(np.abs(got - want).max())
    _verdict(worst < 1e-8, 5,
             f"7-utterance chain vs independent relative-attention encoder, "
             f"max abs diff {worst:.2e}")


def test_c06_degenerate_objective_values():
    # uniform logits -> mean cross-entropy is exactly ln |V|
    vocab, steps = 50, 9
    targets = np.random.default_rng(3).integers(0, vocab, size=steps)
    clm = clm_loss(Tensor(np.zeros((steps, vocab))), targets).item()
    clm_err = abs(clm - math.log(vocab))

    # zero projections -> every pair probability 0.5 -> summed loss |A| ln 2
    tree = five_utterance_tree()
    batch = sample_thread_pairs(tree, derive_rng(1, "pairs"))
    vectors = Tensor(np.random.default_rng(4).normal(size=(len(tree), 6)))
    wa = Tensor(np.zeros((6, 6)))
    wb = Tensor(np.zeros((6, 6)))
    probs = pair_probabilities(vectors, wa, wb, batch)
    tp = thread_pred_loss(probs, batch).item()
    tp_err = abs(tp - batch.num_pairs * math.log(2))
    _verdict(clm_err <= 1e-9 and tp_err <= 1e-9, 6,
             f"|clm - ln 50| = {clm_err:.1e}, "
             f"|tp - {batch.num_pairs} ln 2| = {tp_err:.1e}")


OVERFIT_PAIRS = [
    (("server is down", "any fix"), "restart the server"),
    (("logs look odd", "which logs"), "check the logs"),
    (("crash on update", "same here"), "fix the crash"),
    (("five is out", "saw that"), "update to five"),
    (("bad deploy today", "agreed"), "roll back now"),
    (("no issues here", "same"), "it works fine"),
    (("need a check", "on what"), "do the check"),
    (("it stopped", "mine too"), "start it again"),
]


def test_c07_overfit_eight_pairs_and_reproduce_greedily():
    tok = Tokenizer.load(os.path.join(FIXTURES, "tinyvocab"))
    cfg = toy_config(vocab_size=tok.vocab_size, lambda_thread_pred=0.0)

    def make_instance(texts, summary):
        utts = [Utterance(0, "a0", texts[0], 0, None)]
        utts += [Utterance(i, f"a{i}", t, i, 0)
                 for i, t in enumerate(texts[1:], start=1)]
        return TrainingInstance(ConversationTree(utts), summary)

    instances = [make_instance(t, s) for t, s in OVERFIT_PAIRS]
    inputs = [encode_instance(cfg, tok, inst) for inst in instances]
    model = Model.init(cfg, seed=5)
    state = OptimizerState.init(model.params, peak_lr=3e-3, total_steps=2000,
                                weight_decay=0.0)
    t0 = time.perf_counter()
    clm = float("inf")
    while state.step < 2000 and clm >= 0.1:
        clm = train_step(model, state, inputs, seed=5,
                         loss_weight=1.0 / len(inputs))["loss_clm"]
    elapsed = time.perf_counter() - t0

    exact = sum(generate_summary(model, tok, inst.tree, beam_size=1,
                                 block_trigrams=False) == summary
                for inst, (_, summary) in zip(instances, OVERFIT_PAIRS))
    _verdict(clm < 0.1 and state.step <= 2000 and exact >= 7 and elapsed < 600, 7,
             f"clm {clm:.3f} after {state.step} steps, greedy exact {exact}/8, "
             f"{elapsed:.0f}s")


def test_c08_corpus_shard_matches_golden_bytes(tmp_path):
    posts = read_post_dump(os.path.join(FIXTURES, "corpus", "posts.jsonl"))
    shards, _ = build_corpus(posts, str(tmp_path / "out"))
    got = open(shards[0], "rb").read()
    want = open(os.path.join(FIXTURES, "corpus", "expected-00000.jsonl"), "rb").read()
    _verdict(got == want, 8,
             f"rebuilt shard is byte-identical to the golden file ({len(want)} bytes)")


def test_c09_rouge_matches_brute_force():
    def oracle_clip(cand, ref):
        c, r = Counter(cand), Counter(ref)
        return sum(min(n, r[g]) for g, n in c.items())

    def oracle_prf(match, np_, nr):
        p = match / np_ if np_ else 0.0
        r = match / nr if nr else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return p, r, f

    def grams(toks, n):
        return [tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)]

    def lcs(a, b):
        t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
        for i in range(len(a)):
            for j in range(len(b)):
                t[i + 1][j + 1] = t[i][j] + 1 if a[i] == b[j] else max(
                    t[i][j + 1], t[i + 1][j])
        return t[-1][-1]

    def su4_units(toks):
        units = [(t,) for t in toks]
        for i in range(len(toks)):
            for j in range(i + 1, len(toks)):
                if j - i - 1 <= 4:
                    units.append((toks[i], toks[j]))
        return units

    words = "the cat sat on a mat dog ran fast".split()
    rng = np.random.default_rng(2024)
    cases = [(" ".join(rng.choice(words, size=rng.integers(1, 13))),
              " ".join(rng.choice(words, size=rng.integers(1, 13))))
             for _ in range(12)]
    assert len(cases) >= 10

    worst = 0.0
    for cand, ref in cases:
        ct, rt = rouge_tokenize(cand), rouge_tokenize(ref)
        checks = []
        for n in (1, 2):
            cg, rg = grams(ct, n), grams(rt, n)
            checks.append((rouge_n(ct, rt, n),
                           oracle_prf(oracle_clip(cg, rg), len(cg), len(rg))))
        m = lcs(ct, rt)
        checks.append((rouge_l(ct, rt), oracle_prf(m, len(ct), len(rt))))
        cu, ru = su4_units(ct), su4_units(rt)
        checks.append((rouge_su4(ct, rt),
                       oracle_prf(oracle_clip(cu, ru), len(cu), len(ru))))
        for score, (p, r, f) in checks:
            worst = max(worst, abs(score.precision - p), abs(score.recall - r),
                        abs(score.f1 - f))
    _verdict(worst < 1e-6, 9,
             f"{len(cases)} cases x 4 metrics vs brute force, "
             f"max component diff {worst:.2e}")


def test_c10_hundred_beam_decodes_have_no_repeated_trigram():
    vocab, bos, eos = 30, 0, 1
    checked = 0
    for seed in range(100):
        table = np.random.default_rng(seed).normal(size=(vocab, vocab))
        table -= np.log(np.exp(table).sum(axis=1, keepdims=True))

        def decode_fn(prefix, table=table):
            return table[prefix[-1]]

        best = beam_search(decode_fn, bos, eos, max_len=27, beam_size=4,
                           min_len=21, block_trigrams=True)
        content = [t for t in best.generated() if t != eos]
        assert len(content) >= 20, f"seed {seed} produced {len(content)} tokens"
        assert not has_repeated_trigram(content), f"seed {seed} repeats a trigram"
        checked += 1
    _verdict(checked == 100, 10,
             f"{checked} decodes of >= 20 tokens, zero repeated trigrams")


def test_c11_checkpoint_roundtrip_and_resume_match_100_steps(tmp_path):
    tok = Tokenizer.load(os.path.join(FIXTURES, "tinyvocab"))
    cfg = toy_config(vocab_size=tok.vocab_size)
    instances = [TrainingInstance(ConversationTree([
        Utterance(0, "a0", "server is down", 0, None),
        Utterance(1, "a1", "restart it", 1, 0),
    ]), "restart the server"), TrainingInstance(ConversationTree([
        Utterance(0, "b0", "logs look odd", 0, None),
        Utterance(1, "b1", "which logs", 1, 0),
    ]), "check the logs")]
    inputs = [encode_instance(cfg, tok, inst) for inst in instances]

    def fresh():
        model = Model.init(cfg, seed=21)
        return model, OptimizerState.init(model.params, peak_lr=1e-3, total_steps=100)

    straight_model, straight_state = fresh()
    run_training(straight_model, inputs, straight_state,
                 TrainRunConfig(total_steps=100, accumulation=2, peak_lr=1e-3, seed=22))

    model, state = fresh()
    run_training(model, inputs, state,
                 TrainRunConfig(total_steps=50, accumulation=2, peak_lr=1e-3, seed=22),
                 checkpoint_dir=tmp_path)
    ck = load_checkpoint(tmp_path / "step-000050")
    for name, p in model.params.items():  # round trip is bit-exact
        np.testing.assert_array_equal(ck.params[name].data, p.data)
    resumed = Model(ck.config, ck.params)
    with no_grad():  # and so are forward outputs, not just the arrays
        np.testing.assert_array_equal(resumed.forward(inputs[0]).logits.data,
                                      model.forward(inputs[0]).logits.data)
    run_training(resumed, inputs, ck.optimizer,
                 TrainRunConfig(total_steps=100, accumulation=2, peak_lr=1e-3, seed=22))

    same = all(np.array_equal(straight_model.params[n].data, resumed.params[n].data)
               for n in straight_model.params)
    _verdict(same, 11,
             "50 + (save/load) + 50 steps is bit-identical to 100 straight steps")


def test_c12_decoder_is_causal():
    # perturbing the token at position t must leave every logit row before t
    # bit-for-bit unchanged
    cfg = toy_config()
    model = Model.init(cfg, seed=31)
    rng = np.random.default_rng(8)
    memory = Tensor(rng.normal(size=(11, cfg.d_hidden)))
    base_input = rng.integers(0, cfg.vocab_size, size=12).astype(np.int64)
    with no_grad():
        base = model.decoder_forward(base_input, memory).data
        worst = 0.0
        for t in range(1, len(base_input)):
            bumped = base_input.copy()
            bumped[t] = (bumped[t] + 1) % cfg.vocab_size
            out = model.decoder_forward(bumped, memory).data
            worst = max(worst, float(np.abs(out[:t] - base[:t]).max()))
    _verdict(worst < 1e-12, 12,
             f"perturbed token t never moves logits before t "
             f"(max abs change {worst:.2e})")
