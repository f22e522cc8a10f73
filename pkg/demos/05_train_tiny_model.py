"""
Training end to end on eight conversations
==========================================

A 17k-parameter model memorizes eight (conversation, summary) pairs with
AdamW under a linearly decaying learning rate, saves a checkpoint, reloads
it bit-exactly, and reproduces every summary with greedy decoding.  The
point is not generalization; it is that the whole pipeline (encode, both
objectives, optimizer, checkpoint, decode) closes the loop.
"""

import os
import tempfile
import time

import numpy as np

from threadsum.checkpoint import load_checkpoint, save_checkpoint
from threadsum.conversation import ConversationTree, Utterance
from threadsum.corpus import TrainingInstance
from threadsum.decoding import generate_summary
from threadsum.model import Model, encode_instance, toy_config
from threadsum.tokenizer import Tokenizer
from threadsum.training import OptimizerState, train_step

HERE = os.path.dirname(os.path.abspath(__file__))
tok = Tokenizer.load(os.path.join(HERE, "..", "tests", "fixtures", "tinyvocab"))
cfg = toy_config(vocab_size=tok.vocab_size, lambda_thread_pred=0.0)

PAIRS = [
    (("server is down", "any fix"), "restart the server"),
    (("logs look odd", "which logs"), "check the logs"),
    (("crash on update", "same here"), "fix the crash"),
    (("five is out", "saw that"), "update to five"),
    (("bad deploy today", "agreed"), "roll back now"),
    (("no issues here", "same"), "it works fine"),
    (("need a check", "on what"), "do the check"),
    (("it stopped", "mine too"), "start it again"),
]

def make_instance(texts, summary):
    utts = [Utterance(0, "a0", texts[0], 0, None)]
    utts += [Utterance(i, f"a{i}", t, i, 0) for i, t in enumerate(texts[1:], 1)]
    return TrainingInstance(ConversationTree(utts), summary)

instances = [make_instance(t, s) for t, s in PAIRS]
inputs = [encode_instance(cfg, tok, inst) for inst in instances]

model = Model.init(cfg, seed=5)
print(f"model: {sum(p.data.size for p in model.params.values())} parameters, "
      f"vocab {cfg.vocab_size}")

state = OptimizerState.init(model.params, peak_lr=3e-3, total_steps=600,
                            weight_decay=0.0)
t0 = time.perf_counter()
while state.step < 600:
    m = train_step(model, state, inputs, seed=5, loss_weight=1.0 / len(inputs))
    if state.step % 100 == 0 or m["loss_clm"] < 0.05:
        print(f"step {state.step:3d}  clm {m['loss_clm']:.4f}  lr {m['lr']:.2e}")
    if m["loss_clm"] < 0.05:
        break
print(f"trained in {time.perf_counter() - t0:.1f}s")

# checkpoints are two files: arrays in .npz, config + step in a manifest
prefix = os.path.join(tempfile.mkdtemp(prefix="tiny-run-"), "step-final")
save_checkpoint(prefix, cfg, model.params, state)
ck = load_checkpoint(prefix)
for name, p in model.params.items():
    np.testing.assert_array_equal(ck.params[name].data, p.data)
print(f"checkpoint round trip at {prefix}: bit-exact")

restored = Model(ck.config, ck.params)
print("\ngreedy decodes from the restored model:")
for inst, (_, want) in zip(instances, PAIRS):
    got = generate_summary(restored, tok, inst.tree, beam_size=1,
                           block_trigrams=False)
    print(f"  {'==' if got == want else '!='} {got!r}")
