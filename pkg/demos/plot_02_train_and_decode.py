"""
Training a nano model and decoding with a label trie
====================================================

A short run on synthetic image-text matching, then constrained and free
decoding side by side. The run is tiny so it finishes in about a minute on a
laptop CPU; the answers only start to be right with a few thousand steps.
"""

import time

import numpy as np

from ofa.decoding import build_trie, classify, generate_text
from ofa.model import ModelConfig, OFAModel
from ofa.tasks import Task, corpus_texts, mix_batches, serialize_sample, synth_grounding_dataset
from ofa.training import TrainConfig, train
from ofa.vocab import build_vocab

rng = np.random.default_rng(0)
records = synth_grounding_dataset(200, 64, rng)
v = build_vocab(corpus_texts(records), target_subwords=300, num_loc_bins=1000, codebook_size=32)

itm = [r for r in records if r.task is Task.ITM]
trie = build_trie(["yes", "no"], v)
samples = [serialize_sample(r, v) for r in itm]
for s in samples:
    s.trie = trie

cfg = ModelConfig.preset("nano", vocab_size=v.size, entangle_image_positions=True)
model = OFAModel(cfg, seed=0)
tc = TrainConfig(total_steps=300, batch_size=16, peak_lr=1e-3, dropout=0.0, stochastic_depth=0.0)

t0 = time.time()
# print the loss now and then
def log(entry):
    if entry.step % 50 == 0:
        print(entry.step, round(entry.loss, 3))

train(model, mix_batches({"vl": samples}, {"vl": 1}, 16, rng), tc, None, log)
print("trained in %.0fs" % (time.time() - t0))

# with the trie the answer is always one of the labels
for r, s in list(zip(itm, samples))[:6]:
    c = classify(model, s, trie)
    free = generate_text(model, s, v)
    print(repr(r.text), "gold", r.label, "| trie", c.label, "| free", repr(free))
