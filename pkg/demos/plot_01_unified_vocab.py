"""
One vocabulary for text, boxes and images
=========================================

Text subwords, location bins and image codes share a single id space.
This script builds a small vocabulary from synthetic scenes and shows how a
grounding instruction becomes a flat list of ids.
"""

import numpy as np

from ofa.coords import BBox, dequantize_box, quantize_box
from ofa.tasks import Task, corpus_texts, render_instruction, serialize_sample, synth_grounding_dataset
from ofa.vocab import build_vocab

rng = np.random.default_rng(0)
records = synth_grounding_dataset(20, 64, rng)
v = build_vocab(corpus_texts(records), target_subwords=300, num_loc_bins=1000, codebook_size=32)

# the layout: specials first, then subwords, location bins, image codes
print("size", v.size)
print("subwords start at", v.subword_start, "loc at", v.loc_start, "codes at", v.code_start)

# a box becomes four location bins and back (to the bin centre)
box = BBox(0.125, 0.25, 0.5, 0.875)
bins = quantize_box(box, 1000)
print(bins, dequantize_box(bins, 1000))

# grounding: region text on the source side, four loc tokens as target
vg = next(r for r in records if r.task is Task.VG)
print(render_instruction(vg))
s = serialize_sample(vg, v)
print("source", s.source_ids)
print("target", [v.token(i) for i in s.target_ids])

# region captioning puts the box into the source instead
gc = next(r for r in records if r.task is Task.GC)
print(render_instruction(gc, num_bins=v.num_loc_bins))
