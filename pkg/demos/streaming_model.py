"""
Chunked streaming through the parallel-encoder model
====================================================

The encoder attends within the current chunk and to everything before it,
so feeding frames in any piece size gives the same posteriors as one pass
over the whole utterance.
"""

import numpy as np

from bilasr import synthdata as sd
from bilasr.model import AcousticModel, ModelConfig, combine_weights

specs = sd.gen_locale_specs(0)
space = specs[0].space
utt = sd.synth_utterance(specs[0], specs[0].words[:3], seed=1)
print(utt.transcript, utt.frames, "frames")

model = AcousticModel(ModelConfig(combination_mode="lid"), space)
print("modes:", model.modes())

###############################################################################
# One full pass, then the same frames three at a time

full = model.infer(utt.features)
state = model.new_stream()
pieces = []
for start in range(0, utt.frames, 3):
    out, state = model.streaming_outputs(utt.features[start:start + 3], state, final=start + 3 >= utt.frames)
    pieces.append(out["lid-combined"])
streamed = np.concatenate(pieces)
print("bit-identical:", streamed.tobytes() == full["lid-combined"].tobytes())

###############################################################################
# LID soft combination drops the silence class and renormalizes

w_a, w_b, _, _ = combine_weights(np.array([[0.5, 0.3, 0.2], [0.0, 0.0, 1.0]]))
print("weights:", np.round(w_a, 3), np.round(w_b, 3))

lid = np.exp(full["lid"])
print("untrained LID posteriors, first frames:\n", np.round(lid[:4], 3))
