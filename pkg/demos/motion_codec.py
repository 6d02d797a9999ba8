"""
Motion tokens
=============

Motion is turned into discrete tokens by averaging every 3 frames, mapping
the window to code space and picking the nearest codebook entry. Decoding
reverses the map and repeats each frame 3 times.
"""

import numpy as np

from motionrag.codec import CodecTrainConfig, MotionCodec, train_codebook
from motionrag.workbench.synthetic import SyntheticCorpusConfig, gen_synthetic

corpus = gen_synthetic(SyntheticCorpusConfig(seed=1))
motions = [corpus.motions[m] for _, m, _ in corpus.query_split("train")]
print("training motions:", len(motions), "of shape", motions[0].shape)

# Before training, with a random codebook.
init = MotionCodec.init(motions[0].shape[1], n_codes=32, code_dim=8, seed=1)
print("initial reconstruction MSE: %.4f" % init.reconstruction_mse(motions))

# EMA codebook updates plus straight-through gradients for the linear maps.
res = train_codebook(motions, CodecTrainConfig(n_codes=32, code_dim=8, epochs=30, seed=1), codec=init)
codec = res.codec
print("trained reconstruction MSE: %.4f" % codec.reconstruction_mse(motions))
x = np.concatenate(motions)
print("mean-predictor baseline MSE: %.4f" % ((x - x.mean(axis=0)) ** 2).mean())
print("codes in use: %.0f%%" % (100 * res.usage))

# A 24-frame motion becomes 8 tokens and decodes back to 24 frames.
tokens = codec.encode(motions[0])
print("tokens:", tokens.tolist())
print("decoded shape:", codec.decode(tokens).shape)

# Nearest-code assignment, checked by hand for the first window.
z = codec.project(codec.windows(motions[0]))[0]
print("hand-picked nearest code:", int(np.argmin(((codec.codebook - z) ** 2).sum(axis=1))), "encoder:", tokens[0])
