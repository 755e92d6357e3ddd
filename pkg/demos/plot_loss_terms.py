"""
The three probabilities behind the loss
=======================================

A cosine head turns an embedding into ``s * cos(angle)`` logits.  The open
margin loss mixes three softmax probabilities built from those logits:
plain cosine softmax, the margin-and-threshold variant, and the probability
of the implicit unknown channel.  This script evaluates them on one row.
"""

import numpy as np

from omcl.model import cos_prob, mlas_prob, oss_prob

# two known classes, the sample is closer to class 0
cos = np.array([0.9, 0.1])

# plain cosine softmax for the true class
print("S_cos  ", cos_prob(cos, 0, s=1.0))

# margin m=-0.1 on the true class plus a threshold logit s*t
print("S_MLAS ", mlas_prob(cos, 0, s=1.0, m=-0.1, t=0.1))

# probability that the row belongs to the unknown channel
print("S_OSS  ", oss_prob(cos, s=1.0, t=0.1))

# the scale sharpens everything: at s=16 the same row is almost surely class 0
for s in (1.0, 4.0, 16.0):
    print(f"s={s:5.1f}  S_cos={cos_prob(cos, 0, s):.4f}  S_OSS={oss_prob(cos, s, 0.1):.2e}")

# a row that points away from both classes is claimed by the unknown channel
print("far row S_OSS at s=16:", oss_prob(np.array([-0.5, -0.4]), 16.0, 0.1))
