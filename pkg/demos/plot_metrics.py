"""
Scoring an open-set classifier
==============================

Known test samples should get a high known-class probability and unknown
samples a low one.  AUROC measures that separation alone; OSCR also asks
that the accepted known samples are classified correctly.
"""

import numpy as np

from omcl.metrics import auroc, closed_accuracy, curve_csv, oscr, oscr_curve

rng = np.random.default_rng(1)

known_scores = rng.beta(5, 2, size=300)
unknown_scores = rng.beta(2, 4, size=300)
# confident samples are more often right
correct = rng.random(300) < 0.5 + 0.5 * known_scores

print("closed-set accuracy:", round(closed_accuracy(correct, np.ones(300, bool)), 4))
print("AUROC:", round(auroc(known_scores, unknown_scores), 4))
print("OSCR :", round(oscr(known_scores, correct, unknown_scores), 4))

# OSCR can never beat accuracy: at the loosest threshold CCR equals accuracy
thresholds, fpr, ccr = oscr_curve(known_scores, correct, unknown_scores)
print("CCR at FPR=1:", ccr[-1])

# the first rows of the curve as written by `omcl eval`
print("\n".join(curve_csv(thresholds, fpr, ccr).splitlines()[:4]))
