# A first look at the forced cross-entropy loss.
#
# Two copies of the same prompt produce two rows of cosine similarities per
# image: s_f from the learnable ("forced") copy and s_o from the frozen
# ("original") copy. The loss is a softmax cross-entropy over the forced
# logits whose denominator also counts K copies of the original logits.

import math

import numpy as np

from fa_ood.objective import SimilarityPair, ce_loss, class_probabilities, fce_k_loss

# three classes; the image is class 1
s_f = np.array([0.21, 0.30, 0.18])
s_o = np.array([0.21, 0.30, 0.18])  # before training both prompts agree
pair = SimilarityPair(s_f, s_o, 1)

class_probabilities(s_f)            # plain softmax over the forced logits
ce_loss(pair)                       # CoOp's objective
fce_k_loss(pair, tau=1.0, K=0)      # K = 0 drops the original terms: same number

for K in range(7):
    print(f"K={K}: loss {fce_k_loss(pair, 1.0, K):.6f}")

# every extra K adds mass to the denominator, so the loss grows with K
# and the only way to shrink it is to make s_f[y] beat s_o[y].

# a symmetric case with a closed form: 2 classes, all four similarities equal
eq = SimilarityPair([0.3, 0.3], [0.3, 0.3], 0)
print(fce_k_loss(eq, 1.0, 1), math.log(4))   # 1 / (2 + 2)
print(fce_k_loss(eq, 1.0, 3), math.log(8))   # 1 / (2 + 3*2)

# what training buys: push the forced similarity of the true class up
better = SimilarityPair(s_f + np.array([0.0, 0.2, 0.0]), s_o, 1)
print("before", fce_k_loss(pair, 1.0, 3), "after", fce_k_loss(better, 1.0, 3))

# shifting all 2C logits by a constant changes nothing
shifted = SimilarityPair(s_f + 5.0, s_o + 5.0, 1)
print(abs(fce_k_loss(shifted, 1.0, 3) - fce_k_loss(pair, 1.0, 3)))
