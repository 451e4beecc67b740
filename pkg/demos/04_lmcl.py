"""Large-margin cosine loss on a few hand-made cases."""
import numpy as np

from mutualvpr.lmclhead import lmcl_backward, lmcl_loss

g, m = 30.0, 0.4
f = np.array([[1.0, 0.0]])
W = np.array([[0.6, 0.8], [0.6, -0.8]])          # both classes at cosine 0.6
print("symmetric:", lmcl_loss(f, np.array([0]), W, g, m), "=", np.log1p(np.exp(g * m)))

W3 = np.array([[1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
# target logit g*(1 - m) = 18, the others -g = -30
print("confident:", lmcl_loss(f, np.array([0]), W3, g, m), "=", np.log1p(2 * np.exp(-g - g * (1 - m))))

df, dW = lmcl_backward(f, np.array([0]), W, g, m)
print("feature gradient", np.round(df, 4))
