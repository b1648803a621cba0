"""
Estimators on a linear model
============================

On a linear score S_c(X) = sum(w_c * X) every estimator has a closed form,
which makes differences between them easy to see.

Run with ``python3 demos/estimators_on_a_linear_model.py``.
"""
import numpy as np

from tsrbench import saliency as sal
from tsrbench.saliency import EstimatorConfig, ModelOracle

rng = np.random.default_rng(0)
N, T = 3, 4
w = rng.normal(size=(2, N, T))
X = rng.normal(size=(N, T))
oracle = ModelOracle.linear(w)
target = w[0] * X

# %%
# Gradients return the weights; path and perturbation methods return w * X.
cfg = EstimatorConfig(ig_steps=5, svs_permutations=1, gs_samples=200)
maps = {
    "grad": sal.grad(oracle, X, 0),
    "ig": sal.integrated_gradients(oracle, X, 0, cfg),
    "sg": sal.smoothgrad(oracle, X, 0, cfg),
    "gs": sal.gradient_shap(oracle, X, 0, cfg),
    "fo": sal.feature_occlusion(oracle, X, 0, cfg),
    "fa": sal.feature_ablation(oracle, X, 0, cfg),
    "svs": sal.shapley_value_sampling(oracle, X, 0, cfg),
}
for name, m in maps.items():
    ref = w[0] if name in ("grad", "sg") else target
    if name == "fa":
        ref = np.repeat(target.sum(axis=1, keepdims=True), T, axis=1)
    print(f"{name:5s} calls {m.relevance_calls:4d}  max |error| {np.abs(m.values - ref).max():.2e}")

# %%
# Feature permutation needs a batch: each cell is swapped between samples.
batch = rng.normal(size=(2, N, T))
fp = sal.feature_permutation(oracle, batch, 0)
print("fp    sample 0 matches w * (x0 - x1):", np.allclose(fp[0].values, w[0] * (batch[0] - batch[1])))

# %%
# The random baseline keeps the values and scrambles their positions.
rand = sal.random_saliency(X.shape, seed=1, source=maps["ig"])
print("random keeps the multiset:", np.allclose(np.sort(rand.values.ravel()), np.sort(target.ravel())))
