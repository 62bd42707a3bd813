"""Estimate a logit by maximum likelihood and by training a one-filter CNN.

Both see the same four log-transformed attributes and hold the fare
coefficient at -1, so they describe the same model; the printout shows the
coefficients and log-likelihoods side by side.

    python3 demos/mnl_vs_cnn1.py
"""
import numpy as np

from routechoice.datagen import GroundTruthUtility, NetworkConfig, generate_dataset, generate_network
from routechoice.features import ChoiceData
from routechoice.models import (
    DCMSpec,
    DeepSpec,
    ModelKind,
    Schedule,
    build_model,
    dcm_loglik,
    fit_dcm,
    train,
)

truth = GroundTruthUtility(beta_linear=np.array([-2.5, -1.0, -3.0, -3.7]))
net = generate_network(NetworkConfig(), seed=1)
obs = generate_dataset(net, truth, n_observations=10_000, n_od=60, seed=2)
data = ChoiceData.from_observations(obs)
x = data.dense()

table, stats = fit_dcm(DCMSpec(), x, data.mask, data.chosen)
print("MNL by Newton's method")
print(table.to_csv())
print(f"log-likelihood {stats.loglik:.3f}, adjusted rho^2 {stats.rho_bar_squared:.4f}\n")

cnn1 = build_model(DeepSpec(ModelKind.CNN1, 4))
train(cnn1, data, data, Schedule(epochs=600, lr=0.1, lr_min=1e-6, batch_size=None, select="loss"))
deep = cnn1.policy_table()
ll, _ = dcm_loglik(deep, x, data.mask, data.chosen)
print("CNN 1 trained with Adam")
for name, a, b in zip(table.names, table.estimates, deep.estimates):
    print(f"  {name:<5} MNL {a:8.4f}   CNN1 {b:8.4f}")
print(f"log-likelihood {ll:.3f} (difference {ll - stats.loglik:+.2e})")
