"""Compare point-elasticity curves of a logit and a quadratic CNN.

Both models are fitted on data whose true utility has a land-use threshold
term.  The logit's in-vehicle-time elasticity is beta * (1 - P); the
unconstrained CNN can bend with the attribute level.

    python3 demos/elasticity_curves.py
"""
import numpy as np

from routechoice.cli.config import landuse_truth
from routechoice.datagen import NetworkConfig, generate_dataset, generate_network
from routechoice.eval import elasticity_study
from routechoice.features import ChoiceData
from routechoice.models import DCMSpec, DeepSpec, ModelKind, Schedule, build_model, fit_dcm, train

net = generate_network(NetworkConfig(), seed=1)
obs = generate_dataset(net, landuse_truth(), n_observations=6000, n_od=40, seed=4)
data = ChoiceData.from_observations(obs, with_context=True)
policy = data.policy_only()

mnl, _ = fit_dcm(DCMSpec(), policy.dense(), policy.mask, policy.chosen)
cnn2u = build_model(DeepSpec(ModelKind.CNN2U, 97))
train(cnn2u, data, data, Schedule(epochs=80, lr=0.02, batch_size=None))

curves, n = elasticity_study({"MNL": mnl, "CNN2U": cnn2u}, obs, n_od=40, grid_points=6)
print(f"{n} sampled observations (one per OD pair, chosen route not the fastest)\n")
for c in curves:
    if c.attribute != "IVTT":
        continue
    print(c.model_id)
    for x, m, s in zip(c.grid, c.mean_elasticity, c.std_band):
        print(f"  IVTT {x / 60:6.1f} min   elasticity {m:7.3f} +- {s:.3f}")
    print()
print("mean |elasticity| by attribute")
for c in curves:
    print(f"  {c.model_id:<6} {c.attribute:<5} {np.nanmean(np.abs(c.mean_elasticity)):.3f}")
