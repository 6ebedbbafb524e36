"""
Training the hybrid and the plain backbone side by side
=======================================================

A few epochs on a reduced texture set, once for the hybrid network and once
for the backbone with the fusion blocks removed. The full desk experiment
(30 epochs, three seeds) is `ehybrid ablate --config desk32.cfg`.
"""

from ehybrid.data import generate_texture_dataset
from ehybrid.network import build_default_spec, format_shape_table, static_shape_check
from ehybrid.scattering import ScatteringCache
from ehybrid.training import TrainConfig, train_and_evaluate

train, test = generate_texture_dataset(classes=4, per_class=60, resolution=32, seed=1)
spec = build_default_spec(32, num_classes=4)
print(format_shape_table(static_shape_check(spec)))

cfg = TrainConfig(epochs=5, batch_size=32, lr0=0.05)
# scattering inputs are computed once and shared by both arms
cache = ScatteringCache()
for arm in ("hybrid", "baseline"):
    model, report = train_and_evaluate(spec, train, test, cfg, arm, cache)
    n_params = model.param_store().count()
    losses = " ".join(f"{v:.3f}" for v in report.train_loss)
    print(f"{arm:<9} params {n_params:>8,}  loss {losses}  test mAP {report.map:.3f}")
