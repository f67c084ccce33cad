"""
Byte accounting, predicted and measured
=======================================

The closed-form epoch load and the simulator's message ledger agree to the byte.
"""
import math

from csefsl import data, ledger, protocol, zoo

spec = zoo.toy_spec(4, 3, hidden=8)
xc, ac, xs = spec.param_counts()
train = data.gen_gaussian_blobs(210, 3, 4, 6.0, seed=0)
part = data.partition_iid(train, 3, seed=0)          # 70 examples each: 7 batches of 10

sizes = ledger.LoadSizes(smashed=10 * 8 * 4, labels=10, client_model=xc * 4, aux=ac * 4)
for h in (1, 2, 4, 7):
    sim = protocol.Simulation(spec, protocol.Strategy("CSE_FSL", h), train, part,
                              batch_size=10, eta0=0.1, seed=0)
    sim.run(1)
    up, down = ledger.predict_epoch_load("CSE_FSL", 3, 7, sizes, h)
    print(f"h={h}: uploads/client={math.ceil(7 / h)}  measured=({sim.ledger.uplink}, "
          f"{sim.ledger.downlink})  predicted=({up}, {down})")

# Per-message rows are what ledger.csv holds.
for row in sim.ledger.rows[:5]:
    print(row)

# Server-side storage for a mid-sized convolutional model (N=5).
for name, aux in (("FSL_OC", 0), ("CSE_FSL", 23_050), ("FSL_MC", 0), ("FSL_AN", 23_050)):
    print(f"{name:<8} {ledger.storage_of(name, 5, 107_328, aux, 960_970) / 1e6:.2f} M params")
