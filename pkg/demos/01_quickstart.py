"""
Quickstart: one local-loss split training run
=============================================

Build a small split model on gaussian blobs, train it with local-loss updates
and a single shared server model, then look at accuracy and bytes on the wire.
"""
import numpy as np

from csefsl import data, protocol, zoo

# Blobs with well separated centers; 20% held out for testing.
full = data.gen_gaussian_blobs(3000, classes=3, dim=8, sep=10.0, seed=0)
train, test = data.train_test_split(full, 0.2, seed=0)

# A two-layer client, a small aux head on the cut layer, a two-layer server.
spec = zoo.toy_spec(n_features=8, num_classes=3, hidden=32)
print("params (client, aux, server):", spec.param_counts())

# Five IID clients, uploading smashed data every 2 local batches.
part = data.partition_iid(train, 5, seed=0)
sim = protocol.Simulation(spec, protocol.Strategy("CSE_FSL", h=2), train, part,
                          batch_size=32, eta0=0.1, seed=0)

for report in sim.run(10):
    acc, loss = sim.evaluate(test)
    print(f"round {report.t:2d}  eta={report.eta:.4f}  server loss={report.train_loss:.4f}  "
          f"test top-1={acc:.3f}")

# One smashed upload is one communication round.
print("communication rounds:", sim.ledger.comm_rounds)
print("uplink / downlink bytes:", sim.ledger.uplink, sim.ledger.downlink)
print("server models held:", len(sim.server.server_models))
assert np.isfinite(report.train_loss)
