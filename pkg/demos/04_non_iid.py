"""
Label skew and partial participation
====================================

Each client holds at most two classes and only 40% of clients join a round.
Label entropy per client makes the skew visible.
"""
import numpy as np

from csefsl import data, protocol, zoo

full = data.gen_gaussian_blobs(4000, 10, 16, 10.0, seed=2)
train, test = data.train_test_split(full, 0.2, seed=2)

iid = data.partition_iid(train, 10, seed=2)
skew = data.partition_label_skew(train, 10, classes_per_client=2, seed=2)
for name, part in (("iid", iid), ("label skew", skew)):
    ent = [data.label_entropy(train.labels[ix], 10) for ix in part.client_indices]
    print(f"{name:<11} mean label entropy {np.mean(ent):.3f} nats (max possible {np.log(10):.3f})")

spec = zoo.toy_spec(16, 10, hidden=64)
sim = protocol.Simulation(spec, protocol.Strategy("CSE_FSL", h=2), train, skew,
                          batch_size=32, eta0=0.1, seed=2, fraction=0.4)
for report in sim.run(15):
    if report.t % 3 == 2:
        print(f"round {report.t:2d} participants {report.participants}  "
              f"test top-1 {sim.evaluate(test)[0]:.3f}")
