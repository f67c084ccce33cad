"""
Comparing the four strategies
=============================

Same data, same model, same seed. Only the protocol changes. The table shows
accuracy, communication rounds and traffic after a fixed number of epochs.
"""
from csefsl import data, ledger, protocol, zoo

full = data.gen_gaussian_blobs(3000, 3, 8, 10.0, seed=1)
train, test = data.train_test_split(full, 0.2, seed=1)
spec = zoo.toy_spec(8, 3, hidden=32)
part = data.partition_iid(train, 5, seed=1)

variants = [("FSL_MC", 1), ("FSL_OC", 1), ("FSL_AN", 1), ("CSE_FSL", 1), ("CSE_FSL", 5)]
print(f"{'strategy':<10}{'h':>3}{'top-1':>8}{'rounds':>9}{'uplink B':>12}{'downlink B':>12}{'storage':>9}")
for name, h in variants:
    sim = protocol.Simulation(spec, protocol.Strategy(name, h), train, part,
                              batch_size=32, eta0=0.1, seed=1)
    sim.run(5)
    acc, _ = sim.evaluate(test)
    xc, ac, xs = spec.param_counts()
    store = ledger.storage_of(name, 5, xc, ac if sim.strategy.uses_aux else 0, xs)
    print(f"{name:<10}{h:>3}{acc:>8.3f}{sim.ledger.comm_rounds:>9}"
          f"{sim.ledger.uplink:>12}{sim.ledger.downlink:>12}{store:>9}")

# Baselines pay for a gradient message per batch; local-loss variants do not.
# Larger h cuts the upload count by roughly a factor of h.
