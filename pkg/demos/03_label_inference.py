"""
Inferring client labels from leaked indices
===========================================

Runs the reference synthetic setting (100 clients, 10 labels, 2 labels per
client, 3 rounds at sampling rate 0.3, top-10% sparsification, noise
multiplier 1.12) once with the leaky Linear aggregator and once with the
oblivious one, then attacks the leak log.
"""

import numpy as np

from olive.attack import AttackError, attack_users, evaluate_attack
from olive.flcore import FlConfig, build_dataset, build_model, train

config = FlConfig(aggregator="linear", seed=0)
dataset = build_dataset(config)
model, leaks, metrics = train(config, dataset)
print("test accuracy per round:", [round(a, 3) for a in metrics.accuracy])
print("participants per round:", metrics.participants)
print("leak log entries:", sum(len(leak.observed) for leak in leaks))

###############################################################################
# Teachers are the top-k gradient indices of each round's model on a small
# public shard per label. Jaccard similarity ranks labels for each user.

mlp = build_model(config, dataset)
truth = dataset.truth()
for method in ("jac", "nn", "nn-single"):
    results = attack_users(leaks, metrics.checkpoints, dataset.public, config.alpha, mlp, method, known_count=2, truth=truth)
    exact, top1 = evaluate_attack(results)
    print(f"{method:9s} all={exact:.3f} top1={top1:.3f} users={len(results)}")

###############################################################################
# Without the label count the attacker splits the scores with 1-D k-means.

results = attack_users(leaks, metrics.checkpoints, dataset.public, config.alpha, mlp, "jac", truth=truth)
print("jac, unknown count: all=%.3f top1=%.3f" % evaluate_attack(results))
r = results[0]
print(f"user {r.user}: predicted {sorted(r.predicted)}, truth {sorted(r.truth)}")

###############################################################################
# The same training with the oblivious aggregator leaves nothing to attack.

_, leaks_adv, metrics_adv = train(FlConfig(aggregator="advanced", seed=0), dataset)
print("oblivious run, leak entries:", sum(len(leak.observed) for leak in leaks_adv))
print("oblivious run, final accuracy:", round(metrics_adv.accuracy[-1], 3))
try:
    attack_users(leaks_adv, metrics_adv.checkpoints, dataset.public, config.alpha, mlp)
except AttackError as exc:
    print("attack:", exc)
