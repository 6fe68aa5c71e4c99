"""
Adversarial training with EroSeg as the inner attack
====================================================

Each batch is attacked with three EroSeg steps against the current weights,
and the update descends on clean CE + lambda_balance * adversarial CE.
Both models are then evaluated under a 10-step PGD attack.

This takes a few minutes on one core (the inner attack is three extra
forward/backward passes per batch).

Run:  python demos/03_adversarial_training.py [epochs]
"""
import sys

from eroseg import attacks, data, training

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 30
train = data.generate(seed=100, n=256, h=32, w=32)
val = data.generate(seed=200, n=64, h=32, w=32, split="val")

standard, _ = training.train_clean(train, training.TrainConfig(epochs=epochs))
robust, history = training.adv_train(train, training.TrainConfig(epochs=epochs, attack="eroseg"))
for row in history[-3:]:
    print(f"epoch {row.epoch}: clean loss {row.clean_loss:.3f}, adversarial loss {row.adv_loss:.3f}")

pgd10 = attacks.AttackConfig(epsilon=8 / 255, alpha=2 / 255, iters=10)
for name, model in (("standard", standard), ("EroSeg3-AT", robust)):
    clean = training.evaluate_clean(model, val)
    under, _ = training.evaluate_under_attack(model, val, pgd10, attack="pgd")
    print(f"{name:<11} clean {clean:.3f}  PGD10 {under:.3f}")
