"""Attacking through the luma channel alone.

FGSM-Y and PGD-Y take small sign steps on the Y channel and leave Cb and Cr
untouched, so every pixel moves by the same amount in R, G and B. This script
compares their success rate against the ordinary attacks at small budgets and
checks the two invariants on the images they produce.

    python examples_scripts/02_luma_only_attacks.py
"""

import argparse

import numpy as np

from ycbcr_adv.attacks import AttackConfig, run_attack
from ycbcr_adv.colorspace import ImageBatch, rgb_to_ycbcr
from ycbcr_adv.data import make_shapes10
from ycbcr_adv.models import TrainRecipe, train_classifier

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--train", type=int, default=12000)
parser.add_argument("--epochs", type=int, default=6)
parser.add_argument("--images", type=int, default=300)
args = parser.parse_args()

data = make_shapes10(n_train=args.train, n_test=args.images, seed=0)
model = train_classifier("resnet_mini", TrainRecipe(epochs=args.epochs), data)
x, y = data.x_test.astype(np.float64), data.y_test

print(f"{'eps':>6} | {'fgsm':>6} {'fgsm_y':>6} | {'pgd':>6} {'pgd_y':>6}   (success %)")
for eps in (0.002, 0.003, 0.004, 0.005, 0.01):
    rates = {}
    for cfg in (AttackConfig.fgsm(eps), AttackConfig.fgsm_y(eps), AttackConfig.pgd(eps), AttackConfig.pgd_y(eps)):
        res = run_attack(model, x, y, cfg)
        rates[cfg.label] = 100 * res.success_rate
        if cfg.label.endswith("_y"):
            d = res.adversarial.data - x
            assert np.abs(d[..., 0] - d[..., 1]).max() < 1e-9 and np.abs(d[..., 1] - d[..., 2]).max() < 1e-9
            chroma_in = rgb_to_ycbcr(ImageBatch(x)).data[..., 1:]
            chroma_out = rgb_to_ycbcr(res.adversarial).data[..., 1:]
            assert np.abs(chroma_out - chroma_in).max() < 1e-6
    print(f"{eps:>6g} | {rates['fgsm']:6.1f} {rates['fgsm_y']:6.1f} | {rates['pgd']:6.1f} {rates['pgd_y']:6.1f}")

# The Y attacks live inside a 1-dimensional slice of the L-infinity ball, so
# they can beat FGSM (a single full-size step) but rarely a 40-step PGD.
