"""Where do adversarial perturbations land, RGB or YCbCr?

Trains a small ResNet on the synthetic shapes dataset, attacks it with FGSM,
PGD and DDN, and prints the mean per-channel L2 distance between clean and
adversarial images in both color spaces. In RGB the three channels get about
the same share. In YCbCr the luma channel takes most of it.

    python examples_scripts/01_where_perturbations_land.py --images 300
"""

import argparse

from ycbcr_adv.attacks import AttackConfig
from ycbcr_adv.channel_analysis import channel_allocation_report
from ycbcr_adv.colorspace import ColorSpace
from ycbcr_adv.data import make_shapes10
from ycbcr_adv.models import TrainRecipe, accuracy, train_classifier

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--train", type=int, default=12000)
parser.add_argument("--epochs", type=int, default=6)
parser.add_argument("--images", type=int, default=300)
args = parser.parse_args()

data = make_shapes10(n_train=args.train, n_test=args.images, seed=0)
model = train_classifier("resnet_mini", TrainRecipe(epochs=args.epochs), data, log=print)
print(f"clean accuracy: {accuracy(model, data.x_test, data.y_test):.3f}\n")

attacks = [AttackConfig.fgsm(0.01), AttackConfig.fgsm(0.04), AttackConfig.pgd(0.04), AttackConfig.ddn(n_iters=40)]
report = channel_allocation_report({"resnet_mini": model}, attacks, data.x_test, data.y_test)

print(f"{'attack':>6} {'budget':>6} | {'R':>6} {'G':>6} {'B':>6} | {'Y':>6} {'Cb':>6} {'Cr':>6} | Y/Cb  Y/Cr  dominance")
for rgb, ycc in zip(report.rows[0::2], report.rows[1::2]):
    assert rgb.space is ColorSpace.RGB and ycc.space is ColorSpace.YCBCR
    r, g, b = rgb.mean_l2
    y, cb, cr = ycc.mean_l2
    print(
        f"{ycc.attack:>6} {ycc.budget:>6g} | {r:6.1f} {g:6.1f} {b:6.1f} | {y:6.1f} {cb:6.1f} {cr:6.1f} |"
        f" {ycc.ratio_y_over_cb:4.2f}  {ycc.ratio_y_over_cr:4.2f}  {ycc.dominance:.2f}"
    )

# a dominance of 1.0 means every single image carried more perturbation in Y than in either chroma channel
