"""Compile cos(angle) on a circle embedded in R^3 into a ConvResNet and check it.

Run: python demos/circle_build.py [eps]
"""

import sys

import numpy as np

from besovnet import manifold_lab as ml
from besovnet.approx_builder import build_theorem1_network
from besovnet.classifier_lab import covering_bound
from besovnet.network_ir import eval_resnet


def main(eps=0.2):
    circle = ml.make_manifold("circle", D=3, rotation_seed=7)
    target = ml.make_target(circle, "trig")
    net, report = build_theorem1_network(target, circle, eps, log=print)
    X = ml.sample(circle, 5000, 123)
    err = np.max(np.abs(eval_resnet(net, X) - target(X)))
    print(f"blocks M={net.M}, depth per block L={net.envelope.L}, charts={report.config['C_M']}")
    print(f"sup error on fresh samples {err:.3g} (target {eps})")
    env = net.envelope
    bound = covering_bound(M=net.M, L=env.L, J=env.J, K=env.K, kappa1=env.kappa1, kappa2=env.kappa2, D=net.D,
                           delta=eps)
    print(f"log covering number bound at delta={eps}: {bound.log_N:.4g}")


if __name__ == "__main__":
    main(float(sys.argv[1]) if len(sys.argv) > 1 else 0.2)
