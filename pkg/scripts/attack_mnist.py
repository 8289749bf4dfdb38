"""Train the 784-128-64-10 classifier on 2000 MNIST images and attack 100 test images.

Thin wrapper over the CLI using configs/mnist_train.ini and
configs/mnist_attack.ini; the report lands in runs/mnist/.
"""
import json
import sys

from tagi.cli import main

if __name__ == "__main__":
    for args in (["train", "--config", "configs/mnist_train.ini"], ["attack", "--config", "configs/mnist_attack.ini"]):
        code = main(args + sys.argv[1:])
        if code:
            sys.exit(code)
    with open("runs/mnist/attack_report.json") as fh:
        rep = json.load(fh)
    for k in ("clean_error", "targeted_error", "untargeted_error", "targeted_success", "targeted_linf"):
        print(f"{k:18s} {rep[k]:.3f}")
