"""Print per-stage feature-map shapes of both backbones for a given input size."""

import argparse

import torch

from adafusion.backbone import Backbone, image_stack, voxel_stack


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--image", type=int, nargs=2, default=[300, 400], metavar=("H", "W"))
    p.add_argument("--voxels", type=int, nargs=3, default=[72, 72, 48], metavar=("X", "Y", "Z"))
    p.add_argument("--c1", type=int, default=128)
    args = p.parse_args()
    for name, spec, shape in (("image", image_stack(args.c1), (3, *args.image)),
                              ("lidar", voxel_stack(args.c1), (1, *args.voxels))):
        net = Backbone(spec).eval()
        with torch.no_grad():
            _, taps = net(torch.zeros(1, *shape))
        print(f"{name} input {shape}")
        for k, (tokens, tap) in enumerate(zip(spec.stages, taps), 1):
            print(f"  stage {k} [{' '.join(tokens)}] -> {tuple(tap.shape[1:])}")


if __name__ == "__main__":
    main()
