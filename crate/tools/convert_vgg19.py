"""Convert torchvision's ImageNet VGG-19 convolution weights to safetensors.

The output holds one `conv{block}_{index}.weight` (out, in, 3, 3) and
`conv{block}_{index}.bias` (out,) pair per convolution, float32, which is the
layout `tritex --weights` expects. Fully connected layers are dropped.

    python3 tools/convert_vgg19.py vgg19.safetensors
    python3 tools/convert_vgg19.py vgg19.safetensors --state-dict vgg19-dcbb9e9d.pth

Without `--state-dict` the torchvision pretrained weights are downloaded
(needs network access); with it, a local torchvision `vgg19` state dict is read.
"""

import argparse
import sys

import torch
from safetensors.torch import save_file

# convolutions per block in VGG-19
BLOCKS = (2, 2, 4, 4, 4)


def conv_names():
    for block, count in enumerate(BLOCKS, start=1):
        for index in range(1, count + 1):
            yield f"conv{block}_{index}"


def load_state_dict(path):
    if path is not None:
        return torch.load(path, map_location="cpu", weights_only=True)
    from torchvision.models import VGG19_Weights, vgg19

    return vgg19(weights=VGG19_Weights.IMAGENET1K_V1).state_dict()


def convert(state):
    # torchvision keys look like `features.{i}.weight`; convolutions appear in
    # network order, so pair them with the block names by position.
    indices = sorted(
        {int(k.split(".")[1]) for k in state if k.startswith("features.") and k.endswith(".weight")}
    )
    names = list(conv_names())
    if len(indices) != len(names):
        sys.exit(f"expected {len(names)} convolutions, found {len(indices)}")
    tensors = {}
    for name, i in zip(names, indices):
        weight = state[f"features.{i}.weight"].float().contiguous()
        bias = state[f"features.{i}.bias"].float().contiguous()
        if weight.dim() != 4 or weight.shape[2:] != (3, 3):
            sys.exit(f"features.{i}.weight has shape {tuple(weight.shape)}")
        tensors[f"{name}.weight"] = weight
        tensors[f"{name}.bias"] = bias
    return tensors


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("output", help="safetensors file to write")
    parser.add_argument("--state-dict", help="local torchvision vgg19 .pth file instead of downloading")
    args = parser.parse_args()
    tensors = convert(load_state_dict(args.state_dict))
    save_file(tensors, args.output, metadata={"source": "torchvision vgg19 IMAGENET1K_V1"})
    print(f"wrote {len(tensors) // 2} convolutions to {args.output}")


if __name__ == "__main__":
    main()
