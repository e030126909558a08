"""Train and export the reference 784-128-10 linear MNIST model.

Usage: python3 train_reference_model.py <idx_dir> <out.json> [--seed 0]

The network is two fully connected layers with linear activations, trained with
an MSE loss on one-hot targets (AdamW, weight decay 1.0, 30 epochs). Export
follows the int8 scheme the C++ loader expects:

  * weight_scale = max|w| / 127 per layer, weights = round(w / weight_scale)
  * activation_scale is the real value of one LSB of the layer's *input*;
    1/255 for the first layer (raw pixel bytes), max|h| / 127 over the
    training set for the hidden layer
  * biases are stored in accumulator units: round(b / (weight_scale * activation_scale))
"""
import argparse
import json
import struct

import numpy as np
import torch


def read_images(path):
    raw = open(path, "rb").read()
    n = struct.unpack(">I", raw[4:8])[0]
    return np.frombuffer(raw[16:], np.uint8).reshape(n, 784).astype(np.float64)


def read_labels(path):
    return np.frombuffer(open(path, "rb").read()[8:], np.uint8).astype(np.int64)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("idx_dir")
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--weight-decay", type=float, default=1.0)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    x = read_images(f"{args.idx_dir}/train-images-idx3-ubyte")
    y = read_labels(f"{args.idx_dir}/train-labels-idx1-ubyte")

    net = torch.nn.Sequential(torch.nn.Linear(784, 128), torch.nn.Linear(128, 10))
    opt = torch.optim.AdamW(net.parameters(), 1e-3, weight_decay=args.weight_decay)
    xt = torch.tensor(x / 255.0, dtype=torch.float32)
    target = torch.nn.functional.one_hot(torch.tensor(y), 10).float()
    for _ in range(args.epochs):
        perm = torch.randperm(len(xt))
        for i in range(0, len(xt), 64):
            idx = perm[i:i + 64]
            loss = torch.nn.functional.mse_loss(net(xt[idx]), target[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()

    w1 = net[0].weight.detach().double().numpy()
    b1 = net[0].bias.detach().double().numpy()
    w2 = net[1].weight.detach().double().numpy()
    b2 = net[1].bias.detach().double().numpy()

    a0 = 1.0 / 255.0
    ws0 = np.abs(w1).max() / 127.0
    hidden = (x / 255.0) @ w1.T + b1
    a1 = np.abs(hidden).max() / 127.0
    ws1 = np.abs(w2).max() / 127.0

    def layer(w, b, ws, a):
        return {
            "activation": "linear",
            "weight_scale": ws,
            "activation_scale": a,
            "biases": [int(v) for v in np.round(b / (ws * a))],
            "weights": [[int(v) for v in row] for row in np.round(w / ws)],
        }

    doc = {
        "input_size": 784,
        "metadata": {
            "name": "mnist_fc_784_128_10",
            "training": f"AdamW lr=1e-3 wd={args.weight_decay} epochs={args.epochs} mse one-hot seed={args.seed}",
            "train_samples": str(len(x)),
        },
        "layers": [layer(w1, b1, ws0, a0), layer(w2, b2, ws1, a1)],
    }
    with open(args.out, "w") as f:
        json.dump(doc, f, separators=(",", ":"))
        f.write("\n")


if __name__ == "__main__":
    main()
