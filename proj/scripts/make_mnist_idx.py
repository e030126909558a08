"""Convert the digit samples shipped with the npm `mnist` package (cazala/mnist,
MIT) into standard big-endian IDX files.

Usage: python3 make_mnist_idx.py <package/src/digits> <out_dir> [--test-per-class N]

Each class file holds 784 floats per sample in [0, 1]; values are mapped back to
bytes with round(v * 255). The first N samples of every class (default 200) form
the test split, the remainder the training split.
"""
import argparse
import json
import pathlib
import struct


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits")
    ap.add_argument("out")
    ap.add_argument("--test-per-class", type=int, default=200)
    args = ap.parse_args()

    split = {"train": ([], []), "test": ([], [])}
    for label in range(10):
        raw = json.load(open(pathlib.Path(args.digits) / f"{label}.json"))["data"]
        count = len(raw) // 784
        for s in range(count):
            px = [min(255, max(0, round(v * 255))) for v in raw[s * 784:(s + 1) * 784]]
            name = "test" if s < args.test_per_class else "train"
            split[name][0].append(px)
            split[name][1].append(label)

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, (images, labels) in split.items():
        # interleave classes round-robin so any prefix is class-balanced
        rank = {}
        keys = []
        for i, lab in enumerate(labels):
            keys.append((rank.get(lab, 0), lab, i))
            rank[lab] = rank.get(lab, 0) + 1
        order = [i for _, _, i in sorted(keys)]
        flat = [p for i in order for p in images[i]]
        write_idx(out / f"{name}-images-idx3-ubyte", 0x00000803, [len(images), 28, 28], flat)
        write_idx(out / f"{name}-labels-idx1-ubyte", 0x00000801, [len(labels)],
                  [labels[i] for i in order])
        print(name, len(images))


if __name__ == "__main__":
    main()
