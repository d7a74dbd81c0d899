#!/usr/bin/env python3
"""Build the stratified MNIST digit subset used by the desk-scale tests.

Source: the 5,000-sample MNIST extract shipped inside the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz; 785 columns, label last).

    pip download --no-deps -d /tmp/pd mlxtend
    python3 tools/make_digit_subset.py /tmp/pd/mlxtend-*.whl tests/data

Writes IDX files (big-endian, magic 2051/2049). Per class, the first
100 samples in file order go to train and the next 20 to test.
"""
import gzip
import pathlib
import struct
import sys
import zipfile

TRAIN_PER_CLASS = 100
TEST_PER_CLASS = 20


def read_rows(wheel):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    for line in raw.decode().splitlines():
        fields = [int(v) for v in line.split(",")]
        yield bytes(fields[:784]), fields[784]


def write_idx(prefix, rows):
    with open(f"{prefix}-images.idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(rows), 28, 28))
        for pixels, _ in rows:
            f.write(pixels)
    with open(f"{prefix}-labels.idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, len(rows)))
        f.write(bytes(label for _, label in rows))


def main():
    wheel, out = sys.argv[1], pathlib.Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    seen = [0] * 10
    train, test = [], []
    for pixels, label in read_rows(wheel):
        k = seen[label]
        seen[label] += 1
        if k < TRAIN_PER_CLASS:
            train.append((pixels, label))
        elif k < TRAIN_PER_CLASS + TEST_PER_CLASS:
            test.append((pixels, label))
    write_idx(out / "digits-train", train)
    write_idx(out / "digits-test", test)
    print(f"train={len(train)} test={len(test)}")


if __name__ == "__main__":
    main()
