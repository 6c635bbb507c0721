import argparse
import os
import random


def evaluate(xs, in_features):
    for x in xs:
        if len(x) != in_features:
            raise ValueError(f"shape mismatch: sample has {len(x)} features, expected {in_features}")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seed", type=int, default=int(os.environ.get("REPRO_SEED", "0")))
    args = parser.parse_args()
    rng = random.Random(args.seed)
    print("PHASE setup", flush=True)
    xs = [[rng.gauss(0.0, 1.0) for _ in range(10)] for _ in range(8)]
    print("PHASE inference", flush=True)
    evaluate(xs, 12)


if __name__ == "__main__":
    main()
