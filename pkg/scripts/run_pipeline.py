"""Train the default pipeline end to end and write every artifact to one directory.

    python3 scripts/run_pipeline.py --out runs/seed0 [--config my.ini] [--seed 0]

Equivalent to running the CLI stages collect, train-gen, train-policy, eval and
scenario (both kinds) in sequence with the same config and seed.
"""
import argparse
import os
import sys

from ringflow.cli import run


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/default")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    args = p.parse_args()
    os.makedirs(args.out, exist_ok=True)
    common = (["--config", args.config] if args.config else []) + (["--seed", str(args.seed)] if args.seed is not None else [])
    f = lambda name: os.path.join(args.out, name)
    stages = [
        ["collect", "--out", f("data.tsv")],
        ["train-gen", "--data", f("data.tsv"), "--out", f("generator.bin"), "--curve", f("generator_curve.tsv")],
        ["train-policy", "--data", f("data.tsv"), "--gen", f("generator.bin"), "--out", f("policy.bin"),
         "--curve", f("policy_curve.tsv")],
        ["eval", "--data", f("data.tsv"), "--policy", f("policy.bin"), "--gen", f("generator.bin"),
         "--out", f("alignment.tsv")],
        ["scenario", "--kind", "accel", "--policy", f("policy.bin"), "--out", f("accel.tsv")],
        ["scenario", "--kind", "decel", "--policy", f("policy.bin"), "--out", f("decel.tsv")],
    ]
    for argv in stages:
        code = run(argv + common)
        if code:
            sys.exit(code)


if __name__ == "__main__":
    main()
