"""Leader-follower speed-change runs for the IDM reference and a trained policy.

    python3 scripts/leader_follower.py [--policy runs/default/policy.bin] [--out runs/default]

Prints the first- and last-quarter mean follower speed for each controller and
scenario, and writes one trace file per pair (columns t, leader_v, follower_v, gap).
"""
import argparse
import os

from ringflow.config import load_config, stage_rng
from ringflow.evaluation import ACCEL_SCENARIO, DECEL_SCENARIO, SCENARIO_IDM, export_results, leader_follower
from ringflow.persist import load_model


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--policy")
    p.add_argument("--out", default=".")
    p.add_argument("--seed", type=int)
    args = p.parse_args()
    cfg = load_config(seed=args.seed)
    controllers = {"idm": SCENARIO_IDM}
    if args.policy:
        controllers["policy"] = load_model(args.policy, "policy")
    for name, ctrl in controllers.items():
        for kind, spec in (("accel", ACCEL_SCENARIO), ("decel", DECEL_SCENARIO)):
            tr = leader_follower(spec, ctrl, cfg.ring.dt, stage_rng(cfg.seed, "scenario"), cfg.bounds)
            first, last = tr.quarter_means()
            print(f"{name:6s} {kind}: first quarter {first:.3f} m/s, last quarter {last:.3f} m/s, "
                  f"min gap {tr.gap.min():.1f} m, collided {tr.collided}")
            export_results(tr, os.path.join(args.out, f"lf_{name}_{kind}.tsv"), meta={"controller": name, "kind": kind})


if __name__ == "__main__":
    main()
