"""Compare trained and untrained policies over hidden counts K = 0..4.

    python3 scripts/k_sweep.py --dir runs/default [--rollouts 50]

Reads data.tsv, generator.bin and policy.bin from a run_pipeline.py output
directory and writes k_sweep.tsv next to them. The untrained policy is the
policy's initialisation under the same seed, so the pair isolates training.
"""
import argparse
import os

from ringflow.config import load_config, stage_rng, stage_seed
from ringflow.evaluation import ALIGNMENT_COLUMNS, export_results, macro_alignment
from ringflow.idm import read_dataset
from ringflow.persist import load_model
from ringflow.policy import PolicyModel


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dir", default="runs/default")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--rollouts", type=int)
    args = p.parse_args()
    cfg = load_config(args.config, seed=args.seed)
    data = read_dataset(os.path.join(args.dir, "data.tsv"))
    gen = load_model(os.path.join(args.dir, "generator.bin"), "generator")
    trained = load_model(os.path.join(args.dir, "policy.bin"), "policy")
    h = cfg.ppo_hyper()
    untrained = PolicyModel(cfg.bounds, h.hidden, rng=stage_rng(cfg.seed, "policy"), init_log_std=h.init_log_std)
    n = args.rollouts or cfg.eval.n_rollouts
    rows = []
    for label, model in (("trained", trained), ("untrained", untrained)):
        for r in macro_alignment(model, gen, data, range(0, 5), n, stage_seed(cfg.seed, "eval"), cfg.descriptor,
                                 cfg.weights, t_max=cfg.generator.t_max):
            r.policy = label
            rows.append(r)
            print(f"{label:9s} K={r.K} speed {r.mean_speed:.3f} gap std {r.std_gap:.2f} collisions {r.collisions}")
    export_results(rows, os.path.join(args.dir, "k_sweep.tsv"), columns=("policy",) + ALIGNMENT_COLUMNS,
                   meta={"config_hash": cfg.hash(), "seed": cfg.seed})


if __name__ == "__main__":
    main()
