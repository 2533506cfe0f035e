"""AUC-PR under PGD for an adversarially trained model and an eps=0 model on the same data.

    python scripts/robustness.py --seeds 0 1 2 3 4 --mean-shift 6
"""

import argparse

import torch

from threatformer_ids import autodiff as ad
from threatformer_ids.experiments import format_table, reference_data, run_variant


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--mean-shift", type=float, default=6.0)
    p.add_argument("--train-epsilon", type=float, default=0.25)
    p.add_argument("--epsilons", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--attack-steps", type=int, default=10)
    args = p.parse_args()
    ad.use_deterministic()
    torch.set_num_threads(1)

    rows = []
    for seed in args.seeds:
        data = reference_data(seed, mean_shift=args.mean_shift)
        for eps_train in (args.train_epsilon, 0.0):
            run = run_variant(data, seed, robustness_epsilons=args.epsilons, attack_steps=args.attack_steps,
                              adv_epsilon=eps_train)
            rows.append([seed, eps_train, *run.robustness.auc_pr])
        print(f"seed {seed} done", flush=True)
    print(format_table(rows, ["seed", "train eps"] + [f"eps={e:g}" for e in args.epsilons]))


if __name__ == "__main__":
    main()
