"""Zero-day analog: hold one attack family out of training, compare with and without SSL.

    python scripts/zero_day.py --holdout scan --seeds 0 1 2 3 4
"""

import argparse

import torch

from threatformer_ids import autodiff as ad
from threatformer_ids.experiments import format_table, reference_data, run_variant


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--holdout", default="scan")
    p.add_argument("--mean-shift", type=float, default=3.0)
    p.add_argument("--lambda-ssl", type=float, default=0.5)
    args = p.parse_args()
    ad.use_deterministic()
    torch.set_num_threads(1)

    rows = []
    for seed in args.seeds:
        data = reference_data(seed, mean_shift=args.mean_shift, ood_families=(args.holdout,))
        full = run_variant(data, seed, parts=("test", "test_ood"), lambda_ssl=args.lambda_ssl)
        ablated = run_variant(data, seed, parts=("test", "test_ood"), lambda_ssl=0.0)
        f, a = full.reports["test_ood"], ablated.reports["test_ood"]
        rows.append([seed, full.reports["test"].auc_pr, f.auc_roc, f.auc_pr, a.auc_roc, a.auc_pr,
                     "yes" if f.auc_pr >= a.auc_pr else "no"])
        print(f"seed {seed} done", flush=True)
    print(format_table(rows, ["seed", "ID AUC-PR", "ZD AUC-ROC", "ZD AUC-PR", "noSSL AUC-ROC",
                              "noSSL AUC-PR", "SSL>=noSSL"]))


if __name__ == "__main__":
    main()
