import argparse
import csv
import json
import os
import sys
from pathlib import Path
from pprint import pprint

from dotenv import load_dotenv

# ---- Paths / environment ----
REPO_ROOT = Path(__file__).resolve().parents[1]

# Ensure imports like `app.*` work when running this file directly
sys.path.insert(0, str(REPO_ROOT))

# Load environment variables from repo root `.env`
load_dotenv(dotenv_path=REPO_ROOT / ".env")

from app.backend.core.arch import resolve_arch
from app.backend.core.schemas import DclOverrides, RunConfig, TrainConfig
from app.backend.services.trainer import build_run_network, load_run_data, oracle_train_eval, train
from evaluation.metrics import final_error, loss_curves, mean_std, overfitting_gap

RESULTS_DIR = REPO_ROOT / "evaluation" / "results"

TABLE_VARIANTS = ["baseline", "DCL-A2", "DCL-A3D", "DCL-A3S", "DCL-B2", "DCL-B3D", "DCL-B3S"]
GAP_VARIANTS = ["baseline", "DCL-A2", "DCL-A3D", "DCL-A3S"]
SWEEP_M = [10, 20, 50, 100, 200]


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size,
        schedule=[(args.epochs, args.lr), (args.tail_epochs, args.lr / 10)],
        seed=seed,
        train_subset=args.train_subset,
        test_subset=args.test_subset,
    )


def _run(preset_id: str, arch: str, args, seed: int, data, dcl=None, tag: str = ""):
    """One seeded training run on already loaded splits."""
    run = RunConfig(
        arch=arch,
        dcl=dcl,
        dataset=preset_id,
        train=_train_config(args, seed),
        out_dir=str(RESULTS_DIR / "runs" / preset_id / (tag or arch) / f"seed{seed}"),
    )
    train_set, test_set = data
    net, text = build_run_network(run, train_set, seed)
    result = train(net, run.train, train_set, test_set, run.out_dir, {"arch": text, "dataset": preset_id})
    return result, net.weight_count()


def _load(preset_id: str, args):
    probe = RunConfig(arch="baseline", dataset=preset_id, train=_train_config(args, 0), out_dir=str(RESULTS_DIR))
    return load_run_data(probe)


def _save(name: str, payload) -> None:
    os.makedirs(RESULTS_DIR, exist_ok=True)
    with open(RESULTS_DIR / f"{name}.json", "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2)
    print(f"results written to {RESULTS_DIR / (name + '.json')}")


def run_table(args) -> dict:
    """Mean/std test error per variant and the per-digit oracle, per preset."""
    table = {}
    for preset_id in args.presets:
        data = _load(preset_id, args)
        rows = {}
        for variant in args.variants:
            errors, params = [], 0
            for seed in range(args.seeds):
                result, params = _run(preset_id, variant, args, seed, data)
                errors.append(final_error(result))
            rows[variant] = {**mean_std(errors), "params": params}
            print(f"{preset_id} {variant}: {rows[variant]['mean']:.4f} ± {rows[variant]['std']:.4f}")

        base_arch, _ = resolve_arch("baseline", 10)
        oracle = [
            oracle_train_eval(base_arch, data[0], data[1], _train_config(args, seed)).error_rate
            for seed in range(args.seeds)
        ]
        rows["oracle"] = mean_std(oracle)
        print(f"{preset_id} oracle: {rows['oracle']['mean']:.4f}")
        table[preset_id] = rows
    return table


def run_sweep(args) -> dict:
    """DCL-A2 test error as the per-branch filter count M varies, next to the baseline."""
    preset_id = args.presets[0]
    data = _load(preset_id, args)
    rows = {"baseline": mean_std([final_error(_run(preset_id, "baseline", args, s, data)[0])
                                  for s in range(args.seeds)])}
    for m in args.m_values:
        dcl = DclOverrides(M=(m, m))
        errors = [final_error(_run(preset_id, "DCL-A2", args, s, data, dcl, tag=f"DCL-A2-M{m}")[0])
                  for s in range(args.seeds)]
        rows[f"M={m}"] = mean_std(errors)
        print(f"{preset_id} DCL-A2 M={m}: {rows[f'M={m}']['mean']:.4f}")
    return {preset_id: rows}


def run_gap(args) -> dict:
    """Per-epoch train/test loss curves and the final-epoch overfitting gap."""
    preset_id = args.presets[0]
    data = _load(preset_id, args)
    summary = {}
    os.makedirs(RESULTS_DIR, exist_ok=True)
    with open(RESULTS_DIR / f"gap_{preset_id}.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "seed", "epoch", "train_loss", "test_loss"])
        for variant in args.variants:
            gaps = []
            for seed in range(args.seeds):
                result, _ = _run(preset_id, variant, args, seed, data)
                curves = loss_curves(result.history)
                for epoch, (tr, te) in enumerate(zip(curves["train"], curves["test"])):
                    writer.writerow([variant, seed, epoch, f"{tr:.6f}", f"{te:.6f}"])
                gaps.append(overfitting_gap(result.history))
            summary[variant] = mean_std(gaps)
            print(f"{preset_id} {variant}: gap {summary[variant]['mean']:.4f}")
    return {preset_id: summary}


def main():
    parser = argparse.ArgumentParser(description="desk-scale experiment drivers")
    parser.add_argument("study", choices=["table", "sweep", "gap"])
    parser.add_argument("--presets", nargs="+", default=None)
    parser.add_argument("--variants", nargs="+", default=None)
    parser.add_argument("--m-values", nargs="+", type=int, default=SWEEP_M)
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--tail-epochs", type=int, default=5)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--train-subset", type=int, default=10000)
    parser.add_argument("--test-subset", type=int, default=2000)
    args = parser.parse_args()

    if args.study == "table":
        args.presets = args.presets or ["II-01", "III-10"]
        args.variants = args.variants or TABLE_VARIANTS
        results = run_table(args)
    elif args.study == "sweep":
        args.presets = args.presets or ["II-01"]
        results = run_sweep(args)
    else:
        args.presets = args.presets or ["III-10"]
        args.variants = args.variants or GAP_VARIANTS
        results = run_gap(args)

    print("\n========== SUMMARY ==========")
    pprint(results)
    _save(args.study, results)


if __name__ == "__main__":
    main()
