# run_ablation_study.py
import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

# Add the project root to sys.path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from config.settings import ABLATION_NAMES, apply_cli_overrides, load_run_config  # noqa: E402
from core.errors import InvalidGraphError  # noqa: E402
from core.pipeline import GT_SUBSET_FILE, PRED_FILE, REPORT_FILE, run_eval, run_infer, run_rasterize, run_synth, run_train  # noqa: E402

METRICS = ["topo_precision", "topo_recall", "topo_f1", "apls"]
SUMMARY_FILE = "ablation_summary.csv"
RUNS_FILE = "ablation_runs.csv"


def variant_settings(base: Dict[str, Any], variant: str, seed: int) -> Dict[str, Any]:
    """'full' or one ablation name, on top of the base config."""
    ablations = [] if variant == "full" else [variant]
    return apply_cli_overrides(base, seed=seed, ablations=ablations)


def run_variant(base: Dict[str, Any], variant: str, seed: int, store_dir: Path, out_dir: Path,
                split: str) -> Optional[Dict[str, Any]]:
    settings = variant_settings(base, variant, seed)
    run_dir = out_dir / variant / f"seed_{seed}"
    print(f"🧠 Training '{variant}' with seed {seed}...")
    run_train(settings, str(store_dir), str(run_dir / "train"))
    run_infer(settings, str(store_dir), str(run_dir / "train"), str(run_dir / "infer"), split=split)
    try:
        report = run_eval(settings, str(run_dir / "infer" / PRED_FILE), str(run_dir / "infer" / GT_SUBSET_FILE),
                          str(run_dir / REPORT_FILE))
    except InvalidGraphError as e:
        logging.warning(f"Skipping '{variant}' seed {seed}: {e}")
        return None
    row = {"variant": variant, "seed": seed}
    row.update({m: getattr(report, m) for m in METRICS})
    return row


def summarize(runs: pd.DataFrame) -> pd.DataFrame:
    """Per-variant mean and std of every metric, full model first."""
    summary = runs.groupby("variant")[METRICS].agg(["mean", "std"])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    summary["runs"] = runs.groupby("variant").size()
    order = [v for v in ["full", *ABLATION_NAMES] if v in summary.index]
    return summary.loc[order].reset_index()


def run_study(base: Dict[str, Any], out_dir: Path, seeds: List[int], variants: List[str],
              split: str = "test") -> pd.DataFrame:
    world_dir, store_dir = out_dir / "world", out_dir / "store"
    print("🌍 Generating synthetic world...")
    run_synth(base, str(world_dir))
    print("🧱 Rasterizing...")
    run_rasterize(base, str(world_dir), str(store_dir))

    rows = [run_variant(base, variant, seed, store_dir, out_dir, split) for variant in variants for seed in seeds]
    runs = pd.DataFrame([r for r in rows if r is not None], columns=["variant", "seed", *METRICS])
    runs.to_csv(out_dir / RUNS_FILE, index=False)
    summary = summarize(runs)
    summary.to_csv(out_dir / SUMMARY_FILE, index=False)
    return summary


def main():
    parser = argparse.ArgumentParser(description="Train the full model and every ablation variant over several seeds.")
    parser.add_argument("--config", help="JSON run config shared by every variant")
    parser.add_argument("--out", required=True)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--variants", nargs="+", default=["full", *ABLATION_NAMES],
                        choices=["full", *ABLATION_NAMES])
    parser.add_argument("--split", default="test")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="[%(asctime)s] %(levelname)s: %(message)s",
                        datefmt="%Y-%m-%d %H:%M:%S")

    summary = run_study(load_run_config(args.config), Path(args.out), args.seeds, args.variants, args.split)

    print("\n" + "=" * 50)
    print("--- ABLATION SUMMARY ---")
    print("=" * 50)
    print(summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print("✅ Done.")


if __name__ == "__main__":
    main()
