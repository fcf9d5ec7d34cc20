import argparse
import logging
import sys
from pathlib import Path

from config.settings import ABLATION_NAMES, apply_cli_overrides, load_run_config
from core.errors import MapInferenceError
from core.pipeline import REPORT_FILE, run_eval, run_infer, run_rasterize, run_render, run_synth, run_train


def _shared_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="Path to a JSON run config (defaults are used for missing keys)")
    parser.add_argument("--seed", type=int, help="Override the master seed")
    parser.add_argument("--ablation", action="append", default=[], choices=ABLATION_NAMES,
                        help="Disable one component (repeatable)")
    parser.add_argument("--directed", action="store_true", help="Evaluate with one-way roads respected")
    parser.add_argument("--threads", type=int, help="Worker threads for rasterization and evaluation")
    parser.add_argument("--verbose", action="store_true", help="Debug-level logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Infer road-network maps from GPS trajectories.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic world (road graph + trajectories)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("rasterize", help="Build feature and supervision tiles from a world directory")
    p.add_argument("world")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="Train the map inference model on a tile store")
    p.add_argument("store")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="Continue from the last completed epoch in --out")

    p = sub.add_parser("infer", help="Infer the road graph for one split of a tile store")
    p.add_argument("store")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", help="train, val, test or all")

    p = sub.add_parser("eval", help="Score a predicted graph against ground truth (TOPO + APLS)")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--out", help=f"Report path (default: {REPORT_FILE} next to the prediction)")

    p = sub.add_parser("render", help="Draw a predicted graph as SVG")
    p.add_argument("pred")
    p.add_argument("--gt")
    p.add_argument("--trajectories")
    p.add_argument("--out", required=True)

    for name in ("synth", "rasterize", "train", "infer", "eval", "render"):
        _shared_flags(sub.choices[name])
    return parser


def dispatch(args, settings):
    if args.command == "synth":
        print("🌍 Generating synthetic world...")
        world = run_synth(settings, args.out)
        print(f"   {len(world.graph)} vertices, {len(world.trajectories)} trajectories")
    elif args.command == "rasterize":
        print("🧱 Rasterizing trajectories into tiles...")
        names = run_rasterize(settings, args.world, args.out)
        print(f"   {len(names)} tiles written to {args.out}")
    elif args.command == "train":
        print("🧠 Training...")
        log = run_train(settings, args.store, args.out, resume=args.resume)
        if len(log):
            last = log.iloc[-1]
            print(f"   epoch {int(last['epoch'])}: L={last['L']:.4f} val_L={last['val_L']:.4f}")
    elif args.command == "infer":
        print(f"🛰️ Inferring '{args.split}' tiles...")
        pred = run_infer(settings, args.store, args.checkpoint, args.out, split=args.split)
        print(f"   {len(pred)} vertices, {len(pred.edges)} directed edges")
    elif args.command == "eval":
        print("📏 Evaluating...")
        out = args.out or str(Path(args.pred).parent / REPORT_FILE)
        report = run_eval(settings, args.pred, args.gt, out)
        for line in report.to_lines():
            if not line.startswith("param."):
                print(f"   {line}")
    elif args.command == "render":
        print("🖼️ Rendering map...")
        run_render(settings, args.pred, args.out, gt_path=args.gt, trajectories_path=args.trajectories)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="[%(asctime)s] %(levelname)s: %(message)s", datefmt="%Y-%m-%d %H:%M:%S")
    try:
        print("📥 Loading config...")
        settings = apply_cli_overrides(load_run_config(args.config), seed=args.seed, ablations=args.ablation,
                                       directed=args.directed, threads=args.threads)
        dispatch(args, settings)
    except MapInferenceError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    print("✅ Done.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
