"""
Command-line entry point: train, infer, eval, bal, csf, viz, synth.

Every subcommand resolves its run-config (file, then --set overrides, then
environment), writes it as resolved_config.json into its output directory and
then does its work. Failures exit with 1 (usage), 2 (data) or 3 (numeric)
after printing one key=value record on stderr.
"""
import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from config import RunConfig
from data_io import (Manifest, SceneDataset, file_sha256, load_image, load_labels, load_superpixels,
                     save_superpixels, write_synthetic_corpus)
from database import ResultsStore
from errors import BiospixError, DataError, ParameterError, UsageError
from esm_net import ESMNet
from metrics import evaluate_many, summarize_sweep, sweep
from pipeline import grid_segmenter, infer_superpixels, interval_for_count, network_segmenter, slic_segmenter
from reports import generate_pdf_report
from spix_core import DEFAULT_INTERVAL
from training import train
from vision_front import (bal_distance_analysis, bal_encode, bal_entropy_map, csf_curve, csf_peak, distance_field,
                          linearity_fit)
from visualizations import SpixCharts, boundary_overlay, heatmap, save_figure, save_png

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting"""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="biospix", description="Boundary-aware superpixel segmentation")
    parser.add_argument("--log-level", default=os.getenv("BIOSPIX_LOG_LEVEL", "INFO"))
    sub = parser.add_subparsers(dest="command", parser_class=ArgumentParser)
    sub.required = True

    def common(p):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. loss.lr=1e-3 (repeatable)")
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = common(sub.add_parser("train", help="train the network"))
    p.add_argument("--manifest", help="training manifest (image,label,split)")
    p.add_argument("--split", default="train")
    p.add_argument("--synthetic", type=int, default=0, help="train on N generated scenes instead of a manifest")
    p.add_argument("--record", action="store_true", help="record the run in the results store")

    p = common(sub.add_parser("infer", help="decode superpixels for images"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    granularity = p.add_mutually_exclusive_group()
    granularity.add_argument("--interval", type=int, default=DEFAULT_INTERVAL, help="sampling interval S")
    granularity.add_argument("--spix-count", type=int, help="target number of superpixels")
    p.add_argument("--workers", type=int, default=1)

    p = common(sub.add_parser("eval", help="score superpixel maps against ground truth"))
    p.add_argument("--manifest", required=True,
                   help="CSV with prediction,label columns (or image,label with --method)")
    p.add_argument("--tol", type=int, default=2, help="boundary tolerance in pixels")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--pdf", action="store_true", help="also write report.pdf")
    p.add_argument("--method", choices=["net", "slic", "grid"], help="segment images and sweep granularities")
    p.add_argument("--intervals", default="8,16,32", help="comma-separated sampling intervals for --method")
    p.add_argument("--checkpoint", help="network checkpoint for --method net")
    p.add_argument("--record", action="store_true", help="record the run in the results store")

    p = common(sub.add_parser("bal", help="encode boundary-aware labels"))
    p.add_argument("--labels", help="16-bit label PNG")
    p.add_argument("--analysis", action="store_true", help="write the CE-vs-spread analysis table")

    p = common(sub.add_parser("csf", help="tabulate the contrast sensitivity function"))
    p.add_argument("--max-f", type=float, default=60.0)
    p.add_argument("--step", type=float, default=0.5)

    p = common(sub.add_parser("viz", help="draw superpixel boundaries on an image"))
    p.add_argument("--image", required=True)
    p.add_argument("--superpixels", required=True)

    p = common(sub.add_parser("synth", help="write a synthetic corpus"))
    p.add_argument("--count", type=int, default=20)
    return parser


def resolve_config(args) -> RunConfig:
    config = RunConfig.load(args.config).apply_overrides(args.overrides)
    return config.validate()


def _store(config: RunConfig) -> ResultsStore:
    return ResultsStore(url=config.results_url)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def run_train(args, config: RunConfig, out: Path) -> None:
    if args.manifest:
        dataset = SceneDataset.from_manifest(Manifest.read(args.manifest), args.split, config.bal.C)
    elif args.synthetic > 0:
        dataset = SceneDataset.synthetic(args.synthetic, config.synth)
    else:
        raise UsageError("train needs --manifest or --synthetic N")
    logger.info(f"Training on {len(dataset)} images for {config.train.iterations} iterations")
    net = ESMNet(config.net, seed=config.seed)
    result = train(dataset, net, config, str(out))
    save_figure(SpixCharts.loss_curve(result.log), out / "loss_curve.html")
    if args.record:
        summary = result.log.iloc[-1].to_dict() if not result.log.empty else {}
        _store(config).record_run("train", config.to_dict(), summary)


def run_infer(args, config: RunConfig, out: Path) -> None:
    net = ESMNet.load_checkpoint(args.checkpoint)
    net.eval()

    def work(path: str) -> str:
        image = load_image(path)
        h, w = image.shape[:2]
        S = interval_for_count(h, w, args.spix_count) if args.spix_count else args.interval
        sp = infer_superpixels(net, image, S)
        save_superpixels(out / f"{Path(path).stem}.png", sp, S, file_sha256(path))
        return f"{path}: {sp.count} superpixels at S={S}"

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            messages = list(pool.map(work, args.images))
    else:
        messages = [work(path) for path in args.images]
    for message in messages:
        logger.info(message)


def _segmenter(args, config: RunConfig):
    if args.method == "net":
        if not args.checkpoint:
            raise UsageError("--method net needs --checkpoint")
        return network_segmenter(ESMNet.load_checkpoint(args.checkpoint))
    if args.method == "slic":
        return slic_segmenter(config.slic)
    return grid_segmenter


def run_eval(args, config: RunConfig, out: Path) -> None:
    if args.method:
        manifest = Manifest.read(args.manifest, first="image")
        pairs = [(load_image(i), load_labels(l, config.bal.C)) for i, l in manifest.pairs()]
        try:
            intervals = [int(v) for v in args.intervals.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"bad --intervals {args.intervals!r}")
        table = sweep(_segmenter(args, config), pairs, intervals, args.tol)
        table.to_csv(out / "sweep.csv", index=False)
        summary = summarize_sweep(table)
        summary.to_csv(out / "sweep_summary.csv", index=False)
        save_figure(SpixCharts.metric_sweep(summary, args.method), out / "sweep.html")
        return

    manifest = Manifest.read(args.manifest, first="prediction")
    paths = manifest.pairs()
    pairs = [(load_superpixels(p), load_labels(l)) for p, l in paths]
    names = [p.stem for p, _ in paths]
    report = evaluate_many(pairs, names, args.tol, args.workers)
    report.to_csv(out / "metrics.csv", index=False)
    for record in report.to_dict(orient="records"):
        with open(out / f"{record['name']}.metrics.json", "w") as f:
            json.dump(record, f, indent=2, sort_keys=True, default=float)
    logger.info(f"Evaluated {len(report)} images: mean ASA {report['asa'].mean():.4f}")
    if args.pdf:
        buffer = generate_pdf_report(report, details={"Manifest": str(args.manifest)})
        if buffer is not None:
            (out / "report.pdf").write_bytes(buffer.getvalue())
    if args.record:
        store = _store(config)
        run_id = store.record_run("eval", config.to_dict(), report[["asa", "br", "bp", "co"]].mean().to_dict())
        if run_id:
            store.record_metrics(run_id, report)


def run_bal(args, config: RunConfig, out: Path) -> None:
    if not args.labels and not args.analysis:
        raise UsageError("bal needs --labels and/or --analysis")
    if args.labels:
        labels = load_labels(args.labels, config.bal.C)
        target = bal_encode(labels, distance_field(labels, config.bal.connectivity), config.bal)
        np.savez_compressed(out / "bal_target.npz", channels=target.channels, values=target.values,
                            sigma=target.sigma, K=target.K)
        entropy = bal_entropy_map(target, config.bal.eps_log)
        save_png(out / "entropy_heatmap.png", heatmap(entropy))
        save_png(out / "sigma_heatmap.png", heatmap(target.sigma))
        logger.info(f"Encoded {labels.shape[0]}x{labels.shape[1]} labels on {target.channels.size} active channels")
    if args.analysis:
        spread = bal_distance_analysis(config.bal, [0.0], np.linspace(0.05, 0.8, 16))
        separation = bal_distance_analysis(config.bal, [10.0, 15.0, 20.0], [0.0, 0.3, 0.6])
        table = pd.concat([spread, separation], ignore_index=True)
        table.to_csv(out / "ce_analysis.csv", index=False)
        fit = linearity_fit(spread)
        with open(out / "ce_fit.json", "w") as f:
            json.dump(fit, f, indent=2, sort_keys=True)
        save_figure(SpixCharts.ce_distance(spread, fit), out / "ce_analysis.html")
        logger.info(f"CE vs spread: slope {fit['slope']:.4f}, R2 {fit['r2']:.4f}")


def run_csf(args, config: RunConfig, out: Path) -> None:
    table = csf_curve(args.max_f, args.step)
    table.to_csv(out / "csf.csv", index=False)
    peak = csf_peak(args.max_f, min(args.step, 0.01))
    save_figure(SpixCharts.csf_curve(table, peak), out / "csf.html")
    logger.info(f"CSF tabulated at {len(table)} frequencies; peak at {peak:.2f} c/deg")


def run_viz(args, config: RunConfig, out: Path) -> None:
    image = load_image(args.image)
    sp = load_superpixels(args.superpixels)
    if sp.shape != image.shape[:2]:
        raise UsageError(f"superpixels {sp.shape} do not match image {image.shape[:2]}")
    save_png(out / f"{Path(args.image).stem}_overlay.png", boundary_overlay(image, sp))


def run_synth(args, config: RunConfig, out: Path) -> None:
    if args.count < 1:
        raise ParameterError("--count must be >= 1")
    write_synthetic_corpus(out, args.count, config.synth)


COMMANDS = {
    "train": run_train,
    "infer": run_infer,
    "eval": run_eval,
    "bal": run_bal,
    "csf": run_csf,
    "viz": run_viz,
    "synth": run_synth,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(),
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        config = resolve_config(args)
        out = Path(args.out)
        config.save_snapshot(str(out))
        COMMANDS[args.command](args, config, out)
        return 0
    except BiospixError as e:
        print(e.record(), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(DataError(str(e)).record(), file=sys.stderr)
        return DataError.exit_code
    except ValueError as e:
        print(UsageError(str(e)).record(), file=sys.stderr)
        return UsageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
