"""
Command-line entry point: synth, run, grad-check and eval

    python backend/cli.py synth --n 4 --out out/scenes
    python backend/cli.py run out/scenes --out out/dets --jobs 2
    python backend/cli.py grad-check
    python backend/cli.py eval dets.txt boxes.txt --pr-csv pr.csv
"""

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import pandas as pd

# Add parent directory to path
sys.path.append(str(Path(__file__).parent))

from config import Config, PipelineConfig
from errors import AydivError, ConfigurationError, InputError, ParseError
from model.grad_suite import SUITE_KEYS, run_grad_suite, suite_passed
from model.pipeline import dump_stages, init_params, run_pipeline
from utils.io_formats import BOXES_FILE, format_boxes, read_boxes, read_bundle, write_bundle, write_text
from utils.metrics import evaluate, pr_curve
from utils.scene import synth_scene

logger = logging.getLogger("aydiv.cli")

MANIFEST_FILE = "manifest.csv"
MANIFEST_COLUMNS = ["index", "seed", "path", "num_boxes", "num_points"]


class CliParser(argparse.ArgumentParser):
    """Usage errors become the same single line as every other failure."""

    def error(self, message: str):
        _report_error("cli", "UsageError", message)
        sys.exit(2)


def _report_error(module: str, kind: str, message: str) -> None:
    flat = " ".join(str(message).split())
    print(f"error module={module} kind={kind} message={flat}", file=sys.stderr)


def _status(message: str) -> None:
    print(message, file=sys.stderr)


def _jobs(args) -> int:
    if args.jobs is not None:
        jobs = args.jobs
    elif Config.JOBS is not None:
        try:
            jobs = int(Config.JOBS)
        except ValueError as e:
            raise ConfigurationError(f"AYDIV_JOBS must be an integer, got {Config.JOBS!r}") from e
    else:
        jobs = 1
    if jobs < 1:
        raise ConfigurationError("--jobs must be >= 1")
    return jobs


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _map(fn, items: Sequence, jobs: int) -> List:
    """Apply `fn` to every item, across processes when jobs > 1; results keep input order."""
    if jobs == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ----------------------------------------------------------------------
# synth
# ----------------------------------------------------------------------
def _synth_one(task: Tuple[PipelineConfig, int, str]) -> dict:
    cfg, index, out_dir = task
    seed = cfg.seed + index
    scene = synth_scene(cfg.scene, seed)
    name = f"scene_{index:04d}"
    write_bundle(scene, Path(out_dir) / name)
    return {"index": index, "seed": seed, "path": name, "num_boxes": len(scene.boxes), "num_points": scene.cloud.count}


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    if args.n < 0:
        raise ConfigurationError("--n must be >= 0")
    out = Path(args.out or Path(cfg.out_dir) / "scenes")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create {out}: {e}", module="io") from e
    rows = _map(_synth_one, [(cfg, i, str(out)) for i in range(args.n)], _jobs(args))
    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    write_text(out / MANIFEST_FILE, manifest.to_csv(index=False, lineterminator="\n"))
    _status(f"✅ wrote {len(rows)} scene bundles to {out}")
    return 0


# ----------------------------------------------------------------------
# run
# ----------------------------------------------------------------------
def _run_one(task: Tuple[PipelineConfig, str, int, str, Optional[str], bool]) -> int:
    cfg, bundle, seed, out_file, stage_dir, oracle = task
    scene = read_bundle(bundle, seed=seed)
    params = init_params(cfg)
    result = run_pipeline(scene, cfg, params, oracle=oracle)
    Path(out_file).parent.mkdir(parents=True, exist_ok=True)
    write_text(out_file, format_boxes(result.detections))
    if stage_dir is not None:
        dump_stages(result, stage_dir)
    return len(result.detections)


def _read_manifest(directory: Path) -> pd.DataFrame:
    try:
        manifest = pd.read_csv(directory / MANIFEST_FILE)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"cannot read manifest: {e}", path=str(directory / MANIFEST_FILE)) from e
    missing = [c for c in ("seed", "path") if c not in manifest.columns]
    if missing:
        raise ParseError(f"manifest lacks columns {missing}", path=str(directory / MANIFEST_FILE))
    return manifest


def cmd_run(args) -> int:
    cfg = _load_config(args)
    oracle = args.oracle_proposals or cfg.detect.oracle_proposals
    scene_path = Path(args.scene)
    tasks = []
    if (scene_path / MANIFEST_FILE).is_file():
        out_dir = Path(args.out or Path(cfg.out_dir) / "detections")
        for row in _read_manifest(scene_path).itertuples(index=False):
            name = str(row.path)
            stage_dir = str(out_dir / f"{name}_stages") if args.dump_stages else None
            tasks.append((cfg, str(scene_path / name), int(row.seed), str(out_dir / f"{name}.txt"), stage_dir, oracle))
    else:
        out_file = Path(args.out or Path(cfg.out_dir) / "detections.txt")
        stage_dir = str(out_file.parent / f"{out_file.stem}_stages") if args.dump_stages else None
        tasks.append((cfg, str(scene_path), cfg.seed, str(out_file), stage_dir, oracle))

    counts = _map(_run_one, tasks, _jobs(args))
    _status(f"✅ {len(tasks)} scene(s) processed, {sum(counts)} detections written")
    return 0


# ----------------------------------------------------------------------
# grad-check
# ----------------------------------------------------------------------
def cmd_grad_check(args) -> int:
    cfg = _load_config(args)
    report = run_grad_suite(cfg)
    lines = []
    for key in SUITE_KEYS:
        block = report[key]
        worst = max(block, key=block.get)
        lines.append(f"{key}={block[worst]:.3e}")
        lines.append(f"{key}.worst_parameter={worst}")
    text = "\n".join(lines) + "\n"
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if not suite_passed(report):
        failed = [k for k in SUITE_KEYS if not suite_passed({k: report[k]})]
        _status(f"❌ gradient check failed for: {', '.join(failed)}")
        return 1
    _status("✅ all gradient checks passed")
    return 0


# ----------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------
def cmd_eval(args) -> int:
    cfg = _load_config(args)
    dets = read_boxes(args.dets)
    gt_path = Path(args.gts)
    gts = read_boxes(gt_path / BOXES_FILE if gt_path.is_dir() else gt_path)
    report = evaluate([dets], [gts], cfg.eval)
    text = report.to_text()
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)

    if args.pr_csv:
        frames = []
        for key, results in report.results.items():
            if sum(r.num_gt for r in results) == 0:
                continue
            frame = pr_curve(results)
            frame.insert(0, "curve", key)
            frames.append(frame)
        columns = ["curve", "score", "recall", "precision", "recall_h", "precision_h"]
        table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns)
        write_text(args.pr_csv, table.to_csv(index=False, lineterminator="\n"))
    _status(f"✅ evaluated {len(dets)} detections against {len(gts)} ground-truth boxes")
    return 0


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="INI config file (default: $AYDIV_CONFIG)")
    common.add_argument("--seed", type=int, default=None, help="global seed override")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--jobs", type=int, default=None, help="parallel scenes (default: $AYDIV_JOBS or 1)")
    common.add_argument("--log-level", default=None, help="logging level (default: $AYDIV_LOG_LEVEL or WARNING)")

    parser = CliParser(prog="aydiv", description="Desk-scale LiDAR-camera fusion pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    synth = sub.add_parser("synth", parents=[common], help="generate synthetic scene bundles")
    synth.add_argument("--n", type=int, default=1, help="number of scenes")
    synth.set_defaults(handler=cmd_synth)

    run = sub.add_parser("run", parents=[common], help="run the pipeline on a bundle or a synth directory")
    run.add_argument("scene", help="scene bundle directory, or a directory with manifest.csv")
    run.add_argument("--dump-stages", action="store_true", help="write intermediate tensors and grids")
    run.add_argument("--oracle-proposals", action="store_true", help="seed proposals from ground truth (test harness)")
    run.set_defaults(handler=cmd_run)

    grad = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    grad.set_defaults(handler=cmd_grad_check)

    ev = sub.add_parser("eval", parents=[common], help="AP/APH of a detections file against ground truth")
    ev.add_argument("dets", help="detections in box format")
    ev.add_argument("gts", help="ground-truth boxes file or scene bundle directory")
    ev.add_argument("--pr-csv", default=None, help="write precision-recall curves as CSV")
    ev.set_defaults(handler=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = (args.log_level or Config.LOG_LEVEL).upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except AydivError as e:
        _report_error(e.module, type(e).__name__, str(e))
        return 1
    except OSError as e:
        _report_error("io", type(e).__name__, str(e))
        return 1
    except Exception as e:
        logger.debug("unhandled error", exc_info=True)
        _status(f"❌ {type(e).__name__}: {' '.join(str(e).split())}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
