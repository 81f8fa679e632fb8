"""Command-line entry point: synth, train, detect, eval, heatmap, gradcheck, ablate.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .head import Box, Detection
from .layers import load_state, read_checkpoint
from .metrics import (
    evaluate_matches,
    match_dataset,
    pr_curve,
    pr_f1_at_best_threshold,
    read_detections,
    write_detections,
    write_pr_csv,
    write_report,
)
from .model import ModelConfig, build_model
from .raster import draw_boxes, to_u16, upsample_bilinear
from .synth import SceneSpec, load_dataset, normalize_image, read_annotations, read_pgm, write_dataset, write_pgm
from .trainer import InferenceConfig, TrainConfig, evaluate_model, predict, train

log = logging.getLogger("shipdet")

ABLATION_HEADER = ["Baseline", "CEM", "NAM", "CC-FPN", "mAP", "F1", "Recall", "Precision", "AP_s", "AP_m", "AP_l"]
# canonical ablation rows: (label, cem, nam, neck); the baseline neck is PAFPN
ABLATION_ROWS = {
    "baseline": (False, False, "pafpn"),
    "cem": (True, False, "pafpn"),
    "nam": (False, True, "pafpn"),
    "ccfpn": (False, False, "ccfpn"),
    "all": (True, True, "ccfpn"),
}


class UsageError(Exception):
    pass


def _load_json(path: str | None, what: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{what} file {path} must hold a JSON object")
    return data


def _model_config(args) -> ModelConfig:
    d = _load_json(args.model, "model config")
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        return ModelConfig.from_dict(d or {"preset": "tiny"})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad model config: {exc}") from exc


def _train_config(args) -> TrainConfig:
    d = _load_json(args.train, "train config")
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train config: {exc}") from exc


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory not found: {path}")
    return p


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _unit(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise UsageError(f"{name} must lie in [0, 1], got {value}")


def load_model(path: str | Path):
    manifest, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(manifest["meta"]["model"])
    model = build_model(cfg)
    load_state(model, arrays)
    return model.eval()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    d = _load_json(args.spec, "scene spec")
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        spec = SceneSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scene spec: {exc}") from exc
    manifest = write_dataset(spec, args.n, args.out, args.start_index)
    print(Path(args.out) / "manifest.json")
    log.info("wrote %d images, checksum %s", len(manifest["images"]), manifest["checksum"])
    return 0


def cmd_train(args) -> int:
    data = _require_dir(args.data, "data")
    mcfg, tcfg = _model_config(args), _train_config(args)
    samples = load_dataset(data)
    res = train(mcfg, tcfg, samples, args.out)
    from .plotting import plot_loss_curve

    if res.losses:
        plot_loss_curve(res.losses, Path(args.out) / "loss.png")
    print(res.checkpoint)
    log.info("trained %d epochs in %.1f s", tcfg.epochs, res.seconds)
    return 0


def _detect_inputs(args) -> list[tuple[str, np.ndarray]]:
    if args.data:
        root = _require_dir(args.data, "data")
        manifest = json.loads(_require_file(str(root / "manifest.json"), "manifest").read_text())
        return [(e["image_id"], read_pgm(root / e["file"])) for e in manifest["images"]]
    return [(Path(p).stem, read_pgm(_require_file(p, "image"))) for p in args.image]


def cmd_detect(args) -> int:
    _unit("--score", args.score)
    _unit("--nms", args.nms)
    if not args.image and not args.data:
        raise UsageError("give --image or --data")
    if args.overlay and (args.data or len(args.image) != 1):
        raise UsageError("--overlay needs exactly one --image")
    _require_file(args.ckpt, "checkpoint")
    model = load_model(args.ckpt)
    inputs = _detect_inputs(args)
    images = np.stack([normalize_image(v) for _, v in inputs])
    cfg = InferenceConfig(score_thresh=args.score, nms_iou=args.nms, max_det=args.max_det)
    results = predict(model, images, cfg)
    dets = [[Detection(Box(*map(float, b)), float(s)) for b, s in zip(boxes, scores)] for boxes, scores in results]
    write_detections(args.out, [i for i, _ in inputs], dets)
    if args.overlay:
        write_pgm(args.overlay, draw_boxes(inputs[0][1], results[0][0]))
    log.info("%d detections over %d images", sum(len(d) for d in dets), len(dets))
    return 0


def cmd_eval(args) -> int:
    dets_path = _require_file(args.dets, "detections file")
    anns_path = Path(args.anns)
    if anns_path.is_dir():
        anns_path = anns_path / "annotations.jsonl"
    _require_file(str(anns_path), "annotations file")
    anns = read_annotations(anns_path)
    by_id = read_detections(dets_path)
    unknown = set(by_id) - {a.image_id for a in anns}
    if unknown:
        raise ValueError(f"detections reference unknown images: {sorted(unknown)[:5]}")
    dets = [by_id.get(a.image_id, []) for a in anns]
    matches = match_dataset(dets, anns, args.iou)
    report = evaluate_matches(matches)
    out = Path(args.report)
    write_report(out, report)
    points = pr_curve(matches)
    pr_csv = Path(args.pr_csv) if args.pr_csv else out.with_suffix(".pr.csv")
    write_pr_csv(pr_csv, points)
    from .plotting import plot_pr_curve

    plot_pr_curve(points, pr_csv.with_suffix(".png"), pr_f1_at_best_threshold(matches))
    print(json.dumps(report.rates(), sort_keys=True))
    return 0


def cmd_heatmap(args) -> int:
    _require_file(args.ckpt, "checkpoint")
    values = read_pgm(_require_file(args.image, "image"))
    model = load_model(args.ckpt)
    if args.level not in model.strides:
        raise UsageError(f"--level must be one of the model strides {model.strides}")
    with T.no_grad():
        out = model(T.Tensor(normalize_image(values)[None, None]))
    prob = T._sigmoid_np(out[args.level][1].data[0, 0])
    heat = upsample_bilinear(prob, values.shape)
    write_pgm(args.out, to_u16(heat))
    if args.png:
        from .plotting import plot_heatmap

        plot_heatmap(values, heat, args.png, f"stride {args.level}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import GRADCHECK_TOL, gradcheck_suite

    failed = 0
    for name, err in gradcheck_suite(args.seed or 0, args.only):
        ok = err < args.tol
        failed += not ok
        print(f"{name:16s} {err:.3e} {'ok' if ok else 'FAIL'}")
    if args.tol > GRADCHECK_TOL:
        log.warning("tolerance %.1e is looser than the default %.1e", args.tol, GRADCHECK_TOL)
    return 1 if failed else 0


def run_ablation(base: ModelConfig, tcfg: TrainConfig, train_set, eval_set, names, out_dir=None) -> list[dict]:
    rows = []
    for name in names:
        cem, nam, neck = ABLATION_ROWS[name]
        cfg = TrainConfig.from_dict({**tcfg.to_dict(), "cem": cem, "nam": nam, "neck": neck})
        sub = Path(out_dir) / name if out_dir is not None else None
        res = train(base, cfg, train_set, sub)
        rep = evaluate_model(res.model, eval_set).report
        rows.append({
            "label": name,
            "Baseline": 1, "CEM": int(cem), "NAM": int(nam), "CC-FPN": int(neck == "ccfpn"),
            "mAP": rep.ap50, "F1": rep.f1, "Recall": rep.recall, "Precision": rep.precision,
            "AP_s": rep.ap_small, "AP_m": rep.ap_medium, "AP_l": rep.ap_large,
        })
    return rows


def write_ablation_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r[k] if k in ("Baseline", "CEM", "NAM", "CC-FPN") else f"{r[k]:.6f}" for k in ABLATION_HEADER])


def cmd_ablate(args) -> int:
    names = [c.strip() for c in args.configs.split(",") if c.strip()]
    bad = [c for c in names if c not in ABLATION_ROWS]
    if bad or not names:
        raise UsageError(f"--configs entries must come from {list(ABLATION_ROWS)}, got {bad or names}")
    data = _require_dir(args.data, "data")
    eval_dir = _require_dir(args.eval_data, "eval data") if args.eval_data else data
    base, tcfg = _model_config(args), _train_config(args)
    train_set, eval_set = load_dataset(data), load_dataset(eval_dir)
    out = Path(args.out)
    work = out.parent / (out.stem + "_runs") if args.keep_runs else None
    rows = run_ablation(base, tcfg, train_set, eval_set, names, work)
    write_ablation_csv(out, rows)
    from .plotting import plot_ablation

    plot_ablation(rows, out.with_suffix(".png"))
    print(out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shipdet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None, help="overrides the seed in any config file")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, "write a synthetic dataset")
    sp.add_argument("--spec", help="scene spec JSON (defaults apply to missing keys)")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--start-index", type=int, default=0)

    sp = add("train", cmd_train, "train a detector")
    sp.add_argument("--model", help="model config JSON; may name a preset")
    sp.add_argument("--train", help="train config JSON")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=None)

    sp = add("detect", cmd_detect, "run a checkpoint on images")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", action="append", default=[])
    sp.add_argument("--data", help="dataset directory instead of --image")
    sp.add_argument("--out", required=True, help="detections JSON-lines")
    sp.add_argument("--score", type=float, default=0.05, help="0.05 suits evaluation, 0.5 visualization")
    sp.add_argument("--nms", type=float, default=0.65)
    sp.add_argument("--max-det", type=int, default=100)
    sp.add_argument("--overlay", help="PGM with detected boxes drawn")

    sp = add("eval", cmd_eval, "score detections against annotations")
    sp.add_argument("--dets", required=True)
    sp.add_argument("--anns", required=True, help="annotations.jsonl or a dataset directory")
    sp.add_argument("--report", required=True)
    sp.add_argument("--pr-csv")
    sp.add_argument("--iou", type=float, default=0.5)

    sp = add("heatmap", cmd_heatmap, "objectness heatmap of one pyramid level")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--level", type=int, required=True, help="pyramid stride, e.g. 8")
    sp.add_argument("--out", required=True)
    sp.add_argument("--png", help="also render a figure")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--only", nargs="*")

    sp = add("ablate", cmd_ablate, "train and evaluate the ablation rows")
    sp.add_argument("--data", required=True)
    sp.add_argument("--eval-data")
    sp.add_argument("--configs", default=",".join(ABLATION_ROWS))
    sp.add_argument("--model")
    sp.add_argument("--train")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--keep-runs", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"shipdet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
