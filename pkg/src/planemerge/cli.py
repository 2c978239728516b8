"""Command-line surface: synth, detect, eval, plot."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .bench import (
    PRESETS,
    classification_error,
    evaluate,
    generate_scene,
    run_pipeline,
    scene_preset,
)
from .config import RunConfig
from .errors import ConfigError, MatchFileError, PlanemergeError
from .geometry import OUTLIER
from .io import MatchFile, format_labeling, read_config, read_labeling, read_matches, write_matches
from .multistructure import PatchLabeling
from .svg import render_svg

EXIT_PARSE = 2
EXIT_PIPELINE = 3

_ROMAN = (
    "I II III IV V VI VII VIII IX X XI XII XIII XIV XV XVI XVII XVIII XIX XX"
).split()


def roman(n: int) -> str:
    return _ROMAN[n - 1] if 1 <= n <= len(_ROMAN) else str(n)


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_synth(args) -> int:
    try:
        if args.preset is not None:
            spec = scene_preset(
                args.preset,
                seed=args.seed,
                matches_per_plane=args.matches_per_plane,
                noise_sigma=args.noise,
                outlier_fraction=args.outliers,
            )
        else:
            return _fail(EXIT_PARSE, "synth needs --preset (corridor|corner|box|lab)")
    except ValueError as e:
        return _fail(EXIT_PARSE, str(e))
    try:
        data = generate_scene(spec)
    except PlanemergeError as e:
        return _fail(EXIT_PIPELINE, str(e))
    mf = MatchFile(
        matches=data.matches,
        intrinsics=spec.intrinsics,
        image_size=spec.image_size,
    )
    write_matches(args.output, mf)
    print(f"wrote {len(data.matches)} matches to {args.output}")
    return 0


def cmd_detect(args) -> int:
    try:
        mf = read_matches(args.matches)
        config = read_config(args.config) if args.config else RunConfig()
    except (MatchFileError, ConfigError, OSError) as e:
        return _fail(EXIT_PARSE, str(e))
    for w in mf.warnings:
        print(f"warning: {w}", file=sys.stderr)
    try:
        result = run_pipeline(mf.matches, config, mf.intrinsics)
    except PlanemergeError as e:
        return _fail(EXIT_PIPELINE, str(e))

    diag = {
        k: v
        for k, v in result.diagnostics.items()
        if k != "timings"
    }
    doc = format_labeling(result.labeling.ids, result.labeling.labels, diag)
    with open(args.output, "w", encoding="utf-8") as f:
        f.write(doc)
    print(
        f"detected {result.labeling.n_patches} planes over "
        f"{len(mf.matches)} matches -> {args.output}"
    )
    for name in args.dump_stage or []:
        if name not in result.stages:
            return _fail(
                EXIT_PARSE,
                f"unknown stage {name!r}; available: {sorted(result.stages)}",
            )
        stage = result.stages[name]
        path = f"{args.output}.{name}"
        with open(path, "w", encoding="utf-8") as f:
            f.write(format_labeling(stage.ids, stage.labels))
        print(f"stage '{name}' labeling -> {path}")
    return 0


def _format_table(title: str, matrix: np.ndarray) -> str:
    s, d = matrix.shape
    header = [title] + [f"PD {roman(j + 1)}" for j in range(d)]
    rows = [header]
    for i in range(s):
        rows.append([f"SP {roman(i + 1)}"] + [f"{matrix[i, j]:.2f}" for j in range(d)])
    widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


def cmd_eval(args) -> int:
    try:
        mf = read_matches(args.matches)
        labels_by_id, _ = read_labeling(args.labeling)
    except (MatchFileError, OSError) as e:
        return _fail(EXIT_PARSE, str(e))
    gt = [c.gt_plane for c in mf.matches]
    if any(g is None for g in gt):
        return _fail(EXIT_PARSE, "match file carries no ground-truth labels")
    ids = np.array([c.id for c in mf.matches], dtype=int)
    missing = [i for i in ids if int(i) not in labels_by_id]
    if missing:
        return _fail(
            EXIT_PARSE, f"labeling is missing {len(missing)} ids (first: {missing[0]})"
        )
    pred = PatchLabeling(
        ids=ids, labels=np.array([labels_by_id[int(i)] for i in ids], dtype=int)
    )
    report = evaluate(pred, np.array(gt, dtype=int))
    print(f"classification error: {report.classification_error:.2f}%")
    print(f"scene planes: {report.gt_planes}  detected planes: {report.detected_planes}")
    if report.ps.size:
        print()
        print(_format_table("PS", report.ps))
        print()
        print(_format_table("AD", report.ad))
    return 0


def cmd_plot(args) -> int:
    try:
        mf = read_matches(args.matches)
        labels_by_id, _ = read_labeling(args.labeling)
    except (MatchFileError, OSError) as e:
        return _fail(EXIT_PARSE, str(e))
    labels = np.array(
        [labels_by_id.get(int(c.id), OUTLIER) for c in mf.matches], dtype=int
    )
    try:
        doc = render_svg(mf.matches, labels)
        with open(args.output, "w", encoding="utf-8") as f:
            f.write(doc)
    except (OSError, PlanemergeError) as e:
        return _fail(EXIT_PARSE, str(e))
    print(f"wrote {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="planemerge",
        description="Multi-plane detection from two-view feature matches.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene match file")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--matches-per-plane", type=int, default=300)
    s.add_argument("--noise", type=float, default=0.5)
    s.add_argument("--outliers", type=float, default=0.0)
    s.add_argument("--output", "-o", required=True)
    s.set_defaults(func=cmd_synth)

    d = sub.add_parser("detect", help="run the detection pipeline")
    d.add_argument("matches")
    d.add_argument("--config")
    d.add_argument("--output", "-o", required=True)
    d.add_argument(
        "--dump-stage",
        action="append",
        metavar="NAME",
        help="also write the named stage labeling (initial|refined|final)",
    )
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="score a labeling against ground truth")
    e.add_argument("labeling")
    e.add_argument("matches")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("plot", help="render a labeling as SVG")
    g.add_argument("matches")
    g.add_argument("labeling")
    g.add_argument("--output", "-o", required=True)
    g.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
