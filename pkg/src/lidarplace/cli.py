"""Command line: ``lidarplace {synth,train-vocab,detect,eval,roc,resolution}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import synth
from .bow import Vocabulary, train_from_features
from .cloud_io import (FORMATS, ManifestEntry, SequenceManifest, load_scan, load_sequence,
                       read_manifest, write_manifest, write_scan)
from .evaluation import classify, ground_truth, resolution_study, roc, write_roc
from .orb import BriefPattern, OrbExtractor
from .pipeline import (Config, Recognizer, load_config, read_detections, read_records,
                       write_detections, write_records)
from .projection import project

log = logging.getLogger("lidarplace")


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if getattr(args, "vocab", None):
        cfg.vocabulary = args.vocab
    return cfg


def _vocab(cfg: Config, config_path=None) -> Vocabulary:
    if not cfg.vocabulary:
        raise ValueError("no vocabulary: pass --vocab or set 'vocabulary' in the config")
    path = cfg.vocabulary
    if config_path and not os.path.isabs(path) and not os.path.exists(path):
        path = os.path.join(os.path.dirname(os.path.abspath(config_path)), path)
    return Vocabulary.load(path)


def _poses(manifest_path):
    seq = read_manifest(manifest_path)
    missing = [k for k, e in enumerate(seq.entries) if e.pose is None]
    if missing:
        raise ValueError(f"{manifest_path}: entry {missing[0]} has no pose")
    return [(k, e.timestamp, e.pose.translation) for k, e in enumerate(seq.entries)]


def cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "figure8":
        scans, poses = synth.figure_eight_sequence(args.seed, args.n)
    elif args.kind == "train":
        scans = synth.training_scans(args.seed, per_scene=max(1, args.n // 4))
        poses = [None] * len(scans)
    else:
        scans, poses = synth.revisit_pair(args.kind, args.seed)
    entries = []
    for s, p in zip(scans, poses):
        name = f"{s.id:06d}.{args.format}"
        write_scan(s, os.path.join(args.out, name))
        entries.append(ManifestEntry(name, s.timestamp, p))
    write_manifest(SequenceManifest(entries), os.path.join(args.out, "manifest.csv"))
    print(f"wrote {len(scans)} scans and manifest.csv to {args.out}")


def _corpus_scans(path):
    if os.path.isfile(path):
        return [s for s, _ in load_sequence(path)]
    manifest = os.path.join(path, "manifest.csv")
    if os.path.exists(manifest):
        return [s for s, _ in load_sequence(manifest)]
    names = sorted(f for f in os.listdir(path) if os.path.splitext(f)[1].lstrip(".") in FORMATS)
    if not names:
        raise ValueError(f"{path}: no scan files found")
    return [load_scan(os.path.join(path, f), id=k) for k, f in enumerate(names)]


def cmd_train_vocab(args):
    cfg = _config(args)
    ex = OrbExtractor(n_features=cfg.n_bow, n_levels=cfg.n_levels, scale=cfg.scale_factor,
                      fast_threshold=cfg.fast_threshold, pattern=BriefPattern(args.pattern_seed))
    feats = [ex.extract(project(s, cfg.width, cfg.height, cfg.vfov)) for s in _corpus_scans(args.corpus)]
    vocab = train_from_features(feats, k=args.k, L=args.L, seed=args.seed)
    vocab.save(args.out)
    print(f"vocabulary: {vocab.n_words} words from {sum(map(len, feats))} descriptors "
          f"in {len(feats)} scans -> {args.out}")


def cmd_detect(args):
    cfg = _config(args)
    vocab = _vocab(cfg, args.config)
    rec = Recognizer(vocab, cfg)
    dets = rec.run(s for s, _ in load_sequence(args.manifest))
    write_detections(dets, args.out, timings=not args.no_timings)
    if args.records:
        write_records(rec.records, args.records)
    n = len(rec.records)
    total = sum(sum(r.timings.values()) for r in rec.records)
    print(f"{len(dets)} detections over {n} scans, {total / max(n, 1):.1f} ms/scan "
          f"(config {cfg.digest()}) -> {args.out}")


def cmd_eval(args):
    traj = _poses(args.manifest)
    dets = read_detections(args.det)
    positions = {k: p for k, _, p in traj}
    rep = classify(dets, positions, args.gt_radius)
    gt = ground_truth(traj, args.gt_radius, args.min_gap)
    print(rep.summary())
    print(f"ground-truth loop pairs: {len(gt)} (radius {args.gt_radius} m, gap > {args.min_gap} s)")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("detected,tp,fp,tp_rate,fp_rate,mean_time_ms\n")
            fh.write(f"{rep.detected},{rep.tp},{rep.fp},{rep.tp_rate:.6f},{rep.fp_rate:.6f},"
                     f"{rep.mean_time_ms:.3f}\n")


def cmd_roc(args):
    traj = _poses(args.manifest)
    gt = ground_truth(traj, args.gt_radius, args.min_gap)
    curve = roc(read_records(args.records), gt, score=args.score)
    if args.out:
        write_roc(curve, args.out)
    auc = "undefined (no positives or negatives)" if curve.auc is None else f"{curve.auc:.4f}"
    print(f"ROC over {curve.n_pos} positive / {curve.n_neg} negative queries, AUC {auc}")


def cmd_resolution(args):
    cfg = _config(args)
    vocab = _vocab(cfg, args.config)
    seq = load_sequence(args.manifest)
    if any(p is None for _, p in seq):
        raise ValueError(f"{args.manifest}: every entry needs a pose")
    rows = [int(r) for r in args.rows.split(",")]
    reports = resolution_study([s for s, _ in seq], [p for _, p in seq], vocab, cfg, rows, args.gt_radius)
    lines = ["rows,detected,tp,fp,mean_features"]
    for rep in reports:
        lines.append(f"{rep.extra['rows']},{rep.detected},{rep.tp},{rep.fp},{rep.extra['mean_features']:.1f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")


def build_parser():
    p = argparse.ArgumentParser(prog="lidarplace", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic sequence and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=["figure8", "roll", "reverse", "train"], default="figure8")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=FORMATS, default="bin")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-vocab", help="train a vocabulary from a directory of scans")
    s.add_argument("--corpus", required=True, help="directory of scans, or a manifest")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--L", type=int, default=6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pattern-seed", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_vocab)

    s = sub.add_parser("detect", help="run the detector over a sequence")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--vocab")
    s.add_argument("--out", required=True)
    s.add_argument("--records", help="also write per-scan records (input to 'roc')")
    s.add_argument("--no-timings", action="store_true", help="write 0 in the timing columns")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", help="TP/FP table for a detection CSV")
    s.add_argument("--det", required=True)
    s.add_argument("--manifest", required=True, help="manifest with ground-truth poses")
    s.add_argument("--gt-radius", type=float, default=2.0)
    s.add_argument("--min-gap", type=float, default=30.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("roc", help="ROC points and AUC from per-scan records")
    s.add_argument("--records", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--gt-radius", type=float, default=2.0)
    s.add_argument("--min-gap", type=float, default=30.0)
    s.add_argument("--score", choices=["inliers", "bow"], default="inliers")
    s.add_argument("--out")
    s.set_defaults(func=cmd_roc)

    s = sub.add_parser("resolution", help="rerun detection at reduced row counts")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--vocab")
    s.add_argument("--rows", default="128,64,32,16")
    s.add_argument("--gt-radius", type=float, default=2.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_resolution)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"lidarplace {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
