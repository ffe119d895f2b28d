"""`fogstat` command line: synth, extract, train, predict, evaluate, curves,
ablate, selfcheck.

Every subcommand writes its fully resolved configuration (a JSON file next to
its outputs) so any run can be reproduced from the recorded config + seed.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import dataio, dbsfnet, kem, metrics, ndtensor as nd, trainer
from .errors import ConfigError, DataError, FogstatError
from .selfcheck import run_selfcheck


def _default_threads(args):
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("FOGSTAT_THREADS")
    return int(env) if env else None


def _record_config(path, args, extra=None):
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    if extra:
        resolved.update(extra)
    with open(path, "w") as f:
        json.dump(resolved, f, indent=1, default=str)


def _parse_levels(text):
    try:
        levels = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse gray levels {text!r}")
    return levels


def _load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON in {path}: {exc}")


def _model_config(manifest, overrides):
    cfg = {"input_size": manifest["image_size"]}
    cfg.update(overrides or {})
    return dbsfnet.ModelConfig(**cfg)


def cmd_synth(args):
    manifest = dataio.generate_dataset(
        args.out, n_events=args.events, n_frames=args.frames,
        size=args.size, seed=args.seed)
    _record_config(os.path.join(args.out, "run_config.json"), args)
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote {args.events} events ({args.frames} frames each) "
          f"to {args.out}; split sizes {counts}")
    return 0


def cmd_extract(args):
    image = dataio.load_ppm(args.input)
    feats = kem.kem_transform(image, t=args.patch,
                              levels=_parse_levels(args.levels),
                              threads=_default_threads(args),
                              standardize=not args.raw)
    nd.save_ndt(args.out, feats)
    _record_config(args.out + ".run.json", args)
    if args.dump_pgm:
        os.makedirs(args.dump_pgm, exist_ok=True)
        for c, name in enumerate(kem.FEATURE_NAMES):
            ch = feats[c]
            span = ch.max() - ch.min()
            scaled = (ch - ch.min()) / span * 255 if span > 0 else ch * 0
            dataio.save_pgm(os.path.join(args.dump_pgm, f"{name}.pgm"), scaled)
    print(f"wrote 8x{image.shape[1]}x{image.shape[2]} feature stack to {args.out}")
    return 0


def cmd_train(args):
    manifest = dataio.load_manifest(args.manifest)
    base_dir = os.path.dirname(args.manifest)
    model_cfg = _model_config(manifest, _load_json(args.model_config)
                              if args.model_config else None)
    tc = _load_json(args.train_config) if args.train_config else {}
    if args.iters is not None:
        tc["total_iters"] = args.iters
    if args.batch is not None:
        tc["batch_size"] = args.batch
    if args.seed is not None:
        tc["seed"] = args.seed
    tc.setdefault("kem_threads", _default_threads(args))
    train_cfg = trainer.TrainConfig(**tc)
    train_samples = dataio.load_split(manifest, "train", base_dir)
    val_samples = dataio.load_split(manifest, "val", base_dir)
    os.makedirs(args.out, exist_ok=True)
    _record_config(os.path.join(args.out, "run_config.json"), args,
                   {"model_config": model_cfg.to_dict(),
                    "train_config": asdict(train_cfg)})
    result = trainer.train(train_samples, val_samples, model_cfg, train_cfg,
                           out_dir=args.out)
    print(f"trained {train_cfg.total_iters} iters; "
          f"final val CSI {result.final_val_csi}; checkpoint in {args.out}")
    return 0


def cmd_predict(args):
    params, cfg = dbsfnet.load_checkpoint(args.ckpt)
    image = dataio.load_ppm(args.input)
    feats = kem.kem_transform(image, t=cfg.patch, levels=cfg.levels,
                              threads=_default_threads(args)) \
        if cfg.use_statistical else None
    logits = dbsfnet.forward(image / 255.0, feats, params, cfg)
    mask = dbsfnet.predict_mask(logits, args.threshold)
    dataio.save_mask(args.out, mask)
    if args.prob:
        nd.save_ndt(args.prob, nd.softmax_channels(logits)[1])
    _record_config(args.out + ".run.json", args)
    print(f"wrote mask to {args.out} ({int(mask.sum())} foreground pixels)")
    return 0


def _paired_files(a_dir, a_ext, b_dir):
    """Pair files across two directories by shared stem."""
    pairs = []
    for name in sorted(os.listdir(a_dir)):
        if not name.endswith(a_ext):
            continue
        stem = name[:-len(a_ext)]
        for cand in (stem + ".pgm", stem + ".mask.pgm"):
            path = os.path.join(b_dir, cand)
            if os.path.exists(path):
                pairs.append((os.path.join(a_dir, name), path))
                break
        else:
            raise DataError(f"no truth mask for {name} in {b_dir}")
    if not pairs:
        raise DataError(f"no {a_ext} files found in {a_dir}")
    return pairs


def cmd_evaluate(args):
    conf = metrics.ConfusionCounts(0, 0, 0, 0)
    pairs = _paired_files(args.pred, ".pgm", args.truth)
    for pred_path, truth_path in pairs:
        conf = conf + metrics.confusion(dataio.load_mask(pred_path),
                                        dataio.load_mask(truth_path))
    report = metrics.metrics_from_confusion(conf)
    payload = {"images": len(pairs),
               "counts": {"tp": conf.tp, "fp": conf.fp,
                          "fn": conf.fn, "tn": conf.tn},
               "metrics": report.as_dict(),
               "degenerate": sorted(report.degenerate)}
    with open(args.out, "w") as f:
        json.dump(payload, f, indent=1)
    _record_config(args.out + ".run.json", args)
    print(json.dumps(payload["metrics"], indent=1))
    return 0


def cmd_curves(args):
    pairs = _paired_files(args.probs, ".ndt", args.truth)
    probs = [nd.load_ndt(p) for p, _ in pairs]
    truths = [dataio.load_mask(t) for _, t in pairs]
    rows, auc = metrics.curves(probs, truths, num_thresholds=args.points)
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "precision", "recall", "tpr", "fpr"])
        writer.writerows(rows)
    _record_config(args.out + ".run.json", args)
    print(f"wrote {len(rows)} curve points to {args.out}; ROC AUC {auc:.4f}")
    return 0


def variant_config(name, image_size):
    """Model config for one ablation variant, sharing geometry with the base."""
    kw = {"input_size": image_size}
    if name == "complete":
        pass
    elif name == "base":
        kw["use_statistical"] = False
    elif name == "fs_off":
        kw["use_feature_selection"] = False
    elif name.startswith("block"):
        try:
            kw["fuse_scales"] = (int(name[5:]),)
        except ValueError:
            raise ConfigError(f"unknown ablation variant {name!r}")
    elif name.startswith("feat:"):
        feat = name[5:]
        if feat not in kem.FEATURE_NAMES:
            raise ConfigError(f"unknown statistical feature {feat!r}")
        kw["feature_channels"] = (feat,)
    else:
        raise ConfigError(f"unknown ablation variant {name!r}")
    return dbsfnet.ModelConfig(**kw)


def cmd_ablate(args):
    manifest = dataio.load_manifest(args.manifest)
    base_dir = os.path.dirname(args.manifest)
    train_samples = dataio.load_split(manifest, "train", base_dir)
    val_samples = dataio.load_split(manifest, "val", base_dir)
    test_samples = dataio.load_split(manifest, "test", base_dir)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        variants = ["complete"]
    rows = []
    for name in variants:
        cfg = variant_config(name, manifest["image_size"])
        # every variant shares one init/sampling seed so differences isolate
        # the toggle
        tcfg = trainer.TrainConfig(total_iters=args.iters, batch_size=args.batch,
                                   seed=args.seed, p_noise=0, p_rotate=0,
                                   p_erase=0, kem_threads=_default_threads(args))
        result = trainer.train(train_samples, val_samples, cfg, tcfg)
        conf = metrics.ConfusionCounts(0, 0, 0, 0)
        for image, mask in test_samples:
            feats = kem.kem_transform(image, t=cfg.patch, levels=cfg.levels,
                                      threads=_default_threads(args)) \
                if cfg.use_statistical else None
            logits = dbsfnet.forward(image / 255.0, feats, result.params, cfg)
            conf = conf + metrics.confusion(
                dbsfnet.predict_mask(logits, cfg.threshold), mask)
        rep = metrics.metrics_from_confusion(conf)
        rows.append((name, rep.csi, rep.miou, rep.f1, rep.kappa))
        print(f"{name}: csi={rep.csi:.4f} miou={rep.miou:.4f} "
              f"f1={rep.f1:.4f} kappa={rep.kappa:.4f}")
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "csi", "miou", "f1", "kappa"])
        writer.writerows(rows)
    _record_config(args.out + ".run.json", args)
    return 0


def cmd_selfcheck(args):
    ok = run_selfcheck()
    if not ok:
        raise FogstatError("selfcheck failed")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="fogstat",
                                description="sea-fog texture/segmentation toolkit")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: FOGSTAT_THREADS or all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic fog/cloud dataset")
    s.add_argument("--events", type=int, default=40)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="compute the 8-channel feature stack")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--patch", type=int, default=7)
    s.add_argument("--levels", default="2,3,4")
    s.add_argument("--raw", action="store_true",
                   help="skip per-channel standardization")
    s.add_argument("--dump-pgm", default=None,
                   help="directory for per-channel PGM dumps")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train the dual-branch network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--model-config", default=None, help="JSON overrides")
    s.add_argument("--train-config", default=None, help="JSON overrides")
    s.add_argument("--iters", type=int, default=None)
    s.add_argument("--batch", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="run a checkpoint on one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.add_argument("--prob", default=None, help="also dump class-1 probabilities")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="score predicted masks against truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("curves", help="PR/ROC threshold sweep")
    s.add_argument("--probs", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--points", type=int, default=101)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_curves)

    s = sub.add_parser("ablate", help="train and score model variants")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variants", default="complete",
                   help="comma list: complete, base, fs_off, blockN, feat:NAME")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--iters", type=int, default=300)
    s.add_argument("--batch", type=int, default=6)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("selfcheck", help="run the built-in oracle battery")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FogstatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
