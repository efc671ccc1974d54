"""Command-line entry point.

Every command writes a ``run_manifest.json`` next to its outputs recording
the exact argv; ``affectconv replay MANIFEST`` re-executes it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, experiments, features, metrics, models, seqio

log = logging.getLogger("affectconv")

MANIFEST_NAME = "run_manifest.json"


class CommandError(RuntimeError):
    pass


def _load_json(path) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CommandError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise CommandError(f"config {path} must hold a JSON object")
    return data


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_manifest(out_dir, args, config, seeds, inputs, outputs, started) -> None:
    record = {
        "command": args.command,
        "argv": args.argv,
        "cwd": os.getcwd(),
        "config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "threads": args.threads,
        "version": __version__,
        "wall_time_s": round(time.time() - started, 3),
    }
    _write_text(Path(out_dir) / MANIFEST_NAME, json.dumps(record, indent=2, sort_keys=True) + "\n")


def _csv_list(text: str, cast=int) -> list:
    return [cast(x) for x in text.split(",") if x.strip()]


# --------------------------------------------------------------------------
# features


def _speaker_of(stem: str, mapping: dict | None) -> str:
    if mapping is not None:
        if stem not in mapping:
            raise CommandError(f"no speaker mapping for {stem}")
        return str(mapping[stem])
    return stem.split("_", 1)[0]


def _extract(job) -> seqio.Sequence:
    path, cfg = job
    samples, rate = features.read_wav(path)
    if rate != cfg.sample_rate_hz:
        raise CommandError(f"{path}: sample rate {rate} Hz, expected {cfg.sample_rate_hz} Hz")
    return features.stack_frames(features.log_mfb(samples, cfg), cfg.stack)


def cmd_features(args, started) -> None:
    cfg_dict = _load_json(args.config)
    cfg = features.FrontendConfig(**cfg_dict)
    wav_dir, out_dir = Path(args.wav_dir), Path(args.out_dir)
    wavs = sorted(wav_dir.glob("*.wav")) if wav_dir.is_dir() else []
    if not wavs:
        raise CommandError(f"no .wav files in {wav_dir}")
    mapping = _load_json(args.speaker_map) if args.speaker_map else None
    speakers = [_speaker_of(p.stem, mapping) for p in wavs]
    jobs = [(p, cfg) for p in wavs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            feats = list(pool.map(_extract, jobs))
    else:
        feats = [_extract(j) for j in jobs]

    labels = {}
    if args.labels_dir:
        for p in wavs:
            csv_path = Path(args.labels_dir) / f"{p.stem}.csv"
            if not csv_path.exists():
                raise CommandError(f"missing labels for {p.stem}: {csv_path}")
            labels[p.stem] = seqio.read_labels_csv(csv_path)

    utts = []
    for p, spk, f in zip(wavs, speakers, feats):
        lab = labels.get(p.stem, seqio.Sequence(np.zeros((1, f.frames)), f.frame_rate_hz))
        if p.stem in labels:
            f, lab = features.align_labels(f, lab)
        utts.append(seqio.Utterance(p.stem, spk, seqio.Partition.TRAIN, f, lab))
    utts = features.speaker_znorm(utts)

    outputs = []
    if labels:
        utts = seqio.split_partitions(utts, _csv_list(args.ratios, lambda s: float(Fraction(s)))).all()
        seqio.write_manifest(out_dir / "dataset.jsonl", utts)
        outputs.append(out_dir / "dataset.jsonl")
    else:
        (out_dir / "features").mkdir(parents=True, exist_ok=True)
        for u in utts:
            path = out_dir / "features" / f"{u.id}.dseq"
            seqio.write_sequence(path, u.features, {"id": u.id, "speaker_id": u.speaker_id, "kind": "features"})
            outputs.append(path)
    _write_manifest(out_dir, args, {"frontend": cfg.__dict__}, [], wavs, outputs, started)


# --------------------------------------------------------------------------
# synth


def cmd_synth(args, started) -> None:
    d = _load_json(args.spec)
    for flag, key in [
        ("n_utterances", "n_utterances"),
        ("frames", "frames"),
        ("feature_dims", "feature_dims"),
        ("noise_std", "noise_std"),
        ("seed", "seed"),
        ("label_band_hz", "label_band_hz"),
        ("feature_rule", "feature_rule"),
    ]:
        if getattr(args, flag) is not None:
            d[key] = getattr(args, flag)
    spec = seqio.SyntheticSpec.from_dict(d)
    utts = seqio.generate_synthetic(spec)
    if not args.no_znorm:
        utts = features.speaker_znorm(utts)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seqio.write_manifest(out_dir / "dataset.jsonl", utts)
    _write_manifest(
        out_dir, args, {"synthetic": spec.to_dict(), "znorm": not args.no_znorm}, [spec.seed], [],
        [out_dir / "dataset.jsonl"], started,
    )


# --------------------------------------------------------------------------
# train


def _train_config(args) -> models.TrainConfig:
    d = _load_json(args.config)
    for key in ("lr", "l2", "max_epochs", "patience", "seed", "eval_mode"):
        if getattr(args, key, None) is not None:
            d[key] = getattr(args, key)
    return models.TrainConfig.from_dict(d)


def _build(args, in_ch: int):
    if args.arch == "dilated":
        return models.build_dilated_net(in_ch, width=args.width or 32, depth=args.depth, k=args.kernel)
    return models.build_downup_net(in_ch, width=args.width or 32, pool=args.pool, k=args.kernel)


def cmd_train(args, started) -> None:
    cfg = _train_config(args)
    dataset = seqio.load_dataset(args.manifest)
    if not dataset.train or not dataset.dev:
        raise CommandError(f"{args.manifest}: train and dev partitions must be nonempty")
    spec = _build(args, dataset.train[0].features.channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = models.train(spec, dataset, cfg, checkpoint_path=out / "model.dnet")
    _write_text(out / "report.csv", report.to_csv())
    log.info("best dev CCC %.4f at epoch %d", report.best_dev_ccc, report.best_epoch)
    _write_manifest(
        out, args, {"train": cfg.to_dict(), "arch": args.arch, "network": spec.to_dict()}, [cfg.seed],
        [args.manifest], [out / "model.dnet", out / "report.csv"], started,
    )


# --------------------------------------------------------------------------
# eval / predict


def _load_checkpoints(paths):
    ckpts = [models.load_checkpoint(p) for p in paths]
    for p, c in zip(paths[1:], ckpts[1:]):
        if c.spec != ckpts[0].spec:
            raise CommandError(f"checkpoint {p} has a different network spec from {paths[0]}")
    return ckpts


def _check_shape(ckpt, uid, feats):
    if feats.channels != ckpt.spec.in_ch:
        raise CommandError(
            f"shape mismatch: checkpoint expects {ckpt.spec.in_ch} input channels, "
            f"{uid} has {feats.channels}x{feats.frames}"
        )


def cmd_eval(args, started) -> None:
    ckpts = _load_checkpoints(args.checkpoints)
    utts = seqio.load_dataset(args.manifest)[args.partition]
    if not utts:
        raise CommandError(f"partition {args.partition} is empty")
    rows, labels, preds = [], [], []
    for u in utts:
        _check_shape(ckpts[0], u.id, u.features)
        pred = models.predict_ensemble(ckpts, u.features).data[0]
        y = u.labels.data[0]
        labels.append(y)
        preds.append(pred)
        rows.append((u.id, metrics.ccc(y, pred).ccc, metrics.rmse(y, pred)))
    agg_ccc, agg_rmse = models.score(labels, preds, args.mode)
    lines = ["utterance_id,ccc,rmse"]
    lines += [f"{uid},{c!r},{r!r}" for uid, c, r in rows]
    lines.append(f"ALL_{args.mode},{agg_ccc!r},{agg_rmse!r}")
    text = "\r\n".join(lines) + "\r\n"
    if args.out:
        _write_text(args.out, text)
        _write_manifest(
            Path(args.out).parent, args, {"mode": args.mode, "partition": args.partition},
            [c.seed for c in ckpts], [args.manifest, *args.checkpoints], [args.out], started,
        )
    else:
        sys.stdout.write(text)


def cmd_predict(args, started) -> None:
    ckpts = _load_checkpoints(args.checkpoints)
    if args.manifest:
        items = [(u.id, u.features) for u in seqio.load_dataset(args.manifest)[args.partition]]
    else:
        items = []
        for p in args.features or []:
            seq, meta = seqio.read_sequence(p)
            items.append((meta.get("id", Path(p).stem), seq))
    if not items:
        raise CommandError("nothing to predict: give --manifest or --features")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for uid, feats in items:
        _check_shape(ckpts[0], uid, feats)
        pred = models.predict_ensemble(ckpts, feats)
        path = out_dir / f"{uid}.dseq"
        seqio.write_sequence(path, pred, {"id": uid, "kind": "prediction", "n_checkpoints": str(len(ckpts))})
        outputs.append(path)
    inputs = [args.manifest] if args.manifest else list(args.features)
    _write_manifest(out_dir, args, {"partition": args.partition}, [c.seed for c in ckpts], [*inputs, *args.checkpoints], outputs, started)


# --------------------------------------------------------------------------
# experiments


def cmd_experiment(args, started) -> None:
    out_dir = Path(args.out_dir)
    if args.kind == "rf":
        if not args.manifest:
            raise CommandError("--kind rf needs --manifest")
        cfg = _train_config(args)
        dataset = seqio.load_dataset(args.manifest)
        lengths = _csv_list(args.lengths) if args.lengths else experiments.DEFAULT_LENGTHS
        result = experiments.receptive_field_sweep(dataset, lengths, args.runs, cfg, jobs=args.jobs)
        _write_text(out_dir / "sweep.csv", result.to_csv())
        config = {"kind": "rf", "lengths": list(lengths), "runs": args.runs, "train": cfg.to_dict()}
        seeds, inputs, outputs = [cfg.seed + r for r in range(args.runs)], [args.manifest], [out_dir / "sweep.csv"]
    elif args.kind == "downup-oracle":
        if not args.manifest:
            raise CommandError("--kind downup-oracle needs --manifest")
        dataset = seqio.load_dataset(args.manifest, align=False)
        factors = _csv_list(args.factors) if args.factors else experiments.DEFAULT_FACTORS
        result = experiments.downsample_upsample_oracle([u.labels for u in dataset.all()], factors)
        _write_text(out_dir / "sweep.csv", result.to_csv())
        config = {"kind": "downup-oracle", "factors": list(factors)}
        seeds, inputs, outputs = [], [args.manifest], [out_dir / "sweep.csv"]
    else:
        if not (args.manifest and args.pred_a and args.pred_b):
            raise CommandError("--kind smoothness needs --manifest, --pred-a and --pred-b")
        utts = seqio.load_dataset(args.manifest)[args.partition]
        pa = [seqio.read_sequence(Path(args.pred_a) / f"{u.id}.dseq")[0] for u in utts]
        pb = [seqio.read_sequence(Path(args.pred_b) / f"{u.id}.dseq")[0] for u in utts]
        names = tuple(_csv_list(args.names, str)) + ("ground_truth",)
        rate = utts[0].labels.frame_rate_hz if utts else 25.0
        rows = experiments.smoothness_report(pa, pb, [u.labels for u in utts], [u.id for u in utts], args.cutoff_hz, rate, names)
        _write_text(out_dir / "smoothness.csv", experiments.smoothness_csv(rows))
        config = {"kind": "smoothness", "cutoff_hz": args.cutoff_hz, "partition": args.partition, "names": list(names)}
        seeds, inputs, outputs = [], [args.manifest, args.pred_a, args.pred_b], [out_dir / "smoothness.csv"]
    _write_manifest(out_dir, args, config, seeds, inputs, outputs, started)


def cmd_replay(args, started) -> None:
    record = _load_json(args.manifest_path)
    if "argv" not in record:
        raise CommandError(f"{args.manifest_path} is not a run manifest")
    cwd = os.getcwd()
    os.chdir(record.get("cwd", cwd))
    try:
        code = main(["--threads", str(record.get("threads", 1)), *record["argv"]])
    finally:
        os.chdir(cwd)
    if code:
        raise CommandError(f"replayed command exited with status {code}")


# --------------------------------------------------------------------------


def _add_train_flags(p) -> None:
    p.add_argument("--config", help="TrainConfig JSON file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--eval-mode", dest="eval_mode", choices=["per_utterance", "concatenated"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affectconv", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (1 gives bit-reproducible runs)")
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--version", action="version", version=f"affectconv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="WAV directory -> stacked, z-normalized log-mel features")
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="FrontendConfig JSON file")
    p.add_argument("--speaker-map", help="JSON object mapping file stem to speaker id")
    p.add_argument("--labels-dir", help="directory of <stem>.csv (time_s,value); writes dataset.jsonl")
    p.add_argument("--ratios", default="1/3,1/3,1/3", help="train,dev,test fractions")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--spec", help="SyntheticSpec JSON file; flags override it")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-utterances", dest="n_utterances", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--feature-dims", dest="feature_dims", type=int)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--label-band-hz", dest="label_band_hz", type=float)
    p.add_argument("--feature-rule", dest="feature_rule", choices=["lifted", "identity"])
    p.add_argument("--no-znorm", action="store_true", help="skip per-speaker feature standardization")

    p = sub.add_parser("train", help="train one network")
    p.add_argument("--arch", required=True, choices=sorted(models.ARCHITECTURES))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--width", type=int, help="channels per layer (default 32)")
    p.add_argument("--depth", type=int, default=10, help="dilated layers")
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--pool", type=int, default=3, help="down/up pooling factor")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="score an ensemble of checkpoints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoints", required=True, nargs="+")
    p.add_argument("--mode", default="per_utterance", choices=["per_utterance", "concatenated"])
    p.add_argument("--partition", default="dev", choices=[x.value for x in seqio.Partition])
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("predict", help="write ensemble predictions as DSEQ1 files")
    p.add_argument("--manifest")
    p.add_argument("--partition", default="dev", choices=[x.value for x in seqio.Partition])
    p.add_argument("--features", nargs="+", help="feature DSEQ1 files (instead of --manifest)")
    p.add_argument("--checkpoints", required=True, nargs="+")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("experiment", help="run one of the three studies")
    p.add_argument("--kind", required=True, choices=["rf", "downup-oracle", "smoothness"])
    p.add_argument("--manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lengths", help="comma-separated filter lengths (rf)")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--factors", help="comma-separated downsampling factors (downup-oracle)")
    p.add_argument("--pred-a", dest="pred_a")
    p.add_argument("--pred-b", dest="pred_b")
    p.add_argument("--names", default="dilated,downup")
    p.add_argument("--partition", default="dev", choices=[x.value for x in seqio.Partition])
    p.add_argument("--cutoff-hz", dest="cutoff_hz", type=float, default=1.0)
    p.add_argument("--jobs", type=int, default=1)
    _add_train_flags(p)

    p = sub.add_parser("replay", help="re-run the command recorded in a run manifest")
    p.add_argument("manifest_path")
    return parser


COMMANDS = {
    "features": cmd_features,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "experiment": cmd_experiment,
    "replay": cmd_replay,
}


def _strip_globals(argv: list[str]) -> list[str]:
    """argv with the global options removed, i.e. what replay re-runs."""
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a in ("--threads", "--log-level"):
            skip = True
            continue
        if a.startswith(("--threads=", "--log-level=")):
            continue
        out.append(a)
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = _strip_globals(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args, started)
    except (CommandError, ValueError, OSError, RuntimeError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
