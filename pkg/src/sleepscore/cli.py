"""Command line interface: the full pipeline as subcommands.

Every subcommand takes `--config` (JSON), `--seed`, `--deterministic`,
`--threads`, and `--out`; all artifacts land under `--out`, and a
`manifest.json` describing the run (resolved config, seed, versions, paths,
wall time) is written there atomically at the end. Exit codes: 0 success,
1 configuration error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import time

# Thread control must happen before numpy is imported anywhere in the
# process, so this module only imports stdlib at load time.


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, bit-reproducible execution")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread count (default: SLEEPSCORE_THREADS or 1)")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sleepscore",
        description="Sleep state scoring of wide-field calcium imaging data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic recordings")
    _add_common(p)

    p = sub.add_parser("preprocess", help="raw containers -> corrected dF/F")
    _add_common(p)
    p.add_argument("--data", required=True, help="raw recording dir")

    p = sub.add_parser("train", help="train the classifier")
    _add_common(p)
    p.add_argument("--data", required=True, help="preprocessed recording dir")
    p.add_argument("--labels", help="label CSV (default: <data>/labels.csv)")

    p = sub.add_parser("score", help="predict a hypnogram per recording")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--duration", type=float, default=None,
                   help="epoch duration in seconds")
    p.add_argument("--png", action="store_true",
                   help="also render each hypnogram as a PNG")

    p = sub.add_parser("eval", help="score predictions against reference labels")
    _add_common(p)
    p.add_argument("--ref", required=True, help="reference label CSV")
    p.add_argument("--pred", help="predicted label CSV")
    p.add_argument("--checkpoint", help="score --data with this model instead")
    p.add_argument("--data", help="preprocessed dir (with --checkpoint)")
    p.add_argument("--duration", type=float, default=None)

    p = sub.add_parser("agree", help="agreement between two label files")
    _add_common(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--duration", type=float, default=10.0)

    p = sub.add_parser("gradcam", help="saliency map for one epoch")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--recording", required=True)
    p.add_argument("--epoch-index", type=int, required=True)
    p.add_argument("--target-class", type=int, required=True)
    p.add_argument("--duration", type=float, default=None)

    p = sub.add_parser("attention", help="attention traces over context windows")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--context", type=float, default=None,
                   help="context window seconds (default: 2x duration)")

    p = sub.add_parser("sweep", help="epoch-duration sweep")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", help="label CSV (default: <data>/labels.csv)")
    p.add_argument("--durations", default="1,2,5,10,20",
                   help="comma-separated seconds")
    p.add_argument("--checkpoint", help="reuse this model instead of retraining")
    return parser


def _load_config(path):
    from .errors import ConfigError
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config: file not found: {path}")
    with open(path) as f:
        try:
            cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: invalid JSON in {path}: {e}")
    if not isinstance(cfg, dict):
        raise ConfigError("config: top level must be a JSON object")
    return cfg


def _build(cls, values: dict, section: str):
    from .errors import ConfigError
    import dataclasses
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{section}: unknown key {sorted(unknown)[0]!r}")
    return cls(**values)


def _manifest(args, config: dict, inputs, outputs, t0: float) -> None:
    import numpy as np

    from . import __version__

    blob = json.dumps(config, sort_keys=True).encode()
    manifest = {
        "subcommand": args.command,
        "config": config,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "seed": config.get("seed"),
        "deterministic": bool(args.deterministic),
        "versions": {"sleepscore": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_time_s": time.time() - t0,
    }
    path = os.path.join(args.out, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _apply_seed(args, config: dict) -> dict:
    if args.seed is not None:
        config["seed"] = args.seed
    return config


def _default_labels(args) -> str:
    from .errors import DataError
    path = getattr(args, "labels", None) or os.path.join(args.data,
                                                         "labels.csv")
    if not os.path.exists(path):
        raise DataError(f"label file not found: {path}")
    return path


# -- subcommand bodies ---------------------------------------------------------


def cmd_synth(args) -> int:
    import dataclasses

    from . import io as containers
    from .dataset import SleepState
    from .errors import ConfigError
    from .synth import StateSignature, SynthSpec, generate

    t0 = time.time()
    raw_cfg = _apply_seed(args, _load_config(args.config))
    cfg = dict(raw_cfg)
    signatures = cfg.pop("signatures", None)
    dwell = cfg.pop("dwell_epochs", None)
    spec_kwargs = dict(cfg)
    if signatures is not None:
        sigs = {}
        for name, sig in signatures.items():
            try:
                state = SleepState[name.upper()]
            except KeyError:
                raise ConfigError(f"signatures: unknown state {name!r}")
            sig = dict(sig)
            if "band" in sig:
                sig["band"] = tuple(sig["band"])
            sigs[state] = _build(StateSignature, sig, f"signatures.{name}")
        spec_kwargs["signatures"] = sigs
    if dwell is not None:
        spec_kwargs["dwell_epochs"] = {
            SleepState[k.upper()]: float(v) for k, v in dwell.items()}
    spec = _build(SynthSpec, spec_kwargs, "synth")

    result = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for rec in result.recordings:
        rec_dir = os.path.join(args.out, rec.recording_id)
        containers.write_recording(rec_dir, rec)
        outputs.append(rec_dir)
    labels_path = os.path.join(args.out, "labels.csv")
    result.labels.write(labels_path)
    truth_path = os.path.join(args.out, "truth.json")
    containers.write_truth(truth_path, result.truth)
    outputs += [labels_path, truth_path]
    _manifest(args, raw_cfg, [], outputs, t0)
    print(f"wrote {len(result.recordings)} recordings, "
          f"{len(result.labels)} labels to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    from . import io as containers
    from .preprocess import PipelineConfig, run_pipeline

    t0 = time.time()
    raw_cfg = _load_config(args.config)
    cfg = dict(raw_cfg)
    cfg.pop("seed", None)
    for key in ("atlas_bregma", "atlas_lambda"):
        if cfg.get(key) is not None:
            cfg[key] = tuple(cfg[key])
    pipeline_cfg = _build(PipelineConfig, cfg, "preprocess")

    paths = containers.list_recordings(args.data, kind="raw")
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for path in paths:
        raw = containers.read_recording(path)
        stack = run_pipeline(raw, pipeline_cfg)
        out_dir = os.path.join(args.out, raw.recording_id)
        containers.write_preprocessed(out_dir, stack)
        outputs.append(out_dir)
        print(f"{raw.recording_id}: {stack.frames.shape[0]} frames "
              f"preprocessed")
    src_labels = os.path.join(args.data, "labels.csv")
    if os.path.exists(src_labels):
        shutil.copyfile(src_labels, os.path.join(args.out, "labels.csv"))
        outputs.append(os.path.join(args.out, "labels.csv"))
    _manifest(args, raw_cfg, paths, outputs, t0)
    return 0


def _load_split_epochs(data_dir: str, labels_path: str, duration_s: float,
                       split_cfg: dict):
    from . import io as containers
    from .dataset import LabelFile, SplitSpec, epoch_stack, split

    labels = LabelFile.read(labels_path)
    epochs = []
    for path in containers.list_recordings(data_dir, kind="preprocessed"):
        stack = containers.read_preprocessed(path)
        epochs.extend(epoch_stack(stack, duration_s, labels,
                                  require_labels=False))
    labeled = [e for e in epochs if e.label is not None]
    spec = _build(SplitSpec, split_cfg, "split")
    return split(labeled, spec), labels


def cmd_train(args) -> int:
    from .errors import DataError
    from .model import ArchConfig, init_params, save_checkpoint
    from .train import TrainConfig, evaluate_split, train

    import numpy as np

    t0 = time.time()
    raw_cfg = _apply_seed(args, _load_config(args.config))
    cfg = dict(raw_cfg)
    duration_s = float(cfg.pop("duration_s", 10.0))
    arch_cfg = cfg.pop("arch", {})
    split_cfg = cfg.pop("split", {})
    seed = int(cfg.pop("seed", 0))
    train_kwargs = dict(cfg.pop("train", {}))
    if cfg:
        from .errors import ConfigError
        raise ConfigError(f"train: unknown key {sorted(cfg)[0]!r}")
    train_kwargs.setdefault("seed", seed)
    split_cfg.setdefault("seed", seed)
    if args.deterministic:
        train_kwargs["deterministic"] = True

    labels_path = _default_labels(args)
    (train_set, val_set, test_set), _ = _load_split_epochs(
        args.data, labels_path, duration_s, split_cfg)
    if not train_set or not val_set:
        raise DataError("split produced an empty train or val set")
    t_epoch = train_set[0].frames.shape[0]
    hw = train_set[0].frames.shape[2:]
    arch_cfg.setdefault("frames_per_epoch", t_epoch)
    arch_cfg.setdefault("input_hw", list(hw))
    arch = _build(ArchConfig, {**arch_cfg,
                               "input_hw": tuple(arch_cfg["input_hw"])},
                  "arch")
    tcfg = _build(TrainConfig, train_kwargs, "train")

    os.makedirs(args.out, exist_ok=True)
    params = init_params(arch, np.random.default_rng(seed))
    best, log = train(params, train_set, val_set, tcfg)

    ckpt_path = os.path.join(args.out, "model.ckpt")
    save_checkpoint(best, ckpt_path)
    log_path = os.path.join(args.out, "trainlog.csv")
    log.write_csv(log_path)
    outputs = [ckpt_path, log_path]
    if test_set:
        report = evaluate_split(best, test_set, duration_s=duration_s)
        report_path = os.path.join(args.out, "test_metrics.json")
        report.save(report_path)
        outputs.append(report_path)
        print(f"test: {report.summary()}")
    _manifest(args, raw_cfg, [args.data, labels_path], outputs, t0)
    return 0


def _score_recordings(data_dir: str, checkpoint: str, duration_s):
    from . import io as containers
    from .dataset import epoch_stack
    from .model import load_checkpoint, predict_batch

    import numpy as np

    params = load_checkpoint(checkpoint)
    results = []
    for path in containers.list_recordings(data_dir, kind="preprocessed"):
        stack = containers.read_preprocessed(path)
        duration = duration_s
        if duration is None:
            duration = params.arch.frames_per_epoch / stack.frame_rate_hz
        epochs = epoch_stack(stack, duration, labels=None,
                             require_labels=False)
        preds = []
        for s in range(0, len(epochs), 16):
            chunk = epochs[s:s + 16]
            frames = np.stack([e.frames for e in chunk])
            preds.extend(predict_batch(frames, params).tolist())
        results.append((stack, epochs, preds, duration))
    return params, results


def cmd_score(args) -> int:
    from .dataset import SleepState
    from .evaluate import Hypnogram, hypnogram_to_png

    t0 = time.time()
    raw_cfg = _apply_seed(args, _load_config(args.config))
    os.makedirs(args.out, exist_ok=True)
    _, results = _score_recordings(args.data, args.checkpoint, args.duration)
    outputs = []
    for stack, epochs, preds, duration in results:
        hyp = Hypnogram(
            recording_id=stack.recording_id, duration_s=duration,
            entries=[(e.epoch_index, SleepState(p))
                     for e, p in zip(epochs, preds)])
        path = os.path.join(args.out, f"hypnogram_{stack.recording_id}.csv")
        hyp.write_csv(path)
        outputs.append(path)
        if args.png:
            png = os.path.join(args.out,
                               f"hypnogram_{stack.recording_id}.png")
            hypnogram_to_png(hyp, png)
            outputs.append(png)
        print(f"{stack.recording_id}: {len(preds)} epochs scored")
    _manifest(args, raw_cfg, [args.data, args.checkpoint], outputs, t0)
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from .dataset import LabelFile, SleepState, frames_per_epoch
    from .errors import ConfigError
    from .evaluate import evaluate_labels, global_trace, pooled_band_power

    t0 = time.time()
    raw_cfg = _apply_seed(args, _load_config(args.config))
    ref = LabelFile.read(args.ref)
    duration = args.duration
    band_powers = None

    if args.pred:
        pred = LabelFile.read(args.pred)
        keys = sorted(set(ref.states) & set(pred.states))
        pairs = [(ref.states[k], pred.states[k]) for k in keys]
        groups = [k[0] for k in keys]
        inputs = [args.ref, args.pred]
    elif args.checkpoint and args.data:
        _, results = _score_recordings(args.data, args.checkpoint, duration)
        pairs, groups = [], []
        spectra = []
        for stack, epochs, preds, dur in results:
            duration = dur
            for e, p in zip(epochs, preds):
                lab = ref.states.get((stack.recording_id, e.epoch_index))
                if lab is not None:
                    pairs.append((lab, SleepState(p)))
                    groups.append(stack.recording_id)
            spectra.append((global_trace(stack).astype(np.float64),
                            stack.frame_rate_hz,
                            [SleepState(p) for p in preds],
                            frames_per_epoch(dur, stack.frame_rate_hz)))
        band_powers = pooled_band_power(spectra)
        inputs = [args.ref, args.data, args.checkpoint]
    else:
        raise ConfigError("eval: needs --pred or (--checkpoint and --data)")

    report = evaluate_labels([int(a) for a, _ in pairs],
                             [int(b) for _, b in pairs],
                             duration_s=duration if duration else 10.0,
                             groups=groups)
    report.band_powers = band_powers
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "metrics.json")
    report.save(report_path)
    print(report.summary())
    _manifest(args, raw_cfg, inputs, [report_path], t0)
    return 0


def cmd_agree(args) -> int:
    from .dataset import LabelFile
    from .evaluate import score_agreement

    t0 = time.time()
    raw_cfg = _apply_seed(args, _load_config(args.config))
    a = LabelFile.read(args.a)
    b = LabelFile.read(args.b)
    report = score_agreement(a, b, duration_s=args.duration)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "agreement.json")
    report.save(path)
    print(report.summary())
    _manifest(args, raw_cfg, [args.a, args.b], [path], t0)
    return 0


def cmd_gradcam(args) -> int:
    from . import io as containers
    from .dataset import epoch_stack
    from .errors import DataError
    from .interpret import grad_cam, saliency_to_png
    from .model import load_checkpoint

    import numpy as np

    t0 = time.time()
    raw_cfg = _apply_seed(args, _load_config(args.config))
    params = load_checkpoint(args.checkpoint)
    rec_dir = None
    for path in containers.list_recordings(args.data, kind="preprocessed"):
        if os.path.basename(path) == args.recording:
            rec_dir = path
    if rec_dir is None:
        raise DataError(f"recording {args.recording!r} not found in {args.data}")
    stack = containers.read_preprocessed(rec_dir)
    duration = args.duration or params.arch.frames_per_epoch / stack.frame_rate_hz
    epochs = epoch_stack(stack, duration, labels=None, require_labels=False)
    if not 0 <= args.epoch_index < len(epochs):
        raise DataError(f"epoch index {args.epoch_index} outside "
                        f"[0, {len(epochs) - 1}]")
    sal = grad_cam(epochs[args.epoch_index].frames, params, args.target_class)

    os.makedirs(args.out, exist_ok=True)
    npy_path = os.path.join(args.out, "saliency.npy")
    png_path = os.path.join(args.out, "saliency.png")
    np.save(npy_path, sal.epoch_map.astype(np.float32))
    saliency_to_png(sal.epoch_map, png_path)
    info = {"recording": args.recording, "epoch_index": args.epoch_index,
            "target_class": args.target_class, "degenerate": sal.degenerate}
    info_path = os.path.join(args.out, "saliency.json")
    with open(info_path, "w") as f:
        json.dump(info, f, indent=2, sort_keys=True)
        f.write("\n")
    _manifest(args, raw_cfg, [args.data, args.checkpoint],
              [npy_path, png_path, info_path], t0)
    print(f"saliency written to {npy_path}")
    return 0


def cmd_attention(args) -> int:
    import csv as csvmod

    from . import io as containers
    from .dataset import context_windows, epoch_stack
    from .interpret import attention_summary, extract_attention
    from .model import load_checkpoint

    t0 = time.time()
    raw_cfg = _apply_seed(args, _load_config(args.config))
    params = load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    traces = []
    rows = []
    inputs = [args.data, args.checkpoint]
    for path in containers.list_recordings(args.data, kind="preprocessed"):
        stack = containers.read_preprocessed(path)
        duration = args.duration or \
            params.arch.frames_per_epoch / stack.frame_rate_hz
        context_s = args.context or 2 * duration
        epochs = epoch_stack(stack, duration, labels=None,
                             require_labels=False)
        windows, skipped = context_windows(epochs, context_s,
                                           stack.frame_rate_hz)
        for wnd in windows:
            tr = extract_attention(wnd.frames, params, context_s)
            traces.append(tr)
            for ts, weight in enumerate(tr.weights):
                rows.append([stack.recording_id, wnd.epoch_index, ts,
                             f"{weight:.8g}", tr.state.letter])
    csv_path = os.path.join(args.out, "attention.csv")
    with open(csv_path, "w", newline="") as f:
        w = csvmod.writer(f)
        w.writerow(["recording_id", "epoch_index", "timestep", "weight",
                    "state"])
        w.writerows(rows)
    summary_path = os.path.join(args.out, "attention_summary.json")
    with open(summary_path, "w") as f:
        json.dump(attention_summary(traces), f, indent=2, sort_keys=True)
        f.write("\n")
    _manifest(args, raw_cfg, inputs, [csv_path, summary_path], t0)
    print(f"{len(traces)} attention traces written")
    return 0


def cmd_sweep(args) -> int:
    from . import io as containers
    from .dataset import LabelFile, SplitSpec
    from .evaluate import duration_sweep, write_sweep_csv
    from .model import ArchConfig, load_checkpoint
    from .train import TrainConfig

    t0 = time.time()
    raw_cfg = _apply_seed(args, _load_config(args.config))
    cfg = dict(raw_cfg)
    base_duration = float(cfg.pop("duration_s", 10.0))
    seed = int(cfg.pop("seed", 0))
    arch_cfg = cfg.pop("arch", {})
    split_cfg = cfg.pop("split", {})
    split_cfg.setdefault("seed", seed)
    train_kwargs = dict(cfg.pop("train", {}))
    train_kwargs.setdefault("seed", seed)

    labels_path = _default_labels(args)
    labels = LabelFile.read(labels_path)
    stacks = [containers.read_preprocessed(p)
              for p in containers.list_recordings(args.data,
                                                  kind="preprocessed")]
    durations = [float(d) for d in args.durations.split(",")]
    split_spec = _build(SplitSpec, split_cfg, "split")

    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
        rows = duration_sweep(stacks, labels, base_duration, durations,
                              split_spec, params=params)
    else:
        if "input_hw" in arch_cfg:
            arch_cfg["input_hw"] = tuple(arch_cfg["input_hw"])
        arch = _build(ArchConfig, arch_cfg, "arch")
        tcfg = _build(TrainConfig, train_kwargs, "train")
        rows = duration_sweep(stacks, labels, base_duration, durations,
                              split_spec, train_config=tcfg, arch=arch)

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "sweep.csv")
    write_sweep_csv(rows, csv_path)
    for row in rows:
        print(f"duration {row['duration_s']}s: acc={row['accuracy']:.4f} "
              f"kappa={row['kappa']:.4f} (n={row['n_test']})")
    _manifest(args, raw_cfg, [args.data, labels_path], [csv_path], t0)
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "agree": cmd_agree,
    "gradcam": cmd_gradcam,
    "attention": cmd_attention,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads
    if threads is None:
        threads = 1 if args.deterministic else \
            int(os.environ.get("SLEEPSCORE_THREADS", "1"))
    _set_threads(threads)

    from .errors import ConfigError, DataError, NumericError

    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
