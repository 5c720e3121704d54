"""Command-line entry point: ``dprgnet <command> [flags]``."""

import argparse
import json
import logging
import sys

import numpy as np

from .errors import DPRGNetError

logger = logging.getLogger("dprgnet")

# flags whose values come from the parser defaults unless a config file or the command line sets them
DEFAULTS = {
    "seed": 0,
    "preset": "desk",
    "variant": "dprgnet",
    "epochs": 60,
    "patience": 10,
    "lr": 1e-3,
    "min_lr": 5e-6,
    "weight_decay": 1e-2,
    "batch_size": 32,
    "beta": 0.1,
    "val_fraction": 0.2,
    "folds": 5,
    "mode": "step",
    "workers": 1,
    "subjects": 4,
    "steps": 50,
    "grid": [64, 16],
    "stance_len": 40,
    "noise": 0.0,
    "sensor_lag": 0.0,
    "insole_rate": 40.0,
    "plate_rate": 100.0,
    "cutoff": 10.0,
    "speed": 0.0,
    "threshold": 0.125,
    "forefoot": 0.54,
    "hindfoot": 0.29,
    "epsilon": 1e-6,
    "foot_side": "right",
    "global_priors": False,
    "learn_lambda": False,
    "adversarial": False,
}


def _parser():
    p = argparse.ArgumentParser(prog="dprgnet", description="Plantar-pressure to ground-reaction kinetics.")
    p.add_argument("--config", help="JSON file of flag values; command-line flags override it")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", default=argparse.SUPPRESS, help="JSON file of flag values")
        sp.add_argument("--seed", type=int)
        return sp

    s = add("synth", "generate a synthetic dataset container")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int)
    s.add_argument("--steps", type=int, help="stances per subject")
    s.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"))
    s.add_argument("--stance-len", type=int, dest="stance_len")
    s.add_argument("--noise", type=float)
    s.add_argument("--sensor-lag", type=float, dest="sensor_lag", help="first-order sensor time constant (frames)")
    s.add_argument("--adversarial", action="store_true",
                   help="record continuous trials and run them through the full preprocessing chain")

    s = add("preprocess", "raw delimited-text streams to a dataset container")
    s.add_argument("--pressure", required=True, help="one frame per row, H*W columns")
    s.add_argument("--forces", required=True, help="six columns: forces (N) then moments (N m)")
    s.add_argument("--subject", required=True, help="JSON subject record")
    s.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"), required=True)
    s.add_argument("--insole-rate", type=float, dest="insole_rate")
    s.add_argument("--plate-rate", type=float, dest="plate_rate")
    s.add_argument("--cutoff", type=float)
    s.add_argument("--speed", type=float)
    s.add_argument("--threshold", type=float)
    s.add_argument("--stance-len", type=int, dest="stance_len")
    s.add_argument("--out", required=True)

    s = add("priors", "partition map and temporal prior from a container")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--forefoot", type=float)
    s.add_argument("--hindfoot", type=float)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--foot-side", dest="foot_side", choices=("left", "right"))

    def training_flags(sp):
        sp.add_argument("--preset", choices=("desk", "dataset_a", "dataset_b"))
        sp.add_argument("--variant", choices=("dprgnet", "path_b_only", "cnn_lstm", "cnn"))
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--patience", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--min-lr", type=float, dest="min_lr")
        sp.add_argument("--weight-decay", type=float, dest="weight_decay")
        sp.add_argument("--batch-size", type=int, dest="batch_size")
        sp.add_argument("--beta", type=float, help="prior regularisation weight")
        sp.add_argument("--learn-lambda", action="store_true", dest="learn_lambda",
                        help="train the attention bias strength instead of fixing it")

    s = add("train", "train one model with a held-out validation split")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    training_flags(s)
    s.add_argument("--val-fraction", type=float, dest="val_fraction")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--stop-after", type=int, dest="stop_after", help="stop after this epoch index")

    s = add("eval", "k-fold cross-validation")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", help="take model and training settings from this checkpoint")
    training_flags(s)
    s.add_argument("--folds", type=int)
    s.add_argument("--mode", choices=("step", "subject", "step_level", "subject_level"))
    s.add_argument("--workers", type=int)
    s.add_argument("--global-priors", action="store_true", dest="global_priors")
    s.add_argument("--out", help="write the report as JSON")

    s = add("predict", "predictions for every sample of a container")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)

    s = add("gradcheck", "finite-difference check of every parameter gradient")
    s.add_argument("--variant", choices=("dprgnet", "path_b_only", "cnn_lstm", "cnn", "all"))
    return p


def _settings(args):
    values = dict(DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            loaded = json.load(fh)
        values.update({k.replace("-", "_"): v for k, v in loaded.items()})
    values.update({k: v for k, v in vars(args).items() if k not in ("config", "command", "verbose")})
    return argparse.Namespace(**values)


# -- commands ----------------------------------------------------------------


def cmd_synth(a):
    from .io import save_dataset
    from .synth import SynthConfig, generate_synthetic_dataset

    cfg = SynthConfig(a.subjects, a.steps, tuple(a.grid), a.stance_len, a.noise, a.seed, adversarial=a.adversarial,
                      sensor_lag=a.sensor_lag)
    container = generate_synthetic_dataset(cfg)
    save_dataset(container, a.out)
    print(f"wrote {len(container.samples)} stances from {len(container.subjects)} subjects to {a.out}")
    pre = container.extra.get("preprocess")
    if pre:
        print(f"preprocessing: {pre['intervals']} stance intervals, {pre['skipped']} skipped")
    return 0


def cmd_preprocess(a):
    from .io import DatasetContainer, read_force_text, read_pressure_text, read_subject, save_dataset
    from .preprocess import preprocess_trial
    from .types import PressureSequence

    subject = read_subject(a.subject)
    frames = np.maximum(read_pressure_text(a.pressure, a.grid), 0.0)
    plate = read_force_text(a.forces)
    seq = PressureSequence(frames, a.insole_rate, subject)
    samples, report = preprocess_trial(seq, plate, a.plate_rate, a.cutoff, a.stance_len, a.speed, a.threshold)
    extra = {"preprocess": {"offset_frames": report.offset_frames, "skipped": report.skipped,
                            "intervals": report.intervals}}
    container = DatasetContainer.build(samples, [subject], tuple(a.grid), a.stance_len, extra)
    save_dataset(container, a.out)
    print(f"{len(samples)} stances kept, {report.skipped} skipped, plate offset {report.offset_frames} frames")
    return 0


def cmd_priors(a):
    from .io import FORMAT_VERSION, _atomic_write, atomic_write_text, encode, load_dataset
    from .priors import build_priors

    data = load_dataset(a.data)
    art = build_priors(data.samples, a.forefoot, a.hindfoot, a.epsilon, foot_side=a.foot_side)
    header = {"kind": "priors", "threshold": art.threshold, "empty_regions": art.partition.empty_regions,
              "foot_side": a.foot_side}
    _atomic_write(a.out, encode(b"DPRGPRIO", header, {"partition": art.partition.labels, "prior_P": art.prior.P,
                                                     "mean_map": art.mean_map}, FORMAT_VERSION))
    atomic_write_text(a.out + ".labels.txt", art.partition.to_text())
    print(f"otsu threshold {art.threshold:.6g}; region sizes {art.partition.sizes().tolist()}")
    return 0


def _model_config(a, data):
    from .model import preset

    h, w = data.grid
    return preset(a.preset, a.variant, grid_h=h, grid_w=w, stance_len=data.stance_len,
                  learn_lambda=a.learn_lambda and a.variant == "dprgnet")


def _train_config(a):
    from .training import TrainConfig

    return TrainConfig(max_epochs=a.epochs, patience=min(a.patience, a.epochs), base_lr=a.lr,
                       min_lr=min(a.min_lr, a.lr), weight_decay=a.weight_decay, batch_size=a.batch_size,
                       prior_coeff=a.beta, seed=a.seed)


def cmd_train(a):
    from .io import checkpoint_from_training, load_checkpoint, load_dataset, restore_training, save_checkpoint
    from .priors import build_priors
    from .training import train

    data = load_dataset(a.data)
    rng = np.random.default_rng(a.seed)
    order = rng.permutation(len(data.samples))
    n_val = max(1, int(round(a.val_fraction * len(order))))
    if n_val >= len(order):
        raise DPRGNetError("not enough samples for a train/validation split")
    val = [data.samples[i] for i in np.sort(order[:n_val])]
    tr = [data.samples[i] for i in np.sort(order[n_val:])]
    resume = None
    if getattr(a, "resume", None):
        mc, tc, params, state, priors = restore_training(load_checkpoint(a.resume))
        if state is None:
            raise DPRGNetError(f"{a.resume} holds no training state to resume from")
        resume = (params, state)
    else:
        mc, tc = _model_config(a, data), _train_config(a)
        priors = build_priors(tr)
    result = train(mc, tr, val, priors, tc, resume=resume, stop_after_epoch=getattr(a, "stop_after", None))
    save_checkpoint(checkpoint_from_training(mc, tc, result, priors), a.out)
    for h in result.history:
        print(json.dumps({"epoch": h["epoch"], "lr": h["lr"], "train_loss": h["train_loss"],
                          "val_loss": h["val_loss"]}))
    print(f"best epoch {result.best_epoch} val loss {result.best_loss:.6g}; checkpoint {a.out}")
    return 0


def cmd_eval(a):
    from .evaluation import cross_validate
    from .io import atomic_write_text, load_checkpoint, load_dataset, restore_training

    data = load_dataset(a.data)
    if getattr(a, "ckpt", None):
        mc, tc, _, _, _ = restore_training(load_checkpoint(a.ckpt))
        tc = tc or _train_config(a)
    else:
        mc, tc = _model_config(a, data), _train_config(a)
    report = cross_validate(mc, data.samples, tc, a.mode, a.folds, fold_seed=a.seed,
                            global_priors=a.global_priors, workers=a.workers)
    print(f"variant {mc.variant}, {report.mode}, {a.folds} folds; NRMSE (%) per channel")
    print(report.table())
    if getattr(a, "out", None):
        atomic_write_text(a.out, json.dumps(report.as_dict(), indent=2))
    return 0


def cmd_predict(a):
    from .evaluation import compute_metrics
    from .io import atomic_write_text, load_checkpoint, load_dataset, restore_training
    from .model import attention_prior, empty_prior
    from .training import predict_samples
    from .types import CHANNELS

    data = load_dataset(a.data)
    mc, _, params, state, priors = restore_training(load_checkpoint(a.ckpt))
    if state is None:
        raise DPRGNetError(f"{a.ckpt} lacks the target scaling needed for prediction")
    prior = attention_prior(priors.partition.labels, mc) if priors is not None else empty_prior(mc)
    pred = predict_samples(params, mc, data.samples, prior, state.scaler)
    lines = []
    for i, (smp, y) in enumerate(zip(data.samples, pred)):
        lines.append(f"# sample {i} subject {smp.subject_id}")
        lines.append("frame," + ",".join(CHANNELS))
        lines.extend(f"{t}," + ",".join(f"{v:.9g}" for v in row) for t, row in enumerate(y))
    target = np.stack([s.targets for s in data.samples])
    metrics = compute_metrics(pred, target)
    lines.append("# metrics channel,r,rmse,nrmse")
    lines.extend(f"# {c},{r:.6f},{e:.6g},{n:.4f}" for c, r, e, n in
                 zip(CHANNELS, metrics.r, metrics.rmse, metrics.nrmse))
    atomic_write_text(a.out, "\n".join(lines) + "\n")
    print(f"wrote predictions for {len(pred)} samples to {a.out}; mean NRMSE {metrics.mean_nrmse:.3f}%")
    return 0


def cmd_gradcheck(a):
    from .model import VARIANTS
    from .training import model_gradcheck

    variants = VARIANTS if a.variant == "all" else (a.variant,)
    worst = 0.0
    for v in variants:
        err, _ = model_gradcheck(v, seed=a.seed)
        print(f"{v}: max relative error {err:.3e}")
        worst = max(worst, err)
    return 0 if worst < 1e-4 else 1


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "priors": cmd_priors,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = _settings(args)
        return COMMANDS[args.command](settings)
    except (DPRGNetError, OSError, ValueError, KeyError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"dprgnet {args.command}: error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
