"""Command-line pipeline: gen-data, pretrain, finetune, eval, calibrate,
rollout, mcnemar.

All progress goes to stdout as line-oriented ``key=value`` records; file
artifacts (containers, checkpoints, CSV logs, JSON reports) land in the
``--out`` directory and never embed timestamps, so identical config and
seed reproduce identical bytes.

Exit codes: 0 success, 1 input/usage error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import RunConfig
from .data import (ImageContainer, arrays_to_params, config_from_snapshot,
                   generate_synthetic, load_checkpoint, normalize_images,
                   params_to_arrays, save_checkpoint, stratified_split,
                   write_csv)
from .errors import (CheckpointManifestError, ConfigError, HVTError,
                     InputError)
from .finetune import finetune_loop, predict_proba, tta_predict
from .metrics import (PredictionSet, apply_temperature, classification_metrics,
                      ece, fit_temperature, nll, reliability_bins)
from .model import attention_rollout, forward, init_params, param_shapes
from .optim import ema_weights
from .ssl import init_projection_head, pretrain_loop
from .tensor import RngStream, Tensor, no_grad


class _UsageError(InputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{message}\n{self.format_usage()}")


def emit(**kv):
    parts = []
    for k, v in kv.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        parts.append(f"{k}={v}")
    print(" ".join(parts))


def _run_config(args):
    return RunConfig.load(args.config) if args.config else RunConfig()


def _outdir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _model_from_checkpoint(path, eval_only=True):
    """Load a checkpoint into model params, verifying the shape manifest."""
    arrays, snapshot, meta = load_checkpoint(path)
    config = config_from_snapshot(snapshot)
    if config is None:
        raise CheckpointManifestError(f"{path}: checkpoint has no config snapshot")
    expected = param_shapes(config)
    missing = sorted(k for k in expected if k not in arrays)
    wrong = sorted(k for k in expected
                   if k in arrays and tuple(arrays[k].shape) != tuple(expected[k]))
    if missing or wrong:
        raise CheckpointManifestError(
            f"{path}: manifest does not satisfy the model "
            f"(missing={missing}, wrong-shape={wrong})")
    params = {k: Tensor(arrays[k], requires_grad=not eval_only) for k in expected}
    return params, config, meta


def _predictions(params, config, container, run_cfg):
    if container.labels.min() < 0:
        raise InputError("evaluation needs a labeled container")
    mean, std = run_cfg.norm_stats()
    ev = run_cfg.values["eval"]
    if ev["tta"]:
        probs = np.stack([
            tta_predict(img, params, config, crop_ratio=float(ev["tta_crop_ratio"]),
                        norm_mean=mean, norm_std=std)
            for img in container.images])
    else:
        probs = predict_proba(normalize_images(container.images, np.asarray(mean),
                                               np.asarray(std)),
                              params, config, batch=int(ev["batch_size"]))
    return PredictionSet.from_probs(container.labels, probs)


# ----------------------------------------------------------------------
# subcommands

def cmd_gen_data(args):
    run_cfg = _run_config(args)
    config = run_cfg.model_config()
    out = _outdir(args)
    labeled, unlabeled = generate_synthetic(
        args.n_per_class, classes=config.num_classes,
        size=config.input_size, seed=args.seed, n_unlabeled=args.n_unlabeled)
    train, val, test = stratified_split(labeled, seed=args.seed)
    for name, cont in (("train", train), ("val", val), ("test", test),
                       ("unlabeled", unlabeled)):
        path = os.path.join(out, f"{name}.hvtimg")
        cont.save(path)
        emit(event="container", split=name, path=path, count=len(cont))
    return 0


def cmd_pretrain(args):
    run_cfg = _run_config(args)
    config = run_cfg.model_config()
    settings = run_cfg.pretrain_settings()
    out = _outdir(args)
    data = ImageContainer.load(args.data)
    if data.image_shape[:2] != config.input_size:
        raise InputError(f"container images {data.image_shape[:2]} do not match "
                         f"model input {config.input_size}")
    rng = RngStream(args.seed)
    params = init_params(config, rng)
    head = init_projection_head(config.dims[-1], rng,
                                hidden=settings.proj_hidden,
                                out_dim=settings.proj_dim)
    emit(event="pretrain_start", images=len(data), steps=settings.max_steps or "all")
    result = pretrain_loop(params, head, data.images, config, settings,
                           rng.child("pretrain"), out_dir=out)
    for row in result.log:
        emit(event="pretrain_step", **row)
    emit(event="pretrain_done", steps=len(result.log),
         final_loss=result.log[-1]["loss"] if result.log else float("nan"),
         checkpoint=result.checkpoints[-1] if result.checkpoints else "")
    return 0


def cmd_finetune(args):
    run_cfg = _run_config(args)
    config = run_cfg.model_config()
    settings = run_cfg.finetune_settings()
    out = _outdir(args)
    train = ImageContainer.load(args.train)
    val = ImageContainer.load(args.val)
    rng = RngStream(args.seed)
    params = init_params(config, rng)
    if args.init:
        arrays, snapshot, _ = load_checkpoint(args.init)
        expected = param_shapes(config)
        loaded = 0
        for name, shape in expected.items():
            if name in arrays:
                if tuple(arrays[name].shape) != tuple(shape):
                    raise CheckpointManifestError(
                        f"{args.init}: {name} has shape {arrays[name].shape}, "
                        f"model needs {shape}")
                params[name].data = arrays[name].astype(np.float32, copy=True)
                loaded += 1
        emit(event="init_loaded", path=args.init, tensors=loaded)
    emit(event="finetune_start", train=len(train), val=len(val))
    result = finetune_loop(params, train, val, config, settings,
                           rng.child("finetune"), out_dir=out)
    for row in result.log:
        emit(event="finetune_epoch", **row)
    emit(event="finetune_done", best_epoch=result.best_epoch,
         best_val_acc=result.best_val_acc)
    return 0


def cmd_eval(args):
    run_cfg = _run_config(args)
    out = _outdir(args)
    if args.preds:
        preds = PredictionSet.load_csv(args.preds)
    else:
        if not (args.checkpoint and args.data):
            raise _UsageError("eval needs either --preds or --checkpoint with --data")
        params, config, _ = _model_from_checkpoint(args.checkpoint)
        container = ImageContainer.load(args.data)
        preds = _predictions(params, config, container, run_cfg)
        preds.save_csv(os.path.join(out, "predictions.csv"))
    report = classification_metrics(preds)
    bins = int(run_cfg.get("eval", "ece_bins"))
    payload = report.to_dict()
    payload["ece"] = ece(preds, bins=bins)
    with open(os.path.join(out, "metrics.json"), "w") as f:
        f.write(json.dumps(payload, sort_keys=True, indent=2))
    write_csv(os.path.join(out, "reliability_bins.csv"),
              reliability_bins(preds, bins=bins).rows(),
              ("bin", "lo", "hi", "count", "mean_confidence", "accuracy"))
    emit(event="eval_done", n=report.n, accuracy=report.accuracy,
         macro_f1=report.macro_f1, ece=payload["ece"])
    return 0


def _logits_for_calibration(args, run_cfg):
    """(val_logits, val_labels, test_logits, test_labels) from either CSVs
    or a checkpoint plus containers. CSV probabilities enter as log-probs,
    which shifts logits per row but leaves temperature fitting unchanged."""
    if args.val_preds:
        val = PredictionSet.load_csv(args.val_preds)
        test = PredictionSet.load_csv(args.test_preds) if args.test_preds else None
        v = np.log(np.clip(val.probs, 1e-12, None))
        t = np.log(np.clip(test.probs, 1e-12, None)) if test is not None else None
        return v, val.y_true, t, (test.y_true if test is not None else None)
    if not (args.checkpoint and args.val):
        raise _UsageError("calibrate needs --val-preds or --checkpoint with --val")
    params, config, _ = _model_from_checkpoint(args.checkpoint)
    mean, std = run_cfg.norm_stats()

    def logits_of(path):
        cont = ImageContainer.load(path)
        if cont.labels.min() < 0:
            raise InputError("calibration needs labeled containers")
        x = normalize_images(cont.images, np.asarray(mean), np.asarray(std))
        outs = []
        with no_grad():
            for s in range(0, len(x), 64):
                outs.append(forward(x[s:s + 64], params, config).logits.numpy())
        return np.concatenate(outs), cont.labels

    v, vy = logits_of(args.val)
    if args.test:
        t, ty = logits_of(args.test)
    else:
        t, ty = None, None
    return v, vy, t, ty


def cmd_calibrate(args):
    run_cfg = _run_config(args)
    out = _outdir(args)
    val_logits, val_y, test_logits, test_y = _logits_for_calibration(args, run_cfg)
    bins = int(run_cfg.get("eval", "ece_bins"))
    t_star, degenerate = fit_temperature(val_logits, val_y)
    payload = {
        "temperature": t_star,
        "degenerate": degenerate,
        "val_nll_before": nll(val_logits, val_y, 1.0),
        "val_nll_after": nll(val_logits, val_y, t_star),
        "val_ece_before": ece(PredictionSet.from_probs(
            val_y, apply_temperature(val_logits, 1.0)), bins=bins),
        "val_ece_after": ece(PredictionSet.from_probs(
            val_y, apply_temperature(val_logits, t_star)), bins=bins),
    }
    if test_logits is not None:
        before = PredictionSet.from_probs(test_y, apply_temperature(test_logits, 1.0))
        after = PredictionSet.from_probs(test_y, apply_temperature(test_logits, t_star))
        payload["test_ece_before"] = ece(before, bins=bins)
        payload["test_ece_after"] = ece(after, bins=bins)
        after.save_csv(os.path.join(out, "test_predictions_calibrated.csv"))
    with open(os.path.join(out, "calibration.json"), "w") as f:
        f.write(json.dumps(payload, sort_keys=True, indent=2))
    emit(event="calibrate_done", temperature=t_star,
         val_ece_before=payload["val_ece_before"],
         val_ece_after=payload["val_ece_after"])
    return 0


def cmd_rollout(args):
    _run_config(args)
    out = _outdir(args)
    params, config, _ = _model_from_checkpoint(args.checkpoint)
    container = ImageContainer.load(args.data)
    if not 0 <= args.index < len(container):
        raise InputError(f"--index {args.index} outside container of {len(container)}")
    image = container.images[args.index]
    with no_grad():
        res = forward(image, params, config, capture="final")
    grid_map, full_map = attention_rollout(res.record)
    np.savetxt(os.path.join(out, "rollout_grid.csv"), grid_map,
               delimiter=",", fmt="%.9g")
    np.savetxt(os.path.join(out, "rollout_full.csv"), full_map,
               delimiter=",", fmt="%.9g")
    pred = int(np.argmax(res.logits.numpy()))
    emit(event="rollout_done", index=args.index, predicted=pred,
         grid=f"{grid_map.shape[0]}x{grid_map.shape[1]}",
         full=f"{full_map.shape[0]}x{full_map.shape[1]}",
         lo=float(full_map.min()), hi=float(full_map.max()))
    return 0


def cmd_mcnemar(args):
    from .metrics import mcnemar_test
    out = _outdir(args)
    a = PredictionSet.load_csv(args.preds_a)
    b = PredictionSet.load_csv(args.preds_b)
    if len(a.y_true) != len(b.y_true) or not np.array_equal(a.y_true, b.y_true):
        raise InputError("mcnemar needs predictions over the same test items")
    stat, p = mcnemar_test(a.y_pred == a.y_true, b.y_pred == b.y_true)
    payload = {"b": int(np.sum((a.y_pred == a.y_true) & (b.y_pred != b.y_true))),
               "c": int(np.sum((a.y_pred != a.y_true) & (b.y_pred == b.y_true))),
               "statistic": stat, "p_value": p,
               "significant_at_0.05": bool(p < 0.05)}
    with open(os.path.join(out, "mcnemar.json"), "w") as f:
        f.write(json.dumps(payload, sort_keys=True, indent=2))
    emit(event="mcnemar_done", statistic=stat, p_value=p)
    return 0


# ----------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="hvt", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--config", help="run-config file (defaults built in)")
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--out", required=True, help="artifact directory")

    p = sub.add_parser("gen-data", parents=[], help="generate synthetic datasets")
    common(p)
    p.add_argument("--n-per-class", type=int, default=20)
    p.add_argument("--n-unlabeled", type=int, default=128)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="contrastive pre-training")
    common(p)
    p.add_argument("--data", required=True, help="unlabeled container")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--init", help="checkpoint to warm-start from")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="metrics from predictions or a model")
    common(p)
    p.add_argument("--preds", help="prediction-set CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="labeled container")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("calibrate", help="temperature scaling")
    common(p)
    p.add_argument("--val-preds")
    p.add_argument("--test-preds")
    p.add_argument("--checkpoint")
    p.add_argument("--val")
    p.add_argument("--test")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("rollout", help="attention relevance heatmap")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("mcnemar", help="paired significance test")
    common(p)
    p.add_argument("--preds-a", required=True)
    p.add_argument("--preds-b", required=True)
    p.set_defaults(fn=cmd_mcnemar)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            print(parser.format_usage(), end="")
            return 1
        return args.fn(args)
    except _UsageError as e:
        print(str(e))
        return 1
    except (InputError, ConfigError, OSError) as e:
        emit(event="error", kind=type(e).__name__)
        print(f"error: {e}")
        return 1
    except HVTError as e:
        emit(event="internal_error", kind=type(e).__name__)
        print(f"internal error: {e}")
        return 2
    except Exception as e:  # noqa: BLE001 - exit-code contract
        emit(event="internal_error", kind=type(e).__name__)
        print(f"internal error: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
