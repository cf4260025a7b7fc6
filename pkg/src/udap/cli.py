"""Command line entry point: one subcommand per pipeline stage.

Every stage reads the resolved run configuration (defaults < --config file <
flags), consumes earlier artifacts by path and writes its outputs plus a
summary.json echoing the configuration under --out. Failures print a JSON
error object on stderr (also saved as error.json under --out) and exit
nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, config, evalreport, models, storage
from .attacks import AttackSpec, _Objective, run_attack
from .ddim import recon_error
from .diffnum import Tensor, no_grad
from .purify import PurifyConfig, calibrate_tau, purify_batch

log = logging.getLogger("udap")

EXIT_ERROR = 1
EXIT_CONFIG = 2

# per subcommand: flag name -> (dotted config key, type)
_FLAGS: dict[str, dict[str, tuple[str, type]]] = {
    "gen-data": {"n": ("data.n", int), "seed": ("data.seed", int), "kind": ("data.kind", str)},
    "train-ae": {
        "epochs": ("codec.epochs", int),
        "hidden": ("codec.hidden", int),
        "latent-channels": ("codec.latent_channels", int),
        "batch-size": ("codec.batch_size", int),
        "lr": ("codec.lr", float),
        "T": ("schedule.T", int),
        "beta-start": ("schedule.beta_start", float),
        "beta-end": ("schedule.beta_end", float),
        "train-steps": ("schedule.train_steps", int),
    },
    "train-denoiser": {
        "steps": ("denoiser.steps", int),
        "batch-size": ("denoiser.batch_size", int),
        "lr": ("denoiser.lr", float),
    },
    "attack": {
        "family": ("attack.family", str),
        "xi": ("attack.xi", float),
        "steps": ("attack.steps", int),
        "step-size": ("attack.step_size", float),
        "lambda": ("attack.lambda", float),
        "t-hat": ("purify.t_hat", int),
    },
    "calibrate": {"t-hat": ("purify.t_hat", int), "strided": ("purify.strided", bool)},
    "purify": {
        "tau": ("purify.tau", float),
        "k": ("purify.K", int),
        "t-hat": ("purify.t_hat", int),
        "lr": ("purify.lr", float),
        "gate": ("purify.gate", bool),
        "strided": ("purify.strided", bool),
    },
    "recon-gap": {"t-hat": ("purify.t_hat", int), "strided": ("purify.strided", bool)},
    "eval": {"t-hat": ("purify.t_hat", int), "strided": ("purify.strided", bool)},
    "sweep-tau": {
        "tau": ("purify.tau", float),
        "taus": ("sweep.taus", float),
        "relative": ("sweep.relative", bool),
        "k": ("purify.K", int),
        "t-hat": ("purify.t_hat", int),
        "lr": ("purify.lr", float),
    },
}

# path arguments per subcommand: flag -> (config key or None, required)
_PATHS: dict[str, dict[str, tuple[str | None, bool]]] = {
    "gen-data": {},
    "train-ae": {"data": ("paths.data", True)},
    "train-denoiser": {"data": ("paths.data", True), "bundle": ("paths.bundle", True)},
    "attack": {"bundle": ("paths.bundle", True), "images": ("paths.images", True)},
    "calibrate": {"bundle": ("paths.bundle", True), "images": ("paths.images", True)},
    "purify": {"bundle": ("paths.bundle", True), "images": ("paths.images", True)},
    "recon-gap": {"bundle": ("paths.bundle", True), "clean": (None, True), "adversarial": (None, True)},
    "eval": {"bundle": ("paths.bundle", True), "clean": (None, True), "adversarial": (None, True), "purified": (None, False)},
    "sweep-tau": {"bundle": ("paths.bundle", True), "images": ("paths.images", True)},
}


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="udap", description="Latent purification of adversarial images by DDIM inversion.")
    parser.add_argument("--version", action="version", version=f"udap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in _FLAGS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--verbose", "-v", action="store_true")
        if name != "gen-data":
            p.add_argument("--seed", dest="global_seed", type=int, help="run seed (falls back to $UDAP_SEED)")
        if name in ("attack", "purify", "sweep-tau", "recon-gap", "eval"):
            p.add_argument("--workers", type=int, default=1)
        for flag, (key, typ) in flags.items():
            dest = "o_" + key.replace(".", "__")
            if flag == "taus":
                p.add_argument(f"--{flag}", dest=dest, type=float, nargs="+")
            else:
                p.add_argument(f"--{flag}", dest=dest, type=_bool if typ is bool else typ)
        for flag, (_, required) in _PATHS[name].items():
            p.add_argument(f"--{flag}", dest=f"p_{flag}", help=("required" if required else "optional") + " path")
    return parser


def _resolve(args) -> dict:
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise config.ConfigError("config", f"file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise config.ConfigError("config", f"invalid JSON in {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise config.ConfigError("<root>", "config must be a JSON object")
    overrides: dict = {}
    env_seed = os.environ.get("UDAP_SEED")
    if getattr(args, "global_seed", None) is not None:
        overrides["seed"] = args.global_seed
    elif env_seed is not None and "seed" not in file_cfg:
        try:
            overrides["seed"] = int(env_seed)
        except ValueError:
            raise config.ConfigError("UDAP_SEED", f"expected an integer, got {env_seed!r}") from None
    for key, value in vars(args).items():
        if key.startswith("o_") and value is not None:
            config.set_path(overrides, key[2:].replace("__", "."), value)
    for flag, (key, _) in _PATHS[args.command].items():
        value = getattr(args, f"p_{flag}")
        if key and value is not None:
            config.set_path(overrides, key, value)
    if args.out is not None:
        config.set_path(overrides, "paths.out", args.out)
    return config.resolve(file_cfg, overrides)


def _path(args, cfg: dict, flag: str) -> Path | None:
    key, required = _PATHS[args.command][flag]
    value = getattr(args, f"p_{flag}")
    if value is None and key:
        section, leaf = key.split(".")
        value = cfg[section][leaf]
    if value is None and required:
        raise UsageError(f"--{flag} is required for {args.command}")
    return Path(value) if value is not None else None


def _out_dir(cfg: dict) -> Path:
    if cfg["paths"]["out"] is None:
        raise UsageError("--out is required")
    return Path(cfg["paths"]["out"])


def _purify_cfg(cfg: dict, tau: float | None = None) -> PurifyConfig:
    p = cfg["purify"]
    return PurifyConfig(
        tau=p["tau"] if tau is None else tau,
        max_epochs=p["K"],
        t_hat=p["t_hat"],
        lr=p["lr"],
        seed=cfg["seed"],
        gate=p["gate"],
        strided=p["strided"],
    )


def _bundle_meta(bundle) -> dict:
    den = bundle.denoiser
    return {
        "schedule_T": bundle.schedule.T,
        "codec_heldout_mse": bundle.codec.heldout_mse,
        "codec_epochs": bundle.codec.trained_epochs,
        "denoiser_steps": getattr(den, "trained_steps", 0),
        "denoiser_val_loss": getattr(den, "val_loss", None),
        "metadata": bundle.metadata,
    }


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------- stages


def cmd_gen_data(args, cfg) -> dict:
    d = cfg["data"]
    out = _out_dir(cfg)
    ims = evalreport.gen_procedural_corpus(d["n"], d["seed"], d["kind"])
    storage.write_image_dir(out / "images", [f"{i:04d}" for i in range(len(ims))], ims.images)
    return {"images": str(out / "images"), "n": len(ims), "pixel_mean": float(np.mean(ims.images))}


def cmd_train_ae(args, cfg) -> dict:
    _, images = storage.read_image_dir(_path(args, cfg, "data"))
    c, s = cfg["codec"], cfg["schedule"]
    schedule = models.make_linear_schedule(s["T"], s["beta_start"], s["beta_end"], train_steps=s["train_steps"])
    codec = models.train_autoencoder(
        images, c["epochs"], cfg["seed"], identity=c["identity"], latent_channels=c["latent_channels"],
        hidden=c["hidden"], batch_size=c["batch_size"], lr=c["lr"],
    )
    bundle = models.ModelBundle(schedule, codec, models.ConstantDenoiser(codec.latent_shape, 0.0, schedule.T),
                                {"schedule": s, "codec": c, "seed": cfg["seed"], "n_train": len(images)})
    out = storage.save_bundle(bundle, _out_dir(cfg))
    return {"bundle": str(out), "heldout_mse": codec.heldout_mse}


def cmd_train_denoiser(args, cfg) -> dict:
    _, images = storage.read_image_dir(_path(args, cfg, "data"))
    bundle = storage.load_bundle(_path(args, cfg, "bundle"))
    d = cfg["denoiser"]
    den = models.train_denoiser(bundle.codec, bundle.schedule, images, d["steps"], cfg["seed"],
                                batch_size=d["batch_size"], lr=d["lr"])
    meta = dict(bundle.metadata, denoiser=d, denoiser_seed=cfg["seed"])
    out = storage.save_bundle(models.ModelBundle(bundle.schedule, bundle.codec, den, meta), _out_dir(cfg))
    return {"bundle": str(out), "val_loss": den.val_loss}


def _attack_spec(cfg: dict, seed: int) -> AttackSpec:
    a = cfg["attack"]
    return AttackSpec(family=a["family"], xi=a["xi"], steps=a["steps"], step_size=a["step_size"],
                      hybrid_weight=a["lambda"], seed=seed, t_hat=cfg["purify"]["t_hat"])


def cmd_attack(args, cfg) -> dict:
    bundle = storage.load_bundle(_path(args, cfg, "bundle"))
    ids, images = storage.read_image_dir(_path(args, cfg, "images"))
    out = _out_dir(cfg)

    def one(i):
        return run_attack(Tensor(images[i : i + 1]), bundle, _attack_spec(cfg, cfg["seed"] + i))

    results = _map(one, range(len(ids)), args.workers)
    label = f"adversarial:{cfg['attack']['family']}"
    rows, reports = [], {}
    for image_id, (xa, rep) in zip(ids, results):
        reports[image_id] = rep
        rows.append((image_id, label, "objective", rep.best_curve[-1] if rep.best_curve else 0.0))
        rows.append((image_id, label, "delta_linf", rep.final_delta_linf))
        rows.append((image_id, label, "measured_gap", rep.measured_gap))
    storage.write_image_dir(out / "images", ids, [r[0].data[0] for r in results])
    evalreport.emit_report(out, rows, attack_reports=reports, extra=_extra(cfg, bundle))
    return {"images": str(out / "images")}


def cmd_calibrate(args, cfg) -> dict:
    bundle = storage.load_bundle(_path(args, cfg, "bundle"))
    ids, images = storage.read_image_dir(_path(args, cfg, "images"))
    tau = calibrate_tau(images, bundle, cfg["purify"]["t_hat"], cfg["purify"]["strided"])
    print(json.dumps({"tau": tau}))
    if cfg["paths"]["out"] is not None:
        evalreport.emit_report(_out_dir(cfg), [], extra=dict(_extra(cfg, bundle), tau=tau, n_images=len(ids)))
    return {"tau": tau}


def cmd_purify(args, cfg) -> dict:
    bundle = storage.load_bundle(_path(args, cfg, "bundle"))
    ids, images = storage.read_image_dir(_path(args, cfg, "images"))
    out = _out_dir(cfg)
    res = purify_batch(images, bundle, _purify_cfg(cfg), workers=args.workers)
    rows = []
    for image_id, tr in zip(ids, res.traces):
        rows.append((image_id, "purified", "initial_loss", tr.initial_loss))
        rows.append((image_id, "purified", "final_loss", tr.final_loss))
        rows.append((image_id, "purified", "epochs_run", float(tr.epochs_run)))
    storage.write_image_dir(out / "images", ids, res.images)
    extra = dict(_extra(cfg, bundle), wall_time_ms=res.wall_time_ms, failed=[ids[i] for i in res.failed],
                 terminations={k: sum(t.termination == k for t in res.traces) for k in sorted({t.termination for t in res.traces})})
    evalreport.emit_report(out, rows, traces=dict(zip(ids, res.traces)), extra=extra)
    return {"images": str(out / "images"), "failed": len(res.failed)}


def cmd_recon_gap(args, cfg) -> dict:
    bundle = storage.load_bundle(_path(args, cfg, "bundle"))
    cids, clean = storage.read_image_dir(_path(args, cfg, "clean"))
    aids, adv = storage.read_image_dir(_path(args, cfg, "adversarial"))
    out = _out_dir(cfg)
    rep = evalreport.recon_gap(clean, adv, bundle, cfg["purify"]["t_hat"], strided=cfg["purify"]["strided"])
    ids = cids + aids
    rows = [(ids[i], lab, "recon_l2", err) for i, (lab, err) in enumerate(zip(rep.labels, rep.errors))]
    extra = dict(_extra(cfg, bundle), gap_ratio=rep.gap_ratio, group_median=rep.group_median, group_mean=rep.group_mean)
    evalreport.emit_report(out, rows, extra=extra)
    return {"gap_ratio": rep.gap_ratio}


def denoiser_objective(images: np.ndarray, bundle, t_hat: int, seed: int = 0) -> list[float]:
    """Fixed-panel denoiser attack objective of each image at its own encoding."""
    spec = AttackSpec(family="denoiser", seed=seed, t_hat=t_hat)
    vals = []
    with no_grad():
        for im in images:
            x = Tensor(im[None])
            obj = _Objective(x, bundle, spec, np.random.default_rng(seed))
            vals.append(obj.denoiser_panel(bundle.codec.encode(x).data))
    return vals


def cmd_eval(args, cfg) -> dict:
    bundle = storage.load_bundle(_path(args, cfg, "bundle"))
    t_hat, strided = cfg["purify"]["t_hat"], cfg["purify"]["strided"]
    groups = {"clean": storage.read_image_dir(_path(args, cfg, "clean")),
              "adversarial": storage.read_image_dir(_path(args, cfg, "adversarial"))}
    purified = _path(args, cfg, "purified")
    if purified is not None:
        groups["purified"] = storage.read_image_dir(purified)
    clean_ids, clean = groups["clean"]
    rows = []
    for label, (ids, imgs) in groups.items():
        if imgs.shape != clean.shape:
            raise ValueError(f"{label} images {imgs.shape} do not pair with clean images {clean.shape}")
        errs = _map(lambda im: recon_error(Tensor(im[None]), bundle, t_hat, strided), list(imgs), args.workers)
        objs = denoiser_objective(imgs, bundle, t_hat, cfg["seed"])
        pairs = evalreport.image_metrics(imgs, clean)
        for image_id, e, o, m in zip(ids, errs, objs, pairs):
            rows += [(image_id, label, "recon_l2", e), (image_id, label, "denoiser_objective", o),
                     (image_id, label, "mse_vs_clean", m["mse"]), (image_id, label, "psnr_vs_clean", m["psnr"])]
    evalreport.emit_report(_out_dir(cfg), rows, extra=_extra(cfg, bundle))
    return {"groups": sorted(groups)}


def sweep_taus(cfg: dict) -> list[float]:
    taus = [float(t) for t in cfg["sweep"]["taus"]]
    if cfg["sweep"]["relative"]:
        # the list is read on the reference scale where the default tau is 4e-3
        factor = cfg["purify"]["tau"] / config.DEFAULTS["purify"]["tau"]
        taus = [t * factor for t in taus]
    return taus


def cmd_sweep_tau(args, cfg) -> dict:
    bundle = storage.load_bundle(_path(args, cfg, "bundle"))
    ids, images = storage.read_image_dir(_path(args, cfg, "images"))
    rows, table = [], []
    for tau in sweep_taus(cfg):
        res = purify_batch(images, bundle, _purify_cfg(cfg, tau), workers=args.workers)
        label = f"tau={tau!r}"
        for image_id, tr in zip(ids, res.traces):
            rows.append((image_id, label, "epochs_run", float(tr.epochs_run)))
            rows.append((image_id, label, "final_loss", tr.final_loss))
        table.append({
            "tau": tau,
            "mean_epochs": float(np.mean([t.epochs_run for t in res.traces])),
            "mean_final_loss": float(np.mean([t.final_loss for t in res.traces])),
            "threshold_met": sum(t.termination in ("threshold_met", "already_clean") for t in res.traces),
        })
    evalreport.emit_report(_out_dir(cfg), rows, extra=dict(_extra(cfg, bundle), sweep=table))
    for row in table:
        print(json.dumps(row))
    return {"sweep": table}


def _extra(cfg: dict, bundle=None) -> dict:
    doc = {"config": cfg, "version": __version__}
    if bundle is not None:
        doc["bundle"] = _bundle_meta(bundle)
    return doc


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "train-denoiser": cmd_train_denoiser,
    "attack": cmd_attack,
    "calibrate": cmd_calibrate,
    "purify": cmd_purify,
    "recon-gap": cmd_recon_gap,
    "eval": cmd_eval,
    "sweep-tau": cmd_sweep_tau,
}

# stages whose report already carries the config echo
_SELF_REPORTING = {"attack", "calibrate", "purify", "recon-gap", "eval", "sweep-tau"}


def _fail(out, kind: str, message: str, code: int, **fields) -> int:
    doc = {"error": kind, "message": message, **fields}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    if out is not None:
        try:
            storage.atomic_write(Path(out) / "error.json", (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not hasattr(args, "workers"):
        args.workers = 1
    if args.workers < 1:
        return _fail(args.out, "usage", "--workers must be >= 1", EXIT_CONFIG)
    try:
        cfg = _resolve(args)
    except config.ConfigError as exc:
        return _fail(args.out, "config", exc.message, EXIT_CONFIG, field=exc.field)
    start = time.perf_counter()
    try:
        result = COMMANDS[args.command](args, cfg)
    except config.ConfigError as exc:
        return _fail(args.out, "config", exc.message, EXIT_CONFIG, field=exc.field)
    except UsageError as exc:
        return _fail(args.out, "usage", str(exc), EXIT_CONFIG)
    except FileNotFoundError as exc:
        return _fail(args.out, "missing_dependency", str(exc), EXIT_ERROR)
    except (ValueError, storage.CheckpointError, OSError) as exc:
        return _fail(args.out, type(exc).__name__, str(exc), EXIT_ERROR)
    if args.command not in _SELF_REPORTING:
        evalreport.write_json(_out_dir(cfg) / "summary.json", dict(_extra(cfg), result=result))
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
