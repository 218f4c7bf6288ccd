"""``ambiforge`` command line: ATF synthesis, encoder design, data, training, evaluation.

Usage::

    ambiforge <command> --config run.json [--seed N] [--profile desk|paper]

The configuration is one JSON document merged over the selected profile.
Any value can be overridden from the environment with
``AMBIFORGE_<SECTION>__<KEY>=<json value>``, e.g.
``AMBIFORGE_TRAINING__EPOCHS=5``.

Exit codes: 0 success, 1 user error (bad config, missing inputs), 2 internal error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

__all__ = ["PROFILES", "ConfigError", "load_config", "main"]

log = logging.getLogger("ambiforge")

_PAPER = {
    "paths": {
        "work_dir": "work",
        "atf": "atf.bin",
        "linear": "linear.enc",
        "dataset": "dataset",
        "models": "models",
        "evaluation": "evaluation",
        "report": "report",
    },
    "atf": {"source": "synthetic", "import_dir": None, "head_radius": 0.09, "grid_size": 960, "ir_length": 256,
            "sample_rate": 48000},
    "linear": {"order": 1, "max_gain_db": 20.0, "diffuse_eq": True},
    "dataset": {"num_scenes": 80000, "duration": 8.0, "split": [0.8, 0.1, 0.1], "seed": 0, "speech_ratio": 0.6,
                "max_image_order": 40, "speech_dir": None, "nonspeech_dir": None, "workers": 1},
    "training": {"epochs": 250, "batch_size": 128, "segment_seconds": 1.0, "lr": 1e-3, "lr_factor": 0.3,
                 "patience": 10, "seed": 0},
    "model": {"bins_per_block": 5, "hidden": 512, "gru_layers": 2, "modes": ["residual", "standalone"]},
    "eval": {"split": "test", "grid_size": 1296},
}

_DESK = copy.deepcopy(_PAPER)
_DESK["dataset"].update(num_scenes=200, duration=2.0, max_image_order=20)
_DESK["training"].update(epochs=30, batch_size=8)
_DESK["model"].update(hidden=64)

PROFILES = {"paper": _PAPER, "desk": _DESK}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, where="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k} must be an object")
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _env_overrides(env) -> dict:
    over: dict = {}
    for key, raw in env.items():
        if not key.startswith("AMBIFORGE_"):
            continue
        parts = key[len("AMBIFORGE_"):].lower().split("__")
        if len(parts) != 2:
            raise ConfigError(f"environment override {key} must look like AMBIFORGE_SECTION__KEY")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        over.setdefault(parts[0], {})[parts[1]] = value
    return over


def _validate(cfg: dict) -> None:
    split = cfg["dataset"]["split"]
    if len(split) != 3 or any(s < 0 for s in split) or abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError("dataset.split must be three non-negative fractions summing to 1")
    if cfg["training"]["segment_seconds"] > cfg["dataset"]["duration"]:
        raise ConfigError("training.segment_seconds exceeds dataset.duration")
    for key in ("epochs", "batch_size", "patience"):
        if int(cfg["training"][key]) < 1:
            raise ConfigError(f"training.{key} must be positive")
    if not 0 < cfg["training"]["lr_factor"] < 1:
        raise ConfigError("training.lr_factor must lie in (0, 1)")
    modes = cfg["model"]["modes"]
    if not modes or any(m not in ("residual", "standalone") for m in modes):
        raise ConfigError("model.modes must list 'residual' and/or 'standalone'")
    if cfg["atf"]["source"] not in ("synthetic", "wav"):
        raise ConfigError("atf.source must be 'synthetic' or 'wav'")
    if cfg["dataset"]["num_scenes"] < 1:
        raise ConfigError("dataset.num_scenes must be positive")


def load_config(path, profile="paper", seed=None, env=None) -> dict:
    """Profile defaults, then the file, then ``AMBIFORGE_*`` variables, then ``seed``."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        doc = json.loads(path.read_text() or "{}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = _merge(PROFILES[profile], doc)
    cfg = _merge(cfg, _env_overrides(os.environ if env is None else env))
    if seed is not None:
        cfg["dataset"]["seed"] = int(seed)
        cfg["training"]["seed"] = int(seed)
    _validate(cfg)
    work = Path(cfg["paths"]["work_dir"])
    if not work.is_absolute():
        work = path.parent / work
    cfg["_resolved"] = {k: str(work / v) for k, v in cfg["paths"].items() if k != "work_dir"}
    cfg["_resolved"]["work_dir"] = str(work)
    cfg["_profile"] = profile
    return cfg


def _path(cfg, key) -> Path:
    return Path(cfg["_resolved"][key])


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} {path} not found; run the upstream command first")
    return path


# commands

def cmd_gen_atf(cfg, args):
    from .atf import import_wav_folder, save_atf, synth_head_array_atf
    from .sphere import uniform_grid

    a = cfg["atf"]
    if a["source"] == "wav":
        if not a["import_dir"]:
            raise ConfigError("atf.import_dir is required for atf.source = 'wav'")
        atf = import_wav_folder(_require(Path(a["import_dir"]), "ATF folder"))
    else:
        atf = synth_head_array_atf(a["head_radius"], grid=uniform_grid(a["grid_size"]), fs=a["sample_rate"],
                                   ir_len=a["ir_length"])
    out = _path(cfg, "atf")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_atf(atf, out)
    print(f"wrote {out} ({atf.num_mics} mics, {len(atf.grid)} directions)")


def cmd_design_linear(cfg, args):
    from .atf import load_atf
    from .linenc import design_linear_encoder, save_encoder

    atf = load_atf(_require(_path(cfg, "atf"), "ATF set"))
    lin = cfg["linear"]
    max_gain = np.inf if lin["max_gain_db"] is None else float(lin["max_gain_db"])
    enc = design_linear_encoder(atf, lin["order"], max_gain, lin["diffuse_eq"])
    save_encoder(enc, _path(cfg, "linear"))
    print(f"wrote {_path(cfg, 'linear')} (order {enc.order}, max sigma {enc.max_singular_values().max():.4g})")


def cmd_gen_dataset(cfg, args):
    from .atf import load_atf
    from .roomsim import WavPool, generate_dataset

    atf = load_atf(_require(_path(cfg, "atf"), "ATF set"))
    d = cfg["dataset"]
    pool = WavPool(d["speech_dir"], d["nonspeech_dir"])
    manifest = generate_dataset(_path(cfg, "dataset"), atf, d["num_scenes"], d["duration"], d["seed"],
                                cfg["linear"]["order"], d["max_image_order"], tuple(d["split"]), pool,
                                d["workers"], d["speech_ratio"])
    sizes = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote {d['num_scenes']} scenes to {_path(cfg, 'dataset')} {sizes}")


def _settings(cfg, mode):
    from .training import TrainSettings

    t, m = cfg["training"], cfg["model"]
    return TrainSettings(int(t["epochs"]), int(t["batch_size"]), float(t["segment_seconds"]), float(t["lr"]),
                         float(t["lr_factor"]), int(t["patience"]), int(t["seed"]), mode,
                         {"bins_per_block": m["bins_per_block"], "hidden": m["hidden"], "gru_layers": m["gru_layers"]})


def cmd_train(cfg, args):
    from .linenc import load_encoder
    from .training import SceneStore, train

    enc = load_encoder(_require(_path(cfg, "linear"), "linear encoder"))
    data = _require(_path(cfg, "dataset"), "dataset")
    tr, va = SceneStore(data, "train"), SceneStore(data, "validation")
    if len(tr) == 0 or len(va) == 0:
        raise ConfigError("training and validation splits must both be non-empty")
    for mode in cfg["model"]["modes"]:
        out = _path(cfg, "models") / mode
        result = train(tr, va, enc, _settings(cfg, mode), out, resume=args.resume, stop_after=args.stop_after)
        print(f"{mode}: best validation loss {result['best_val']:.6g} -> {out / 'best'}")


def _encoders(cfg):
    from .linenc import load_encoder
    from .training import load_encoder_model

    enc = load_encoder(_require(_path(cfg, "linear"), "linear encoder"))
    models = {}
    for mode in cfg["model"]["modes"]:
        ck = _path(cfg, "models") / mode / "best.json"
        if ck.exists():
            models[mode] = load_encoder_model(ck.with_suffix(""), enc)
    return enc, models


def cmd_evaluate(cfg, args):
    from .linenc import apply_encoder
    from .objective import evaluate_signals, write_metrics_csv
    from .roomsim import load_scene
    from .sphere import uniform_grid
    from .stft import StftConfig, analyze, synthesize

    enc, models = _encoders(cfg)
    data = _require(_path(cfg, "dataset"), "dataset")
    manifest = json.loads(_require(data / "manifest.json", "dataset manifest").read_text())
    split = cfg["eval"]["split"]
    if split not in manifest["splits"]:
        raise ConfigError(f"unknown evaluation split {split!r}")
    grid = uniform_grid(cfg["eval"]["grid_size"])
    stft = StftConfig(sample_rate=enc.sample_rate)
    rows = []
    for name in manifest["splits"][split]:
        scene = load_scene(data / name)
        n = scene.array.shape[1]
        outputs = {"linear": synthesize(apply_encoder(enc, analyze(scene.array, stft)), n)}
        for mode, model in models.items():
            outputs[mode] = model.encode(scene.array, enc.sample_rate)
        for encoder_name, out in outputs.items():
            rows.append((name, encoder_name, evaluate_signals(scene.reference, out, stft, grid)))
    out_dir = _path(cfg, "evaluation")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out_dir / "scenes.csv", out_dir / "coherence_curves.csv")
    with open(out_dir / "scenes.jsonl", "w") as fh:
        for name, encoder_name, rep in rows:
            fh.write(json.dumps({"scene": name, "encoder": encoder_name, **json.loads(rep.to_json())}) + "\n")
    table = _aggregate(rows)
    _write_table(table, out_dir / "summary.csv")
    _print_table(table)


def _aggregate(rows):
    encoders = list(dict.fromkeys(e for _, e, _ in rows))
    table = []
    for e in encoders:
        reps = [r for _, name, r in rows if name == e]
        table.append({"encoder": e, "scenes": len(reps),
                      **{k: float(np.mean([r.summary()[k] for r in reps])) for k in reps[0].summary()}})
    return table


def _write_table(table, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        for row in table:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


def _print_table(table):
    print(f"{'encoder':<12}{'coh':>8}{'magerr_db':>11}{'sisdr_db':>10}{'spme_db':>10}")
    for r in table:
        print(f"{r['encoder']:<12}{r['coh']:>8.3f}{r['magerr_db']:>11.2f}{r['sisdr_db']:>10.2f}{r['spme_db']:>10.2f}")


def cmd_report(cfg, args):
    ev = _require(_path(cfg, "evaluation"), "evaluation directory")
    scenes = list(csv.DictReader(open(_require(ev / "scenes.csv", "per-scene metrics"))))
    out = _path(cfg, "report")
    out.mkdir(parents=True, exist_ok=True)

    table = []
    for e in dict.fromkeys(r["encoder"] for r in scenes):
        sel = [r for r in scenes if r["encoder"] == e]
        table.append({"encoder": e, "scenes": len(sel),
                      **{k: float(np.mean([float(r[k]) for r in sel])) for k in ("coh", "magerr_db", "sisdr_db",
                                                                                    "spme_db")}})
    _write_table(table, out / "table.csv")
    (out / "table.json").write_text(json.dumps({
        "rows": table,
        "coherence_weighting": "beta(f)/sum(beta) over bins, 1/((N+1)(2n+1)) over channels",
    }, indent=2))

    # mean coherence per (encoder, channel, frequency) over scenes
    acc: dict = {}
    with open(_require(ev / "coherence_curves.csv", "coherence curves")) as fh:
        for r in csv.DictReader(fh):
            key = (r["encoder"], int(r["channel"]), float(r["freq_hz"]))
            s, c = acc.get(key, (0.0, 0))
            acc[key] = (s + float(r["coherence"]), c + 1)
    with open(out / "coherence_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["encoder", "channel", "freq_hz", "coherence"])
        for (e, ch, f), (s, c) in sorted(acc.items()):
            w.writerow([e, ch, f"{f:.6g}", f"{s / c:.6g}"])
    encoders = list(dict.fromkeys(k[0] for k in acc))
    channels = sorted({k[1] for k in acc})
    lines = ["set datafile separator ','", "set logscale x", "set xlabel 'Frequency (Hz)'",
             "set ylabel 'Coherence'", "set yrange [0:1.05]", f"set multiplot layout {len(channels)},1"]
    for ch in channels:
        plots = [f"'< grep \"^{e},{ch},\" coherence_curves.csv' using 3:4 with lines title '{e}'" for e in encoders]
        lines += [f"set title 'ACN {ch}'", "plot " + ", ".join(plots)]
    lines.append("unset multiplot")
    (out / "coherence.gp").write_text("\n".join(lines) + "\n")
    _print_table(table)
    print(f"wrote report to {out}")


def cmd_encode(cfg, args):
    from .linenc import apply_encoder
    from .stft import StftConfig, analyze, read_wav, synthesize, write_wav

    if not args.input or not args.output:
        raise ConfigError("encode needs --input and --output")
    x, fs = read_wav(_require(Path(args.input), "input file"))
    enc, models = _encoders(cfg)
    if fs != enc.sample_rate:
        raise ConfigError(f"input sample rate {fs} differs from the design rate {enc.sample_rate}")
    if x.shape[0] != enc.num_mics:
        raise ConfigError(f"input has {x.shape[0]} channels, the array has {enc.num_mics}")
    if args.encoder == "linear":
        y = synthesize(apply_encoder(enc, analyze(x, StftConfig(sample_rate=fs))), x.shape[1])
    else:
        if args.encoder not in models:
            raise FileNotFoundError(f"no trained {args.encoder} model; run train first")
        y = models[args.encoder].encode(x, fs)
    write_wav(args.output, y, int(fs))
    print(f"wrote {args.output} ({y.shape[0]} channels, ACN/N3D)")


COMMANDS = {
    "gen-atf": cmd_gen_atf,
    "design-linear": cmd_design_linear,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "encode": cmd_encode,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ambiforge", description="Ambisonic encoder design, training and evaluation.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--seed", type=int, help="overrides dataset and training seeds")
    p.add_argument("--profile", choices=sorted(PROFILES), default="paper")
    p.add_argument("--resume", action="store_true", help="train: continue from the last checkpoint")
    p.add_argument("--stop-after", type=int, help="train: stop after this many epochs in this run")
    p.add_argument("--input", help="encode: microphone-array WAV")
    p.add_argument("--output", help="encode: output Ambisonic WAV")
    p.add_argument("--encoder", default="residual", choices=["linear", "residual", "standalone"])
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.profile, args.seed)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"internal error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
