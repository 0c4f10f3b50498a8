"""Command-line pipeline: synth, calibrate, train, eval, bench, stream, label.

Options resolve in three layers (defaults, then a JSON config file, then
explicit flags); the resolved configuration and input-file hashes are
written next to every artifact so a run can be reproduced byte for byte.
Exit codes: 0 success, 2 configuration errors, 3 runtime errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluate, mlp, synth
from .errors import ConfigError, LoudnetError
from .frontend import (DEFAULT_DFT_SIZE, DEFAULT_HOP, CalibrationSpec,
                       frame_matrix, read_spectra, read_wav, reduce_block)
from .oracle import LoudnessOracle

CONFIG_ENV_VAR = "LOUDNET_CONFIG"

DEFAULTS: dict[str, dict] = {
    "calibrate": {"out": "calibration.json", "ear": None},
    "synth": {"out": "datasets", "seed": 0, "tones": 0, "noises": 0, "notched": 0,
              "wav": [], "wav_category": "speech", "spl": None, "calib": None,
              "workers": 1, "hop": DEFAULT_HOP, "dft": DEFAULT_DFT_SIZE},
    "train": {"data": [], "out": "run", "epochs": "220,780", "batch": 256,
              "lr": 1e-3, "seed": 0, "init_seed": 0, "resume": None,
              "verbose": False},
    "eval": {"model": None, "data": [], "out": "report", "calib": None,
             "bin_width": 1.0, "train_data": None},
    "bench": {"model": None, "out": "bench.json", "duration": 10.0,
              "batch": 1024, "calib": None},
    "stream": {"model": None, "wav": None, "raw": False, "rate": 16000,
               "format": "f32", "hop": DEFAULT_HOP, "dft": DEFAULT_DFT_SIZE,
               "binary": False, "calib": None},
    "label": {"spectra": None, "out": None, "calib": None, "category": "noise"},
}

WAV_DEFAULT_SPL = {"speech": 60.0, "music": 70.0}


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loudnet",
                                description="loudness estimation toolkit")
    p.add_argument("--config", "-c", default=None,
                   help=f"JSON config file (default: ${CONFIG_ENV_VAR})")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="calibrate the reference model")
    c.add_argument("--out")
    c.add_argument("--ear", help="JSON ear-transfer table [[hz, db], ...]")

    s = sub.add_parser("synth", help="generate labeled datasets")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--tones", type=int)
    s.add_argument("--noises", type=int, help="band-limited noises (no notches)")
    s.add_argument("--notched", type=int, help="notched noises only")
    s.add_argument("--wav", nargs="+", help="WAV files or directories to ingest")
    s.add_argument("--wav-category", choices=("speech", "music"))
    s.add_argument("--spl", type=float, help="ingest RMS level (default 60/70 dB)")
    s.add_argument("--calib", help="calibration cache (default: rebuild)")
    s.add_argument("--workers", type=int)
    s.add_argument("--hop", type=int)
    s.add_argument("--dft", type=int)

    t = sub.add_parser("train", help="train the regressor")
    t.add_argument("--data", nargs="+", help="LDS1 dataset files")
    t.add_argument("--out")
    t.add_argument("--epochs", help="comma-separated schedule, e.g. 220,780")
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int, help="shuffle seed")
    t.add_argument("--init-seed", type=int)
    t.add_argument("--resume", help="checkpoint model to continue from")
    t.add_argument("--verbose", action="store_true", default=None)

    e = sub.add_parser("eval", help="error report, histogram, curves")
    e.add_argument("--model")
    e.add_argument("--data", nargs="+")
    e.add_argument("--out")
    e.add_argument("--calib")
    e.add_argument("--bin-width", type=float)
    e.add_argument("--train-data", help="optional held-in set for the sanity log")

    b = sub.add_parser("bench", help="throughput benchmark")
    b.add_argument("--model")
    b.add_argument("--out")
    b.add_argument("--duration", type=float)
    b.add_argument("--batch", type=int)
    b.add_argument("--calib")

    st = sub.add_parser("stream", help="per-frame phon values from audio")
    st.add_argument("--model")
    st.add_argument("--wav", help="input WAV (omit with --raw for stdin PCM)")
    st.add_argument("--raw", action="store_true", default=None,
                    help="read raw PCM from stdin")
    st.add_argument("--rate", type=int, help="sample rate for --raw")
    st.add_argument("--format", choices=("f32", "i16"), help="raw sample format")
    st.add_argument("--hop", type=int)
    st.add_argument("--dft", type=int)
    st.add_argument("--binary", action="store_true", default=None,
                    help="emit float32 phon stream instead of text")

    l = sub.add_parser("label", help="oracle-label an SPF1 spectra file")
    l.add_argument("--spectra")
    l.add_argument("--out")
    l.add_argument("--calib")
    l.add_argument("--category", choices=sorted(synth.CATEGORY_CODES))

    return p


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < config-file section < explicit flags."""
    command = args.command
    cfg = dict(DEFAULTS[command])
    config_path = args.config or os.environ.get(CONFIG_ENV_VAR)
    if config_path:
        if not Path(config_path).exists():
            raise ConfigError(f"config file not found: {config_path}")
        with open(config_path) as f:
            try:
                file_cfg = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        section = file_cfg.get(command, {})
        unknown = set(section) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown keys in config section {command!r}: {sorted(unknown)}")
        cfg.update(section)
    for key, value in vars(args).items():
        if key in cfg and value is not None:
            cfg[key] = value
    cfg["command"] = command
    return cfg


def _load_oracle(calib: str | None) -> LoudnessOracle:
    if calib:
        if not Path(calib).exists():
            raise ConfigError(f"calibration cache not found: {calib}")
        return LoudnessOracle.from_calibration(calib)
    return LoudnessOracle.build()


def _provenance(cfg: dict, inputs: list[str | Path]) -> dict:
    return {"config": {k: v for k, v in cfg.items()},
            "inputs": {str(p): _sha256(p) for p in inputs}}


def _write_run_config(out_dir: Path, cfg: dict, inputs: list) -> None:
    evaluate.write_json(out_dir / "run_config.json", _provenance(cfg, inputs))


# -- command handlers ---------------------------------------------------------


def cmd_calibrate(cfg: dict) -> None:
    ear = None
    inputs = []
    if cfg["ear"]:
        if not Path(cfg["ear"]).exists():
            raise ConfigError(f"ear table not found: {cfg['ear']}")
        from .oracle import EarTransfer
        with open(cfg["ear"]) as f:
            ear = EarTransfer.from_pairs(json.load(f))
        inputs.append(cfg["ear"])
    oracle = LoudnessOracle.build(ear=ear)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    oracle.save_calibration(out)
    print(f"calibration {oracle.calibration_hash} -> {out}")


def _expand_wavs(entries) -> list[Path]:
    paths: list[Path] = []
    for entry in entries:
        p = Path(entry)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.wav")))
        else:
            paths.append(p)
    return paths


def cmd_synth(cfg: dict) -> None:
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    oracle = _load_oracle(cfg["calib"])
    inputs = [cfg["calib"]] if cfg["calib"] else []
    produced = []

    def emit(name: str, dataset: synth.Dataset) -> None:
        dataset.header["config"] = {k: v for k, v in cfg.items()}
        path = out_dir / f"{name}.lds"
        synth.write_dataset(path, dataset)
        produced.append(path)
        print(f"{path}: {len(dataset)} records {dataset.category_counts()}")

    if cfg["tones"]:
        emit("tones", synth.gen_tone_records(cfg["tones"], cfg["seed"], oracle,
                                             workers=cfg["workers"]))
    if cfg["noises"]:
        emit("noises", synth.gen_noise_records(cfg["noises"], cfg["seed"] + 1, oracle,
                                               notch="none", workers=cfg["workers"]))
    if cfg["notched"]:
        emit("notched", synth.gen_noise_records(cfg["notched"], cfg["seed"] + 2, oracle,
                                                notch="only", workers=cfg["workers"]))
    if cfg["wav"]:
        wavs = _expand_wavs(cfg["wav"])
        category = cfg["wav_category"]
        spl = cfg["spl"] if cfg["spl"] is not None else WAV_DEFAULT_SPL[category]
        dataset, skipped = synth.ingest_wav(wavs, spl, oracle, hop=cfg["hop"],
                                            dft_size=cfg["dft"], category=category)
        for path, reason in skipped:
            print(f"skipped {path}: {reason}", file=sys.stderr)
        emit(category, dataset)
        inputs.extend(w for w in wavs if Path(w).exists())
    if not produced:
        raise ConfigError("nothing to generate: pass --tones/--noises/--notched/--wav")
    _write_run_config(out_dir, cfg, inputs)


def _parse_schedule(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad epoch schedule {text!r}") from exc


def cmd_train(cfg: dict) -> None:
    if not cfg["data"]:
        raise ConfigError("train needs --data")
    for path in cfg["data"]:
        if not Path(path).exists():
            raise ConfigError(f"dataset not found: {path}")
    datasets = [synth.read_dataset(p) for p in cfg["data"]]
    dataset = synth.concat_datasets(datasets) if len(datasets) > 1 else datasets[0]
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    schedule = _parse_schedule(cfg["epochs"])
    config = mlp.TrainConfig(learning_rate=cfg["lr"], batch_size=cfg["batch"],
                             epoch_schedule=schedule, shuffle_seed=cfg["seed"])
    oracle_hashes = {d.header.get("calibration_hash", "") for d in datasets}
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    model = None
    state = None
    if cfg["resume"]:
        if not Path(cfg["resume"]).exists():
            raise ConfigError(f"checkpoint not found: {cfg['resume']}")
        model = mlp.load_model(cfg["resume"])
        state = mlp.load_adam_state(str(cfg["resume"]) + ".opt", model)
        start_epoch = int(model.metadata.get("epochs_trained", 0))
        print(f"resuming from {cfg['resume']} at epoch {start_epoch}")

    meta = {"shuffle_seed": cfg["seed"], "init_seed": cfg["init_seed"],
            "schedule": list(schedule),
            "oracle_hash": sorted(oracle_hashes)[0] if len(oracle_hashes) == 1 else
            sorted(oracle_hashes),
            "data": [str(p) for p in cfg["data"]]}

    def on_checkpoint(epoch: int, m: mlp.MlpModel, s: mlp.AdamState) -> None:
        m.metadata.update(meta)
        path = out_dir / f"model_e{epoch}.ldnn"
        mlp.save_model(path, m)
        mlp.save_adam_state(str(path) + ".opt", s, m)
        print(f"checkpoint {path}")

    log_fn = print if cfg["verbose"] else None
    result = mlp.train(dataset, config, model=model, state=state,
                       start_epoch=start_epoch, init_seed=cfg["init_seed"],
                       on_checkpoint=on_checkpoint, log_fn=log_fn)
    mode = "a" if cfg["resume"] else "w"
    with open(out_dir / "loss_log.csv", mode) as f:
        if mode == "w":
            f.write("epoch,train_mse\n")
        for epoch, loss in result.loss_log:
            f.write(f"{epoch},{loss!r}\n")
    _soft_check_loss(result.loss_log)
    _write_run_config(out_dir, cfg, list(cfg["data"]))
    print(f"trained to epoch {start_epoch + sum(schedule)}; "
          f"final train mse {result.loss_log[-1][1]:.4f}")


def _soft_check_loss(loss_log: list[tuple[int, float]], window: int = 50) -> None:
    losses = [l for _, l in loss_log]
    for i in range(window, len(losses)):
        if losses[i] > losses[i - window]:
            print(f"note: training loss rose over epochs "
                  f"{loss_log[i - window][0]}..{loss_log[i][0]}", file=sys.stderr)
            return


def cmd_eval(cfg: dict) -> None:
    for key in ("model",):
        if not cfg[key]:
            raise ConfigError("eval needs --model")
    if not cfg["data"]:
        raise ConfigError("eval needs --data")
    for path in [cfg["model"], *cfg["data"]]:
        if not Path(path).exists():
            raise ConfigError(f"input not found: {path}")
    model = mlp.load_model(cfg["model"])
    datasets = [synth.read_dataset(p) for p in cfg["data"]]
    dataset = synth.concat_datasets(datasets) if len(datasets) > 1 else datasets[0]
    oracle = _load_oracle(cfg["calib"])
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    report = evaluate.rms_error(model, dataset)
    edges, props = evaluate.loudness_histogram(model, dataset, cfg["bin_width"])
    evaluate.write_histogram_csv(out_dir / "hist.csv", edges, props)

    plan = oracle.plan
    oracle_predict = lambda X: np.array(
        [oracle.loudness_level_of_bands(row).phon for row in X])
    dnn_predict = lambda X: evaluate.predict_phons(model, X)
    tone_series = []
    for series, tag in ((evaluate.tone_growth_curves(oracle_predict, plan), "oracle"),
                        (evaluate.tone_growth_curves(dnn_predict, plan), "dnn")):
        for s in series:
            tone_series.append(evaluate.CurveSeries(s.x, s.y, f"{tag}_{s.label}"))
    evaluate.write_curves_csv(out_dir / "curves_tones.csv", "level_db", tone_series)
    evaluate.write_curves_csv(out_dir / "curves_bandwidth.csv", "bandwidth_hz",
                              evaluate.bandwidth_curves(model, oracle))

    payload = report.to_dict()
    if cfg["train_data"]:
        held_in = evaluate.rms_error(model, synth.read_dataset(cfg["train_data"]))
        payload["held_in_overall"] = held_in.overall
        if held_in.overall["rms"] > report.overall["rms"]:
            print("note: held-in RMS exceeds evaluated RMS", file=sys.stderr)
    evaluate.write_json(out_dir / "errors.json", payload)
    inputs = [cfg["model"], *cfg["data"]]
    if cfg["train_data"]:
        inputs.append(cfg["train_data"])
    _write_run_config(out_dir, cfg, inputs)
    for name, stats in sorted(report.per_category.items()):
        print(f"{name}: rms {stats['rms']:.3f} phon over {stats['count']} records")
    print(f"overall: rms {report.overall['rms']:.3f} phon")


def cmd_bench(cfg: dict) -> None:
    if not cfg["model"]:
        raise ConfigError("bench needs --model")
    if not Path(cfg["model"]).exists():
        raise ConfigError(f"model not found: {cfg['model']}")
    model = mlp.load_model(cfg["model"])
    oracle = _load_oracle(cfg["calib"])
    report = evaluate.bench_throughput(model, oracle, duration=cfg["duration"],
                                       batch_size=cfg["batch"])
    payload = report.to_dict()
    payload.update(_provenance(cfg, [cfg["model"]]))
    out = Path(cfg["out"])
    if out.is_dir():
        out = out / "bench.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluate.write_json(out, payload)
    print(f"batched {report.batched_rate:,.0f}/s single {report.single_rate:,.0f}/s "
          f"oracle {report.oracle_rate:,.0f}/s speedup {report.speedup:.1f}x")


STREAM_BLOCK_FRAMES = 1024


def _blocks_from_signal(signal: np.ndarray, hop: int, dft: int):
    """Yield (first frame index, frames) in bounded blocks, matching frame_matrix."""
    n = len(signal)
    if n == 0:
        return
    total = -(-n // hop)
    for k0 in range(0, total, STREAM_BLOCK_FRAMES):
        k1 = min(k0 + STREAM_BLOCK_FRAMES, total)
        seg = signal[k0 * hop:(k1 - 1) * hop + dft]
        yield k0, frame_matrix(seg, hop, dft)[:k1 - k0]


def _blocks_from_stream(reader, hop: int, dft: int, fmt: str):
    """Incremental framing of raw PCM with a bounded carry buffer."""
    dtype, scale = ("<i2", 1.0 / 32768.0) if fmt == "i16" else ("<f4", 1.0)
    itemsize = np.dtype(dtype).itemsize
    byte_carry = b""
    samples = np.empty(0, np.float64)
    k0 = 0
    eof = False
    need = (STREAM_BLOCK_FRAMES - 1) * hop + dft
    while True:
        while len(samples) < need and not eof:
            raw = reader.read(1 << 16)
            if not raw:
                eof = True
                break
            raw = byte_carry + raw
            usable = len(raw) - len(raw) % itemsize
            byte_carry = raw[usable:]
            samples = np.concatenate(
                [samples, np.frombuffer(raw[:usable], dtype=dtype).astype(np.float64) * scale])
        if len(samples) >= need:
            yield k0, frame_matrix(samples[:need], hop, dft)[:STREAM_BLOCK_FRAMES]
            samples = samples[STREAM_BLOCK_FRAMES * hop:]
            k0 += STREAM_BLOCK_FRAMES
        elif eof:
            if len(samples):
                yield k0, frame_matrix(samples, hop, dft)
            return


def cmd_stream(cfg: dict) -> None:
    if not cfg["model"]:
        raise ConfigError("stream needs --model")
    if not Path(cfg["model"]).exists():
        raise ConfigError(f"model not found: {cfg['model']}")
    if not cfg["raw"] and not cfg["wav"]:
        raise ConfigError("stream needs --wav FILE or --raw")
    model = mlp.load_model(cfg["model"])
    cal = CalibrationSpec()
    hop, dft = cfg["hop"], cfg["dft"]
    if cfg["raw"]:
        rate = cfg["rate"]
        blocks = _blocks_from_stream(sys.stdin.buffer, hop, dft, cfg["format"])
    else:
        if not Path(cfg["wav"]).exists():
            raise ConfigError(f"wav not found: {cfg['wav']}")
        signal, rate = read_wav(cfg["wav"])
        blocks = _blocks_from_signal(signal, hop, dft)
    from .frontend import default_plan
    plan = default_plan()
    run = mlp.compiled_forward(model, STREAM_BLOCK_FRAMES)
    emitted = 0
    # single-lane pipeline, bounded blocks: read -> reduce -> infer -> emit
    for k0, frames in blocks:
        levels = reduce_block(frames, rate, plan, cal).astype(np.float32)
        phons = np.maximum(run(np.ascontiguousarray(levels)), 0.0)
        if cfg["binary"]:
            sys.stdout.buffer.write(phons.astype("<f4").tobytes())
        else:
            sys.stdout.write("".join(
                f"{(k0 + i) * hop / rate:.4f}\t{p:.2f}\n" for i, p in enumerate(phons)))
        emitted += len(phons)
    if cfg["binary"]:
        sys.stdout.buffer.flush()
    else:
        sys.stdout.flush()
    print(f"{emitted} frames", file=sys.stderr)


def cmd_label(cfg: dict) -> None:
    if not cfg["spectra"] or not cfg["out"]:
        raise ConfigError("label needs --spectra and --out")
    if not Path(cfg["spectra"]).exists():
        raise ConfigError(f"spectra file not found: {cfg['spectra']}")
    oracle = _load_oracle(cfg["calib"])
    levels, _ = read_spectra(cfg["spectra"])
    labels = np.array([oracle.loudness_level_of_bands(row.astype(np.float64)).phon
                       for row in levels], dtype=np.float32)
    dataset = synth.Dataset(
        spectra=levels.astype(np.float32), labels=labels,
        categories=np.full(len(labels), synth.CATEGORY_CODES[cfg["category"]], np.uint8),
        header={"oracle_version": oracle.calibration_dict()["version"],
                "calibration_hash": oracle.calibration_hash, "seed": 0,
                "config": {k: v for k, v in cfg.items()},
                "inputs": {str(cfg["spectra"]): _sha256(cfg["spectra"])}})
    synth.write_dataset(cfg["out"], dataset)
    print(f"{cfg['out']}: {len(dataset)} records")


HANDLERS = {"calibrate": cmd_calibrate, "synth": cmd_synth, "train": cmd_train,
            "eval": cmd_eval, "bench": cmd_bench, "stream": cmd_stream,
            "label": cmd_label}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        HANDLERS[args.command](cfg)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (LoudnetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
