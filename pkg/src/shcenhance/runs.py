"""Manifest-driven workflows behind the command line.

All commands share one output directory::

    <out>/synth/manifest.json       scenes (mixture + clean WAVs)
    <out>/train/manifest.json       trained linear stages + loss history
    <out>/enhance/<estimator>/      enhanced reference-mic WAVs + SHC tensors
    <out>/eval/<estimator>/         per-scene and aggregate reports, CSV, figures
    <out>/analyze/                  transform diagnostics

Each command writes a ``manifest.json`` listing the resolved config, its hash,
the seed and every file it produced. Nothing time- or host-dependent is
recorded, so identical configs reproduce byte-identical outputs.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .enhance import (TrainConfig, estimate_noise_psd, make_stages, run_pipeline, shc_to_waveform,
                      train_stages)
from .errors import ConfigError, ShcError
from .metrics import MetricsReport, shc_order_mse, si_sdr, stoi
from .scene import RoomSpec, SceneSpec, far_field_threshold, speech_like, synth_scene
from .serialize import config_hash, load_stages, save_stages
from .sh_core import available_designs, n_coeffs, quadrature_grid, sh_analyze_continuous, sph_harm_matrix
from .sht import (UnderdeterminedWarning, ArrayGeometry, basis_matrix, design_geometry, group_sizes,
                  per_mic_contributions, sht_forward, sht_forward_ls, sht_inverse, uca_geometry)
from .stft import StftConfig, istft, stft
from .wavio import read_wav, write_wav


class NumericalCheckError(ShcError):
    """A diagnostic check exceeded its tolerance."""


ESTIMATOR_ALIASES = {"oracle-sub": "oracle-sub", "oracle-mag": "oracle-mag",
                     "wiener": "wiener", "linear": "linear"}


# ---------------------------------------------------------------------------
# shared helpers

def geometry(cfg) -> ArrayGeometry:
    a = cfg["array"]
    if a["kind"] == "design":
        return design_geometry(a["design_degree"], a["radius"])
    return uca_geometry(a["n_mics"], a["radius"])


def stft_config(cfg) -> StftConfig:
    return StftConfig(**cfg["stft"])


def encode(spec, geom, cfg) -> np.ndarray:
    order = cfg["sht"]["order"]
    with warnings.catch_warnings():
        # the reference setup deliberately encodes 25 coefficients from 16 mics
        warnings.simplefilter("ignore", UnderdeterminedWarning)
        if cfg["sht"]["encoder"] == "ls":
            return sht_forward_ls(spec, geom, order, cfg["sht"]["ridge"])
        return sht_forward(spec, geom, order)


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def dump_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc.strerror}") from exc


def write_manifest(out: Path, command: str, cfg: dict, outputs, entries=None, inputs=(),
                   extra=None) -> Path:
    rel = [str(Path(p).relative_to(out)) for p in outputs]
    if len(set(rel)) != len(rel):
        raise RuntimeError("duplicate output path in manifest")
    body = {
        "command": command,
        "tool_version": __version__,
        "seed": cfg["seed"],
        "config": cfg,
        "config_hash": config_hash(cfg),
        "inputs": [str(p) for p in inputs],
        "outputs": rel,
        "entries": entries or [],
    }
    body.update(extra or {})
    return dump_json(out / "manifest.json", body)


def _map(fn, tasks, jobs: int):
    """Ordered map; worker count never changes results or their order."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def _load_mono(path, fs: int) -> np.ndarray:
    try:
        data, rate = read_wav(path)
    except (OSError, ValueError) as exc:
        raise FileNotFoundError(f"cannot read WAV {path}: {exc}") from exc
    if rate != fs:
        raise ConfigError(f"{path}: sample rate {rate} Hz, config expects {fs} Hz")
    return data[0]


def scene_grid(cfg):
    sc = cfg["scene"]
    cells = []
    for rt in sc["rt60"]:
        for snr in sc["snr_db"]:
            for rep in range(sc["scenes_per_cell"]):
                cells.append({"rt60": float(rt), "snr_db": float(snr), "rep": rep,
                              "id": f"rt{rt:.2f}_snr{snr:+05.1f}_{rep:02d}"})
    return cells


# ---------------------------------------------------------------------------
# synth

def _synth_one(task):
    cfg, cell, index, out = task
    sc = cfg["scene"]
    fs = sc["fs"]
    seed = scene_seed(cfg["seed"], index)
    if sc["speech_wavs"]:
        speech = _load_mono(sc["speech_wavs"][index % len(sc["speech_wavs"])], fs)
    else:
        speech = speech_like(sc["duration"], fs, seed)
    noise = None
    if sc["noise_wavs"]:
        noise = _load_mono(sc["noise_wavs"][index % len(sc["noise_wavs"])], fs)
    spec = SceneSpec(
        room=RoomSpec(tuple(cfg["room"]["dims"]), cell["rt60"], fs, cfg["room"]["c"]),
        geometry=geometry(cfg), source_distance=sc["source_distance"], noise_kind=sc["noise_kind"],
        snr_db=cell["snr_db"], seed=seed, target=sc["target"], ref_mic=sc["ref_mic"],
        margin=sc["margin"], lead_silence=sc["lead_silence"])
    scene = synth_scene(spec, speech, noise)
    d = out / "scenes" / cell["id"]
    mix = write_wav(d / "mixture.wav", scene.mixture, fs, sc["wav_format"])
    clean = write_wav(d / "clean.wav", scene.clean_ref, fs, sc["wav_format"])
    entry = {"id": cell["id"], "index": index, "rt60": cell["rt60"], "snr_db": cell["snr_db"],
             "mixture": str(mix.relative_to(out)), "clean": str(clean.relative_to(out)),
             "scene": scene.manifest}
    return entry, [mix, clean]


def cmd_synth(cfg: dict, out_dir, jobs: int = 1) -> Path:
    out = Path(out_dir) / "synth"
    cells = scene_grid(cfg)
    results = _map(_synth_one, [(cfg, c, i, out) for i, c in enumerate(cells)], jobs)
    entries = [r[0] for r in results]
    outputs = [p for r in results for p in r[1]]
    inputs = cfg["scene"]["speech_wavs"] + cfg["scene"]["noise_wavs"]
    return write_manifest(out, "synth", cfg, outputs, entries, inputs)


def _synth_manifest(out_dir) -> tuple[Path, dict]:
    base = Path(out_dir) / "synth"
    return base, read_json(base / "manifest.json")


def _scene_shc(base: Path, entry: dict, cfg: dict):
    geom = ArrayGeometry.from_dict(entry["scene"]["geometry"])
    scfg = stft_config(cfg)
    mix, _ = read_wav(base / entry["mixture"])
    clean, _ = read_wav(base / entry["clean"])
    return geom, scfg, mix, encode(stft(mix, scfg), geom, cfg), encode(stft(clean, scfg), geom, cfg)


# ---------------------------------------------------------------------------
# enhance

def _noise_frames(entry, scfg: StftConfig) -> int:
    lead = int(round(entry["scene"]["lead_silence"] * entry["scene"]["fs"]))
    return max((lead - scfg.win_len) // scfg.hop + 1, 0)


def _enhance_one(task):
    cfg, entry, base, out, estimator, model = task
    geom, scfg, mix, mixed, clean = _scene_shc(base, entry, cfg)
    psd = None
    if estimator == "wiener":
        n = _noise_frames(entry, scfg)
        if n < 1:
            raise ConfigError("Wiener estimator needs scene.lead_silence longer than one STFT window")
        psd = estimate_noise_psd(mixed, n)
    stages = make_stages(estimator, cfg["sht"]["order"], noise_psd=psd, model=model)
    if estimator == "wiener":
        for s in stages:
            s.floor = cfg["enhance"]["wiener_floor"]
    enhanced = run_pipeline(mixed, stages, clean=clean if estimator.startswith("oracle") else None)
    ref = entry["scene"]["ref_mic"]
    wav = shc_to_waveform(enhanced, geom, ref, scfg, mix.shape[1])
    d = out / "scenes" / entry["id"]
    wpath = write_wav(d / "enhanced.wav", wav, int(entry["scene"]["fs"]), "float32")
    spath = d / "shc.npy"
    np.save(spath, enhanced)
    return ({"id": entry["id"], "rt60": entry["rt60"], "snr_db": entry["snr_db"],
             "enhanced": str(wpath.relative_to(out)), "shc": str(spath.relative_to(out))},
            [wpath, spath])


def _model_path(cfg, out_dir) -> Path:
    p = cfg["enhance"]["model"]
    return Path(p) if p else Path(out_dir) / "train" / "model.shcm"


def cmd_enhance(cfg: dict, out_dir, jobs: int = 1, estimator: str | None = None) -> Path:
    estimator = estimator or cfg["enhance"]["estimator"]
    if estimator not in ESTIMATOR_ALIASES:
        raise ConfigError(f"unknown estimator {estimator!r}")
    base, synth = _synth_manifest(out_dir)
    model, inputs = None, [str(base / "manifest.json")]
    if estimator == "linear":
        mpath = _model_path(cfg, out_dir)
        if not mpath.exists():
            raise ConfigError(f"linear estimator needs a trained model; {mpath} not found")
        model, _ = load_stages(mpath)
        inputs.append(str(mpath))
    out = Path(out_dir) / "enhance" / estimator
    out.mkdir(parents=True, exist_ok=True)
    results = _map(_enhance_one, [(cfg, e, base, out, estimator, model) for e in synth["entries"]], jobs)
    return write_manifest(out, "enhance", cfg, [p for r in results for p in r[1]],
                          [r[0] for r in results], inputs, {"estimator": estimator})


# ---------------------------------------------------------------------------
# train

def train_config(cfg) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(optimizer=t["optimizer"], lr=t["lr"], epochs=t["epochs"],
                       patience=t["patience"], seed=cfg["seed"],
                       teacher_forcing=t["teacher_forcing"], mode=t["mode"],
                       group_weights=t["group_weights"])


def cmd_train(cfg: dict, out_dir, jobs: int = 1) -> Path:
    base, synth = _synth_manifest(out_dir)
    pairs = [_scene_shc(base, e, cfg)[3:] for e in synth["entries"]]
    if not pairs:
        raise ConfigError("synth manifest has no scenes to train on")
    n_val = int(math.floor(cfg["train"]["val_fraction"] * len(pairs)))
    if n_val >= len(pairs):
        n_val = 0
    train, val = pairs[:len(pairs) - n_val], pairs[len(pairs) - n_val:]
    result = train_stages(train, train_config(cfg), validation=val or None)
    out = Path(out_dir) / "train"
    model = save_stages(out / "model.shcm", result.stages, cfg)
    history = [h.to_dict() for h in result.history]
    hist_csv = out / "history.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n_groups = len(history[0]["train"]["parts"])
    w.writerow(["epoch", "stage", "lr", "train_total"] + [f"train_group{g + 1}" for g in range(n_groups)]
               + ["monitor_total"])
    for h in history:
        w.writerow([h["epoch"], "" if h["stage"] is None else h["stage"] + 1, repr(h["lr"]),
                    repr(h["train"]["total"])] + [repr(p) for p in h["train"]["parts"]]
                   + [repr(h["val_total"])])
    hist_csv.write_text(buf.getvalue())
    outputs = [model, hist_csv]
    from .plotting import loss_curves
    outputs.append(loss_curves(history, out / "loss.png"))
    return write_manifest(out, "train", cfg, outputs, inputs=[str(base / "manifest.json")],
                          extra={"n_train": len(train), "n_val": len(val),
                                 "final_loss": history[-1]["train"]})


# ---------------------------------------------------------------------------
# eval

TABLE_FIELDS = ["rt60", "snr_db", "n", "stoi_unprocessed", "stoi_enhanced",
                "si_sdr_unprocessed", "si_sdr_enhanced"]


def _eval_one(task):
    cfg, synth_entry, enh_entry, base, enh_base = task
    geom, scfg, mix, mixed, clean = _scene_shc(base, synth_entry, cfg)
    fs = int(synth_entry["scene"]["fs"])
    ref_mic = synth_entry["scene"]["ref_mic"]
    n = mix.shape[1]
    reference = shc_to_waveform(clean, geom, ref_mic, scfg, n)
    unprocessed = shc_to_waveform(mixed, geom, ref_mic, scfg, n)
    enhanced, _ = read_wav(enh_base / enh_entry["enhanced"])
    enhanced = enhanced[0]
    enh_shc = np.load(enh_base / enh_entry["shc"])
    meta = {"scene": synth_entry["id"], "rt60": synth_entry["rt60"], "snr_db": synth_entry["snr_db"],
            "config_hash": config_hash(cfg)}
    before = MetricsReport(stoi(reference, unprocessed, fs), si_sdr(reference, unprocessed),
                           shc_order_mse(mixed, clean), meta)
    after = MetricsReport(stoi(reference, enhanced, fs), si_sdr(reference, enhanced),
                          shc_order_mse(enh_shc, clean), meta)
    return {"scene": synth_entry["id"], "rt60": synth_entry["rt60"], "snr_db": synth_entry["snr_db"],
            "unprocessed": before.to_dict(), "enhanced": after.to_dict()}


def aggregate(reports) -> list[dict]:
    cells = {}
    for r in reports:
        cells.setdefault((r["rt60"], r["snr_db"]), []).append(r)
    rows = []
    for (rt, snr), rs in sorted(cells.items()):
        row = {"rt60": rt, "snr_db": snr, "n": len(rs)}
        for side in ("unprocessed", "enhanced"):
            row[f"stoi_{side}"] = float(np.mean([x[side]["stoi_x100"] for x in rs]))
            row[f"si_sdr_{side}"] = float(np.mean([x[side]["si_sdr_db"] for x in rs]))
            row[f"stoi_{side}_std"] = float(np.std([x[side]["stoi_x100"] for x in rs]))
            row[f"si_sdr_{side}_std"] = float(np.std([x[side]["si_sdr_db"] for x in rs]))
        rows.append(row)
    return rows


def cmd_eval(cfg: dict, out_dir, jobs: int = 1, estimator: str | None = None) -> Path:
    estimator = estimator or cfg["enhance"]["estimator"]
    base, synth = _synth_manifest(out_dir)
    enh_base = Path(out_dir) / "enhance" / estimator
    enh = read_json(enh_base / "manifest.json")
    by_id = {e["id"]: e for e in synth["entries"]}
    tasks = []
    for e in enh["entries"]:
        if e["id"] not in by_id:
            raise ConfigError(f"enhanced scene {e['id']} missing from the synth manifest")
        tasks.append((cfg, by_id[e["id"]], e, base, enh_base))
    reports = _map(_eval_one, tasks, jobs)
    out = Path(out_dir) / "eval" / estimator
    outputs = [dump_json(out / "scenes" / f"{r['scene']}.json", r) for r in reports]
    rows = aggregate(reports)
    overall = {}
    for side in ("unprocessed", "enhanced"):
        overall[side] = {
            "stoi_x100_mean": float(np.mean([r[side]["stoi_x100"] for r in reports])),
            "stoi_x100_std": float(np.std([r[side]["stoi_x100"] for r in reports])),
            "si_sdr_db_mean": float(np.mean([r[side]["si_sdr_db"] for r in reports])),
            "si_sdr_db_std": float(np.std([r[side]["si_sdr_db"] for r in reports])),
            "shc_order_mse_mean": np.mean([r[side]["shc_mse"] for r in reports], axis=0).tolist(),
        }
    outputs.append(dump_json(out / "aggregate.json", {
        "estimator": estimator, "metrics": ["STOI (x100)", "SI-SDR (dB)", "per-order SHC MSE"],
        "note": "PESQ is not computed; SI-SDR is reported instead",
        "cells": rows, "overall": overall}))
    table = out / "table.csv"
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.4f}" if isinstance(v, float) and k not in ("rt60", "snr_db") else v)
                    for k, v in row.items()})
    table.write_text(buf.getvalue())
    outputs.append(table)
    if cfg["eval"]["figures"]:
        from . import plotting
        outputs.append(plotting.metric_vs_snr(rows, "stoi", out / "stoi_vs_snr.png"))
        outputs.append(plotting.metric_vs_snr(rows, "si_sdr", out / "si_sdr_vs_snr.png"))
        outputs.append(plotting.improvement_heatmap(rows, "stoi", out / "stoi_gain.png"))
        outputs.append(plotting.order_mse_bars(overall["unprocessed"]["shc_order_mse_mean"],
                                               overall["enhanced"]["shc_order_mse_mean"],
                                               out / "shc_order_mse.png"))
    return write_manifest(out, "eval", cfg, outputs, [{"scene": r["scene"]} for r in reports],
                          [str(base / "manifest.json"), str(enh_base / "manifest.json")],
                          {"estimator": estimator})


# ---------------------------------------------------------------------------
# analyze

def analyze_report(cfg: dict) -> dict:
    """Transform diagnostics for the configured array and order."""
    order = cfg["sht"]["order"]
    geom = geometry(cfg)
    rng = np.random.default_rng(cfg["seed"])
    tol_rt = cfg["analyze"]["roundtrip_tol"]
    tol_on = cfg["analyze"]["orthonormality_tol"]
    checks = {}

    grid = quadrature_grid("gauss-uniform", n_theta=order + 1, n_phi=2 * order + 1)
    y = sph_harm_matrix(order, grid.theta, grid.phi)
    gram = (np.conj(y) * grid.weights[:, None]).T @ y
    resid = float(np.abs(gram - np.eye(gram.shape[0])).max())
    checks["orthonormality"] = {"grid": f"gauss-uniform({order + 1},{2 * order + 1})",
                                "max_abs_residual": resid, "tol": tol_on, "ok": resid < tol_on}

    designs = [t for t in available_designs() if t >= 2 * order]
    if designs:
        t = designs[0]
        dgeom = design_geometry(t, geom.radius.max())
        worst = 0.0
        for _ in range(cfg["analyze"]["trials"]):
            c = rng.standard_normal(n_coeffs(order)) + 1j * rng.standard_normal(n_coeffs(order))
            field = sht_inverse(c, dgeom.theta, dgeom.phi)
            back = sht_forward(field, dgeom, order)
            worst = max(worst, float(np.abs(back - c).max() / np.abs(c).max()))
        checks["design_roundtrip"] = {"design_degree": t, "n_mics": dgeom.n_mics,
                                      "max_rel_error": worst, "tol": tol_rt, "ok": worst < tol_rt}
    else:
        checks["design_roundtrip"] = {"ok": True, "skipped": f"no bundled design of degree >= {2 * order}"}

    spec = rng.standard_normal((geom.n_mics, 3, 5)) + 1j * rng.standard_normal((geom.n_mics, 3, 5))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnderdeterminedWarning)
        contrib = per_mic_contributions(spec, geom, order)
        total = sht_forward(spec, geom, order)
    dev = float(np.abs(contrib.sum(axis=1) - total).max())
    checks["per_mic_sum"] = {"max_abs_deviation": dev, "ok": dev <= 1e-15 * max(1.0, np.abs(total).max())}

    scfg = stft_config(cfg)
    x = rng.standard_normal(cfg["scene"]["fs"])
    rec = istft(stft(x, scfg), scfg, x.size)
    inner = slice(scfg.win_len, x.size - scfg.win_len)
    err = np.sum((rec[inner] - x[inner]) ** 2)
    snr = float("inf") if err == 0 else float(10 * np.log10(np.sum(x[inner] ** 2) / err))
    checks["stft_reconstruction"] = {"snr_db": snr, "ok": snr > 120.0}

    ym = basis_matrix(geom, order)
    array_gram = (4 * math.pi / geom.n_mics) * (np.conj(ym).T @ ym)
    sv = np.linalg.svd(ym, compute_uv=False)
    rank = int(np.sum(sv > sv.max() * max(ym.shape) * np.finfo(float).eps))
    fmax = cfg["scene"]["fs"] / 2
    r = float(geom.radius.max())
    thresholds = {str(f): far_field_threshold(r, f, cfg["room"]["c"]) for f in (1000, 4000, 8000)}
    ff = far_field_threshold(r, fmax, cfg["room"]["c"])
    sizes = group_sizes(order)
    return {
        "order": order,
        "n_coefficients": n_coeffs(order),
        "group_sizes": sizes,
        "per_mic_group_shapes": [[s, geom.n_mics] for s in sizes],
        "array": {"kind": cfg["array"]["kind"], "n_mics": geom.n_mics, "radius": r},
        "stft_bins": scfg.n_bins,
        "basis_rank": rank,
        "array_gram_max_offdiag": float(np.abs(array_gram - np.diag(np.diag(array_gram))).max()),
        "array_gram_residual": (array_gram - np.eye(array_gram.shape[0])),
        "far_field": {"f_max_hz": fmax, "threshold_m": ff, "source_distance_m": cfg["scene"]["source_distance"],
                      "ok": cfg["scene"]["source_distance"] > ff, "thresholds_m": thresholds},
        "checks": checks,
        "all_checks_ok": all(c["ok"] for c in checks.values()),
    }


def cmd_analyze(cfg: dict, out_dir, jobs: int = 1) -> Path:
    out = Path(out_dir) / "analyze"
    rep = analyze_report(cfg)
    resid = rep.pop("array_gram_residual")
    outputs = [dump_json(out / "report.json", rep)]
    groups = out / "groups.csv"
    lines = ["group,orders,acn_start,acn_stop,size"]
    start = 0
    for g, size in enumerate(rep["group_sizes"]):
        orders = "0-1" if g == 0 else str(g + 1)
        lines.append(f"{g + 1},{orders},{start},{start + size},{size}")
        start += size
    groups.write_text("\n".join(lines) + "\n")
    outputs.append(groups)
    if cfg["analyze"]["figures"]:
        from . import plotting
        outputs.append(plotting.gram_residual(resid, out / "array_gram_residual.png",
                                              f"{rep['array']['kind']} array, order {rep['order']}"))
        outputs.append(plotting.array_layout(geometry(cfg).positions(), out / "array_layout.png"))
    path = write_manifest(out, "analyze", cfg, outputs, extra={"all_checks_ok": rep["all_checks_ok"]})
    if not rep["all_checks_ok"]:
        failed = [k for k, c in rep["checks"].items() if not c["ok"]]
        raise NumericalCheckError(f"numerical checks failed: {', '.join(failed)}")
    return path
