"""``halo`` command line: training, gradient probes, ablations, HQ-FSDP checks, tensor tools.

Exit codes: 0 success, 2 input error (bad config, unreadable or corrupt
file), 3 numerical failure (divergence).
"""

import argparse
import hashlib
import io
import json
import math
import os
import sys
import zipfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import hadamard as had
from .config import ConfigError, RunConfig, load_config
from .halo_linear import HaloScheme
from .hqfsdp import (
    WorldConfig,
    backward_regather,
    comm_report,
    CommLedger,
    quantized_all_gather,
    reference_gather,
    shard,
)
from .quantize import Granularity, NumericFormat, quantization_error_report
from .tensor_core import (
    OUTLIER_MULTIPLIER,
    OutlierProfile,
    TensorFormatError,
    outlier_stats,
    random_tensor,
    read_tensor,
)
from .trainer import (
    AdamWConfig,
    DataConfig,
    DivergenceError,
    ModelConfig,
    ToyModel,
    ablation_csv,
    default_variants,
    make_dataset,
    placement_ablation,
    sensitivity_report,
    train,
)
from .trainer.analysis import ablation_cell

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


def threads() -> int:
    raw = os.environ.get("HALO_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"HALO_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"HALO_THREADS must be a positive integer, got {raw!r}")
    return n


def ordered_map(fn, items):
    """Map in parallel when HALO_THREADS > 1; results always come back in input order."""
    n = threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# --- helpers ---------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(out_dir: Path, name: str, text: str, outputs: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    p = out_dir / name
    p.write_text(text, encoding="utf-8")
    outputs[name] = _sha256(p)
    return p


def write_manifest(cfg: RunConfig, command: str, out_dir: Path, outputs: dict, verdicts: dict,
                   inputs: dict | None = None) -> Path:
    """Deterministic JSON manifest: config echo, input hash, seeds, output hashes, verdicts."""
    h = hashlib.sha256(cfg.canonical().encode())
    for name, digest in sorted((inputs or {}).items()):
        h.update(f"{name}={digest}".encode())
    manifest = {
        "command": command,
        "config": json.loads(cfg.canonical()),
        "input_hash": h.hexdigest(),
        "inputs": inputs or {},
        "seeds": cfg.seed_list(),
        "outputs": dict(sorted(outputs.items())),
        "verdicts": verdicts,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    p = out_dir / "manifest.json"
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return p


def _granularity(cfg: RunConfig):
    return Granularity.parse(cfg.granularity) if cfg.granularity else None


def scheme_from(cfg: RunConfig) -> HaloScheme:
    try:
        return HaloScheme.parse(cfg.scheme, cfg.format, _granularity(cfg))
    except ValueError as exc:
        raise ConfigError(str(exc), key="scheme") from None


def model_config(cfg: RunConfig, seed: int) -> ModelConfig:
    return ModelConfig(
        d_model=cfg.d_model, d_hidden=cfg.d_hidden, n_blocks=cfg.n_blocks, d_out=cfg.d_out,
        use_gain=cfg.use_gain, lora_rank=cfg.lora_rank, seed=seed,
        gain_outliers=cfg.gain_outliers, gain_outlier_scale=cfg.gain_outlier_scale,
        hidden_outliers=cfg.hidden_outliers, hidden_outlier_scale=cfg.hidden_outlier_scale,
    )


def data_config(cfg: RunConfig, seed: int) -> DataConfig:
    return DataConfig(
        name=cfg.dataset, batch=cfg.batch, seed=seed,
        channel_outliers=cfg.channel_outliers, channel_scale=cfg.channel_scale,
        token_outliers=cfg.token_outliers, token_scale=cfg.token_scale,
    )


def _check_dims(cfg: RunConfig):
    for key in ("d_model", "d_hidden"):
        if not had.is_supported(getattr(cfg, key)):
            raise ConfigError(f"{getattr(cfg, key)} is not a supported Hadamard size "
                              f"(next: {had.next_supported_dim(getattr(cfg, key))})", key=key)


def load_params(path: str) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"model file not found: {p}")
    try:
        with np.load(p) as z:
            return {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read model file {p}: {exc}") from None


def save_params(path: Path, params: dict) -> None:
    """``.npz`` readable by ``numpy.load``, with fixed timestamps so reruns hash identically."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(params[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def build(cfg: RunConfig, seed: int, scheme):
    """Model and dataset for one seed; the model starts from the pre-trained weights."""
    _check_dims(cfg)
    mc = model_config(cfg, seed)
    try:
        ds = make_dataset(mc, data_config(cfg, seed))
    except ValueError as exc:
        raise ConfigError(str(exc), key="dataset") from None
    params = ds.pretrained
    inputs = {}
    if cfg.params_file:
        params = load_params(cfg.params_file)
        inputs["params_file"] = _sha256(Path(cfg.params_file))
    model = ToyModel(mc, scheme, params)
    return model, ds, inputs


# --- subcommands -------------------------------------------------------------


def cmd_train(cfg: RunConfig, out: Path) -> int:
    scheme = scheme_from(cfg)
    seed = cfg.seed_list()[0]
    model, ds, inputs = build(cfg, seed, scheme)
    opt = AdamWConfig(lr=cfg.lr, warmup_steps=cfg.warmup, weight_decay=cfg.weight_decay)
    world = None
    if cfg.world_size > 1:
        world = WorldConfig(cfg.world_size, activation_checkpointing=cfg.activation_checkpointing)
    outputs: dict = {}
    try:
        res = train(model, ds, opt, steps=cfg.steps, world=world)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        write_manifest(cfg, "train", out, outputs, {"train": "DIVERGED", "step": exc.step}, inputs)
        return EXIT_NUMERIC
    rows = ["step,loss,grad_norm"] + [f"{s},{l!r},{g!r}" for s, l, g in res.trace_rows()]
    _write(out, "loss.csv", "\n".join(rows) + "\n", outputs)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "params.npz", res.params)
    outputs["params.npz"] = _sha256(out / "params.npz")
    _write(out, "counters.json", json.dumps(res.counters, sort_keys=True) + "\n", outputs)
    verdicts = {"train": "OK", "final_loss": res.losses[-1], "eval_loss": res.eval_loss,
                "scheme": scheme.label}
    write_manifest(cfg, "train", out, outputs, verdicts, inputs)
    print(f"trained {cfg.steps} steps under {scheme.label}: final loss {res.losses[-1]:.6g}, "
          f"eval loss {res.eval_loss:.6g}")
    return EXIT_OK


def cmd_sensitivity(cfg: RunConfig, out: Path) -> int:
    variants = default_variants(cfg.format, _granularity(cfg))
    seeds = cfg.seed_list()
    inputs: dict = {}

    def one(seed):
        model, ds, inp = build(cfg, seed, "halo0")
        inputs.update(inp)
        return sensitivity_report(model, ds.batch(0), variants, ds.loss)

    reports = ordered_map(one, seeds)
    outputs: dict = {}
    # per (layer, variant) median over seeds; one seed reproduces that seed's table
    keys = [(l, v, n) for l, v, _, n in reports[0].rows]
    med = {(l, v): float(np.median([r.rows[i][2] for r in reports])) for i, (l, v, _) in enumerate(keys)}
    lines = ["layer,variant,cosine"] + [f"{l},{v},{med[(l, v)]!r}" for l, v, _ in keys]
    _write(out, "sensitivity.csv", "\n".join(lines) + "\n", outputs)
    for vname in variants:
        lines = ["layer,cosine,param_count"] + [
            f"{l},{med[(l, v)]!r},{n}" for l, v, n in keys if v == vname]
        _write(out, f"cosine_{vname}.csv", "\n".join(lines) + "\n", outputs)
    averages = {v: float(np.median([r.averages[v] for r in reports])) for v in variants}
    checks = {"fwd<bwd": averages["fwd"] < averages["bwd"],
              "had>fwd": averages["fwd+had"] > averages["fwd"]}
    if NumericFormat.parse(cfg.format) is NumericFormat.IDENTITY:
        verdict = "ordering: not applicable (identity format leaves gradients exact)"
    else:
        verdict = ", ".join(f"{k}: {'PASS' if ok else 'FAIL'}" for k, ok in checks.items())
    write_manifest(cfg, "sensitivity", out, outputs,
                   {"weighted_average_median": averages, "ordering": verdict}, inputs)
    for v, a in averages.items():
        print(f"{v:8s} weighted-average cosine (median of {len(seeds)}): {a:.6f}")
    print(verdict)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    model, ds, inputs = build(cfg, cfg.seed_list()[0], "halo0")
    matmul = None if cfg.full_grid else cfg.matmul.upper()
    if matmul is not None and matmul not in ("F", "E", "G"):
        raise ConfigError("must be F, E or G", key="matmul")
    rows = placement_ablation(model, ds.batch(0), matmul, cfg.format, _granularity(cfg), ds.loss)
    outputs: dict = {}
    _write(out, "ablation.csv", ablation_csv(rows), outputs)
    verdicts = {"rows": len(rows)}
    if NumericFormat.parse(cfg.format) is NumericFormat.IDENTITY:
        losses = np.array([r.loss for r in rows])
        coss = np.array([r.cosine for r in rows])
        spread = max(float(np.ptp(losses) / max(abs(losses[0]), 1e-30)), float(np.ptp(coss)))
        verdicts["cancellation"] = "PASS" if spread <= 1e-4 else "FAIL"
        line = f"cancellation (all cells equal within 1e-4): {verdicts['cancellation']}"
    elif matmul is not None:
        mid = ablation_cell(rows, matmul, "M").cosine
        empty = ablation_cell(rows, matmul, "").cosine
        verdicts["middle>empty"] = "PASS" if mid > empty else "FAIL"
        line = f"middle>empty: {verdicts['middle>empty']} ({mid:.6f} vs {empty:.6f})"
    else:
        line = "full grid written"
    write_manifest(cfg, "ablate", out, outputs, verdicts, inputs)
    print(f"{len(rows)} rows -> {out / 'ablation.csv'}")
    print(line)
    return EXIT_OK


def cmd_fsdp(cfg: RunConfig, out: Path) -> int:
    ws = cfg.world_size
    if ws < 1:
        raise ConfigError("must be >= 1", key="world_size")
    fmt = NumericFormat.parse(cfg.format)
    if cfg.hadamard and not had.is_supported(cfg.cols):
        raise ConfigError(f"{cfg.cols} is not a supported Hadamard size", key="cols")
    rng = np.random.default_rng(cfg.seed_list()[0])
    equivalent = regather_ok = True
    padding = None
    for _ in range(cfg.trials):
        W = rng.standard_normal((cfg.rows, cfg.cols)) * rng.uniform(0.1, 10.0)
        p = shard(W, ws, "weight", fmt, cfg.hadamard)
        padding = p.padding
        led = CommLedger()
        fwd = quantized_all_gather(p, ledger=led)
        ref = reference_gather(W, ws, fmt, cfg.hadamard)
        equivalent &= all(q.equals(ref) for q in fwd)
        bwd = backward_regather(p, ledger=led)
        regather_ok &= all(a.equals(b) for a, b in zip(fwd, bwd))
    # one representative forward + backward pass for the ledger
    ledger = CommLedger()
    p = shard(np.ones((cfg.rows, cfg.cols)), ws, "weight", fmt, cfg.hadamard)
    quantized_all_gather(p, ledger=ledger)
    report = comm_report(ledger)
    fwd_gather = ledger.total("allgather")
    reduces = ledger.count("allreduce_scale")
    backward_regather(p, ledger=ledger, consumers=2 if cfg.activation_checkpointing else 1)
    scale_bwd = ledger.count("allreduce_scale") - reduces

    verdicts = {
        "equivalence": "PASS" if equivalent else "FAIL",
        "backward_regather": "PASS" if regather_ok and scale_bwd == 0 else "FAIL",
    }
    if cfg.steps > 0:
        _check_dims(cfg)
        traces = []
        for w in sorted({1, ws}):
            model, ds, _ = build(cfg, cfg.seed_list()[0], scheme_from(cfg))
            res = train(model, ds, AdamWConfig(lr=cfg.lr, warmup_steps=cfg.warmup),
                        steps=cfg.steps, world=WorldConfig(w, activation_checkpointing=cfg.activation_checkpointing))
            traces.append([x.hex() for x in res.losses])
        verdicts["world_invariance"] = "PASS" if all(t == traces[0] for t in traces) else "FAIL"
    doc = {
        "world_size": ws,
        "format": fmt.value,
        "shape": [cfg.rows, cfg.cols],
        "padding": padding,
        "ledger": [{"collective": s["collective"], "bytes": s["bytes"], "count": s["count"]}
                   for s in ledger.summary()],
        "forward_gather_bytes": fwd_gather,
        "compression_ratio": report["compression_ratio"],
        "verdicts": verdicts,
    }
    outputs: dict = {}
    _write(out, "ledger.json", json.dumps(doc, indent=2, sort_keys=True) + "\n", outputs)
    write_manifest(cfg, "fsdp", out, outputs, verdicts)
    print(f"world {ws}, {fmt.value}, weight {cfg.rows}x{cfg.cols}: padding {padding} rows, "
          f"gather bytes {fwd_gather:.0f}, ratio vs bf16 {report['compression_ratio']:.4f}")
    for k, v in verdicts.items():
        print(f"{k}: {v}")
    return EXIT_OK if all(v == "PASS" for v in verdicts.values()) else EXIT_NUMERIC


def rotate(a: np.ndarray, side: str) -> np.ndarray:
    """``A H`` for ``right``, ``H^T A`` for ``left``; the rotated axis is zero-padded if needed."""
    if side == "right":
        d = had.next_supported_dim(a.shape[1])
        return had.transform_right(had.pad_cols(a, d), had.build_spec(d))
    if side == "left":
        d = had.next_supported_dim(a.shape[0])
        return had.transform_left(had.pad_rows(a, d), had.build_spec(d))
    return a


def cmd_inspect(path: str, side: str | None, axis: str, csv_path: str | None) -> int:
    p = Path(path)
    try:
        a = read_tensor(p)
    except FileNotFoundError:
        raise InputError(f"no such file: {p}") from None
    except TensorFormatError as exc:
        raise InputError(f"corrupt tensor file {p}: {exc}") from None
    print(f"file: {p}")
    print(f"shape: {a.shape[0]}x{a.shape[1]}  dtype: {a.dtype.name}")
    if side:
        a = rotate(a.astype(np.float64), side)
        print(f"hadamard: {side} (rotated shape {a.shape[0]}x{a.shape[1]})")
    mean_abs = float(np.mean(np.abs(a))) if a.size else 0.0
    count = int(np.sum(np.abs(a) >= OUTLIER_MULTIPLIER * mean_abs)) if mean_abs > 0 else 0
    print(f"min: {float(a.min()):.6g}  max: {float(a.max()):.6g}  mean: {float(a.mean()):.6g}")
    print(f"max_abs: {float(np.max(np.abs(a))):.6g}  mean_abs: {mean_abs:.6g}")
    print(f"outliers (>= {OUTLIER_MULTIPLIER:g} x mean |entry|): {count}")
    if csv_path:
        Path(csv_path).write_text(outlier_stats(a, axis).to_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_quantreport(cfg: RunConfig, out: Path) -> int:
    inputs = {}
    if cfg.tensor_file:
        try:
            a = read_tensor(cfg.tensor_file).astype(np.float64)
        except FileNotFoundError:
            raise InputError(f"no such file: {cfg.tensor_file}") from None
        except TensorFormatError as exc:
            raise InputError(f"corrupt tensor file {cfg.tensor_file}: {exc}") from None
        inputs["tensor_file"] = _sha256(Path(cfg.tensor_file))
    else:
        size = cfg.cols if cfg.outlier_axis == "columns" else cfg.rows
        prof = OutlierProfile.random(size, cfg.outlier_count, cfg.outlier_scale,
                                     cfg.outlier_axis, seed=cfg.seed_list()[0])
        a = random_tensor(cfg.rows, cfg.cols, cfg.seed_list()[0], np.float64, prof)
    lines = ["format,granularity,hadamard,mse,max_abs_err,snr_db"]
    for side in cfg.rotations:
        if side not in ("none", "left", "right"):
            raise ConfigError("entries must be none, left or right", key="rotations")
        r = rotate(a, side)
        for f in cfg.formats:
            fmt = NumericFormat.parse(f)
            # MX formats carry their own block granularity
            grans = ["mx"] if fmt is NumericFormat.MXFP6_E3M2 else cfg.granularities
            for g in grans:
                gran = Granularity.parse(g)
                rep = quantization_error_report(r, fmt, gran)
                snr = "inf" if math.isinf(rep.snr) else repr(rep.snr)
                lines.append(f"{fmt.value},{gran},{side},{rep.mse!r},{rep.max_abs_err!r},{snr}")
    outputs: dict = {}
    _write(out, "quantreport.csv", "\n".join(lines) + "\n", outputs)
    write_manifest(cfg, "quantreport", out, outputs, {"rows": len(lines) - 1}, inputs)
    print("\n".join(lines))
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

CONFIG_COMMANDS = {
    "train": cmd_train,
    "sensitivity": cmd_sensitivity,
    "ablate": cmd_ablate,
    "fsdp": cmd_fsdp,
    "quantreport": cmd_quantreport,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="halo", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "train": "fine-tune the toy model; writes loss.csv, params.npz, manifest.json",
        "sensitivity": "weight-gradient cosine table for forward/backward/rotated quantization",
        "ablate": "loss and gradient cosine over rotation placements",
        "fsdp": "HQ-FSDP protocol-equivalence check and byte ledger",
        "quantreport": "quantization error per format, granularity and rotation",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="run config (key = value file)")
        p.add_argument("-o", "--output-dir", help="override output_dir from the config")
    p = sub.add_parser("inspect", help="header and statistics of a HALT tensor file")
    p.add_argument("tensor", help="tensor file")
    p.add_argument("--hadamard", choices=["left", "right"], help="rotate before computing statistics")
    p.add_argument("--axis", choices=["rows", "columns"], default="columns",
                   help="slice axis for --csv statistics")
    p.add_argument("--csv", help="write per-slice outlier statistics here")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        threads()
        if args.command == "inspect":
            return cmd_inspect(args.tensor, args.hadamard, args.axis, args.csv)
        cfg = load_config(args.config)
        out = Path(args.output_dir or cfg.output_dir)
        return CONFIG_COMMANDS[args.command](cfg, out)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, had.UnsupportedDimension) as exc:
        # invalid values that only surface when the config is used
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
