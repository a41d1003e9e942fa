"""End-to-end pipeline behind the CLI: data, pretraining, search, tuning, artifacts."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import coordinator, cost, models, nn, pruner
from .config import RunConfig
from .data import Federation, load_dataset, shard_clients

log = logging.getLogger(__name__)

FRONTIER_HEADER = ["method", "iteration", "macs", "macs_ratio", "top1_accuracy"]
SEARCH_OUTPUTS = ("frontier.csv", "costs.csv", "run.json", "models/")

# fl_tune stream tags; each tuned model gets its own client-sampling stream
_PRETRAIN = 0
_TUNE_BASE = 1_000
_WIDTH_BASE = 2_000
_SCRATCH = 3_000


@dataclass(frozen=True)
class FrontierRow:
    method: str
    iteration: int
    macs: int
    macs_ratio: float
    top1_accuracy: float


# ------------------------------------------------------------------ setup


def build_federation(cfg: RunConfig) -> Federation:
    d = cfg["data"]
    seed = cfg.get("run", "seed")
    kw = {"noise": d["noise"]} if d["source"] == "synthetic" else {}
    samples = load_dataset(d["source"], d["class_count"], seed, d["num_samples"], d["input_size"], d["channels"], **kw)
    return shard_clients(samples, d["num_clients"], d["class_count"], d["shard_mode"], d["classes_per_client"],
                         seed=seed)


def build_model(cfg: RunConfig) -> nn.Architecture:
    d = cfg["data"]
    return models.build(cfg.get("run", "model"), d["input_size"], d["channels"], d["class_count"])


def init_for(cfg: RunConfig, arch: nn.Architecture, tag: int) -> nn.Parameters:
    return nn.init_params(arch, coordinator.client_rng(cfg.get("run", "seed"), 0x1417, tag))


def tune(cfg: RunConfig, arch, params, federation, rounds: int, stream: int) -> nn.Parameters:
    run, s = cfg["run"], cfg["search"]
    if rounds < 1:
        return params
    return coordinator.fl_tune(arch, params, federation, rounds, run["clients_per_round"], s["local_epochs"], s["lr"],
                               seed=run["seed"], batch_size=s["batch_size"], threads=run["threads"], stream=stream)


def search_config(cfg: RunConfig, r0: int) -> coordinator.SearchConfig:
    s, run = cfg["search"], cfg["run"]

    def absolute(v: float) -> float:
        # values up to 1 are ratios of the seed model's MACs
        return v * r0 if v <= 1 else v

    oracle = run["mode"] == "oracle"
    return coordinator.SearchConfig(
        seed=run["seed"], groups=s["groups"], r=s["balance_tolerance"], local_epochs=s["local_epochs"],
        drop_ratio=s["drop_ratio"], round_schedule=s["round_schedule"], lr=s["lr"], batch_size=s["batch_size"],
        delta0=absolute(s["delta"]), decay=s["decay"], final_budget=absolute(s["final_budget"]),
        grouping_enabled=s["grouping"] and not oracle, dynamic_rounds_enabled=s["dynamic_rounds"],
        early_drop_enabled=s["early_drop"], threads=run["threads"],
    )


# ------------------------------------------------------------------ artifacts


def frontier_csv(rows) -> str:
    rows = sorted(rows, key=lambda r: (-r.macs, r.method, r.iteration))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FRONTIER_HEADER)
    for r in rows:
        w.writerow([r.method, r.iteration, r.macs, f"{r.macs_ratio:.6f}", f"{r.top1_accuracy:.6f}"])
    return buf.getvalue()


def read_frontier(path: Path) -> list[FrontierRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != FRONTIER_HEADER:
        raise ValueError(f"{path}: unexpected frontier header")
    return [FrontierRow(m, int(i), int(c), float(ratio), float(a)) for m, i, c, ratio, a in rows[1:]]


def save_model(path: Path, arch: nn.Architecture, params: nn.Parameters) -> None:
    """Write a ``.npz`` with fixed zip timestamps so snapshots are byte-reproducible."""
    arrays = {"arch": np.frombuffer(json.dumps(arch.to_dict(), sort_keys=True).encode(), dtype=np.uint8)}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if w is not None:
            arrays[f"w{i}"], arrays[f"b{i}"] = w, b
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def load_model(path: str | Path) -> tuple[nn.Architecture, nn.Parameters]:
    with np.load(path, allow_pickle=False) as z:
        arch = nn.Architecture.from_dict(json.loads(bytes(z["arch"]).decode()))
        weights = tuple(z[f"w{i}"] if f"w{i}" in z else None for i in range(len(arch.layers)))
        biases = tuple(z[f"b{i}"] if f"b{i}" in z else None for i in range(len(arch.layers)))
    params = nn.Parameters(weights, biases)
    nn.check_params(arch, params)
    return arch, params


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(out: Path, names) -> dict:
    """Per-file git blob ids plus a sha256 over the sorted ``name id`` lines."""
    files = {name: git_blob_hash((out / name).read_bytes()) for name in sorted(names)}
    listing = "".join(f"{n} {h}\n" for n, h in files.items())
    return {"files": files, "sha256": hashlib.sha256(listing.encode()).hexdigest()}


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ------------------------------------------------------------------ commands


def run_search(cfg: RunConfig, out: Path) -> dict:
    """Pretrain GM_0, search down to the final budget, FL-tune, and write artifacts."""
    out = Path(out)
    federation = build_federation(cfg)
    arch = build_model(cfg)
    run = cfg["run"]
    params = tune(cfg, arch, init_for(cfg, arch, 0), federation, run["pretrain_rounds"], _PRETRAIN)
    r0 = nn.macs(arch)
    scfg = search_config(cfg, r0)
    log.info("seed model: %d MACs, %d clients, search %s", r0, len(federation), scfg)
    result = coordinator.run_search(scfg, federation, arch, params)

    method = "oracle" if run["mode"] == "oracle" else "decnas"
    models_dir = out / "models"
    gms = [(arch, params)] + result.gms
    tuned = range(len(gms)) if run["tune"] == "all" else sorted({0, len(gms) - 1})
    rows = []
    for t in tuned:
        a, p = gms[t]
        p = tune(cfg, a, p, federation, run["fl_tune_rounds"], _TUNE_BASE + t)
        acc = coordinator.holdout_accuracy(a, p, federation)
        rows.append(FrontierRow(method, t, nn.macs(a), nn.macs(a) / r0, acc))
        log.info("tuned GM_%d: %d MACs, top-1 %.4f", t, nn.macs(a), acc)
    for t, (a, p) in enumerate(gms):
        save_model(models_dir / f"gm_{t:03d}.npz", a, p)

    _write(out / "frontier.csv", frontier_csv(rows))
    _write(out / "costs.csv", cost.to_csv(result.ledger))
    summary = cost.summarize(result.ledger, run["seconds_per_mac"])
    outputs = ["frontier.csv", "costs.csv"] + [f"models/gm_{t:03d}.npz" for t in range(len(gms))]
    doc = {
        "seed": run["seed"],
        "config": cfg.echo(),
        "seed_model": {"macs": r0, "param_bytes": nn.param_bytes(arch), "fused_acc": result.initial_acc},
        "budgets": list(result.schedule.budgets),
        "iterations": [r.as_dict() for r in result.reports],
        "cost_summary": summary.as_dict(),
        "clients": len(federation),
        "content_hash": content_hash(out, outputs),
    }
    _write(out / "run.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def run_baseline(cfg: RunConfig, out: Path, factors=None) -> list[FrontierRow]:
    """Width-multiplier models trained from scratch; rows are merged into frontier.csv.

    Without explicit factors, one model is matched to the smallest searched
    model already in ``frontier.csv``.
    """
    out = Path(out)
    path = out / "frontier.csv"
    existing = read_frontier(path) if path.exists() else []
    arch = build_model(cfg)
    r0 = nn.macs(arch)
    factors = tuple(factors or cfg.get("baseline", "factors"))
    if not factors:
        searched = [r for r in existing if r.method != "width_multiplier"]
        if not searched:
            raise ValueError("no factors given and no searched rows to match in frontier.csv")
        factors = (pruner.factor_for_macs(arch, min(r.macs for r in searched)),)
    federation = build_federation(cfg)
    run = cfg["run"]
    rounds = run["pretrain_rounds"] + run["fl_tune_rounds"]
    rows = []
    for k, f in enumerate(factors):
        if not 0 < f <= 1:
            raise ValueError(f"width factor must lie in (0, 1], got {f}")
        a = pruner.width_multiplier(arch, f)
        p = tune(cfg, a, init_for(cfg, a, 1 + k), federation, rounds, _WIDTH_BASE + k)
        acc = coordinator.holdout_accuracy(a, p, federation)
        rows.append(FrontierRow("width_multiplier", k, nn.macs(a), nn.macs(a) / r0, acc))
        log.info("width %.4f: %d MACs, top-1 %.4f", f, nn.macs(a), acc)
    kept = [r for r in existing if r.method != "width_multiplier"]
    _write(path, frontier_csv(kept + rows))
    return rows


def run_fl_tune(cfg: RunConfig, out: Path, model_path=None, rounds: int | None = None) -> dict:
    """FL-tune a saved model (or a fresh seed model) and save the result."""
    out = Path(out)
    federation = build_federation(cfg)
    if model_path:
        arch, params = load_model(model_path)
        stream = _TUNE_BASE
    else:
        arch = build_model(cfg)
        params = init_for(cfg, arch, 0)
        stream = _SCRATCH
    rounds = cfg.get("run", "fl_tune_rounds") if rounds is None else rounds
    params = tune(cfg, arch, params, federation, rounds, stream)
    acc = coordinator.holdout_accuracy(arch, params, federation)
    save_model(out / "tuned.npz", arch, params)
    return {"macs": nn.macs(arch), "rounds": rounds, "top1_accuracy": acc}


# ------------------------------------------------------------------ report


SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def frontier_svg(rows, width: int = 520, height: int = 360) -> str:
    """Accuracy against macs_ratio, one polyline per method."""
    pad = 50
    methods = sorted({r.method for r in rows})
    xs = [r.macs_ratio for r in rows] or [0, 1]
    ys = [r.top1_accuracy for r in rows] or [0, 1]
    x0, x1 = min(xs + [0.0]), max(xs + [1.0])
    y0, y1 = min(ys), max(ys)
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 0.05, y1 + 0.05

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="12">MACs ratio</text>',
        f'<text x="14" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 14 {height / 2:.0f})" '
        f'text-anchor="middle">top-1 accuracy</text>',
        f'<text x="{pad}" y="{height - pad + 16}" font-size="10" text-anchor="middle">{x0:.2f}</text>',
        f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" text-anchor="middle">{x1:.2f}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{y0:.3f}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{y1:.3f}</text>',
    ]
    for k, m in enumerate(methods):
        color = SVG_COLORS[k % len(SVG_COLORS)]
        pts = sorted((r.macs_ratio, r.top1_accuracy) for r in rows if r.method == m)
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        parts.append(f'<polyline class="method" data-method="{m}" points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{color}"/>')
        parts.append(f'<text x="{width - pad - 110}" y="{pad + 14 * k}" font-size="11" fill="{color}">{m}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def report(run_dir: Path, seconds_per_mac: float | None = None) -> str:
    run_dir = Path(run_dir)
    missing = [n for n in ("frontier.csv", "costs.csv") if not (run_dir / n).exists()]
    if missing:
        raise FileNotFoundError(f"{run_dir}: missing {', '.join(missing)}")
    rows = read_frontier(run_dir / "frontier.csv")
    entries = cost.read_csv((run_dir / "costs.csv").read_text(encoding="utf-8"))
    if seconds_per_mac is None:
        seconds_per_mac = cost.DEFAULT_SECONDS_PER_MAC
        meta = run_dir / "run.json"
        if meta.exists():
            seconds_per_mac = json.loads(meta.read_text())["config"]["run"]["seconds_per_mac"]
    lines = []
    if not rows:
        lines.append("no rows in frontier.csv")
    else:
        lines.append(f"{'method':<18}{'iter':>5}{'macs':>12}{'ratio':>9}{'top1':>9}")
        for r in sorted(rows, key=lambda r: (-r.macs, r.method, r.iteration)):
            lines.append(f"{r.method:<18}{r.iteration:>5}{r.macs:>12}{r.macs_ratio:>9.4f}{r.top1_accuracy:>9.4f}")
    s = cost.summarize(entries, seconds_per_mac)
    lines += [
        "",
        f"ledger entries        {len(entries)}",
        f"clients               {s.clients}",
        f"total uplink bytes    {s.total_uplink_bytes}",
        f"total downlink bytes  {s.total_downlink_bytes}",
        f"total compute MACs    {s.total_compute_macs}",
        f"total compute seconds {s.total_compute_seconds:.3f}",
        f"avg uplink / client   {s.avg_uplink_bytes:.1f}",
    ]
    _write(run_dir / "frontier.svg", frontier_svg(rows))
    return "\n".join(lines) + "\n"
