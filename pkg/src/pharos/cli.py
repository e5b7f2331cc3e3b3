"""Command line pipeline: gen-data, train, encode, attack, eval, advtrain, report.

Every command reads and writes artifacts inside one run directory (``--out``)
and leaves a ``manifest-<command>.json`` next to them with input/output
checksums, the resolved configuration and library versions. Nothing
time-dependent goes into artifacts; attack wall times live in separate
``*.timing.json`` files.

Exit status: 0 success, 1 usage or configuration error, 2 missing or
malformed data, 3 numerical failure.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import click
import jsonschema
import numpy as np

from . import __version__
from .attack import AdvBatch, AttackConfig, _frac_str, as_fraction, pgd_attack_batch, read_pha, write_pha
from .data import gen_synthetic, load_dataset, save_dataset
from .errors import ConfigError, FormatError, NumericalError, PharosError
from .hashcore import CodeTable, negate, read_phc, write_phc
from .model import TrainConfig, adv_train, encode, load_net, save_net, train_pairwise
from .retrieval import DEFAULT_PN_GRID, DEFAULT_TOPN, Index, evaluate
from .semantics import anchor_code, pharos_batch

DEFAULTS = {
    "seed": 42,
    "out": "run",
    "workers": None,
    "dataset": dict(n_classes=8, dim=64, n_train=2000, n_db=8000, n_query=500, label_density=0.2,
                    noise_sigma=0.05),
    "model": dict(bits=32, hidden=[256], epochs=50, lr=0.01, momentum=0.9, weight_decay=5e-4, batch_size=32,
                  alpha=0.1),
    "attack": dict(method="pga", epsilon="8/255", eta="1/255", steps=100, t=-0.8, inner_steps=10, pool="train",
                   scheme="dice", cap=None, chunk=50),
    "eval": dict(topn=DEFAULT_TOPN, pn_grid=list(DEFAULT_PN_GRID)),
}

DATA_FILE = "data.phf"
MODEL_FILE = "model.phm"
ADV_MODEL_FILE = "model-adv.phm"


# --- configuration -------------------------------------------------------------


def config_schema() -> dict:
    return json.loads(resources.files("pharos").joinpath("config_schema.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from None
    att = cfg.get("attack", {})
    if "epsilon" in att and "eta" in att:
        eps, eta = as_fraction(att["epsilon"]), as_fraction(att["eta"])
        if not 0 < eta <= eps:
            raise ConfigError(f"config field attack: need 0 < eta <= epsilon, got eta={eta}, epsilon={eps}")
    ds = cfg.get("dataset", {})
    if ds.get("n_train", 0) > ds.get("n_db", 1 << 62):
        raise ConfigError("config field dataset/n_train: exceeds dataset/n_db")


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides``; validated at each layer."""
    cfg = DEFAULTS
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        validate_config(user)
        cfg = _merge(cfg, user)
    cfg = _merge(cfg, overrides or {})
    validate_config(cfg)
    att = cfg["attack"]
    att["epsilon"] = _frac_str(as_fraction(att["epsilon"]))
    att["eta"] = _frac_str(as_fraction(att["eta"]))
    return cfg


def attack_config(cfg: dict, steps: int | None = None, method: str | None = None) -> AttackConfig:
    a = cfg["attack"]
    return AttackConfig(a["epsilon"], a["eta"], a["steps"] if steps is None else steps, a["t"],
                        method or a["method"], cfg["seed"])


def train_config(cfg: dict) -> TrainConfig:
    m = cfg["model"]
    return TrainConfig(lr=m["lr"], momentum=m["momentum"], weight_decay=m["weight_decay"],
                       batch_size=m["batch_size"], epochs=m["epochs"], seed=cfg["seed"], alpha=m["alpha"],
                       hidden=tuple(m["hidden"]))


# --- run directory helpers -----------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _versions() -> dict:
    import numba

    return {"pharos": __version__, "numpy": np.__version__, "numba": numba.__version__,
            "python": platform.python_version()}


def _recorded(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in ("out", "workers")}


def write_manifest(out: Path, name: str, cfg: dict, inputs, outputs, extra=None) -> None:
    doc = {
        "command": name,
        "config": _recorded(cfg),
        "inputs": {Path(p).name: sha256_file(p) for p in inputs},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
        "versions": _versions(),
    }
    if extra:
        doc.update(extra)
    (out / f"manifest-{name}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _need(path: Path, produced_by: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{path}: not found (run `pharos {produced_by}` first)")
    return path


def _model_path(out: Path, model: str) -> Path:
    return _need(out / model, "advtrain" if model == ADV_MODEL_FILE else "train")


def _stem(model: str) -> str:
    return Path(model).stem


def _check_model_data(net, ds, model_path):
    if net.in_dim != ds.dim:
        raise FormatError(f"model input width {net.in_dim} does not match dataset dim {ds.dim}", None, model_path)


def _load_codes(path: Path, k: int, rows: int) -> CodeTable:
    table = read_phc(_need(path, "encode"))
    if table.k != k:
        raise FormatError(f"code length K={table.k} does not match the model's K={k}", 8, path)
    if len(table) != rows:
        raise FormatError(f"{len(table)} codes but the dataset split has {rows} rows", 8, path)
    return table


# --- attacks -------------------------------------------------------------------


def _attack_chunk(job):
    """Attack rows one at a time so per-sample timings mean seconds per image."""
    net, x, targets, cfg, ids = job
    rows, losses, times = [], [], []
    for i in range(x.shape[0]):
        t0 = time.perf_counter()
        res = pgd_attack_batch(net, x[i:i + 1], targets[i:i + 1], cfg, ids[i:i + 1])
        times.append(time.perf_counter() - t0)
        rows.append(res.x_adv[0])
        losses.append(res.losses[0])
    return np.array(rows), np.array(losses), times


def run_attack_jobs(net, x, targets, cfg: AttackConfig, chunk: int, workers: int):
    """Split rows into fixed-size chunks; results are reassembled in row order."""
    jobs = [(net, x[lo:lo + chunk], targets[lo:lo + chunk], cfg, np.arange(lo, min(lo + chunk, len(x))))
            for lo in range(0, len(x), chunk)]
    if workers <= 1 or len(jobs) == 1:
        parts = [_attack_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_attack_chunk, jobs))
    x_adv = np.concatenate([p[0] for p in parts])
    losses = np.concatenate([p[1] for p in parts])
    times = [t for p in parts for t in p[2]]
    return x_adv, losses, times


def anchor_targets(q_labels, train_codes: CodeTable, train_labels, seed: int) -> np.ndarray:
    """Targets for the anchor-targeted baseline.

    Each query draws (from its own seeded stream) one training item whose
    label set is disjoint from the query's, falling back to any training
    item; the anchor is the majority code of the training items carrying
    exactly that label set. Returns ``-anchor`` as the code to push away from.
    """
    out = np.empty((q_labels.shape[0], train_codes.k), dtype=np.int8)
    shares = q_labels.astype(np.int64) @ train_labels.T.astype(np.int64) > 0
    for i in range(q_labels.shape[0]):
        rng = np.random.default_rng([seed, 3, i])
        cand = np.flatnonzero(~shares[i])
        pick = rng.choice(cand) if cand.size else rng.integers(len(train_codes))
        same = np.flatnonzero((train_labels == train_labels[pick]).all(axis=1))
        out[i] = negate(anchor_code(train_codes[same])).signs()
    return out


# --- click plumbing ------------------------------------------------------------


def _common(f):
    f = click.option("--out", type=click.Path(file_okay=False), default=None, help="Run directory.")(f)
    f = click.option("--workers", type=click.IntRange(min=1), default=None,
                     help="Worker processes for attacks (default: available CPUs).")(f)
    f = click.option("--seed", type=click.IntRange(min=0), default=None, help="Global seed.")(f)
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="ExperimentConfig JSON file.")(f)
    return f


def _budget(ctx, param, value):
    if value is None:
        return None
    try:
        f = as_fraction(value)
    except ConfigError as exc:
        raise click.BadParameter(str(exc)) from None
    if f <= 0:
        raise click.BadParameter("must be positive")
    return _frac_str(f)


def _setup(config_path, seed, workers, out, **sections):
    over = {}
    if seed is not None:
        over["seed"] = seed
    if workers is not None:
        over["workers"] = workers
    if out is not None:
        over["out"] = out
    for section, vals in sections.items():
        vals = {k: v for k, v in vals.items() if v is not None}
        if vals:
            over[section] = vals
    cfg = load_config(config_path, over)
    run = Path(cfg["out"])
    run.mkdir(parents=True, exist_ok=True)
    return cfg, run, cfg["workers"] or _available_cpus()


def _available_cpus() -> int:
    if hasattr(os, "sched_getaffinity"):
        return len(os.sched_getaffinity(0))
    return os.cpu_count() or 1


def _load_data(run: Path):
    path = _need(run / DATA_FILE, "gen-data")
    return load_dataset(path), path


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="pharos")
def cli():
    """Pharos-code adversarial robustness toolkit for hashing retrieval."""


@cli.command("gen-data")
@_common
def gen_data_cmd(config_path, seed, workers, out):
    """Generate the synthetic multi-label dataset."""
    cfg, run, _ = _setup(config_path, seed, workers, out)
    ds = gen_synthetic(**cfg["dataset"], seed=cfg["seed"])
    path = run / DATA_FILE
    save_dataset(path, ds)
    write_manifest(run, "gen-data", cfg, [], [path])
    click.echo(f"wrote {path} ({ds.features.shape[0]} items, {ds.n_classes} classes, dim {ds.dim})")


@cli.command("train")
@_common
@click.option("--bits", type=click.IntRange(1, 4096), default=None, help="Code length K.")
def train_cmd(config_path, seed, workers, out, bits):
    """Train the hashing network with the pairwise loss."""
    cfg, run, _ = _setup(config_path, seed, workers, out, model={"bits": bits})
    ds, data_path = _load_data(run)
    feats, labels = ds.split("train")
    net = train_pairwise(feats, labels, cfg["model"]["bits"], train_config(cfg))
    path = run / MODEL_FILE
    save_net(path, net)
    write_manifest(run, "train", cfg, [data_path], [path])
    click.echo(f"wrote {path} (K={net.k}, {net.n_params} parameters)")


@cli.command("advtrain")
@_common
@click.option("--bits", type=click.IntRange(1, 4096), default=None, help="Code length K.")
@click.option("--epsilon", callback=_budget, default=None, help="L-inf budget, e.g. 8/255.")
@click.option("--eta", callback=_budget, default=None, help="Step size, e.g. 1/255.")
@click.option("--steps", type=click.IntRange(min=0), default=None, help="Inner attack steps.")
@click.option("--t", "t", type=float, default=None, help="Margin t of the attack loss.")
def advtrain_cmd(config_path, seed, workers, out, bits, epsilon, eta, steps, t):
    """Adversarially train a network against pharos-guided attacks."""
    cfg, run, _ = _setup(config_path, seed, workers, out, model={"bits": bits},
                         attack={"epsilon": epsilon, "eta": eta, "inner_steps": steps, "t": t})
    ds, data_path = _load_data(run)
    feats, labels = ds.split("train")
    acfg = attack_config(cfg, steps=cfg["attack"]["inner_steps"], method="pga")
    net = adv_train(feats, labels, cfg["model"]["bits"], acfg, train_config(cfg), scheme=cfg["attack"]["scheme"])
    path = run / ADV_MODEL_FILE
    save_net(path, net)
    write_manifest(run, "advtrain", cfg, [data_path], [path])
    click.echo(f"wrote {path} (K={net.k}, inner steps {acfg.steps})")


@cli.command("encode")
@_common
@click.option("--model", default=MODEL_FILE, show_default=True, help="Model file inside the run directory.")
def encode_cmd(config_path, seed, workers, out, model):
    """Hash the query, database and training splits."""
    cfg, run, _ = _setup(config_path, seed, workers, out)
    ds, data_path = _load_data(run)
    model_path = _model_path(run, model)
    net = load_net(model_path)
    _check_model_data(net, ds, model_path)
    outputs = []
    for split in ("query", "database", "train"):
        path = run / f"{_stem(model)}.{split}.phc"
        write_phc(path, encode(net, ds.split(split)[0]))
        outputs.append(path)
    write_manifest(run, f"encode-{_stem(model)}", cfg, [data_path, model_path], outputs)
    click.echo(f"wrote {', '.join(p.name for p in outputs)}")


@cli.command("attack")
@_common
@click.option("--model", default=MODEL_FILE, show_default=True, help="Model file inside the run directory.")
@click.option("--method", type=click.Choice(["pga", "pga-dagger", "pga-weighted", "hag", "anchor-targeted"]),
              default=None, help="Attack method.")
@click.option("--epsilon", callback=_budget, default=None, help="L-inf budget, e.g. 8/255.")
@click.option("--eta", callback=_budget, default=None, help="Step size, e.g. 1/255.")
@click.option("--steps", type=click.IntRange(min=0), default=None, help="PGD iterations T.")
@click.option("--t", "t", type=float, default=None, help="Margin t of the attack loss.")
def attack_cmd(config_path, seed, workers, out, model, method, epsilon, eta, steps, t):
    """Attack every query and store the adversarial inputs and their codes."""
    cfg, run, n_workers = _setup(config_path, seed, workers, out,
                                 attack={"method": method, "epsilon": epsilon, "eta": eta, "steps": steps, "t": t})
    acfg = attack_config(cfg)
    ds, data_path = _load_data(run)
    model_path = _model_path(run, model)
    net = load_net(model_path)
    _check_model_data(net, ds, model_path)
    xq, yq = ds.split("query")
    xq = xq.astype(np.float64)
    pool_split = "train" if cfg["attack"]["pool"] == "train" else "database"

    t0 = time.perf_counter()
    pool_x, pool_y = ds.split(pool_split)
    pool_codes = encode(net, pool_x)
    t_encode = time.perf_counter() - t0

    t0 = time.perf_counter()
    if acfg.method == "hag":
        targets = encode(net, xq).signs()
    elif acfg.method == "anchor-targeted":
        targets = anchor_targets(yq, pool_codes, pool_y, acfg.seed)
    else:
        targets = pharos_batch(yq, pool_codes, pool_y, cfg["attack"]["scheme"], cfg["attack"]["cap"],
                               cfg["seed"])[0].signs()
    t_target = time.perf_counter() - t0

    x_adv, losses, times = run_attack_jobs(net, xq, targets, acfg, cfg["attack"]["chunk"], n_workers)
    if not np.all(np.isfinite(losses)):
        raise NumericalError("non-finite attack loss")
    codes = encode(net, x_adv)
    batch = AdvBatch(x_adv, losses, codes, np.abs(x_adv - xq).max(axis=1))
    tag = f"{_stem(model)}.{acfg.method}"
    path = run / f"{tag}.pha"
    extra = {"model": model, "model_sha256": sha256_file(model_path), "data_sha256": sha256_file(data_path),
             "pool": cfg["attack"]["pool"], "scheme": cfg["attack"]["scheme"]}
    write_pha(path, batch, acfg, extra)
    attack_total = float(sum(times))
    timing = {"method": acfg.method, "n": len(times), "workers": n_workers, "pool_encode_seconds": t_encode,
              "target_seconds": t_target, "attack_seconds": attack_total,
              "seconds_per_image": attack_total / max(len(times), 1),
              "target_share": t_target / (t_target + attack_total) if attack_total + t_target > 0 else 0.0,
              "per_sample_seconds": times}
    (run / f"{tag}.timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    write_manifest(run, f"attack-{tag}", cfg, [data_path, model_path], [path])
    click.echo(f"wrote {path} (max L-inf {float(batch.linf.max()):.6f}, "
               f"{timing['seconds_per_image'] * 1e3:.2f} ms per image)")


@cli.command("eval")
@_common
@click.option("--model", default=MODEL_FILE, show_default=True, help="Model file inside the run directory.")
@click.option("--method", default="clean", show_default=True,
              type=click.Choice(["clean", "pga", "pga-dagger", "pga-weighted", "hag", "anchor-targeted"]),
              help="Evaluate clean queries or the output of one attack.")
@click.option("--topn", type=click.IntRange(min=1), default=None, help="MAP cutoff.")
def eval_cmd(config_path, seed, workers, out, model, method, topn):
    """MAP@N, PR and P@N curves of clean or adversarial queries."""
    cfg, run, _ = _setup(config_path, seed, workers, out, eval={"topn": topn})
    ds, data_path = _load_data(run)
    model_path = _model_path(run, model)
    net = load_net(model_path)
    _check_model_data(net, ds, model_path)
    stem = _stem(model)
    db_path = run / f"{stem}.database.phc"
    index = Index(_load_codes(db_path, net.k, ds.features.shape[0] - ds.n_query), ds.split("database")[1])
    inputs = [data_path, model_path, db_path]
    if method == "clean":
        q_path = run / f"{stem}.query.phc"
        queries = _load_codes(q_path, net.k, ds.n_query)
    else:
        q_path = _need(run / f"{stem}.{method}.pha", "attack")
        header, _, queries = read_pha(q_path)
        if header.get("model_sha256") != sha256_file(model_path):
            raise FormatError(f"field model_sha256 does not match {model_path.name}; re-run the attack", 8, q_path)
        if header.get("data_sha256") != sha256_file(data_path):
            raise FormatError(f"field data_sha256 does not match {DATA_FILE}; re-run the attack", 8, q_path)
        if queries.k != net.k or len(queries) != ds.n_query:
            raise FormatError(f"holds {len(queries)} codes of K={queries.k}, expected {ds.n_query} of K={net.k}",
                              8, q_path)
    inputs.append(q_path)
    rep = evaluate(queries, ds.split("query")[1], index, cfg["eval"]["topn"], cfg["eval"]["pn_grid"])
    rep.config.update({"method": method, "model": model, "seed": cfg["seed"]})
    if method != "clean":
        rep.config["attack"] = {k: header[k] for k in ("epsilon", "eta", "steps", "t", "method", "seed")}
    base = run / f"{stem}.{method}"
    files = [Path(f"{base}.metrics.json"), Path(f"{base}.pr.csv"), Path(f"{base}.pn.csv")]
    rep.write(*files)
    write_manifest(run, f"eval-{stem}.{method}", cfg, inputs, files)
    click.echo(f"MAP@{cfg['eval']['topn']} {method}: {rep.map:.4f}")


def build_report(run: Path, stem: str) -> list[dict]:
    """Rows of every ``<stem>.<method>.metrics.json``: clean first, then MAP descending."""
    rows = []
    for path in sorted(run.glob(f"{stem}.*.metrics.json")):
        try:
            doc = json.loads(path.read_text())
            rows.append({"method": doc["config"]["method"], "map": float(doc["map"]),
                         "n_queries": len(doc["per_query_ap"]), "topn": int(doc["config"]["topn"])})
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"unreadable metrics file: missing or bad field {exc}", None, path) from None
    if not rows:
        raise FileNotFoundError(f"{run}: no {stem}.*.metrics.json files (run `pharos eval` first)")
    rows.sort(key=lambda r: (r["method"] != "clean", -r["map"], r["method"]))
    return rows


@cli.command("report")
@_common
@click.option("--model", default=MODEL_FILE, show_default=True, help="Model file inside the run directory.")
def report_cmd(config_path, seed, workers, out, model):
    """Comparison table of clean and attacked MAP (JSON and CSV)."""
    cfg, run, _ = _setup(config_path, seed, workers, out)
    stem = _stem(model)
    rows = build_report(run, stem)
    json_path, csv_path = run / f"{stem}.report.json", run / f"{stem}.report.csv"
    json_path.write_text(json.dumps({"model": model, "rows": rows}, indent=2, sort_keys=True) + "\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "map", "n_queries", "topn"])
        for r in rows:
            w.writerow([r["method"], repr(r["map"]), r["n_queries"], r["topn"]])
    timing_rows = []
    for r in rows:
        tp = run / f"{stem}.{r['method']}.timing.json"
        if tp.is_file():
            t = json.loads(tp.read_text())
            timing_rows.append([r["method"], t["seconds_per_image"], t["target_share"]])
    if timing_rows:
        with open(run / f"{stem}.timing.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "seconds_per_image", "target_share"])
            w.writerows(timing_rows)
    metrics = sorted(run.glob(f"{stem}.*.metrics.json"))
    write_manifest(run, f"report-{stem}", cfg, metrics, [json_path, csv_path])
    for r in rows:
        click.echo(f"{r['method']:<16} {r['map']:.4f}")


# --- entry point ---------------------------------------------------------------


def run(argv=None) -> int:
    """Invoke the CLI and map failures onto exit codes instead of raising."""
    try:
        cli.main(args=argv, prog_name="pharos", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 3
    except (PharosError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
