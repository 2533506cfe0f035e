"""`tfids` command line: synth, prepare, train, eval, attribute.

Each subcommand reads the run config, writes its outputs under the output
directory and records them (with sha256 digests and the config hash) in
``<command>_manifest.json``. Content digests of JSON documents ignore the
``runtime`` field, which holds wall-clock measurements.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
from importlib import resources
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import FORMAT_VERSION, __version__
from . import autodiff as ad
from .attribution import (AttributionConfig, baseline_matrix, export_attribution, integrated_gradients,
                          top_k)
from .config import RunConfig, canonical_json, load_config
from .errors import ConfigError, DataError, ThreatFormerError
from .evaluation import (drift_blocks, measure_latency, metric_suite, pr_auc, pr_points,
                         robustness_eval, roc_points)
from .flow_data import generate_synthetic, parse_flows, write_flows
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import PARTS, prepare
from .preprocessing import PreprocessStats
from .sequencing import class_weights, read_sequence_dump, stack, write_sequence_dump
from .splitting import SplitConfig, cuts_from_fractions
from .training import train

log = logging.getLogger("tfids")


def report_schema() -> dict:
    """JSON schema that every report.json conforms to."""
    return json.loads(resources.files(__package__).joinpath("schemas/report.schema.json").read_text())


def content_digest(path: Path) -> str:
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        if isinstance(doc, dict):
            doc.pop("runtime", None)
        return hashlib.sha256(canonical_json(doc).encode()).hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_json(path: Path, doc: dict, cfg: RunConfig) -> Path:
    doc = {"format_version": FORMAT_VERSION, "config_hash": cfg.config_hash(), **doc}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def write_manifest(cfg: RunConfig, command: str, outputs: list[Path], extra: Optional[dict] = None,
                   started: Optional[float] = None) -> Path:
    out = Path(cfg.paths.out_dir)
    doc = {
        "command": command,
        "package_version": __version__,
        "outputs": {str(p.relative_to(out)): content_digest(p) for p in outputs},
        **(extra or {}),
        "runtime": {"finished_unix": time.time(),
                    "elapsed_s": None if started is None else time.perf_counter() - started},
    }
    return write_json(out / f"{command}_manifest.json", doc, cfg)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(cfg: RunConfig) -> list[Path]:
    started = time.perf_counter()
    out = _out_dir(cfg)
    synth = cfg.synth_config()
    records = generate_synthetic(synth)
    path = out / "data.csv"
    with open(path, "w", newline="") as fh:
        write_flows(records, cfg.schema_config(), fh)
    n_attack = sum(r.label for r in records)
    write_manifest(cfg, "synth", [path], {"n_records": len(records), "n_attack": n_attack}, started)
    log.info("wrote %d records (%d attack) to %s", len(records), n_attack, path)
    return [path]


def _input_csv(cfg: RunConfig) -> Path:
    if cfg.paths.input_csv:
        return Path(cfg.paths.input_csv)
    if cfg.synth is not None:
        return Path(cfg.paths.out_dir) / "data.csv"
    raise ConfigError("paths.input_csv is required without a synth section")


def _feature_names(cfg: RunConfig) -> list[str]:
    names = list(cfg.schema_config().numeric_columns)
    return names + [f"observed:{n}" for n in names]


def cmd_prepare(cfg: RunConfig) -> list[Path]:
    started = time.perf_counter()
    out = _out_dir(cfg)
    src = _input_csv(cfg)
    if not src.exists():
        raise DataError(f"input CSV {src} does not exist (run `tfids synth` first?)")
    schema = cfg.schema_config()
    records = parse_flows(src, schema)
    if not records:
        raise DataError(f"{src} contains no data rows")
    sp = cfg.split
    if sp.t_tr is not None:
        t_tr, t_va = float(sp.t_tr), float(sp.t_va)
    else:
        t_tr, t_va = cuts_from_fractions(records, sp.train_frac, sp.val_frac)
    data = prepare(records, SplitConfig(t_tr, t_va, frozenset(sp.ood_families)), cfg.sequencer,
                   epsilon=cfg.preprocess.epsilon, feature_names=schema.numeric_columns)
    for w in data.split.warnings:
        log.warning(w)

    outputs = [
        write_json(out / "stats.json", {**data.stats.to_json(), "stats_digest": data.stats.digest(),
                                        "feature_names": list(schema.numeric_columns),
                                        "categorical_names": list(schema.categorical_columns)}, cfg),
        write_json(out / "split.json", data.split.to_manifest(), cfg),
    ]
    seq_dir = out / "sequences"
    seq_dir.mkdir(exist_ok=True)
    for part in PARTS:
        path = seq_dir / f"{part}.bin"
        write_sequence_dump(path, data.sequences[part], cfg.sequencer.L, data.d_in, data.n_cat,
                            {"config_hash": cfg.config_hash(), "stats_digest": data.stats.digest()})
        outputs += [path, path.with_suffix(".json")]
    counts = {p: len(data.sequences[p]) for p in PARTS}
    positives = {p: int(sum(s.y for s in data.sequences[p])) for p in PARTS}
    write_manifest(cfg, "prepare", outputs, {"n_records": len(records), "sequences": counts,
                                             "positives": positives, "stats_digest": data.stats.digest(),
                                             "split_warnings": list(data.split.warnings)}, started)
    log.info("prepared sequences %s", counts)
    return outputs


def _load_prepared(cfg: RunConfig):
    out = Path(cfg.paths.out_dir)
    stats_path = out / "stats.json"
    if not stats_path.exists():
        raise DataError(f"{stats_path} not found (run `tfids prepare` first)")
    stats_doc = json.loads(stats_path.read_text())
    stats = PreprocessStats.from_json(stats_doc)
    seqs = {p: read_sequence_dump(out / "sequences" / f"{p}.bin") for p in PARTS}
    return stats, stats_doc, seqs


def _model_config(cfg: RunConfig, stats: PreprocessStats, seed: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(d_in=2 * stats.d, n_continuous=stats.d, d_model=m.d_model, n_heads=m.n_heads,
                       n_layers=m.n_layers, d_ff=m.d_ff, dropout_rate=m.dropout_rate,
                       cat_vocab_sizes=tuple(len(v) for v in stats.vocabularies),
                       cat_embed_dims=m.cat_embed_dims, pooling=m.pooling, seed=seed)


def _train(cfg: RunConfig, stats, seqs, seed: int):
    weights = class_weights([s.y for s in seqs["train"]])
    result = train(seqs["train"], seqs["val"], weights, _model_config(cfg, stats, seed), cfg.train_config(seed))
    return result, weights


def cmd_train(cfg: RunConfig) -> list[Path]:
    started = time.perf_counter()
    out = _out_dir(cfg)
    stats, _, seqs = _load_prepared(cfg)
    result, weights = _train(cfg, stats, seqs, cfg.seed)
    header = {"config_hash": cfg.config_hash(), "stats_digest": stats.digest(),
              "sequencer": {"L": cfg.sequencer.L, "stride": cfg.sequencer.stride},
              "class_weights": {"w0": weights.w0, "w1": weights.w1}}
    final_path, best_path = out / "model_final.tfids", out / "model_best.tfids"
    save_checkpoint(final_path, result.model, {**header, "selection": "final"})
    save_checkpoint(best_path, result.best_model, {**header, "selection": "best_val_auc_pr",
                                                   "best_epoch": result.history.best_epoch})
    Xv, Cv, yv = stack(seqs["val"], cfg.sequencer.L, 2 * stats.d, len(stats.vocabularies))
    best_val = pr_auc(result.best_model.predict(Xv, Cv), yv) if yv.sum() else None
    hist = write_json(out / "history.json", {
        "history": result.history.to_dict(),
        "class_weights": {"w0": weights.w0, "w1": weights.w1},
        "best_val_auc_pr": best_val,
        "resolved_config": cfg.resolved(),
        "runtime": {"wall_time_s": result.history.wall_time_s},
    }, cfg)
    outputs = [final_path, best_path, hist]
    write_manifest(cfg, "train", outputs, {"best_epoch": result.history.best_epoch}, started)
    return outputs


def _write_curve_csv(path: Path, header: list[str], columns) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(float(v)) if v is not None else "" for v in row])
    return path


def evaluate_model(cfg: RunConfig, model, seqs, seed: Optional[int], curve_dir: Optional[Path] = None):
    """Run every configured protocol; returns (protocol documents, runtime info, curve files)."""
    ev = cfg.eval
    L, d_in, n_cat = cfg.sequencer.L, model.config.d_in, model.n_cat
    Xv, Cv, yv = stack(seqs["val"], L, d_in, n_cat)
    val_scores = model.predict(Xv, Cv)
    docs, files, runtime = {}, [], {}
    scored = {}
    for protocol, part in (("chrono", "test"), ("zero_day", "test_ood")):
        if protocol not in ev.protocols:
            continue
        X, C, y = stack(seqs[part], L, d_in, n_cat)
        scores = model.predict(X, C)
        scored[part] = scores
        report = metric_suite(scores, y, protocol, val_scores, yv, ev.fpr_cap, ev.tpr_floor, seed)
        if protocol == "zero_day" and not cfg.split.ood_families:
            report.warnings.append("no held-out families configured; zero-day set is benign-only")
        docs[protocol] = report.to_dict()
        if curve_dir is not None and report.n_pos and report.n_neg:
            fpr, tpr = roc_points(scores, y)
            rec, prec = pr_points(scores, y)
            files.append(_write_curve_csv(curve_dir / f"roc_{protocol}.csv", ["fpr", "tpr"], [fpr, tpr]))
            files.append(_write_curve_csv(curve_dir / f"pr_{protocol}.csv", ["recall", "precision"], [rec, prec]))
    if "robustness" in ev.protocols:
        curve = robustness_eval(model, seqs["test"], ev.epsilons, ev.attack_steps, ev.attack_step_ratio)
        docs["robustness"] = curve.to_dict()
        if curve_dir is not None:
            files.append(_write_curve_csv(curve_dir / "robustness.csv", ["epsilon", "auc_pr"],
                                          [curve.epsilons, curve.auc_pr]))
    if "drift" in ev.protocols:
        blocks = drift_blocks(model, seqs["test"], ev.n_blocks, scores=scored.get("test"))
        docs["drift"] = {"n_blocks": ev.n_blocks,
                         "blocks": [b.__dict__ for b in blocks]}
        if curve_dir is not None:
            files.append(_write_curve_csv(curve_dir / "drift.csv", ["start_time", "end_time", "n", "auc_pr"],
                                          [[b.start_time for b in blocks], [b.end_time for b in blocks],
                                           [b.n for b in blocks], [b.auc_pr for b in blocks]]))
    if seqs["test"]:
        mean_ms, std_ms = measure_latency(model, seqs["test"], ev.latency_batch_size, ev.latency_batches)
        runtime["latency_ms_per_seq"] = {"mean": mean_ms, "std": std_ms, "batch_size": ev.latency_batch_size}
    return docs, runtime, files


def _aggregate(per_seed: list[dict]) -> dict:
    agg = {}
    for protocol in ("chrono", "zero_day"):
        rows = [d[protocol] for d in per_seed if protocol in d]
        if not rows:
            continue
        agg[protocol] = {}
        for key in ("auc_roc", "auc_pr", "recall_at_fpr", "fpr_at_tpr", "f1"):
            vals = [r[key] for r in rows if r[key] is not None]
            if vals:
                agg[protocol][key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
    rob = [d["robustness"]["auc_pr"] for d in per_seed if "robustness" in d]
    if rob:
        agg["robustness"] = {"epsilons": per_seed[0]["robustness"]["epsilons"],
                             "auc_pr_mean": np.mean(rob, axis=0).tolist(),
                             "auc_pr_std": np.std(rob, axis=0).tolist()}
    return agg


def cmd_eval(cfg: RunConfig, checkpoint: Optional[str] = None) -> list[Path]:
    started = time.perf_counter()
    out = _out_dir(cfg)
    stats, _, seqs = _load_prepared(cfg)
    outputs = []
    if cfg.eval.seeds and checkpoint is None:
        per_seed = []
        for seed in cfg.eval.seeds:
            result, _ = _train(cfg, stats, seqs, seed)
            docs, runtime, files = evaluate_model(cfg, result.best_model, seqs, seed,
                                                  out / "curves" / f"seed_{seed}")
            outputs += files
            outputs.append(write_json(out / "reports" / f"seed_{seed}.json",
                                      {"seed": seed, "protocols": docs, "runtime": runtime}, cfg))
            per_seed.append(docs)
        outputs.append(write_json(out / "report.json", {"seeds": list(cfg.eval.seeds),
                                                        "aggregate": _aggregate(per_seed)}, cfg))
    else:
        ckpt = Path(checkpoint) if checkpoint else out / "model_best.tfids"
        if not ckpt.exists():
            raise DataError(f"checkpoint {ckpt} not found (run `tfids train` first)")
        model, header = load_checkpoint(ckpt)
        if header.get("stats_digest") != stats.digest():
            raise DataError("checkpoint was trained with different preprocessing statistics")
        docs, runtime, files = evaluate_model(cfg, model, seqs, cfg.seed, out / "curves")
        outputs += files
        outputs.append(write_json(out / "report.json", {
            "seed": cfg.seed, "checkpoint_sha256": content_digest(ckpt), "protocols": docs,
            "runtime": runtime}, cfg))
    write_manifest(cfg, "eval", outputs, None, started)
    return outputs


def _select(selector: str, model, seqs, stats, L):
    """Resolve 'part:index', 'part:alert', 'part:benign' or 'baseline' to (name, X, cats)."""
    if selector == "baseline":
        X = baseline_matrix((L, 2 * stats.d), stats.d, "mean")
        return "baseline", X, np.zeros((L, len(stats.vocabularies)), np.int64)
    part, _, which = selector.partition(":")
    if part not in seqs or not which:
        raise ConfigError(f"bad sequence selector {selector!r}; use <part>:<index|alert|benign> or baseline")
    samples = seqs[part]
    if not samples:
        raise DataError(f"partition {part!r} has no sequences")
    if which == "alert":
        X, C, _ = stack(samples)
        idx = int(np.argmax(model.predict(X, C)))
    elif which == "benign":
        benign = [i for i, s in enumerate(samples) if s.y == 0]
        if not benign:
            raise DataError(f"partition {part!r} has no benign sequence")
        idx = benign[0]
    else:
        try:
            idx = int(which)
        except ValueError:
            raise ConfigError(f"bad sequence selector {selector!r}") from None
        if not 0 <= idx < len(samples):
            raise ConfigError(f"selector {selector!r} out of range (0..{len(samples) - 1})")
    return f"{part}_{idx}", samples[idx].X, samples[idx].cats


def cmd_attribute(cfg: RunConfig, checkpoint: Optional[str] = None, selectors=None,
                  k: Optional[int] = None) -> list[Path]:
    started = time.perf_counter()
    out = _out_dir(cfg)
    stats, stats_doc, seqs = _load_prepared(cfg)
    ckpt = Path(checkpoint) if checkpoint else out / "model_best.tfids"
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} not found (run `tfids train` first)")
    model, _ = load_checkpoint(ckpt)
    ac = cfg.attribute
    k = ac.top_k if k is None else k
    names = _feature_names(cfg)
    cat_names = stats_doc.get("categorical_names") or list(cfg.schema_config().categorical_columns)
    outputs, listing = [], {}
    for selector in selectors or ac.select:
        name, X, C = _select(selector, model, seqs, stats, cfg.sequencer.L)
        amap = integrated_gradients(model, X, C, AttributionConfig(baseline=ac.baseline, m_steps=ac.m_steps),
                                    feature_names=names, categorical_names=cat_names)
        for fmt in ac.formats:
            path = out / "attributions" / f"{name}.{fmt}"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(export_attribution(amap, fmt, {"config_hash": cfg.config_hash(),
                                                           "selector": selector}))
            outputs.append(path)
        cells = top_k(amap, k)
        listing[name] = {"selector": selector, "score": amap.score, "baseline_score": amap.baseline_score,
                         "completeness_gap": amap.completeness_gap,
                         "top_k": [{"t": t, "feature": f, "value": v} for t, f, v in cells]}
        print(f"{name}: score={amap.score:.4f} baseline={amap.baseline_score:.4f} "
              f"gap={amap.completeness_gap:.2e}")
        for t, f, v in cells:
            print(f"  t={t:<3d} {f:<24s} {v:+.6f}")
    outputs.append(write_json(out / "attributions" / "summary.json", {"selections": listing, "top_k": k}, cfg))
    write_manifest(cfg, "attribute", outputs, None, started)
    return outputs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tfids", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("synth", "generate a synthetic flow CSV"),
                           ("prepare", "split, fit preprocessing, build sequences"),
                           ("train", "train the model"),
                           ("eval", "evaluate a checkpoint (or a seed sweep)"),
                           ("attribute", "Integrated Gradients for selected sequences")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None, help="output directory (overrides paths.out_dir)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "attribute"):
            p.add_argument("--checkpoint", default=None)
        if name == "attribute":
            p.add_argument("--select", action="append", default=None,
                           help="part:index, part:alert, part:benign or baseline (repeatable)")
            p.add_argument("--top-k", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ad.use_deterministic()
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "prepare":
            cmd_prepare(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        else:
            cmd_attribute(cfg, args.checkpoint, args.select, args.top_k)
    except ThreatFormerError as exc:
        print(f"tfids {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
