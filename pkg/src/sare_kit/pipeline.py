"""End-to-end commands: data generation, training, sampling, refinement, evaluation.

Directory layout under ``paths.root``::

    data/dataset.json, data/{train,test}/<object_id>/
    run/checkpoint.bin, run/loss.csv, run/run_manifest.json
    predictions/{gen,refine}/<object_id>/, predictions/{gen,refine}/run_manifest.json
    eval/metrics.csv, eval/summary.json
    ablate/ablation.csv, ablate/ablation.json
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import scipy
import torch

from . import __version__
from .config import RunConfig, derive_seed
from .dataio import read_sample, write_sample
from .errors import ArtifactError, ConfigError, GenerationFailureError
from .flow import FlowNet, ModelSpec, TrainSpec, load_checkpoint, save_checkpoint, train, write_loss_csv
from .fracture import fracture_object, k_schedule
from .metrics import binned_report, evaluate_object, metrics_csv, metrics_rows, prf_counts, \
    random_pose_baseline
from .prepare import eval_sample, eval_view, prepare, training_example
from .refine import RefineConfig, refine_pipeline, write_refine_report
from .sampler import ModelField, SampleResult, generate, read_prediction, write_prediction

log = logging.getLogger(__name__)

SPLITS = ("train", "test")
STAGES = {
    "data": ("seed", "dataset"),
    "train": ("seed", "dataset", "query", "model", "train"),
    "sample": ("seed", "dataset", "query", "model", "train", "sample"),
    "refine": ("seed", "dataset", "query", "model", "train", "sample", "refine"),
}


def stage_hash(config: RunConfig, stage: str) -> str:
    """Hash of the config sections a stage's outputs depend on."""
    d = config.hashed_dict()
    blob = json.dumps({k: d[k] for k in STAGES[stage]}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def versions() -> dict:
    return {"sare_kit": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__}


def _root(config: RunConfig) -> Path:
    return Path(config.paths.root)


def _manifest(config: RunConfig, command: str, stage: str | None, **extra) -> dict:
    return {"command": command, "config_hash": config.config_hash(),
            "stage_hash": stage_hash(config, stage) if stage else None,
            "seed": config.seed, "versions": versions(),
            "config": config.model_dump(mode="json"), **extra}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _read_manifest(path: Path) -> dict:
    if not path.exists():
        raise ArtifactError(f"missing artifact: {path}")
    return json.loads(path.read_text())


def _check_upstream(config: RunConfig, manifest_path: Path, stage: str, force: bool = False) -> dict:
    m = _read_manifest(manifest_path)
    want = stage_hash(config, stage)
    if m.get("stage_hash") != want:
        msg = (f"{manifest_path} was produced under a different configuration "
               f"({stage} hash {m.get('stage_hash')} != {want})")
        if not force:
            raise ArtifactError(msg + "; pass --force to pair anyway")
        log.warning("%s (forced)", msg)
    return m


def _map(fn: Callable, items: Iterable, jobs: int = 1) -> list:
    """Order-preserving map; results do not depend on ``jobs``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --- gen-data -----------------------------------------------------------------

def object_id(split: str, index: int) -> str:
    return f"{split}_{index:05d}"


def dataset_plan(config: RunConfig) -> list[dict]:
    ds = config.dataset
    plan = []
    for split, count in (("train", ds.n_train), ("test", ds.n_test)):
        hist = None
        if ds.k_histogram:
            # the histogram describes proportions; scale it to this split
            total = sum(ds.k_histogram.values())
            ks = [k for k, c in sorted(ds.k_histogram.items()) for _ in range(c)]
            hist = {}
            for i in range(count):
                k = ks[i * total // max(count, 1)]
                hist[k] = hist.get(k, 0) + 1
        Ks = k_schedule(count, ds.k_min, ds.k_max, hist, derive_seed(config.seed, "k", split))
        shape_rng = np.random.default_rng(derive_seed(config.seed, "shapes", split))
        for i, K in enumerate(Ks):
            plan.append({"split": split, "object_id": object_id(split, i), "K": int(K),
                         "shape": ds.shapes[int(shape_rng.integers(len(ds.shapes)))],
                         "seed": derive_seed(config.seed, "object", split, i)})
    return plan


def _gen_one(args) -> str:
    item, root, n_points, eps_f, eps_adj, stage = args
    try:
        sample = fracture_object(item["shape"], item["K"], item["seed"], n_points, eps_f, eps_adj,
                                 object_id=item["object_id"])
    except GenerationFailureError as exc:
        raise GenerationFailureError(f"object {item['object_id']}: {exc}") from exc
    write_sample(Path(root) / item["split"], sample, {"stage_hash": stage})
    return item["object_id"]


def cmd_gen_data(config: RunConfig, jobs: int = 1) -> Path:
    plan = dataset_plan(config)
    root = _root(config) / "data"
    ds = config.dataset
    stage = stage_hash(config, "data")
    _map(_gen_one, [(it, str(root), ds.n_points, ds.eps_f, ds.eps_adj, stage) for it in plan], jobs)
    _write_json(root / "dataset.json", _manifest(config, "gen-data", "data", objects=plan))
    return root


def load_split(config: RunConfig, split: str) -> list:
    root = _root(config) / "data"
    m = _check_upstream(config, root / "dataset.json", "data")
    ids = [o["object_id"] for o in m["objects"] if o["split"] == split]
    out = []
    for oid in ids:
        path = root / split / oid
        if not path.exists():
            raise ArtifactError(f"missing artifact: {path}")
        out.append(read_sample(path))
    return out


# --- train --------------------------------------------------------------------

def model_spec(config: RunConfig) -> ModelSpec:
    mc, q = config.model, config.query
    return ModelSpec(depth=mc.depth, width=mc.width, heads=mc.heads, attach_layer=mc.attach_layer,
                     mlp_ratio=mc.mlp_ratio, bands=q.bands, x_bands=mc.x_bands, max_parts=mc.max_parts,
                     fracture_head=mc.fracture_head, adjacency_head=mc.adjacency_head)


def train_spec(config: RunConfig) -> TrainSpec:
    t = config.train
    return TrainSpec(epochs=t.epochs, lr=t.lr, weight_decay=t.weight_decay, lambda_F=t.lambda_F,
                     lambda_A=t.lambda_A, grad_clip=t.grad_clip, warmup_steps=t.warmup_steps,
                     schedule=t.schedule)


def train_model(config: RunConfig, samples: list, on_step=None) -> tuple[FlowNet, list]:
    if not samples:
        raise ArtifactError("training split is empty")
    q = config.query
    preps = [prepare(s, q.M, derive_seed(config.seed, "queries", s.object_id), q.k) for s in samples]
    model = FlowNet.create(model_spec(config), derive_seed(config.seed, "init"))
    mp = config.model.max_parts

    def make(epoch, index, rng):
        return training_example(preps[index], rng, q.bands, mp)

    curve = train(model, make, len(preps), train_spec(config), derive_seed(config.seed, "train"), on_step)
    return model, curve


def cmd_train(config: RunConfig) -> Path:
    samples = load_split(config, "train")
    model, curve = train_model(config, samples)
    out = _root(config) / "run"
    out.mkdir(parents=True, exist_ok=True)
    stage = stage_hash(config, "train")
    save_checkpoint(out / "checkpoint.bin", model, {"config_hash": config.config_hash(), "stage_hash": stage})
    write_loss_csv(out / "loss.csv", curve, config.config_hash())
    _write_json(out / "run_manifest.json", _manifest(config, "train", "train", objects=len(samples),
                                                     loss=[asdict(c) for c in curve]))
    return out


# --- sample -------------------------------------------------------------------

def view_seed(config: RunConfig, oid: str) -> int:
    return derive_seed(config.seed, "view", oid)


def load_model(config: RunConfig) -> FlowNet:
    path = _root(config) / "run" / "checkpoint.bin"
    if not path.exists():
        raise ArtifactError(f"missing artifact: {path}")
    _check_upstream(config, _root(config) / "run" / "run_manifest.json", "train")
    model, _ = load_checkpoint(path)
    model.eval()
    return model


_WORKER_MODEL: dict = {}


def _worker_model(config: RunConfig) -> FlowNet:
    key = config.config_hash()
    if key not in _WORKER_MODEL:
        _WORKER_MODEL.clear()
        _WORKER_MODEL[key] = load_model(config)
    return _WORKER_MODEL[key]


def _prime_model(config: RunConfig) -> None:
    """Load the checkpoint once; forked workers inherit it."""
    _WORKER_MODEL.clear()
    _WORKER_MODEL[config.config_hash()] = load_model(config)


def _view(config: RunConfig, sample):
    q = config.query
    return eval_view(sample, q.M, view_seed(config, sample.object_id), q.bands, q.k, config.model.max_parts)


def sample_object(model: FlowNet, config: RunConfig, sample) -> tuple[object, SampleResult]:
    view = _view(config, sample)
    result = generate(model, view, config.sample.steps, derive_seed(config.seed, "sample", sample.object_id))
    result.meta.update(anchor=view.prep.anchor_id, view_seed=view.augment_seed)
    return view, result


def _sample_one(args):
    config, sample, out = args
    _, result = sample_object(_worker_model(config), config, sample)
    write_prediction(Path(out), sample.object_id, result, config_hash=config.config_hash(),
                     extra={"stage_hash": stage_hash(config, "sample")})
    return sample.object_id


def cmd_sample(config: RunConfig, jobs: int = 1, split: str = "test") -> Path:
    samples = load_split(config, split)
    _prime_model(config)
    out = _root(config) / "predictions" / "gen"
    _map(_sample_one, [(config, s, str(out)) for s in samples], jobs)
    _write_json(out / "run_manifest.json", _manifest(config, "sample", "sample", split=split,
                                                     objects=[s.object_id for s in samples]))
    return out


# --- refine -------------------------------------------------------------------

def refine_config(config: RunConfig) -> RefineConfig:
    d = config.refine.model_dump()
    d.pop("mode")
    return RefineConfig(**d)


def refine_object(model: FlowNet, config: RunConfig, sample, first: SampleResult, mode: str | None = None,
                  rconf: RefineConfig | None = None):
    view = _view(config, sample)
    rconf = rconf or refine_config(config)
    return refine_pipeline(ModelField(model, view.inputs), view.prep, first, rconf,
                           mode or config.refine.mode, steps=config.sample.steps,
                           seed=derive_seed(config.seed, "refine", sample.object_id))


def _refine_one(args):
    config, sample, gen_dir, out = args
    first, _ = read_prediction(Path(gen_dir) / sample.object_id)
    outcome = refine_object(_worker_model(config), config, sample, first)
    path = write_prediction(Path(out), sample.object_id, outcome.result, config_hash=config.config_hash(),
                            extra={"stage_hash": stage_hash(config, "refine")})
    write_refine_report(path / "refine_report.json", outcome.report, config.config_hash())
    return sample.object_id


def cmd_refine(config: RunConfig, jobs: int = 1, force: bool = False) -> Path:
    gen = _root(config) / "predictions" / "gen"
    m = _check_upstream(config, gen / "run_manifest.json", "sample", force)
    samples = load_split(config, m.get("split", "test"))
    _prime_model(config)
    out = _root(config) / "predictions" / "refine"
    _map(_refine_one, [(config, s, str(gen), str(out)) for s in samples], jobs)
    _write_json(out / "run_manifest.json", _manifest(config, "refine", "refine", split=m.get("split", "test"),
                                                     mode=config.refine.mode,
                                                     objects=[s.object_id for s in samples]))
    return out


# --- eval ---------------------------------------------------------------------

def evaluate_predictions(config: RunConfig, samples: list, results: list[SampleResult]):
    ev, q = config.eval, config.query
    out = []
    for sample, res in zip(samples, results):
        aug, anchor = eval_sample(sample, q.M, view_seed(config, sample.object_id))
        out.append(evaluate_object(aug, res.transforms, anchor, A_scores=res.A_scores,
                                   edge_threshold=config.refine.edge_threshold,
                                   pa_threshold=ev.pa_threshold, adj_threshold=ev.adj_threshold,
                                   max_points=ev.max_points))
    return out


def baseline_metrics(config: RunConfig, samples: list) -> dict:
    ev, q = config.eval, config.query
    pas, gt_edges, pairs = [], 0, 0
    for sample in samples:
        aug, anchor = eval_sample(sample, q.M, view_seed(config, sample.object_id))
        m = random_pose_baseline(aug, anchor, derive_seed(config.seed, "baseline", sample.object_id),
                                 pa_threshold=ev.pa_threshold, adj_threshold=ev.adj_threshold,
                                 max_points=ev.max_points)
        pas.append(m.pa)
        gt_edges += int(np.triu(sample.adjacency, 1).sum())
        pairs += sample.K * (sample.K - 1) // 2
    return {"random_pose_pa": float(np.mean(pas)), "all_edges_precision": gt_edges / max(pairs, 1)}


def _aggregate(metrics) -> dict:
    out = {"pa": float(np.mean([m.pa for m in metrics])),
           "rmse_rot": float(np.mean([m.rmse_rot for m in metrics])),
           "rmse_trans": float(np.mean([m.rmse_trans for m in metrics])),
           "cd": float(np.mean([m.cd for m in metrics]))}
    adj = [m.adj for m in metrics if m.adj is not None]
    if adj:
        out["adjacency"] = asdict(prf_counts(sum(a.tp for a in adj), sum(a.fp for a in adj),
                                             sum(a.fn for a in adj)))
    ind = [m.induced for m in metrics]
    out["induced_adjacency"] = asdict(prf_counts(sum(a.tp for a in ind), sum(a.fp for a in ind),
                                                 sum(a.fn for a in ind)))
    return out


def summarize(config: RunConfig, gen, refined=None, baselines=None) -> dict:
    summary = {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "config": config.model_dump(mode="json"),
        "objects": len(gen),
        "gen": _aggregate(gen),
        "report": binned_report(gen, refined),
    }
    if refined is not None:
        summary["refine"] = _aggregate(refined)
        summary["refine"]["mode"] = config.refine.mode
        summary["delta_pa_pp"] = 100.0 * (summary["refine"]["pa"] - summary["gen"]["pa"])
    if baselines is not None:
        summary["baselines"] = baselines
    return summary


def cmd_eval(config: RunConfig, force: bool = False) -> Path:
    root = _root(config)
    gen_dir = root / "predictions" / "gen"
    m = _check_upstream(config, gen_dir / "run_manifest.json", "sample", force)
    split = m.get("split", "test")
    samples = load_split(config, split)
    gen = [read_prediction(_existing(gen_dir / s.object_id))[0] for s in samples]
    ref_dir = root / "predictions" / "refine"
    refined = None
    if (ref_dir / "run_manifest.json").exists():
        _check_upstream(config, ref_dir / "run_manifest.json", "refine", force)
        refined = [read_prediction(_existing(ref_dir / s.object_id))[0] for s in samples]
    gen_m = evaluate_predictions(config, samples, gen)
    ref_m = None if refined is None else evaluate_predictions(config, samples, refined)
    out = root / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(metrics_rows(gen_m, ref_m), config.config_hash()))
    _write_json(out / "summary.json", summarize(config, gen_m, ref_m, baseline_metrics(config, samples)))
    return out


def _existing(path: Path) -> Path:
    if not path.exists():
        raise ArtifactError(f"missing artifact: {path}")
    return path


# --- ablate -------------------------------------------------------------------

HEAD_VARIANTS = {"both": (True, True), "fracture": (True, False), "adjacency": (False, True), "none": (False, False)}


def parse_refine_variant(v: str) -> tuple[str, float | None]:
    if v == "freeze":
        return "freeze", None
    if v.startswith("alpha="):
        try:
            return "repaint", float(v.split("=", 1)[1])
        except ValueError:
            pass
    raise ConfigError(f"refine variant {v!r} must be 'freeze' or 'alpha=<value>'")


def cmd_ablate(config: RunConfig, heads: list[str], layers: list[int], refines: list[str]) -> Path:
    """Head on/off x attachment layer x refine variant, one row per configuration."""
    if not heads or not layers or not refines:
        raise ConfigError("ablation sweep is empty: need at least one head variant, layer and refine variant")
    for h in heads:
        if h not in HEAD_VARIANTS:
            raise ConfigError(f"unknown head variant {h!r}; choose from {sorted(HEAD_VARIANTS)}")
    for layer in layers:
        if not 1 <= layer <= config.model.depth:
            raise ConfigError(f"attachment layer {layer} outside 1..{config.model.depth}")
    variants = [parse_refine_variant(r) for r in refines]
    train_s, test_s = load_split(config, "train"), load_split(config, "test")
    rows = []
    for h in heads:
        fh, ah = HEAD_VARIANTS[h]
        for layer in layers:
            cfg = config.model_copy(deep=True)
            cfg.model.fracture_head, cfg.model.adjacency_head, cfg.model.attach_layer = fh, ah, layer
            model, _ = train_model(cfg, train_s)
            firsts = [sample_object(model, cfg, s)[1] for s in test_s]
            gen_m = evaluate_predictions(cfg, test_s, firsts)
            base = _aggregate(gen_m)
            rows.append(_ablation_row(h, layer, "none", base, base, ah))
            for (mode, alpha), label in zip(variants, refines):
                rconf = refine_config(cfg)
                if alpha is not None:
                    rconf.alpha = alpha
                refined = [refine_object(model, cfg, s, f, mode, rconf).result for s, f in zip(test_s, firsts)]
                rows.append(_ablation_row(h, layer, label, _aggregate(evaluate_predictions(cfg, test_s, refined)),
                                          base, ah))
    out = _root(config) / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(ablation_csv(rows, config.config_hash()))
    _write_json(out / "ablation.json", {"config_hash": config.config_hash(), "rows": rows,
                                        "sweep": {"heads": heads, "layers": layers, "refine": refines}})
    return out


ABLATION_COLUMNS = ("heads", "attach_layer", "refine", "pa", "adj_precision", "rmse_rot", "rmse_trans",
                    "delta_pa_pp", "delta_rmse_rot", "delta_rmse_trans")


def _ablation_row(heads, layer, refine, agg, base, adjacency_head) -> dict:
    return {"heads": heads, "attach_layer": layer, "refine": refine, "pa": agg["pa"],
            # absent rather than zero when the adjacency head is off
            "adj_precision": agg["adjacency"]["precision"] if adjacency_head and "adjacency" in agg else None,
            "rmse_rot": agg["rmse_rot"], "rmse_trans": agg["rmse_trans"],
            "delta_pa_pp": 100.0 * (agg["pa"] - base["pa"]),
            "delta_rmse_rot": agg["rmse_rot"] - base["rmse_rot"],
            "delta_rmse_trans": agg["rmse_trans"] - base["rmse_trans"]}


def ablation_csv(rows: list[dict], config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow(["--" if r[c] is None else r[c] for c in ABLATION_COLUMNS])
    return buf.getvalue()


# --- report -------------------------------------------------------------------

def cmd_report(config: RunConfig) -> str:
    path = _root(config) / "eval" / "summary.json"
    s = _read_manifest(path)
    lines = [f"config {s['config_hash']}  seed {s['seed']}  objects {s['objects']}"]
    g = s["gen"]
    lines.append(f"first pass   PA {100 * g['pa']:.1f}%  RMSE(R) {g['rmse_rot']:.2f} deg  "
                 f"RMSE(T) {g['rmse_trans']:.4f}  CD {g['cd']:.5f}")
    if "adjacency" in g:
        a = g["adjacency"]
        lines.append(f"adjacency    P {a['precision']:.3f}  R {a['recall']:.3f}  F1 {a['f1']:.3f}")
    if "refine" in s:
        r = s["refine"]
        lines.append(f"refined ({r['mode']})  PA {100 * r['pa']:.1f}%  delta {s['delta_pa_pp']:+.2f} pp")
    if "baselines" in s:
        b = s["baselines"]
        lines.append(f"baselines    random-pose PA {100 * b['random_pose_pa']:.1f}%  "
                     f"all-edges precision {b['all_edges_precision']:.3f}")
    rep = s["report"]
    lines.append("K bins:")
    for k, v in rep["k_bins"].items():
        lines.append(f"  K={k:<6} n={v['count']:<4} PA {100 * v['pa']:.1f}%"
                     + (f"  delta {v['delta_pp']:+.2f} pp" if "delta_pp" in v else ""))
    lines.append("first-pass PA bins:")
    for k, v in rep["pa_bins"].items():
        lines.append(f"  {k:<8} n={v['count']:<4} PA {100 * v['pa']:.1f}%"
                     + (f"  delta {v['delta_pp']:+.2f} pp" if "delta_pp" in v else ""))
    if rep.get("hard_subset"):
        h = rep["hard_subset"]
        lines.append(f"hard subset (PA <= 95%): n={h['count']} PA {100 * h['pa']:.1f}%"
                     + (f" -> {100 * h['refined_pa']:.1f}%" if "refined_pa" in h else ""))
    text = "\n".join(lines) + "\n"
    (path.parent / "report.txt").write_text(text)
    return text

