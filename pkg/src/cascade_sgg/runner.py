"""Experiment orchestration behind the command line.

generate -> train (detector, ppg, rpcm) -> evaluate -> report. Every stage
reads and writes plain files under the configured directories, and every
output is a deterministic function of the config.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .annotations import bundled_vocabulary, format_vocabulary, load_vocabulary, parse_vocabulary, \
    read_annotation, write_annotation
from .config import RunConfig, config_to_dict, deviations
from .core import CategoryVocabulary
from .detection import DipSpec, ObjectScorer, build_dip
from .evaluation import ConfigError, EvalConfig, EvalReport, evaluate_task, metrics_table
from .pipeline import (
    FrequencyBaseline,
    Scene,
    TrainItem,
    _layers_for,
    annotated_pair_features,
    detector_loss,
    detector_samples,
    entity_input_dim,
    gt_view,
    graph_inputs,
    oracle_predictions,
    pair_labels,
    ppg_feature_dim,
    relation_input_dim,
    rpcm_epoch,
    seeded,
    select_pairs,
    sgcls_view,
    sgdet_view,
    split_counts,
    triplet_predictions,
)
from .ppg import PpgModel, PpgTrainer, fit_ppg
from .rpcm import RelationPredictor, RpcmConfig, init_prototypes, load_word_vectors
from .synthetic import FEATURE_DIM, bundled_recipe, generate_scene, load_recipe, object_features

log = logging.getLogger("cascade_sgg")

DATASET_FORMAT = "cascade-sgg-dataset"
SPLITS = ("train", "val", "test")
STAGES = ("detector", "ppg", "rpcm")
_STAGE_KEY = {"detector": 0xD7, "ppg": 0x99, "rpcm": 0x4C}


class PrerequisiteError(RuntimeError):
    """A stage needs an artifact an earlier stage has not produced."""


class DataError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- generate ---------------------------------------------------------------

def _recipes(cfg: RunConfig, vocab: CategoryVocabulary, base: Path):
    out = [("bundled", name) for name in cfg.data.recipes]
    out += [("file", str((base / f).resolve())) for f in cfg.data.recipe_files]
    if not out:
        raise ConfigError("no recipes configured")
    return out


def _make_scene(args):
    kind, ref, scene_seed, run_seed, noise, vocab_text = args
    vocab = parse_vocabulary(vocab_text)
    recipe = bundled_recipe(ref, seed=scene_seed) if kind == "bundled" else load_recipe(ref, vocab).with_seed(scene_seed)
    g = generate_scene(recipe)
    feats = object_features(g, vocab.num_objects, scene_seed, FEATURE_DIM, feature_seed=run_seed, noise=noise)
    return g, feats, recipe.name


def _vocabulary(cfg: RunConfig, base: Path) -> CategoryVocabulary:
    return load_vocabulary(base / cfg.vocabulary) if cfg.vocabulary else bundled_vocabulary("synthetic")


def cmd_generate(cfg: RunConfig, base: Path = Path(".")) -> Path:
    """Write train/val/test scenes plus a manifest with per-file checksums."""
    vocab = _vocabulary(cfg, base)
    recipes = _recipes(cfg, vocab, base)
    out = Path(cfg.paths.data_dir)
    if out.exists():
        shutil.rmtree(out)
    for s in SPLITS:
        (out / s).mkdir(parents=True, exist_ok=True)
    n = cfg.data.num_scenes
    counts = split_counts(n, cfg.data.split)
    vtext = format_vocabulary(vocab)
    jobs = []
    for i in range(n):
        kind, ref = recipes[i % len(recipes)]
        jobs.append((kind, ref, seeded(cfg.seed, i) % (2 ** 31), cfg.seed, cfg.data.feature_noise, vtext))
    if cfg.workers > 1 and n > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            made = list(pool.map(_make_scene, jobs))
    else:
        made = [_make_scene(j) for j in jobs]
    scenes = []
    for i, ((g, feats, rname), job) in enumerate(zip(made, jobs)):
        split = SPLITS[0] if i < counts[0] else SPLITS[1] if i < counts[0] + counts[1] else SPLITS[2]
        stem = out / split / f"scene_{i:05d}"
        write_annotation(g, vocab, stem)
        np.save(stem.with_name(stem.name + ".features.npy"), feats)
        scenes.append({"name": stem.name, "split": split, "recipe": rname, "seed": job[2]})
    (out / "vocabulary.vocab").write_text(vtext)
    files = sorted(p for p in out.rglob("*") if p.is_file())
    manifest = {
        "format": DATASET_FORMAT,
        "version": 1,
        "seed": cfg.seed,
        "counts": dict(zip(SPLITS, counts)),
        "scenes": scenes,
        "checksums": {p.relative_to(out).as_posix(): _sha256(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    log.info("generated %d scenes into %s", n, out)
    return out / "manifest.json"


@dataclass
class Dataset:
    vocab: CategoryVocabulary
    splits: dict
    fingerprint: str


def load_dataset(cfg: RunConfig, verify: bool = True) -> Dataset:
    root = Path(cfg.paths.data_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise PrerequisiteError(f"generate: no dataset manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"{mpath}: not a dataset manifest")
    if verify:
        for rel, digest in manifest["checksums"].items():
            p = root / rel
            if not p.exists() or _sha256(p) != digest:
                raise DataError(f"dataset file missing or modified: {rel}")
    vocab = load_vocabulary(root / "vocabulary.vocab")
    splits = {s: [] for s in SPLITS}
    for sc in manifest["scenes"]:
        stem = root / sc["split"] / sc["name"]
        g = read_annotation(stem, vocab)
        feats = np.load(stem.with_name(stem.name + ".features.npy"))
        splits[sc["split"]].append(Scene(g, feats, int(sc["seed"]), sc["recipe"]))
    return Dataset(vocab, splits, hashlib.sha256(mpath.read_bytes()).hexdigest())


# -- model construction -----------------------------------------------------

def make_dip(cfg: RunConfig, scenes) -> DipSpec:
    w = max((int(s.graph.image_width) for s in scenes), default=cfg.detector.window)
    h = max((int(s.graph.image_height) for s in scenes), default=cfg.detector.window)
    d = cfg.detector
    return build_dip(w, h, d.num_layers, d.window, d.stride, d.min_size)


def _seeded_init(seed: int, stage: str, factory):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seeded(seed, _STAGE_KEY[stage]))
        return factory()


def new_scorer(cfg: RunConfig, vocab: CategoryVocabulary) -> ObjectScorer:
    return _seeded_init(cfg.seed, "detector",
                        lambda: ObjectScorer(FEATURE_DIM, vocab.num_objects, cfg.detector.num_layers))


def new_ppg(cfg: RunConfig) -> PpgModel:
    return _seeded_init(cfg.seed, "ppg", lambda: PpgModel(ppg_feature_dim(), cfg.ppg.d_z))


def rpcm_config(cfg: RunConfig) -> RpcmConfig:
    r = cfg.rpcm
    return RpcmConfig(r.dim, r.joint_dim, r.iterations, r.tau, r.gamma1, r.gamma2, r.k, r.background, r.share_heads)


def new_rpcm(cfg: RunConfig, vocab: CategoryVocabulary) -> RelationPredictor:
    table = load_word_vectors()
    T = init_prototypes(vocab.relation_classes, table, hash_fallback=True)
    return _seeded_init(cfg.seed, "rpcm", lambda: RelationPredictor(
        entity_input_dim(vocab.num_objects), relation_input_dim(vocab.num_objects), vocab.relation_classes, T,
        rpcm_config(cfg)))


# -- checkpoints ------------------------------------------------------------

def _arch(cfg: RunConfig, stage: str) -> dict:
    sec = dict(config_to_dict(cfg)[stage])
    sec.pop("epochs", None)
    return {"stage_config": sec, "seed": cfg.seed}


def _ckpt_path(cfg: RunConfig, stage: str, epoch: int | None = None) -> Path:
    d = Path(cfg.paths.checkpoint_dir)
    return d / (f"{stage}.ckpt" if epoch is None else f"{stage}.epoch{epoch:04d}.ckpt")


def _save(cfg, stage, epoch, tensors, dataset: Dataset, history, path=None) -> Path:
    header = {"stage": stage, "epoch": epoch, "dataset": dataset.fingerprint, "log": history, **_arch(cfg, stage)}
    return ckpt.save_archive(path or _ckpt_path(cfg, stage, epoch), tensors, header)


def _resume_point(cfg: RunConfig, stage: str, dataset: Dataset, epochs: int):
    """Latest compatible per-epoch snapshot at or below ``epochs``."""
    d = Path(cfg.paths.checkpoint_dir)
    best = None
    for p in sorted(d.glob(f"{stage}.epoch*.ckpt")):
        try:
            header, tensors = ckpt.load_archive(p, stage)
        except ckpt.CheckpointError:
            continue
        compatible = (header.get("dataset") == dataset.fingerprint
                      and header.get("stage_config") == _arch(cfg, stage)["stage_config"]
                      and header.get("seed") == cfg.seed)
        if compatible and header["epoch"] <= epochs and (best is None or header["epoch"] > best[0]["epoch"]):
            best = (header, tensors)
    return best


def load_stage(cfg: RunConfig, stage: str, dataset: Dataset, needed_by: str):
    p = _ckpt_path(cfg, stage)
    if not p.exists():
        raise PrerequisiteError(f"{needed_by} needs the {stage} checkpoint ({p}); run 'train --stage {stage}' first")
    header, tensors = ckpt.load_archive(p, stage)
    if header.get("dataset") != dataset.fingerprint:
        raise PrerequisiteError(f"{stage} checkpoint was trained on a different dataset; retrain it")
    return header, tensors


def load_ppg(cfg, dataset, needed_by) -> PpgModel:
    _, t = load_stage(cfg, "ppg", dataset, needed_by)
    m = new_ppg(cfg)
    ckpt.load_module_state(m, t, "model/")
    return m


def load_scorer(cfg, dataset, needed_by) -> ObjectScorer:
    _, t = load_stage(cfg, "detector", dataset, needed_by)
    m = new_scorer(cfg, dataset.vocab)
    ckpt.load_module_state(m, t, "model/")
    return m


def load_rpcm(cfg, dataset, needed_by) -> RelationPredictor:
    _, t = load_stage(cfg, "rpcm", dataset, needed_by)
    m = new_rpcm(cfg, dataset.vocab)
    ckpt.load_module_state(m, t, "model/")
    return m


# -- train ------------------------------------------------------------------

def _run_epochs(cfg, stage, dataset, epochs, state_fn, restore_fn, epoch_fn):
    """Shared resumable epoch loop; returns the per-epoch log."""
    history: list = []
    start = 1
    resume = _resume_point(cfg, stage, dataset, epochs)
    if resume is not None:
        header, tensors = resume
        restore_fn(tensors)
        history = list(header["log"])
        start = header["epoch"] + 1
        log.info("%s: resuming after epoch %d", stage, header["epoch"])
    if resume is None:
        _save(cfg, stage, 0, state_fn(), dataset, history)
    for epoch in range(start, epochs + 1):
        history.append(epoch_fn(epoch))
        _save(cfg, stage, epoch, state_fn(), dataset, history)
        log.info("%s epoch %d: %s", stage, epoch, history[-1])
    _save(cfg, stage, epochs, state_fn(), dataset, history, path=_ckpt_path(cfg, stage))
    return history


def train_detector(cfg: RunConfig, dataset: Dataset) -> list:
    vocab = dataset.vocab
    train = dataset.splits["train"]
    dip = make_dip(cfg, train)
    scorer = new_scorer(cfg, vocab)
    opt = torch.optim.Adam(scorer.parameters(), lr=cfg.detector.lr)
    rng = np.random.default_rng(seeded(cfg.seed, _STAGE_KEY["detector"], 1))
    parts = [detector_samples(sc, rng, vocab.num_objects) for sc in train]
    parts = [p for p in parts if len(p[0])]
    if parts:
        feats, cues, targets, reg, boxes = (np.concatenate(x) for x in zip(*parts))
        layers = _layers_for(boxes, dip)
    else:
        feats = np.zeros((0, FEATURE_DIM))

    def state():
        return {**ckpt.module_state(scorer, "model/"), **ckpt.optimizer_state(opt)}

    def restore(t):
        ckpt.load_module_state(scorer, t, "model/")
        ckpt.load_optimizer_state(opt, t)

    def epoch_fn(epoch):
        if len(feats) == 0:
            return {"loss": 0.0}
        perm = np.random.default_rng(seeded(cfg.seed, _STAGE_KEY["detector"], 2, epoch)).permutation(len(feats))
        losses = []
        for i in range(0, len(perm), 256):
            idx = perm[i:i + 256]
            opt.zero_grad()
            loss = detector_loss(scorer, feats[idx], cues[idx], targets[idx], reg[idx], layers[idx],
                                 cfg.detector.mode)
            loss.backward()
            opt.step()
            scorer.clamp_weights()
            losses.append(float(loss.detach()))
        return {"loss": float(np.mean(losses))}

    return _run_epochs(cfg, "detector", dataset, cfg.detector.epochs, state, restore, epoch_fn)


def train_ppg(cfg: RunConfig, dataset: Dataset) -> list:
    model = new_ppg(cfg)
    xs = [annotated_pair_features(sc) for sc in dataset.splits["train"]]
    x = np.concatenate(xs) if xs else np.zeros((0, ppg_feature_dim()))
    if len(x):
        model.fit_scaler(x)
    xp = model.prepare(x)
    trainer = PpgTrainer(model, cfg.ppg.lr)

    def state():
        return {**ckpt.module_state(model, "model/"), **ckpt.optimizer_state(trainer.opt1, "optim1/"),
                **ckpt.optimizer_state(trainer.opt2, "optim2/")}

    def restore(t):
        ckpt.load_module_state(model, t, "model/")
        ckpt.load_optimizer_state(trainer.opt1, t, "optim1/")
        ckpt.load_optimizer_state(trainer.opt2, t, "optim2/")

    def epoch_fn(epoch):
        if len(xp) == 0:
            return {"loss": 0.0}
        out = fit_ppg(model, xp, epochs=epoch, batch_size=cfg.ppg.batch_size, seed=cfg.seed, trainer=trainer,
                      start_epoch=epoch)
        return {"loss": out[-1]}

    return _run_epochs(cfg, "ppg", dataset, cfg.ppg.epochs, state, restore, epoch_fn)


def _pair_model(cfg, dataset, needed_by):
    return load_ppg(cfg, dataset, needed_by) if cfg.rpcm.pair_mode == "ppg" else None


def train_rpcm(cfg: RunConfig, dataset: Dataset) -> list:
    vocab = dataset.vocab
    ppg = _pair_model(cfg, dataset, "train --stage rpcm")
    items = []
    for sc in dataset.splits["train"]:
        v = gt_view(sc, vocab.num_objects)
        s, o = select_pairs(v, ppg, cfg.ppg.k1)
        items.append(TrainItem(graph_inputs(v, s, o), pair_labels(sc.graph, s, o, vocab.num_relations)))
    model = new_rpcm(cfg, vocab)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.rpcm.lr)

    def state():
        return {**ckpt.module_state(model, "model/"), **ckpt.optimizer_state(opt)}

    def restore(t):
        ckpt.load_module_state(model, t, "model/")
        ckpt.load_optimizer_state(opt, t)

    def epoch_fn(epoch):
        out = rpcm_epoch(model, opt, items, cfg.seed, epoch, cfg.rpcm.batch_scenes, cfg.rpcm.bg_ratio)
        return {k: out.get(k, 0.0) for k in ("total", "ic", "id", "pc", "pd")}

    return _run_epochs(cfg, "rpcm", dataset, cfg.rpcm.epochs, state, restore, epoch_fn)


def cmd_train(cfg: RunConfig, stage: str) -> Path:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    dataset = load_dataset(cfg)
    Path(cfg.paths.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    history = {"detector": train_detector, "ppg": train_ppg, "rpcm": train_rpcm}[stage](cfg, dataset)
    logpath = Path(cfg.paths.checkpoint_dir) / f"{stage}.log.json"
    logpath.write_text(json.dumps(history, sort_keys=True, indent=1) + "\n")
    return _ckpt_path(cfg, stage)


# -- evaluate ---------------------------------------------------------------

def _views(cfg, dataset, task, scenes):
    vocab = dataset.vocab
    if task == "PredCls":
        return [gt_view(sc, vocab.num_objects) for sc in scenes]
    scorer = load_scorer(cfg, dataset, f"evaluate {task}")
    dip = make_dip(cfg, dataset.splits["train"] or scenes)
    if task == "SGCls":
        return [sgcls_view(sc, scorer, dip) for sc in scenes]
    return [sgdet_view(sc, scorer, dip, cfg.seed, i, nms_iou=cfg.detector.nms_iou) for i, sc in enumerate(scenes)]


def predict_split(cfg: RunConfig, dataset: Dataset, task: str, split: str = "test", predictor: str | None = None):
    predictor = predictor or cfg.eval.predictor
    scenes = dataset.splits[split]
    source = {"PredCls": "gt_boxes_labels", "SGCls": "gt_boxes", "SGDet": "detections"}[task]
    if predictor == "oracle":
        return [oracle_predictions(sc, source) for sc in scenes], {}
    ppg = _pair_model(cfg, dataset, f"evaluate {task}")
    views = _views(cfg, dataset, task, scenes)
    if predictor == "frequency":
        fb = FrequencyBaseline(dataset.vocab.num_objects, dataset.vocab.num_relations).fit(dataset.splits["train"])
        prob_fn = lambda v, s, o: fb.probabilities(v, s, o)  # noqa: E731
    else:
        model = load_rpcm(cfg, dataset, f"evaluate {task}")
        prob_fn = lambda v, s, o: model.relation_probabilities(graph_inputs(v, s, o))  # noqa: E731
    preds = []
    for v in views:
        s, o = select_pairs(v, ppg, cfg.ppg.k1)
        probs = prob_fn(v, s, o) if len(s) else np.zeros((0, dataset.vocab.num_relations))
        preds.append(triplet_predictions(v, s, o, probs))
    return preds, {}


def _checkpoint_digests(cfg: RunConfig, predictor: str, task: str) -> dict:
    if predictor == "oracle":
        return {}
    stages = (["ppg"] if cfg.rpcm.pair_mode == "ppg" else []) + (["rpcm"] if predictor == "rpcm" else [])
    stages += ["detector"] if task != "PredCls" else []
    return {s: _sha256(_ckpt_path(cfg, s)) for s in stages if _ckpt_path(cfg, s).exists()}


def cmd_evaluate(cfg: RunConfig, tasks=None, predictor: str | None = None) -> list[Path]:
    dataset = load_dataset(cfg)
    predictor = predictor or cfg.eval.predictor
    out = Path(cfg.paths.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    reports = []
    for task in tasks or cfg.eval.tasks:
        ec = EvalConfig(task, tuple(cfg.eval.ks), cfg.eval.iou_threshold, cfg.eval.box_mode, cfg.eval.averaging)
        preds, _ = predict_split(cfg, dataset, task, "test", predictor)
        header = {"predictor": predictor, "dataset": dataset.fingerprint, "split": "test",
                  "deviations": deviations(cfg), "checkpoints": _checkpoint_digests(cfg, predictor, task)}
        rep = evaluate_task(preds, [sc.graph for sc in dataset.splits["test"]], ec, dataset.vocab.num_relations,
                            run=cfg.name, header=header)
        p = out / f"{cfg.name}-{task}.json"
        p.write_text(rep.to_json())
        (out / f"{cfg.name}-{task}.csv").write_text(rep.to_csv())
        written += [p, out / f"{cfg.name}-{task}.csv"]
        reports.append(rep)
    (out / f"{cfg.name}.csv").write_text(metrics_table(reports))
    written.append(out / f"{cfg.name}.csv")
    return written


# -- report -----------------------------------------------------------------

def load_report(path) -> EvalReport:
    path = Path(path)
    try:
        return EvalReport.from_dict(json.loads(path.read_text()))
    except FileNotFoundError:
        raise DataError(f"report not found: {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed report file {path}: {exc}") from None


def cmd_report(paths, out_dir) -> list[Path]:
    if not paths:
        raise ConfigError("report needs at least one report file")
    reports = [load_report(p) for p in paths]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "summary.csv"
    table.write_text(metrics_table(reports))
    written = [table]
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    for run in sorted({r.run for r in reports}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for r in sorted((r for r in reports if r.run == run), key=lambda r: r.config.task):
            ks = sorted(r.curve) if r.curve else sorted(r.metrics)
            src = r.curve if r.curve else {k: r.metrics[k]["MR"] for k in ks}
            ax.plot(ks, [src[k] for k in ks], marker="o", label=r.config.task)
        ax.set_xscale("log")
        ax.set_xlabel("K")
        ax.set_ylabel("MR@K (%)")
        ax.set_ylim(0, 100)
        ax.set_title(run)
        ax.legend()
        fig.tight_layout()
        p = out / f"recall_vs_k-{run}.png"
        fig.savefig(p, metadata={"Software": None})
        plt.close(fig)
        written.append(p)
    return written


# -- selftest ---------------------------------------------------------------

def selftest_config(workdir: Path) -> RunConfig:
    cfg = RunConfig(name="selftest")
    cfg.paths.data_dir = str(workdir / "data")
    cfg.paths.checkpoint_dir = str(workdir / "checkpoints")
    cfg.paths.report_dir = str(workdir / "reports")
    cfg.data.num_scenes = 15
    cfg.detector.epochs = 5
    cfg.ppg.epochs = 5
    cfg.rpcm.epochs = 15
    cfg.eval.ks = [5, 20, 1500]
    return cfg


def cmd_selftest(workdir: Path, cfg: RunConfig | None = None) -> list[Path]:
    workdir = Path(workdir)
    cfg = cfg or selftest_config(workdir)
    cmd_generate(cfg)
    for stage in STAGES:
        cmd_train(cfg, stage)
    written = cmd_evaluate(cfg)
    written += cmd_report([p for p in written if p.suffix == ".json"], cfg.paths.report_dir)
    return written
