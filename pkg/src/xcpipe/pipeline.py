"""Configuration, staged execution and the serialized model bundle.

A run executes a prefix of the stage chain

    surrogate -> shortlist -> extreme -> rerank

persisting each stage's artifacts into a bundle directory keyed by a
hash of the configuration sections the stage depends on.  Re-running
with an unchanged upstream config resumes from disk; changing any
upstream section invalidates every stage after it.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import time

import numpy as np
import scipy.sparse as sp

from . import container
from .clustering import (
    ClusterTree,
    build_cluster_tree,
    compute_centroids,
    estimate_correlation,
    make_meta_labels,
)
from .data import Dataset, recompute_tfidf
from .errors import ConfigError, IncompleteBundle, StagePrereqMissing
from .extreme import ExtremeConfig, ExtremeModel, train_extreme
from .hnsw import HnswIndex
from .metrics import evaluate
from .nn import ResidualBlock
from .predictor import (
    PredictConfig,
    PredictorState,
    RerankerScorer,
    predict_batch,
)
from .reranker import mine_mispredictions, train_reranker
from .shortlist import (
    LabelRepresentatives,
    RouteCaps,
    Shortlist,
    build_indices,
    build_random_shortlists,
    build_shortlists,
    embed_corpus,
    label_representatives,
)
from .surrogate import SurrogateConfig, train_surrogate

STAGES = ("surrogate", "shortlist", "extreme", "rerank")

DEFAULT_CONFIG = {
    "seed": 42,
    "data": {
        "recompute_tfidf": False,
    },
    "surrogate": {
        "dim": 64,
        "num_meta_labels": 8192,
        "spectral_budget": 0.5,
        "learning_rate": 0.02,
        "batch_size": 256,
        "epochs": 30,
        "dropout": 0.5,
        "heldout_fraction": 0.05,
        "use_correlation": True,
        "walks_per_label": 400,
        "walk_length": 2,
    },
    "anns": {
        "doc_index": {"M": 16, "ef_construction": 200, "ef_search": 200},
        "label_index": {"M": 16, "ef_construction": 200, "ef_search": 200},
        "doc_route_cap": 300,
        "centroid_route_cap": 300,
        "random_cap": 50,
        "head_labels": 4,
        "centers_per_head": 8,
        "sampler": "anns",
    },
    "extreme": {
        "spectral_budget": 0.5,
        "learning_rate": 0.02,
        "batch_size": 256,
        "epochs": 30,
        "dropout": 0.5,
        "fine_tune_embeddings": False,
        "heldout_fraction": 0.05,
    },
    "reranker": {
        "enabled": True,
        "mine_top_k": 10,
        "spectral_budget": 0.5,
        "learning_rate": 0.02,
        "batch_size": 256,
        "epochs": 15,
        "dropout": 0.5,
        "heldout_fraction": 0.05,
    },
    "predict": {
        "alpha": 0.5,
        "beta": 0.7,
        "top_k": 5,
        "ef_search": 200,
    },
    "metrics": {
        "propensity_a": 0.55,
        "propensity_b": 1.5,
        "quantile_bins": 5,
    },
}

# Published full-scale settings, for reference and for million-label
# runs: 2^16 meta-labels, 500-label shortlists with at most 50 random
# entries, surrogate LR from {0.003, 0.005, 0.02}, extreme LR from
# {0.002, 0.0005}, dropout 0.5, document index (M=100, efC=300,
# efS=300) and label index (M=50, efC=50, efS=100).
PAPER_SCALE_PRESET = {
    "surrogate": {"num_meta_labels": 65536, "learning_rate": 0.005,
                  "dropout": 0.5},
    "anns": {
        "doc_index": {"M": 100, "ef_construction": 300, "ef_search": 300},
        "label_index": {"M": 50, "ef_construction": 50, "ef_search": 100},
        "doc_route_cap": 300, "centroid_route_cap": 300, "random_cap": 50,
    },
    "extreme": {"learning_rate": 0.002, "dropout": 0.5},
}


def _merge(base: dict, override: dict, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be a section")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = _coerce(base[key], val, where)
    return out


def _coerce(default, val, where):
    if isinstance(default, bool):
        if isinstance(val, bool):
            return val
        if isinstance(val, str):
            if val.lower() in ("true", "1", "yes"):
                return True
            if val.lower() in ("false", "0", "no"):
                return False
        raise ConfigError(f"{where} expects a boolean, got {val!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            f = float(val)
        except (TypeError, ValueError):
            raise ConfigError(f"{where} expects a number, got {val!r}")
        if f != int(f):
            raise ConfigError(f"{where} expects an integer, got {val!r}")
        return int(f)
    if isinstance(default, float):
        try:
            return float(val)
        except (TypeError, ValueError):
            raise ConfigError(f"{where} expects a number, got {val!r}")
    if isinstance(default, str):
        return str(val)
    raise ConfigError(f"{where}: unsupported config value type")


def load_config(path=None, overrides=None) -> dict:
    """Defaults, optionally updated from a JSON file, then from
    "section.key=value" override strings.  Unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        cfg = _merge(cfg, user)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        dotted, val = item.split("=", 1)
        node: dict = {}
        cursor = node
        parts = dotted.split(".")
        for part in parts[:-1]:
            cursor[part] = {}
            cursor = cursor[part]
        cursor[parts[-1]] = val
        cfg = _merge(cfg, node)
    return cfg


def config_hash(cfg: dict, sections) -> str:
    view = {"seed": cfg["seed"]}
    for s in sections:
        view[s] = cfg[s]
    blob = json.dumps(view, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


STAGE_SECTIONS = {
    "surrogate": ("data", "surrogate"),
    "shortlist": ("data", "surrogate", "anns"),
    "extreme": ("data", "surrogate", "anns", "extreme"),
    "rerank": ("data", "surrogate", "anns", "extreme", "reranker"),
}


def _csr_tensors(prefix, mat: sp.csr_matrix):
    return {
        f"{prefix}_indptr": mat.indptr.astype(np.int64),
        f"{prefix}_indices": mat.indices.astype(np.int64),
        f"{prefix}_data": mat.data.astype(np.float64),
        f"{prefix}_shape": np.asarray(mat.shape, dtype=np.int64),
    }


def _csr_from_tensors(prefix, tensors):
    shape = tuple(int(x) for x in tensors[f"{prefix}_shape"])
    return sp.csr_matrix(
        (tensors[f"{prefix}_data"], tensors[f"{prefix}_indices"],
         tensors[f"{prefix}_indptr"]), shape=shape)


class ModelBundle:
    """On-disk directory of staged artifacts plus an in-memory cache."""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(path, exist_ok=True)
        self.manifest_path = os.path.join(path, "manifest.json")
        self.manifest = {"format_version": 1, "stages": {}, "config": None}
        if os.path.exists(self.manifest_path):
            with open(self.manifest_path) as f:
                self.manifest = json.load(f)
        self.cache: dict = {}

    def save_manifest(self):
        with open(self.manifest_path, "w") as f:
            json.dump(self.manifest, f, indent=2, sort_keys=True)

    def stage_valid(self, stage: str, want_hash: str) -> bool:
        rec = self.manifest["stages"].get(stage)
        return bool(rec and rec.get("hash") == want_hash
                    and rec.get("completed"))

    def mark_stage(self, stage: str, stage_hash: str, extra=None):
        rec = {"hash": stage_hash, "completed": True,
               "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S")}
        if extra:
            rec.update(extra)
        self.manifest["stages"][stage] = rec
        self.save_manifest()

    def file(self, name):
        return os.path.join(self.path, name)

    # -- stage artifact io --------------------------------------------

    def save_surrogate(self, embeddings, tree: ClusterTree):
        container.write_tensors(self.file("surrogate.xast"),
                                {"embeddings": embeddings})
        with open(self.file("tree.json"), "w") as f:
            f.write(tree.to_json())

    def load_surrogate(self):
        tensors = container.read_tensors(self.file("surrogate.xast"))
        with open(self.file("tree.json")) as f:
            tree = ClusterTree.from_json(f.read())
        return tensors["embeddings"], tree

    def save_shortlist(self, sl: Shortlist, unit, empty, reps, idx_docs,
                       doc_ids, idx_reps, doc_labels):
        with open(self.file("shortlist.txt"), "w") as f:
            f.write(sl.to_wire())
        tensors = {
            "unit_vectors": unit,
            "empty_mask": empty.astype(np.int64),
            "rep_vectors": reps.vectors,
            "rep_label": reps.rep_label,
            "head_labels": reps.head_labels,
            "skipped_labels": reps.skipped_labels,
            "doc_ids": doc_ids,
        }
        tensors.update(_csr_tensors("doc_labels", doc_labels))
        container.write_tensors(self.file("corpus.xast"), tensors)
        container.write_tensors(self.file("anns_docs.xast"),
                                idx_docs.save_tensors())
        if idx_reps is not None:
            container.write_tensors(self.file("anns_reps.xast"),
                                    idx_reps.save_tensors())

    def load_shortlist(self):
        with open(self.file("shortlist.txt")) as f:
            sl = Shortlist.from_wire(f.read())
        tensors = container.read_tensors(self.file("corpus.xast"))
        reps = LabelRepresentatives(
            vectors=tensors["rep_vectors"],
            rep_label=tensors["rep_label"],
            head_labels=tensors["head_labels"],
            skipped_labels=tensors["skipped_labels"])
        idx_docs = HnswIndex.from_tensors(
            container.read_tensors(self.file("anns_docs.xast")))
        idx_reps = None
        if os.path.exists(self.file("anns_reps.xast")):
            idx_reps = HnswIndex.from_tensors(
                container.read_tensors(self.file("anns_reps.xast")))
        return {
            "shortlist": sl,
            "unit": tensors["unit_vectors"],
            "empty": tensors["empty_mask"].astype(bool),
            "reps": reps,
            "idx_docs": idx_docs,
            "doc_ids": tensors["doc_ids"],
            "idx_reps": idx_reps,
            "doc_labels": _csr_from_tensors("doc_labels", tensors),
        }

    def _save_model(self, name, model: ExtremeModel):
        container.write_tensors(self.file(name), {
            "embeddings": model.embeddings,
            "residual": model.residual.matrix,
            "residual_budget": np.asarray([model.residual.lam]),
            "classifiers": model.classifiers,
            "trained_labels": model.trained_labels.astype(np.int64),
        })

    def _load_model(self, name) -> ExtremeModel:
        t = container.read_tensors(self.file(name))
        block = ResidualBlock(t["residual"].shape[0],
                              float(t["residual_budget"][0]))
        block.matrix = t["residual"]
        return ExtremeModel(
            embeddings=t["embeddings"], residual=block,
            classifiers=t["classifiers"],
            trained_labels=t["trained_labels"].astype(bool))

    def save_extreme(self, model):
        self._save_model("extreme.xast", model)

    def load_extreme(self):
        return self._load_model("extreme.xast")

    def save_reranker(self, model):
        self._save_model("reranker.xast", model)

    def load_reranker(self):
        return self._load_model("reranker.xast")

    # -- prediction ----------------------------------------------------

    def predictor_state(self, cfg: dict, with_reranker=True) -> PredictorState:
        if "shortlist_artifacts" not in self.cache:
            raise IncompleteBundle("bundle not loaded through run()")
        arts = self.cache["shortlist_artifacts"]
        model: ExtremeModel = self.cache.get("extreme_model")
        if model is None:
            raise IncompleteBundle("extreme stage missing")
        caps = RouteCaps(cfg["anns"]["doc_route_cap"],
                         cfg["anns"]["centroid_route_cap"],
                         cfg["anns"]["random_cap"])
        rr = None
        if with_reranker and self.cache.get("reranker_model") is not None:
            r: ExtremeModel = self.cache["reranker_model"]
            rr = RerankerScorer(
                embeddings=r.embeddings,
                residual_matrix=r.residual.matrix,
                classifiers=r.classifiers,
                trained_labels=r.trained_labels)
        return PredictorState(
            embeddings=model.embeddings,
            residual_matrix=model.residual.matrix,
            classifiers=model.classifiers,
            idx_docs=arts["idx_docs"],
            doc_ids=arts["doc_ids"],
            doc_labels=arts["doc_labels"],
            reps=arts["reps"],
            idx_reps=arts["idx_reps"],
            caps=caps,
            reranker=rr)


def run(cfg: dict, train_d: Dataset, out_dir: str, stages=None,
        ablate_sampler: str | None = None, test_d: Dataset | None = None,
        log_fn=print) -> ModelBundle:
    """Execute the requested stage prefix, resuming whatever matches.

    `ablate_sampler` overrides anns.sampler ("anns", "uniform" or
    "unigram"); non-default samplers replace the hard-negative routes
    with random draws of the same total size for training shortlists
    (prediction still uses the structure routes).  When `test_d` is
    given a metric report over it is stored in the manifest after the
    deepest trained stage.
    """
    if stages is None:
        stages = list(STAGES)
    for i, s in enumerate(stages):
        if s not in STAGES or STAGES.index(s) != i:
            raise ConfigError(
                f"stages must be a prefix of {STAGES}, got {stages}")
    cfg = copy.deepcopy(cfg)
    if ablate_sampler is not None:
        if ablate_sampler not in ("anns", "uniform", "unigram"):
            raise ConfigError(f"unknown sampler {ablate_sampler!r}")
        cfg["anns"]["sampler"] = ablate_sampler

    bundle = ModelBundle(out_dir)
    bundle.manifest["config"] = cfg
    data = recompute_tfidf(train_d) if cfg["data"]["recompute_tfidf"] \
        else train_d
    seed = cfg["seed"]

    # -- stage: surrogate ----------------------------------------------
    s_hash = config_hash(cfg, STAGE_SECTIONS["surrogate"])
    if "surrogate" in stages:
        if bundle.stage_valid("surrogate", s_hash):
            embeddings, tree = bundle.load_surrogate()
            log_fn(f"[surrogate] resumed ({s_hash})")
        else:
            embeddings, tree = _run_surrogate(cfg, data, seed, log_fn)
            bundle.save_surrogate(embeddings, tree)
            bundle.mark_stage("surrogate", s_hash)
        bundle.cache["embeddings"] = embeddings
        bundle.cache["tree"] = tree
    else:
        return bundle

    # -- stage: shortlist ------------------------------------------------
    sl_hash = config_hash(cfg, STAGE_SECTIONS["shortlist"])
    if "shortlist" in stages:
        if bundle.stage_valid("shortlist", sl_hash):
            arts = bundle.load_shortlist()
            log_fn(f"[shortlist] resumed ({sl_hash})")
        else:
            arts = _run_shortlist(cfg, data, embeddings, seed, log_fn)
            bundle.save_shortlist(
                arts["shortlist"], arts["unit"], arts["empty"], arts["reps"],
                arts["idx_docs"], arts["doc_ids"], arts["idx_reps"],
                arts["doc_labels"])
            bundle.mark_stage("shortlist", sl_hash)
        bundle.cache["shortlist_artifacts"] = arts
    else:
        return bundle

    # -- stage: extreme ---------------------------------------------------
    ex_hash = config_hash(cfg, STAGE_SECTIONS["extreme"])
    if "extreme" in stages:
        if bundle.stage_valid("extreme", ex_hash):
            model = bundle.load_extreme()
            log_fn(f"[extreme] resumed ({ex_hash})")
        else:
            ecfg = ExtremeConfig(
                spectral_budget=cfg["extreme"]["spectral_budget"],
                learning_rate=cfg["extreme"]["learning_rate"],
                batch_size=cfg["extreme"]["batch_size"],
                epochs=cfg["extreme"]["epochs"],
                dropout=cfg["extreme"]["dropout"],
                fine_tune_embeddings=cfg["extreme"]["fine_tune_embeddings"],
                heldout_fraction=cfg["extreme"]["heldout_fraction"],
                seed=seed + 2)
            t0 = time.time()
            model, log = train_extreme(
                data, embeddings, bundle.cache["shortlist_artifacts"]
                ["shortlist"], ecfg)
            log_fn(f"[extreme] trained in {time.time() - t0:.1f}s, "
                   f"final loss {log[-1]['mean_loss']:.4f}" if log else
                   "[extreme] trained (no epochs)")
            bundle.save_extreme(model)
            bundle.mark_stage("extreme", ex_hash)
        bundle.cache["extreme_model"] = model
    else:
        return bundle

    # -- stage: rerank ------------------------------------------------------
    rr_hash = config_hash(cfg, STAGE_SECTIONS["rerank"])
    if "rerank" in stages and cfg["reranker"]["enabled"]:
        if bundle.stage_valid("rerank", rr_hash):
            rr_model = bundle.load_reranker()
            log_fn(f"[rerank] resumed ({rr_hash})")
        else:
            state = bundle.predictor_state(cfg, with_reranker=False)
            ts = mine_mispredictions(
                data, state, cfg["reranker"]["mine_top_k"],
                ef_search=cfg["predict"]["ef_search"])
            log_fn(f"[rerank] mined {ts.mean_mined_per_point:.2f} "
                   "negatives/point")
            rcfg = ExtremeConfig(
                spectral_budget=cfg["reranker"]["spectral_budget"],
                learning_rate=cfg["reranker"]["learning_rate"],
                batch_size=cfg["reranker"]["batch_size"],
                epochs=cfg["reranker"]["epochs"],
                dropout=cfg["reranker"]["dropout"],
                heldout_fraction=cfg["reranker"]["heldout_fraction"],
                seed=seed + 3)
            rr_model, _ = train_reranker(data, ts, embeddings, rcfg)
            bundle.save_reranker(rr_model)
            bundle.mark_stage("rerank", rr_hash)
        bundle.cache["reranker_model"] = rr_model

    if test_d is not None:
        report = evaluate_bundle(bundle, cfg, test_d, data)
        bundle.manifest["test_report"] = {
            k: v for k, v in report.items() if k != "quantile_p5"}
        bundle.save_manifest()
        log_fn(f"[evaluate] P@1={report['P@1']:.4f} P@5={report['P@5']:.4f}")
    return bundle


def _run_surrogate(cfg, data, seed, log_fn):
    scfg = cfg["surrogate"]
    freq = data.label_frequencies()
    non_empty = int(np.count_nonzero(freq))
    target = min(scfg["num_meta_labels"], non_empty)
    if target != scfg["num_meta_labels"]:
        log_fn(f"[surrogate] meta-labels clamped to {target} "
               f"(non-empty labels)")
    centroids, zero_rows = compute_centroids(data)
    corr = None
    if scfg["use_correlation"]:
        corr = estimate_correlation(data, scfg["walks_per_label"],
                                    scfg["walk_length"], seed)
    t0 = time.time()
    tree = build_cluster_tree(centroids, target, seed, corr=corr,
                              empty_labels=zero_rows)
    meta = make_meta_labels(data, tree)
    log_fn(f"[surrogate] {target} meta-labels clustered "
           f"in {time.time() - t0:.1f}s")
    tcfg = SurrogateConfig(
        dim=scfg["dim"],
        spectral_budget=scfg["spectral_budget"],
        learning_rate=scfg["learning_rate"],
        batch_size=scfg["batch_size"],
        epochs=scfg["epochs"],
        dropout=scfg["dropout"],
        heldout_fraction=scfg["heldout_fraction"],
        seed=seed + 1)
    t0 = time.time()
    model, log = train_surrogate(data, meta, tcfg)
    if log:
        last = log[-1]
        log_fn(f"[surrogate] trained in {time.time() - t0:.1f}s, "
               f"loss {last['mean_loss']:.4f}, "
               f"heldout meta-P@1 {last['heldout_meta_p1']}")
    return model.embeddings, tree


def _run_shortlist(cfg, data, embeddings, seed, log_fn):
    acfg = cfg["anns"]
    caps = RouteCaps(acfg["doc_route_cap"], acfg["centroid_route_cap"],
                     acfg["random_cap"])
    raw, unit, empty = embed_corpus(data, embeddings)
    reps = label_representatives(data, raw, acfg["head_labels"],
                                 acfg["centers_per_head"], seed)
    idx_docs, doc_ids, idx_reps = build_indices(
        unit, empty, reps,
        (acfg["doc_index"]["M"], acfg["doc_index"]["ef_construction"]),
        (acfg["label_index"]["M"], acfg["label_index"]["ef_construction"]),
        seed)
    t0 = time.time()
    if acfg["sampler"] == "anns":
        sl = build_shortlists(data, unit, empty, reps, idx_docs, doc_ids,
                              idx_reps, caps, seed,
                              ef_search=acfg["doc_index"]["ef_search"])
    else:
        sl = build_random_shortlists(data, caps.total, seed,
                                     weighting=acfg["sampler"])
    log_fn(f"[shortlist] {acfg['sampler']} sampler, "
           f"max size {sl.max_size()}, built in {time.time() - t0:.1f}s")
    return {
        "shortlist": sl, "unit": unit, "empty": empty, "reps": reps,
        "idx_docs": idx_docs, "doc_ids": doc_ids, "idx_reps": idx_reps,
        "doc_labels": data.labels,
    }


def load_bundle(out_dir: str) -> tuple[ModelBundle, dict]:
    """Reload a completed bundle and its config for prediction."""
    bundle = ModelBundle(out_dir)
    cfg = bundle.manifest.get("config")
    if cfg is None:
        raise IncompleteBundle(f"no manifest in {out_dir}")
    if not bundle.manifest["stages"].get("surrogate", {}).get("completed"):
        raise StagePrereqMissing("surrogate stage missing")
    embeddings, tree = bundle.load_surrogate()
    bundle.cache["embeddings"] = embeddings
    bundle.cache["tree"] = tree
    if bundle.manifest["stages"].get("shortlist", {}).get("completed"):
        bundle.cache["shortlist_artifacts"] = bundle.load_shortlist()
    if bundle.manifest["stages"].get("extreme", {}).get("completed"):
        bundle.cache["extreme_model"] = bundle.load_extreme()
    if bundle.manifest["stages"].get("rerank", {}).get("completed") \
            and os.path.exists(bundle.file("reranker.xast")):
        bundle.cache["reranker_model"] = bundle.load_reranker()
    return bundle, cfg


def evaluate_bundle(bundle: ModelBundle, cfg: dict, test_d: Dataset,
                    train_d: Dataset, with_reranker=True):
    """Predict a test set and compute the metric report against it."""
    pcfg = PredictConfig(alpha=cfg["predict"]["alpha"],
                         beta=cfg["predict"]["beta"],
                         top_k=max(cfg["predict"]["top_k"], 5),
                         ef_search=cfg["predict"]["ef_search"])
    state = bundle.predictor_state(cfg, with_reranker=with_reranker)
    preds, _ = predict_batch(test_d, state, pcfg)
    return evaluate(preds, test_d, train_d,
                    propensity_a=cfg["metrics"]["propensity_a"],
                    propensity_b=cfg["metrics"]["propensity_b"],
                    quantile_bins=cfg["metrics"]["quantile_bins"])
