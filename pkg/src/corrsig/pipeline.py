"""Stage orchestration: config loading, content-addressed stage directories,
and the eight pipeline stages behind the command-line tool.

Each stage writes its artifacts into ``workdir/<stage>-<hash8>`` where the
hash covers the stage's own config section plus the directory names of its
prerequisite stages.  Changing any upstream knob (seed, k, phantom geometry)
therefore changes every downstream address, so artifacts from different
configurations can never be mixed.  Stages always recompute: an existing
stage directory is wiped and rewritten.  Every stage leaves a ``run.json``
with the config hash, wall time, and a sha256 digest per output file.
"""

import copy
import glob
import hashlib
import json
import os
import shutil
import time

import jsonschema
import numpy as np

from . import corrnet, dataio, featext, metrics, phantom, predictor, preprocess
from .errors import ConfigError, DataError

DEFAULT_CONFIG = {
    "seed": 0,
    "workdir": "runs",
    "dataset": None,     # null -> use the gen-synthetic stage output
    "extractor": None,   # null -> use the extractor emitted by gen-synthetic
    "phantom": {
        "n_patients": 12,
        "slices_per_patient": 7,
        "lesions_per_patient": [1, 3],
        "lesion_radius_px": [6.0, 14.0],
        "mri_contrast": 2.0,
        "cross_modal_correlation": 0.9,
        "noise_sigma": 1.0,
        "image_hw": [240, 220],
        "spacing_mm": [0.29, 0.29],
    },
    "preprocess": {"target_hw": 224},
    "corrnet": {
        "k": 5,
        "lam": 2.0,
        "lr": 1e-3,
        "epochs": 150,
        "batch_size": 4096,
        "benign_per_cancer": 2.0,
        "max_views": 200000,
    },
    "predictor": {
        "variant": "hedbranch3",
        "lr": 1e-3,
        "weight_decay": 0.1,
        "max_epochs": 200,
        "patience": 10,
        "batch_size": 4,
    },
    "eval": {"threshold": 0.5, "n_resamples": 100, "min_lesion_px": 10},
}

_NUM = {"type": "number", "exclusiveMinimum": 0}
_INT = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "workdir": {"type": "string", "minLength": 1},
        "dataset": {"type": ["string", "null"]},
        "extractor": {"type": ["string", "null"]},
        "phantom": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_patients": {"type": "integer", "minimum": 3},
                "slices_per_patient": _INT,
                "lesions_per_patient": {
                    "type": "array", "items": _INT,
                    "minItems": 2, "maxItems": 2,
                },
                "lesion_radius_px": {
                    "type": "array", "items": _NUM,
                    "minItems": 2, "maxItems": 2,
                },
                "mri_contrast": _NUM,
                "cross_modal_correlation": {
                    "type": "number", "minimum": 0, "maximum": 1,
                },
                "noise_sigma": _NUM,
                "image_hw": {
                    "type": "array", "items": {"type": "integer", "minimum": 64},
                    "minItems": 2, "maxItems": 2,
                },
                "spacing_mm": {
                    "type": "array", "items": _NUM,
                    "minItems": 2, "maxItems": 2,
                },
            },
        },
        "preprocess": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                # predictor blocks pool three times, so 16 | target_hw
                "target_hw": {"type": "integer", "minimum": 32,
                              "multipleOf": 16},
            },
        },
        "corrnet": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": _INT,
                "lam": {"type": "number", "minimum": 0},
                "lr": _NUM,
                "epochs": _INT,
                "batch_size": {"type": "integer", "minimum": 2},
                "benign_per_cancer": _NUM,
                "max_views": {"type": "integer", "minimum": 2},
            },
        },
        "predictor": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "variant": {"enum": sorted(predictor.VARIANTS)},
                "lr": _NUM,
                "weight_decay": {"type": "number", "minimum": 0},
                "max_epochs": _INT,
                "patience": {"type": ["integer", "null"], "minimum": 1},
                "batch_size": _INT,
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "threshold": {"type": "number", "minimum": 0, "maximum": 1},
                "n_resamples": _INT,
                "min_lesion_px": _INT,
            },
        },
    },
}

STAGES = ("gen-synthetic", "preprocess", "train-corrnet", "extract",
          "train-predictor", "predict", "evaluate", "report")


def _deep_merge(base, update):
    for key, val in update.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], val)
        else:
            base[key] = val
    return base


def load_config(path=None, overrides=None):
    """Defaults <- JSON file <- CLI overrides, then schema validation.

    Raises jsonschema.ValidationError (carries .json_path) on bad values and
    ConfigError on an unreadable file.
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError("config file not found: %s" % path) from None
        except json.JSONDecodeError as exc:
            raise ConfigError("malformed config %s: %s" % (path, exc)) from exc
        if not isinstance(user, dict):
            raise ConfigError("config %s: top level must be an object" % path)
        _deep_merge(cfg, user)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        section = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            section = section[part]
        section[parts[-1]] = val
    jsonschema.validate(cfg, CONFIG_SCHEMA)
    return cfg


# ------------------------------------------------------------- addressing

def _hash8(obj) -> str:
    blob = json.dumps(obj, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:8]


def stage_dirs(cfg, split: str = "test"):
    """Content-addressed directory (under workdir) for every stage."""
    gen = "gen-synthetic-" + _hash8(
        {"phantom": cfg["phantom"], "seed": cfg["seed"]})
    dataset_key = cfg["dataset"] if cfg["dataset"] else gen
    pre = "preprocess-" + _hash8(
        {"dataset": dataset_key, "preprocess": cfg["preprocess"],
         "seed": cfg["seed"]})
    extractor_key = cfg["extractor"] if cfg["extractor"] else gen
    corr = "train-corrnet-" + _hash8(
        {"pre": pre, "corrnet": cfg["corrnet"], "extractor": extractor_key,
         "seed": cfg["seed"]})
    ext = "extract-" + _hash8({"corrnet": corr, "pre": pre})
    predtr = "train-predictor-" + _hash8(
        {"extract": ext, "predictor": cfg["predictor"],
         "k": cfg["corrnet"]["k"], "seed": cfg["seed"]})
    pred = "predict-" + _hash8(
        {"predictor": predtr, "extract": ext, "pre": pre, "split": split})
    ev = "evaluate-" + _hash8(
        {"predict": pred, "pre": pre, "eval": cfg["eval"],
         "seed": cfg["seed"]})
    names = {"gen-synthetic": gen, "preprocess": pre, "train-corrnet": corr,
             "extract": ext, "train-predictor": predtr, "predict": pred,
             "evaluate": ev}
    return {stage: os.path.join(cfg["workdir"], name)
            for stage, name in names.items()}


def _require(dirs, stage):
    path = dirs[stage]
    if not os.path.isfile(os.path.join(path, "run.json")):
        raise DataError("missing %s output (%s); run `corrsig %s` first"
                        % (stage, path, stage))
    return path


def _fresh_dir(path):
    if os.path.isdir(path):
        shutil.rmtree(path)
    os.makedirs(path)
    return path


def _digest_tree(root):
    out = {}
    for base, _, files in os.walk(root):
        for name in files:
            if base == root and name == "run.json":
                continue
            full = os.path.join(base, name)
            rel = os.path.relpath(full, root)
            with open(full, "rb") as fh:
                out[rel] = hashlib.sha256(fh.read()).hexdigest()
    return out


def _finish(stage, path, t0):
    run = {
        "stage": stage,
        "config_hash": os.path.basename(path).rsplit("-", 1)[-1],
        "wall_time_s": round(time.time() - t0, 3),
        "outputs": _digest_tree(path),
    }
    with open(os.path.join(path, "run.json"), "w") as fh:
        json.dump(run, fh, indent=1, sort_keys=True)
    return run


# ------------------------------------------------------------------ stages

def _dataset_root(cfg, dirs):
    if cfg["dataset"]:
        if not os.path.isfile(os.path.join(cfg["dataset"], "manifest.json")):
            raise DataError("dataset %s has no manifest.json" % cfg["dataset"])
        return cfg["dataset"]
    return _require(dirs, "gen-synthetic")


def _extractor_path(cfg, dirs):
    if cfg["extractor"]:
        if not os.path.isfile(cfg["extractor"]):
            raise DataError("extractor weights not found: %s" % cfg["extractor"])
        return cfg["extractor"]
    return os.path.join(_require(dirs, "gen-synthetic"), "extractor.cswt")


def run_gen_synthetic(cfg, dirs):
    out = _fresh_dir(dirs["gen-synthetic"])
    t0 = time.time()
    pcfg = phantom.PhantomConfig.from_dict(
        dict(cfg["phantom"], seed=cfg["seed"]))
    phantom.generate(pcfg, out)
    weights = featext.random_extractor(cfg["seed"])
    featext.save_extractor(os.path.join(out, "extractor.cswt"), weights,
                           meta={"seed": cfg["seed"]})
    return _finish("gen-synthetic", out, t0)


def run_preprocess(cfg, dirs):
    src = _dataset_root(cfg, dirs)
    target = (cfg["preprocess"]["target_hw"],) * 2
    out = _fresh_dir(dirs["preprocess"])
    t0 = time.time()
    manifest = dataio.read_manifest(src)
    records = {}
    for pat in manifest["patients"]:
        recs = dataio.load_patient(src, pat["id"], with_hist=True)
        records[pat["id"]] = [preprocess.resample_record(r, target)
                              for r in recs]
    train_ids = [p["id"] for p in manifest["patients"] if p["split"] == "train"]
    if not train_ids:
        raise DataError("dataset %s has no train split" % src)
    train_slices = [r for pid in train_ids for r in records[pid]]
    models, stats = preprocess.fit_normalization(train_slices)
    for pid, recs in records.items():
        preprocess.standardize_split(recs, models, stats)
        pdir = os.path.join(out, pid)
        for rec in recs:
            dataio.write_slice(pdir, rec)
    dataio.write_manifest(out, manifest["patients"])
    return _finish("preprocess", out, t0)


def _corrnet_views(split, weights, benign_per_cancer, seed):
    """Per-slice views with a benign pre-filter to bound memory.

    Every cancer pixel is kept; benign pixels are subsampled to roughly
    benign_per_cancer x the slice's cancer count (with a floor so slices
    without cancer still contribute background statistics).  The balanced
    resample that follows draws from this pool.
    """
    rng = np.random.default_rng(seed)
    views = []
    slice_id = 0
    for pid in sorted(split):
        for rec in split[pid]:
            v = featext.build_views(rec, weights, slice_id)
            slice_id += 1
            pos = np.nonzero(v.labels == 1)[0]
            neg = np.nonzero(v.labels == 0)[0]
            cap = max(500, int(round(benign_per_cancer * pos.size)))
            if neg.size > cap:
                neg = rng.choice(neg, size=cap, replace=False)
            keep = np.sort(np.concatenate([pos, neg]))
            views.append(featext._take(v, keep))
    return featext.concat_views(views)


def run_train_corrnet(cfg, dirs):
    pre = _require(dirs, "preprocess")
    weights = featext.load_extractor(_extractor_path(cfg, dirs))
    ccfg = cfg["corrnet"]
    split = dataio.load_split(pre, "train", with_hist=True)
    if not split:
        raise DataError("preprocess output %s has no train patients" % pre)
    views = _corrnet_views(split, weights, ccfg["benign_per_cancer"],
                           cfg["seed"])
    views = featext.balanced_sample(views, cfg["seed"])
    if len(views) > ccfg["max_views"]:
        views = featext._take(views, np.arange(ccfg["max_views"]))
    tcfg = corrnet.CorrNetTrainConfig(
        k=ccfg["k"], lam=ccfg["lam"], lr=ccfg["lr"], epochs=ccfg["epochs"],
        batch_size=min(ccfg["batch_size"], len(views)), seed=cfg["seed"])
    out = _fresh_dir(dirs["train-corrnet"])
    t0 = time.time()
    params, trace = corrnet.train_corrnet(views, tcfg)
    hr = corrnet.hidden(views.R, None, params)
    hp = corrnet.hidden(None, views.P, params)
    mean_corr = corrnet.mean_correlation(hr, hp)
    corrnet.save_corrnet(os.path.join(out, "corrnet.cswt"), params, meta={
        "k": tcfg.k, "lambda": tcfg.lam, "epochs": tcfg.epochs,
        "seed": tcfg.seed})
    with open(os.path.join(out, "trace.json"), "w") as fh:
        json.dump({"loss": trace, "n_views": len(views),
                   "mean_correlation": mean_corr}, fh, indent=1)
    return _finish("train-corrnet", out, t0)


def _corr_map_path(ext_dir, pid, slice_index):
    return os.path.join(ext_dir, pid, "slice_%d.corr.raw" % slice_index)


def _write_corr_map(path, arr):
    arr = np.ascontiguousarray(arr, np.float32)
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())
    k, h, w = arr.shape
    side = {"k": k, "height": h, "width": w, "dtype": "float32"}
    with open(os.path.splitext(path)[0] + ".json", "w") as fh:
        json.dump(side, fh)


def _read_corr_map(path):
    side_path = os.path.splitext(path)[0] + ".json"
    try:
        with open(side_path) as fh:
            side = json.load(fh)
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError as exc:
        raise DataError("missing extract output %s; run `corrsig extract` "
                        "first" % exc.filename) from None
    shape = (int(side["k"]), int(side["height"]), int(side["width"]))
    arr = np.frombuffer(raw, np.float32)
    if arr.size != np.prod(shape):
        raise DataError("%s: expected %d values, file holds %d"
                        % (path, np.prod(shape), arr.size))
    return arr.reshape(shape).copy()


def run_extract(cfg, dirs):
    pre = _require(dirs, "preprocess")
    corr_dir = _require(dirs, "train-corrnet")
    params, _ = corrnet.load_corrnet(os.path.join(corr_dir, "corrnet.cswt"))
    weights = featext.load_extractor(_extractor_path(cfg, dirs))
    split = dataio.load_split(pre, None, with_hist=False)
    out = _fresh_dir(dirs["extract"])
    t0 = time.time()
    for pid in sorted(split):
        os.makedirs(os.path.join(out, pid))
        for rec in split[pid]:
            m = predictor.corrnet_map(rec, weights, params)
            _write_corr_map(_corr_map_path(out, pid, rec.slice_index), m)
    return _finish("extract", out, t0)


def _attach_maps(split, ext_dir):
    for pid, recs in split.items():
        for rec in recs:
            rec.corrnet_map = _read_corr_map(
                _corr_map_path(ext_dir, pid, rec.slice_index))
    return split


def run_train_predictor(cfg, dirs):
    pre = _require(dirs, "preprocess")
    ext = _require(dirs, "extract")
    pcfg = cfg["predictor"]
    k = cfg["corrnet"]["k"]
    train = _attach_maps(dataio.load_split(pre, "train", with_hist=False), ext)
    if not train:
        raise DataError("preprocess output %s has no train patients" % pre)
    val = _attach_maps(dataio.load_split(pre, "val", with_hist=False), ext)
    # horizontal mirroring doubles the training set; maps flip with the slice
    for pid in sorted(train):
        train[pid + "_flip"] = [preprocess.augment_hflip(r)
                                for r in train[pid]]
    train_windows = predictor.build_windows(train, k)
    val_windows = predictor.build_windows(val, k) if val else None
    model = predictor.build(pcfg["variant"], k, seed=cfg["seed"])
    tcfg = predictor.PredictorTrainConfig(
        lr=pcfg["lr"], weight_decay=pcfg["weight_decay"],
        max_epochs=pcfg["max_epochs"], patience=pcfg["patience"],
        batch_size=pcfg["batch_size"], seed=cfg["seed"])
    out = _fresh_dir(dirs["train-predictor"])
    t0 = time.time()
    history = predictor.train_predictor(model, train_windows, val_windows, tcfg)
    val_loss = (history["val_loss"][history["best_epoch"]]
                if history["val_loss"] else history["train_loss"][-1])
    predictor.save_predictor(os.path.join(out, "predictor.cswt"), model,
                             epoch=history["best_epoch"], val_loss=val_loss)
    with open(os.path.join(out, "history.json"), "w") as fh:
        json.dump(history, fh, indent=1)
    return _finish("train-predictor", out, t0)


def run_predict(cfg, dirs, split="test"):
    pre = _require(dirs, "preprocess")
    ext = _require(dirs, "extract")
    model_dir = _require(dirs, "train-predictor")
    model, _ = predictor.load_predictor(
        os.path.join(model_dir, "predictor.cswt"))
    records = _attach_maps(dataio.load_split(pre, split, with_hist=False), ext)
    if not records:
        raise DataError("preprocess output %s has no %s patients" % (pre, split))
    out = _fresh_dir(dirs["predict"])
    t0 = time.time()
    for pid in sorted(records):
        recs = records[pid]
        probs = predictor.predict_volume(model, recs, None, None,
                                         cfg["predictor"]["batch_size"])
        pdir = os.path.join(out, pid)
        os.makedirs(pdir)
        for rec, prob in zip(sorted(recs, key=lambda r: r.slice_index), probs):
            dataio.write_prob_map(
                os.path.join(pdir, "slice_%d.prob.raw" % rec.slice_index),
                prob, rec.spacing_mm)
    return _finish("predict", out, t0)


def model_name(cfg):
    k = cfg["corrnet"]["k"]
    if cfg["predictor"]["variant"] == "hedbranch3":
        return "CorrSigNet(T2W, ADC, %d)" % k
    return "CorrSigNet(%d)" % k


def run_evaluate(cfg, dirs, split="test"):
    pre = _require(dirs, "preprocess")
    pred_dir = _require(dirs, "predict")
    records = dataio.load_split(pre, split, with_hist=False)
    prob_maps = {}
    for pid, recs in records.items():
        prob_maps[pid] = [
            dataio.read_prob_map(
                os.path.join(pred_dir, pid, "slice_%d.prob.raw" % r.slice_index))
            for r in recs]
    ecfg = cfg["eval"]
    out = _fresh_dir(dirs["evaluate"])
    t0 = time.time()
    report = metrics.evaluate(prob_maps, records, threshold=ecfg["threshold"],
                              seed=cfg["seed"], n_resamples=ecfg["n_resamples"],
                              min_size=ecfg["min_lesion_px"])
    doc = {"model": model_name(cfg), "variant": cfg["predictor"]["variant"],
           "k": cfg["corrnet"]["k"], "split": split}
    doc.update(report.to_dict())
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    run = _finish("evaluate", out, t0)
    print(format_table([_report_row(doc)]))
    return run


def _report_row(doc):
    return (doc["model"], doc["sensitivity"], doc["specificity"],
            doc["pixel_auc"])


def format_table(rows):
    """Aligned Model / Sensitivity / Specificity / AUC comparison table."""
    header = ("Model", "Sensitivity", "Specificity", "AUC")
    cells = [header] + [(name, "%.2f" % sens, "%.2f" % spec, "%.2f" % auc)
                        for name, sens, spec, auc in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(4)]
    lines = []
    for row in cells:
        lines.append("  ".join(
            row[i].ljust(widths[i]) if i == 0 else row[i].rjust(widths[i])
            for i in range(4)))
    return "\n".join(lines)


def run_report(cfg, dirs):
    paths = sorted(glob.glob(os.path.join(cfg["workdir"],
                                          "evaluate-*", "report.json")))
    rows = []
    for path in paths:
        with open(path) as fh:
            doc = json.load(fh)
        rows.append(_report_row(doc))
    if not rows:
        raise DataError("no evaluation reports under %s; run `corrsig "
                        "evaluate` first" % cfg["workdir"])
    table = format_table(rows)
    print(table)
    return {"stage": "report", "rows": rows, "table": table}


def run_stage(stage, cfg, split="test"):
    """Run one named stage; returns its run record."""
    dirs = stage_dirs(cfg, split)
    if stage == "gen-synthetic":
        return run_gen_synthetic(cfg, dirs)
    if stage == "preprocess":
        return run_preprocess(cfg, dirs)
    if stage == "train-corrnet":
        return run_train_corrnet(cfg, dirs)
    if stage == "extract":
        return run_extract(cfg, dirs)
    if stage == "train-predictor":
        return run_train_predictor(cfg, dirs)
    if stage == "predict":
        return run_predict(cfg, dirs, split)
    if stage == "evaluate":
        return run_evaluate(cfg, dirs, split)
    if stage == "report":
        return run_report(cfg, dirs)
    raise ConfigError("unknown stage %r, expected one of %s"
                      % (stage, ", ".join(STAGES)))
