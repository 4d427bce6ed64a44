"""End-to-end orchestration: scans -> range images -> objectness -> rigid flow -> filter -> labels -> metrics.

Everything is driven by one YAML file::

    seed: 0
    mode: exp1                 # or a list, e.g. [exp1, exp3]
    output: out
    inputs: {scans: data/scans, poses: data/poses.txt, gt: data/gt,
             model: out/model.bin, scores: null}
    projection: {height: 64, width: 870}
    scorer: {learning_rate: 1.0e-6, momentum: 0.99, epochs: 10, balance: true}
    flow: {...}                # FlowConfig fields
    filter: {sigma_translation: 0.05, sigma_rotation_deg: 1.0, o0: 0.2, s: 0.6}
    eval: {cluster_radius: 0.5, min_points: 20, iou: 0.5}
    synth: {scene: benchmark, frames: 20, n_azimuth: 435}

Relative paths are resolved against the directory holding the config file.
Frame ``k`` is the k-th ``.bin`` in the scan directory (sorted by name);
ground truth for a scan ``<stem>.bin`` lives in ``<gt>/<stem>.points.csv``
and ``<gt>/<stem>.boxes.csv``, score files in ``<scores>/<stem>.bin``.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import glob
import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import bayes_filter as bf
from . import cluster_eval as ev
from .errors import ConfigError, DataError, LidarSemError
from .projection import ProjectionConfig, back_project, project, write_pgm
from .rigid_flow import FlowConfig, MotionField, estimate_flow, write_motion_csv
from .scan_io import (CLASS_NAMES, DIFFICULTIES, DYNAMIC, MOVABLE, NON_MOVABLE, read_ground_truth,
                      read_labels, read_poses, read_velodyne_bin, write_ground_truth, write_labels,
                      write_poses, write_velodyne_bin)
from .pixel_scorer import TrainConfig, TrainingSample, load_model, load_scores, predict, save_model, train

log = logging.getLogger(__name__)

MODES = ("exp1", "exp2", "exp3")

DEFAULTS = {
    "seed": 0,
    "mode": "exp1",
    "output": "out",
    "inputs": {"scans": None, "poses": None, "gt": None, "model": None, "scores": None},
    "projection": {},
    "scorer": {},
    "flow": {},
    "filter": {},
    "eval": {"cluster_radius": 0.5, "min_points": 20, "iou": 0.5},
    "synth": {"scene": "benchmark", "frames": 20, "n_azimuth": 435},
    "write_motion": False,
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


@dataclass
class PipelineConfig:
    raw: dict
    base_dir: str = "."

    @classmethod
    def load(cls, path, overrides=None) -> PipelineConfig:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data, os.path.dirname(os.path.abspath(path)), overrides)

    @classmethod
    def from_dict(cls, data, base_dir=".", overrides=None) -> PipelineConfig:
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        raw = _merge(DEFAULTS, data)
        raw = _merge(raw, {k: v for k, v in (overrides or {}).items() if v is not None})
        cfg = cls(raw, os.path.abspath(base_dir))
        cfg.modes  # validates
        cfg.projection
        cfg.flow
        cfg.filter_config("exp1")
        cfg.train_config
        return cfg

    # sub-configs -------------------------------------------------------

    def path(self, key) -> str | None:
        p = self.raw["inputs"].get(key)
        if p is None:
            return None
        return os.path.normpath(os.path.join(self.base_dir, os.path.expanduser(str(p))))

    @property
    def output(self) -> str:
        return os.path.normpath(os.path.join(self.base_dir, str(self.raw["output"])))

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def modes(self) -> list[str]:
        m = self.raw["mode"]
        modes = [m] if isinstance(m, str) else list(m)
        bad = [x for x in modes if x not in MODES]
        if bad or not modes:
            raise ConfigError(f"mode must be one or more of {MODES}, got {m!r}")
        return modes

    def _build(self, klass, section):
        try:
            return klass(**self.raw[section])
        except TypeError as exc:
            raise ConfigError(f"bad {section} config: {exc}") from None

    @property
    def projection(self) -> ProjectionConfig:
        return self._build(ProjectionConfig, "projection")

    @property
    def flow(self) -> FlowConfig:
        return self._build(FlowConfig, "flow")

    @property
    def train_config(self) -> TrainConfig:
        d = dict(self.raw["scorer"])
        d.pop("frames", None)
        d.setdefault("seed", self.seed)
        try:
            return TrainConfig(**d)
        except TypeError as exc:
            raise ConfigError(f"bad scorer config: {exc}") from None

    def filter_config(self, mode) -> bf.FilterConfig:
        d = dict(self.raw["filter"])
        d["mode"] = bf.EXPERIMENT_MODES[mode]
        return bf.FilterConfig.from_dict(d)

    def hash(self) -> str:
        blob = json.dumps(_jsonable(self.raw), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def require(self, *keys) -> None:
        for key in keys:
            p = self.path(key)
            if p is None:
                raise ConfigError(f"inputs.{key} is required for this command")
            if not os.path.exists(p):
                raise DataError(f"inputs.{key} does not exist: {p}")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    timings: dict = field(default_factory=dict)
    frames: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    info: dict = field(default_factory=dict)
    status: str = "running"
    error: str | None = None

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    def warn(self, msg) -> None:
        log.warning(msg)
        self.warnings.append(msg)

    def write(self, out_dir) -> str:
        os.makedirs(out_dir, exist_ok=True)
        d = dataclasses.asdict(self)
        d["timings"] = {k: round(v, 6) for k, v in self.timings.items()}
        path = os.path.join(out_dir, f"manifest_{self.command}.json")
        with open(path, "w") as fh:
            json.dump(_jsonable(d), fh, indent=2, sort_keys=True)
        return path


@contextmanager
def _run(cfg: PipelineConfig, command):
    """Manifest bookkeeping; the manifest is written even when the command fails."""
    man = RunManifest(command, cfg.hash(), cfg.seed)
    t0 = time.perf_counter()
    try:
        yield man
        man.status = "ok"
    except Exception as exc:
        man.status = "error"
        man.error = str(exc) if isinstance(exc, LidarSemError) else f"{type(exc).__name__}: {exc}"
        raise
    finally:
        man.timings["total"] = time.perf_counter() - t0
        man.write(cfg.output)


# data access ------------------------------------------------------------

def scan_paths(cfg: PipelineConfig) -> list[str]:
    cfg.require("scans")
    paths = sorted(glob.glob(os.path.join(cfg.path("scans"), "*.bin")))
    if not paths:
        raise DataError(f"no .bin scans in {cfg.path('scans')}")
    return paths


def _stem(path) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def load_scans(cfg):
    return [read_velodyne_bin(p, frame_id=k) for k, p in enumerate(scan_paths(cfg))]


def load_gt(cfg, paths):
    cfg.require("gt")
    out = []
    missing = []
    for p in paths:
        pts = os.path.join(cfg.path("gt"), _stem(p) + ".points.csv")
        if not os.path.exists(pts):
            missing.append(pts)
            continue
        out.append(read_ground_truth(pts, os.path.join(cfg.path("gt"), _stem(p) + ".boxes.csv")))
    if missing:
        raise DataError("missing ground truth files: " + ", ".join(missing))
    return out


def movable_pixels(img, index_map, gt) -> np.ndarray:
    """Pixel labels for scorer training: 1 where the winning point is movable or dynamic."""
    lab = np.zeros(img.valid.shape, dtype=np.int64)
    pp = index_map.pixel_point
    own = pp >= 0
    lab[own] = gt.labels[pp[own]] != NON_MOVABLE
    return lab


# commands ---------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig) -> RunManifest:
    """Render a synthetic sequence into ``inputs.scans``, ``inputs.poses`` and ``inputs.gt``."""
    from .synth import SceneConfig, benchmark_scene, synth_scene

    s = cfg.raw["synth"]
    with _run(cfg, "synth") as man:
        for key in ("scans", "poses", "gt"):
            if cfg.path(key) is None:
                raise ConfigError(f"inputs.{key} is required for synth")
        scene = s.get("scene", "benchmark")
        if scene == "benchmark":
            scene_cfg = benchmark_scene(seed=cfg.seed, n_azimuth=int(s.get("n_azimuth", 435)))
        elif isinstance(scene, dict):
            scene_cfg = SceneConfig.from_dict({**scene, "seed": cfg.seed})
        else:
            raise ConfigError(f"synth.scene must be 'benchmark' or a mapping, got {scene!r}")
        frames = int(s.get("frames", 20))
        start = int(s.get("start", 0))
        if frames < 1:
            raise ConfigError("synth.frames must be at least 1")
        os.makedirs(cfg.path("scans"), exist_ok=True)
        os.makedirs(cfg.path("gt"), exist_ok=True)
        poses = []
        for k in range(frames):
            cloud, gt, pose = synth_scene(scene_cfg, start + k)
            stem = f"{k:06d}"
            write_velodyne_bin(os.path.join(cfg.path("scans"), stem + ".bin"), cloud)
            write_ground_truth(os.path.join(cfg.path("gt"), stem + ".points.csv"),
                               os.path.join(cfg.path("gt"), stem + ".boxes.csv"), gt)
            poses.append(pose)
            man.frames.append({"frame": k, "points": len(cloud)})
        os.makedirs(os.path.dirname(cfg.path("poses")) or ".", exist_ok=True)
        write_poses(cfg.path("poses"), poses)
    return man


def cmd_project(cfg: PipelineConfig) -> RunManifest:
    """Range image of every scan as PGM channels plus an ``.npz`` with the raw data."""
    with _run(cfg, "project") as man:
        paths = scan_paths(cfg)
        out = os.path.join(cfg.output, "images")
        os.makedirs(out, exist_ok=True)
        pcfg = cfg.projection
        for k, p in enumerate(paths):
            with man.stage("read"):
                cloud = read_velodyne_bin(p, frame_id=k)
            with man.stage("project"):
                img, imap = project(cloud, pcfg)
            with man.stage("write"):
                prefix = os.path.join(out, _stem(p))
                write_pgm(prefix, img)
                np.savez(prefix + ".npz", data=img.data, valid=img.valid, pixel_point=imap.pixel_point)
            man.frames.append({"frame": k, "points": len(cloud), "pixels": int(img.valid.sum()),
                               "dropped": imap.dropped})
    return man


def cmd_train(cfg: PipelineConfig) -> RunManifest:
    with _run(cfg, "train") as man:
        paths = scan_paths(cfg)
        sel = cfg.raw["scorer"].get("frames")
        if sel is not None:
            paths = [paths[i] for i in sel]
        gts = load_gt(cfg, paths)
        samples = []
        pcfg = cfg.projection
        with man.stage("project"):
            for k, (p, gt) in enumerate(zip(paths, gts)):
                cloud = read_velodyne_bin(p, frame_id=k)
                if len(gt.labels) != len(cloud):
                    raise DataError(f"{p}: {len(cloud)} points but {len(gt.labels)} labels")
                img, imap = project(cloud, pcfg)
                samples.append(TrainingSample.from_image(img, movable_pixels(img, imap, gt)))
                man.frames.append({"frame": k, "points": len(cloud), "pixels": int(img.valid.sum())})
        tcfg = cfg.train_config
        with man.stage("train"):
            model = train(samples, tcfg)
        target = cfg.path("model") or os.path.join(cfg.output, "model.bin")
        os.makedirs(os.path.dirname(target) or ".", exist_ok=True)
        save_model(target, model)
        man.info.update(model=target, losses=model.losses, final_loss=model.losses[-1],
                        class_weights=model.class_weights)
    return man


@dataclass
class FrameCues:
    """Inputs of one filter step: points, objectness, dynamicity and the motion field."""

    xyz: np.ndarray
    xi: np.ndarray | None
    delta: np.ndarray | None
    motion: MotionField | None


def _scorer_source(cfg, modes, man):
    needs = any(m != "exp3" for m in modes)
    model_p, scores_p = cfg.path("model"), cfg.path("scores")
    if not needs:
        man.info["scorer"] = "none"
        return None
    if (model_p is None) == (scores_p is None):
        raise ConfigError("exactly one scorer source is required: inputs.model or inputs.scores")
    if model_p is not None:
        cfg.require("model")
        man.info["scorer"] = "model"
        return ("model", load_model(model_p))
    cfg.require("scores")
    man.info["scorer"] = "scores"
    return ("scores", scores_p)


def compute_cues(cfg: PipelineConfig, man: RunManifest, modes) -> list[FrameCues]:
    """Objectness and dynamicity for every frame; frames without a successor get no motion cue."""
    paths = scan_paths(cfg)
    source = _scorer_source(cfg, modes, man)
    poses = None
    if len(paths) > 1:
        cfg.require("poses")
        poses = read_poses(cfg.path("poses"))
        if len(poses) != len(paths):
            raise DataError(f"{len(paths)} scans but {len(poses)} poses")
    pcfg, fcfg = cfg.projection, cfg.flow
    sigma = cfg.filter_config("exp1").sigma
    with man.stage("read"):
        clouds = [read_velodyne_bin(p, frame_id=k) for k, p in enumerate(paths)]
    o0 = cfg.filter_config("exp1").o0
    cues = []
    for k, cloud in enumerate(clouds):
        xi = None
        if source is not None:
            with man.stage("project"):
                img, imap = project(cloud, pcfg)
            with man.stage("score"):
                if source[0] == "model":
                    smap = predict(source[1], img)
                else:
                    sp = os.path.join(source[1], _stem(paths[k]) + ".bin")
                    if not os.path.exists(sp):
                        raise DataError(f"missing score file {sp}")
                    smap = load_scores(sp, (pcfg.height, pcfg.width))
                xi = back_project(imap, smap.xi, fill=o0)
        delta = motion = None
        if k + 1 < len(clouds):
            odom = poses[k + 1].inverse() @ poses[k]
            with man.stage("flow"):
                init = MotionField.constant(len(cloud), odom)
                motion = estimate_flow(cloud.xyz, clouds[k + 1].xyz, fcfg, init)
            if motion.warning:
                man.warn(f"frame {k}: {motion.warning}")
            with man.stage("dynamicity"):
                delta = bf.dynamicity(motion.R, motion.t, odom, sigma)
        cues.append(FrameCues(cloud.xyz, xi, delta, motion))
    return cues


def run_filter(cues: list[FrameCues], fcfg: bf.FilterConfig) -> list[bf.Belief]:
    """Filter a cue sequence; beliefs follow points through the motion of the previous frame."""
    beliefs = []
    prev = None
    for k, c in enumerate(cues):
        n = len(c.xyz)
        if prev is None or cues[k - 1].motion is None:
            bel = bf.Belief.prior(n, fcfg)
        else:
            src = bf.associate(cues[k - 1].xyz, cues[k - 1].motion.apply, c.xyz, fcfg.match_radius)
            bel = bf.carry(prev, src, fcfg)
        xi = c.xi if c.xi is not None else np.full(n, fcfg.o0)
        bel = bf.step(bel, c.delta, xi, fcfg, frame=k)
        beliefs.append(bel)
        prev = bel
    return beliefs


def cmd_classify(cfg: PipelineConfig) -> RunManifest:
    with _run(cfg, "classify") as man:
        modes = cfg.modes
        man.info["modes"] = modes
        paths = scan_paths(cfg)
        cues = compute_cues(cfg, man, modes)
        if cfg.raw.get("write_motion"):
            mdir = os.path.join(cfg.output, "motion")
            os.makedirs(mdir, exist_ok=True)
            for p, c in zip(paths, cues):
                if c.motion is not None:
                    write_motion_csv(os.path.join(mdir, _stem(p) + ".csv"), c.motion)
        counts = {}
        for mode in modes:
            fcfg = cfg.filter_config(mode)
            with man.stage("filter"):
                beliefs = run_filter(cues, fcfg)
            out = os.path.join(cfg.output, "labels", mode)
            os.makedirs(out, exist_ok=True)
            with man.stage("write"):
                for k, (p, bel) in enumerate(zip(paths, beliefs)):
                    labels = bf.classify(bel.probs)
                    write_labels(os.path.join(out, _stem(p) + ".csv"), labels, bel.probs)
                    counts.setdefault(k, {})[mode] = len(labels)
                    if bel.degenerate.any():
                        man.warn(f"{mode} frame {k}: {int(bel.degenerate.sum())} points kept the predicted belief")
        for k, c in enumerate(cues):
            man.frames.append({"frame": k, "points": len(c.xyz), "labels": counts[k]})
    return man


def _table_rows(curves_by_mode):
    rows = []
    for mode, curves in curves_by_mode.items():
        for cls, c in curves.items():
            rows.append({"mode": mode, "class": cls, "f1": c.max_f1, "precision": c.best_precision,
                         "recall": c.best_recall, "threshold": c.best_threshold})
    return rows


def evaluate_labels(label_sets, gts, xyzs=None, eval_cfg=None):
    """Pointwise PR per class and, with points given, object AP per difficulty.

    ``label_sets`` is a list (one per frame) of ``(labels, beliefs)``.
    """
    eval_cfg = eval_cfg or DEFAULTS["eval"]
    truth = np.concatenate([g.labels for g in gts])
    beliefs = np.concatenate([b for _, b in label_sets])
    if len(truth) != len(beliefs):
        raise DataError(f"{len(beliefs)} labelled points but {len(truth)} ground-truth points")
    curves = {}
    for c, name in enumerate(CLASS_NAMES):
        pos = truth == c
        if pos.any():
            curves[name] = ev.pr_curve(beliefs[:, c], pos)
    ap = {}
    if xyzs is not None:
        preds = []
        for (labels, bel), xyz in zip(label_sets, xyzs):
            conf = bel[:, MOVABLE] + bel[:, DYNAMIC]
            clusters = ev.cluster_points(xyz, labels != NON_MOVABLE, eval_cfg["cluster_radius"],
                                         eval_cfg["min_points"], conf)
            preds.append([ev.fit_box(cl, xyz) for cl in clusters])
        boxes = [g.boxes for g in gts]
        for d in DIFFICULTIES:
            ap[d] = ev.average_precision(preds, boxes, eval_cfg["iou"], difficulty=d)
    return curves, ap


def cmd_eval(cfg: PipelineConfig) -> RunManifest:
    with _run(cfg, "eval") as man:
        paths = scan_paths(cfg)
        out = os.path.join(cfg.output, "eval")
        os.makedirs(out, exist_ok=True)
        gts = None
        if cfg.path("gt") is None or not os.path.isdir(cfg.path("gt")):
            man.warn("ground truth missing: pointwise metrics skipped")
        else:
            gts = load_gt(cfg, paths)
        clouds = load_scans(cfg)
        curves_by_mode, ap_by_mode = {}, {}
        for mode in cfg.modes:
            ldir = os.path.join(cfg.output, "labels", mode)
            files = [os.path.join(ldir, _stem(p) + ".csv") for p in paths]
            missing = [f for f in files if not os.path.exists(f)]
            if missing:
                raise DataError(f"labels for mode {mode} missing: {missing[0]} (run classify first)")
            label_sets = [read_labels(f) for f in files]
            for k, (lab, _) in enumerate(label_sets):
                if len(lab) != len(clouds[k]):
                    raise DataError(f"{files[k]}: {len(lab)} labels for {len(clouds[k])} points")
            if gts is None:
                continue
            with man.stage(f"eval_{mode}"):
                curves, ap = evaluate_labels(label_sets, gts, [c.xyz for c in clouds], cfg.raw["eval"])
            curves_by_mode[mode], ap_by_mode[mode] = curves, ap
            ev.write_pr_csv(os.path.join(out, f"pr_{mode}.csv"), curves)
            ev.plot_pr_curves(os.path.join(out, f"pr_{mode}.svg"), curves, title=f"Pointwise PR ({mode})")
        if gts is not None:
            rows = _table_rows(curves_by_mode)
            with open(os.path.join(out, "metrics.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["mode", "class", "f1", "precision", "recall", "threshold"])
                for r in rows:
                    w.writerow([r["mode"], r["class"]] + [f"{r[k]:.6f}" for k in ("f1", "precision", "recall", "threshold")])
            with open(os.path.join(out, "ap.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["mode", "difficulty", "ap"])
                for mode, ap in ap_by_mode.items():
                    for d, v in ap.items():
                        w.writerow([mode, d, "" if v is None else f"{v:.6f}"])
            dyn = {m: c[CLASS_NAMES[DYNAMIC]] for m, c in curves_by_mode.items() if CLASS_NAMES[DYNAMIC] in c}
            if dyn:
                ev.plot_pr_curves(os.path.join(out, "pr_dynamic_modes.svg"), dyn, title="Dynamic class by mode")
                with open(os.path.join(out, "modes.csv"), "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["mode", "f1", "precision", "recall"])
                    for m, c in dyn.items():
                        w.writerow([m, f"{c.max_f1:.6f}", f"{c.best_precision:.6f}", f"{c.best_recall:.6f}"])
            man.info["metrics"] = rows
            man.info["ap"] = ap_by_mode
        for k, c in enumerate(clouds):
            man.frames.append({"frame": k, "points": len(c)})
    return man


COMMANDS = {
    "synth": cmd_synth,
    "project": cmd_project,
    "train": cmd_train,
    "classify": cmd_classify,
    "eval": cmd_eval,
}
