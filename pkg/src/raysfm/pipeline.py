"""Incremental reconstruction driver.

One epoch picks a reference among the registered images, registers every
unregistered graph neighbor of it that clears the inlier gate, rebuilds the
tracks, refines only the new cameras and then lets the provider "train" on
the buffer of registered images. After the last epoch a global pass refines
everything except the seed, and the result is normalized.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph as graph_mod
from .geometry import Pose, SimTransform, align_and_evaluate
from .provider import FileProvider, ProviderState, SceneConfig, SyntheticProvider, generate_scene
from .refinement import ScaleAnchor, SolverOptions, finalize, refine_epoch
from .registration import RansacConfig, try_register
from .tracks import build_tracks, default_tau_merge, filter_ambiguous, propose_matches

logger = logging.getLogger(__name__)

TRACK_MODES = ("auto", "oracle", "proximity")


@dataclass(frozen=True)
class ProviderConfig:
    # synthetic | file
    backend: str = "synthetic"
    path: str = ""
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    gamma: float = 0.7
    rng_seed: int = 0

    def validate(self):
        if self.backend not in ("synthetic", "file"):
            raise ValueError(f"unknown provider backend {self.backend!r}")
        if self.backend == "file" and not self.path:
            raise ValueError("file provider needs a path")
        ProviderState(self.noise_sigma, self.outlier_fraction, self.gamma)


@dataclass(frozen=True)
class PipelineConfig:
    s_sim: float = graph_mod.DEFAULT_S_SIM
    ransac: RansacConfig = field(default_factory=RansacConfig)
    solver: SolverOptions = field(default_factory=SolverOptions)
    downsample: int = 4
    scene: SceneConfig = field(default_factory=SceneConfig)
    scene_seed: int = 0
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    # synthetic-covis | file
    descriptors: str = "synthetic-covis"
    descriptor_path: str = ""
    max_epochs: int = 1000
    # finetune budgets, converted to provider observation rounds
    iter_max: int = 1000
    seed_iter_max: int = 500
    iters_per_round: int = 1000
    # 0 = unlimited batch size per epoch
    max_batch: int = 0
    # failed attempts before a target stops counting toward reference choice
    max_attempts: int = 2
    track_mode: str = "auto"
    tau_merge: float = 0.0

    def validate(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.downsample < 1:
            raise ValueError("downsample must be >= 1")
        if not 0.0 <= self.s_sim <= 1.0:
            raise ValueError(f"s_sim must lie in [0, 1], got {self.s_sim}")
        if self.track_mode not in TRACK_MODES:
            raise ValueError(f"unknown track mode {self.track_mode!r}")
        if self.iters_per_round < 1 or self.iter_max < 0 or self.seed_iter_max < 0:
            raise ValueError("iteration budgets must be non-negative")
        if self.descriptors not in ("synthetic-covis", "file"):
            raise ValueError(f"unknown descriptor backend {self.descriptors!r}")
        self.provider.validate()
        if self.provider.backend == "synthetic":
            self.scene.validate()
        return self

    def rounds(self, iters):
        return math.ceil(iters / self.iters_per_round)


# ---------------------------------------------------------------------------
# config files

_SECTIONS = {
    "pipeline": None,
    "registration": "ransac",
    "refinement": "solver",
    "scene": "scene",
    "provider": "provider",
}


def _coerce(value, default):
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value.strip()


def _update(obj, items, section):
    names = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in items:
        if key not in names or dataclasses.is_dataclass(getattr(obj, key)):
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        changes[key] = _coerce(value, getattr(obj, key))
    return dataclasses.replace(obj, **changes)


def load_config(path=None, overrides=None):
    """Read an INI-style config; ``overrides`` maps ``section.key`` to values."""
    cfg = PipelineConfig()
    parser = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"missing config file: {path}")
        parser.read(path)
    for section, key, value in [(s, k, v) for s in parser.sections() for k, v in parser.items(s)] + \
            [tuple(k.split(".", 1)) + (str(v),) for k, v in (overrides or {}).items()]:
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        attr = _SECTIONS[section]
        if attr is None:
            cfg = _update(cfg, [(key, value)], section)
        else:
            cfg = dataclasses.replace(cfg, **{attr: _update(getattr(cfg, attr), [(key, value)], section)})
    return cfg.validate()


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def with_seed(cfg, seed):
    """Derive every random stream of a run from one integer."""
    return dataclasses.replace(
        cfg, scene_seed=seed,
        provider=dataclasses.replace(cfg.provider, rng_seed=seed),
        ransac=dataclasses.replace(cfg.ransac, rng_seed=seed))


# ---------------------------------------------------------------------------
# state

@dataclass(eq=False)
class ReconstructionState:
    config: PipelineConfig
    provider: object
    graph: graph_mod.SimilarityGraph
    seed_id: int
    intrinsics: dict
    # image id -> epoch of registration, in registration order
    registered: dict = field(default_factory=dict)
    poses: dict = field(default_factory=dict)
    coarse_poses: dict = field(default_factory=dict)
    refined_poses: dict = field(default_factory=dict)
    reference_of: dict = field(default_factory=dict)
    tracks: list = field(default_factory=list)
    scale_anchor: ScaleAnchor | None = None
    epoch: int = 0
    cost_curves: list = field(default_factory=list)
    events: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    normalization: SimTransform | None = None

    @property
    def all_ids(self):
        return list(self.graph.nodes)

    @property
    def unregistered(self):
        return [i for i in self.graph.nodes if i not in self.registered]

    def log(self, stage, image_id, outcome, value=""):
        if isinstance(value, float):
            value = repr(value)
        self.events.append((self.epoch, stage, "-" if image_id is None else image_id, outcome, value))

    def tick(self, stage, t0):
        self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - t0


def make_provider(cfg):
    p = cfg.provider
    if p.backend == "file":
        return FileProvider(p.path, p.noise_sigma)
    scene = generate_scene(cfg.scene, cfg.scene_seed)
    state = ProviderState(p.noise_sigma, p.outlier_fraction, p.gamma, {}, p.rng_seed)
    return SyntheticProvider(scene, state)


def make_descriptor_backend(cfg, provider):
    if cfg.descriptors == "file":
        return graph_mod.FileBackend(cfg.descriptor_path)
    if not hasattr(provider, "scene"):
        raise ValueError("the synthetic co-visibility descriptor backend needs a synthetic provider")
    return graph_mod.SyntheticCovisBackend(provider.scene)


def initialize_seed(config, provider, backend=None):
    config.validate()
    ids = list(provider.image_ids)
    if not ids:
        raise ValueError("no images to reconstruct")
    backend = backend or make_descriptor_backend(config, provider)
    t0 = time.perf_counter()
    descriptors = [graph_mod.compute_descriptor(backend, i) for i in ids]
    g = graph_mod.build_graph(descriptors, config.s_sim)
    seed = graph_mod.select_seed(g)
    provider.anchor(seed)
    intr = {i: provider.intrinsics(i) for i in ids}
    state = ReconstructionState(config, provider, g, seed, intr)
    state.registered[seed] = 0
    state.poses[seed] = Pose.identity()
    state.coarse_poses[seed] = Pose.identity()
    state.refined_poses[seed] = Pose.identity()
    state.reference_of[seed] = seed
    state.log("seed", seed, "selected", g.degree(seed))
    # the seed acts as its own reference and target while the regressor adapts
    provider.observe([seed], config.rounds(config.seed_iter_max))
    state.tick("initialize", t0)
    return state


def _ransac_for(cfg, epoch, target, reference):
    seed = int(np.random.SeedSequence([cfg.ransac.rng_seed, epoch, target, reference]).generate_state(1)[0])
    return dataclasses.replace(cfg.ransac, rng_seed=seed)


def rebuild_tracks(state):
    cfg = state.config
    kps = [state.provider.query_keypoints(state.reference_of[i], i) for i in sorted(state.registered)]
    mode = cfg.track_mode
    if mode == "auto":
        mode = "oracle" if all(k.corr_id is not None for k in kps) else "proximity"
    tau = cfg.tau_merge or default_tau_merge(max(state.provider.effective_sigma(i) for i in state.registered))
    tracks = filter_ambiguous(build_tracks(propose_matches(kps, mode, tau)))
    state.tracks = tracks
    return tracks


def _choose_anchor(state):
    nb = [(w, -j) for j, w in state.graph.adjacency[state.seed_id].items() if j in state.registered]
    if not nb:
        return None
    other = -max(nb)[1]
    d = float(np.linalg.norm(state.poses[other].center - state.poses[state.seed_id].center))
    return ScaleAnchor(state.seed_id, other, d)


def run_epoch(state):
    """One registration epoch. Returns the list of newly registered ids.

    Raises :class:`graph.FrontierExhausted` when no registered image links
    to a registrable unregistered image.
    """
    cfg = state.config
    unregistered = state.unregistered
    if not unregistered:
        raise graph_mod.FrontierExhausted("all images are registered")
    state.epoch += 1
    open_set = [i for i in unregistered if state.failures.get(i, 0) < cfg.max_attempts]
    ref = graph_mod.select_reference(state.graph, state.registered, open_set)
    state.log("reference", ref, "selected", len(open_set))

    t0 = time.perf_counter()
    targets = [j for j in state.graph.neighbors(ref) if j in set(open_set)]
    targets.sort(key=lambda j: (-state.graph.weight(ref, j), j))
    if cfg.max_batch:
        targets = targets[:cfg.max_batch]
    new = []
    for tgt in targets:
        att = try_register(tgt, ref, state.provider, _ransac_for(cfg, state.epoch, tgt, ref), cfg.downsample)
        if att.accepted:
            state.registered[tgt] = state.epoch
            state.poses[tgt] = att.pose
            state.coarse_poses[tgt] = att.pose
            state.reference_of[tgt] = ref
            new.append(tgt)
            state.log("register", tgt, "accepted", att.inlier_count)
        else:
            state.failures[tgt] = state.failures.get(tgt, 0) + 1
            state.log("register", tgt, "rejected", att.inlier_count)
    state.tick("register", t0)

    if new:
        if state.scale_anchor is None:
            state.scale_anchor = _choose_anchor(state)
            if state.scale_anchor is not None:
                state.log("anchor", state.scale_anchor.other_id, "fixed", state.scale_anchor.distance)
        t0 = time.perf_counter()
        rebuild_tracks(state)
        state.log("tracks", None, "built", len(state.tracks))
        state.tick("tracks", t0)
        t0 = time.perf_counter()
        res = refine_epoch(state, new, cfg.solver)
        state.log("refine", None, res.reason, res.cost)
        state.tick("refine", t0)
        for i in new:
            state.refined_poses[i] = state.poses[i]
    state.provider.observe(sorted(state.registered), cfg.rounds(cfg.iter_max))
    return new


def normalize_reconstruction(state):
    """Move the camera-center centroid to the origin and make the mean center norm 1."""
    if not state.poses:
        raise ValueError("nothing to normalize")
    ids = sorted(state.poses)
    C = np.array([state.poses[i].center for i in ids])
    mu = C.mean(axis=0)
    spread = np.linalg.norm(C - mu, axis=1).mean()
    s = 1.0 / spread if spread > 0 else 1.0
    T = SimTransform(s, np.array([1.0, 0.0, 0.0, 0.0]), -s * mu)
    state.poses = {i: T.apply_to_pose(state.poses[i]) for i in ids}
    for t in state.tracks:
        t.point = T.apply(t.point)
    state.normalization = T
    return state


@dataclass
class ReconstructionReport:
    status: str
    total: int
    registered: int
    unregistered: list
    seed: int
    epochs: int
    per_image: dict | None
    means: dict | None
    cost_curves: list
    timings: dict
    errors: list
    n_tracks: int

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hash"] = self.content_hash()
        return d

    def content_hash(self):
        d = dataclasses.asdict(self)
        d.pop("timings")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _stage_metrics(poses, gt):
    common = sorted(set(poses) & set(gt))
    if len(common) < 3:
        return None
    return align_and_evaluate({i: poses[i] for i in common}, {i: gt[i] for i in common})


def evaluate_state(state, gt):
    stages = {"coarse": state.coarse_poses, "refined": state.refined_poses, "final": state.poses}
    evals = {k: _stage_metrics(v, gt) for k, v in stages.items()}
    per_image, means = {}, {}
    for k, ev in evals.items():
        if ev is None:
            continue
        means[k] = {"rotation_deg": ev.mean_rotation_deg, "translation": ev.mean_translation}
        for i, (dr, dt) in ev.per_image.items():
            per_image.setdefault(str(i), {})[k] = {"rotation_deg": dr, "translation": dt}
    return per_image, means


def run_full(config, provider=None, backend=None, ground_truth=None):
    """Seed, epochs, global refinement, normalization and evaluation.

    ``ground_truth`` defaults to the provider's own, when it has one.
    """
    config.validate()
    t_start = time.perf_counter()
    provider = provider or make_provider(config)
    state = initialize_seed(config, provider, backend)
    errors = []
    status = None
    try:
        while state.epoch < config.max_epochs:
            if not state.unregistered:
                break
            try:
                run_epoch(state)
            except graph_mod.FrontierExhausted as exc:
                state.log("epoch", None, "frontier_exhausted", len(state.unregistered))
                logger.info("registration stopped: %s", exc)
                break
        if len(state.poses) >= 2:
            t0 = time.perf_counter()
            rebuild_tracks(state)
            res = finalize(state, config.solver)
            state.log("finalize", None, res.reason, res.cost)
            state.tick("finalize", t0)
        normalize_reconstruction(state)
    except Exception as exc:  # recorded, partial state kept
        logger.exception("reconstruction failed in epoch %d", state.epoch)
        errors.append({"epoch": state.epoch, "error": f"{type(exc).__name__}: {exc}"})
        status = "error"
    gt = ground_truth or getattr(provider, "ground_truth", None)
    per_image = means = None
    if gt and status != "error":
        per_image, means = evaluate_state(state, gt)
    if status is None:
        status = "complete" if not state.unregistered else "partial"
    state.timings["total"] = time.perf_counter() - t_start
    report = ReconstructionReport(
        status, len(state.all_ids), len(state.registered), state.unregistered, state.seed_id, state.epoch,
        per_image, means, state.cost_curves, dict(state.timings), errors, len(state.tracks))
    logger.info("reconstruction %s: %d/%d registered in %d epochs", status, report.registered, report.total,
                report.epochs)
    return state, report


def event_lines(state):
    return [" ".join(str(x) for x in e) + "\n" for e in state.events]
