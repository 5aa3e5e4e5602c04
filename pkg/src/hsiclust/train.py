"""End-to-end training: preprocessing, the per-epoch contrastive clustering
loop with adaptive edge updates, run-directory artifacts and ablation grids.

Epoch structure: predict/empirical edge weights and the edge loss; momentum
update of the adjacency; sample pixel views; forward both towers; alignment
and prototype losses; SGD step; momentum update of the target tower; then an
evaluation pass (target forward, spherical k-means, fresh prototypes) whose
state feeds the next epoch's edge step.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .cluster_eval import MetricsReport, compute_metrics, labels_to_pixels, spherical_kmeans
from .egael import (
    edge_loss,
    empirical_edge_weights,
    init_edge_mlp,
    predict_edge_weights,
    soft_assignments,
)
from .encoder import EncoderPair, SsgcoConfig
from .graph import SpGraph, build_adjacency, momentum_update, normalize
from .hsi_io import HsiCube, LabelRaster, first_principal_gray, fit_pca, project, standardize_bands
from .numerics import ParamSet, Tensor
from .objective import (
    ClusterState,
    build_prototypes,
    neighborhood_alignment_loss,
    prototype_contrast_loss,
    total_loss,
)
from .pngio import class_map_to_png
from .superpixel import (
    SuperpixelSet,
    from_assignment,
    majority_labels,
    sample_augmented_views,
    segment,
)

EGAEL_MODES = ("full", "w_pre", "w_emp", "off")


@dataclass
class RunConfig:
    """Every knob of one training run; defaults follow the tuned setup."""

    n_classes: int = 4
    pca_dim: int = 20
    superpixels: int = 150
    layers: int = 2
    kernel_sizes: tuple[int, ...] | None = None   # None -> 7, -2 per layer, floor 3
    channels: tuple[int, ...] | None = None       # None -> 16, x2 per layer, cap 64
    variant: str = "ssgco"
    use_batch_norm: bool = True
    predictor_hidden: int = 512
    alpha: float = 0.1            # prototype contrast weight
    beta: float = 0.01            # edge loss weight
    gamma: float = 0.6            # adjacency momentum
    sigma: float = 1e-3           # neighborhood noise
    tau: float = 0.7              # contrast temperature
    na_normalize: bool = True     # row-normalize both sides of the alignment loss
    target_momentum: float = 0.99
    lr: float = 0.05
    weight_decay: float = 5e-4
    sgd_momentum: float = 0.9
    epochs: int = 100
    seed: int = 0
    egael_mode: str = "full"
    egael_end_to_end: bool = True

    def __post_init__(self):
        if self.egael_mode not in EGAEL_MODES:
            raise ValueError(f"egael_mode must be one of {EGAEL_MODES}")
        for name, value in (("gamma", self.gamma), ("target_momentum", self.target_momentum),
                            ("tau", self.tau)):
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def encoder_config(self) -> SsgcoConfig:
        if self.kernel_sizes is None or self.channels is None:
            base = SsgcoConfig.default(self.pca_dim, self.layers, self.variant,
                                       self.use_batch_norm, self.predictor_hidden)
            kernels = self.kernel_sizes or base.kernel_sizes
            channels = self.channels or base.channels
        else:
            kernels, channels = tuple(self.kernel_sizes), tuple(self.channels)
        return SsgcoConfig(self.pca_dim, self.layers, tuple(kernels), tuple(channels),
                           self.variant, self.use_batch_norm, self.predictor_hidden)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kernel_sizes"] = list(self.kernel_sizes) if self.kernel_sizes else None
        out["channels"] = list(self.channels) if self.channels else None
        return out

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        data = dict(data)
        for key in ("kernel_sizes", "channels"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return RunConfig(**data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PreprocessResult:
    sp: SuperpixelSet
    graph: SpGraph
    pixel_features: np.ndarray   # (N, d)
    gray: np.ndarray             # (H, W)


def preprocess(cube: HsiCube, pca_dim: int, superpixels: int, seed: int = 0,
               segmentation: np.ndarray | None = None) -> PreprocessResult:
    """Standardize, PCA-reduce, segment (or adopt an imported segmentation)
    and build the spatial adjacency."""
    std = standardize_bands(cube)
    gray = first_principal_gray(std)
    pca = fit_pca(std.pixels(), pca_dim)
    feats = project(pca, std.pixels())
    if segmentation is None:
        assignment = segment(gray, superpixels, seed)
    else:
        assignment = np.asarray(segmentation, dtype=np.int32)
    sp = from_assignment(assignment, feats)
    graph = build_adjacency(assignment)
    return PreprocessResult(sp, graph, feats, gray)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    l_na: float
    l_pc: float
    l_e: float | None
    acc: float | None
    nmi: float | None
    ari: float | None

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


@dataclass
class TrainResult:
    config: RunConfig
    report: MetricsReport | None
    history: list[EpochRecord]
    state: ClusterState
    pixel_labels: np.ndarray          # (H, W) predicted class ids 1..K (mapped if GT given)
    sp_gt_labels: np.ndarray | None
    final_w_pre: np.ndarray | None
    pair: EncoderPair
    edge_params: ParamSet | None
    graph: SpGraph
    sp: SuperpixelSet
    run_dir: Path | None = None
    elapsed_seconds: float = 0.0


def _eval_state(pair: EncoderPair, x: np.ndarray, a_hat: np.ndarray, k: int,
                rng_kmeans: np.random.Generator, n_init: int = 10,
                warm_centroids: np.ndarray | None = None
                ) -> tuple[ClusterState, np.ndarray]:
    """Target forward + spherical k-means + prototype recompute (evaluation mode).

    The previous epoch's prototypes enter the restart pool as a warm-started
    candidate, which keeps cluster identities stable when they remain the best
    local optimum.
    """
    z_raw = pair.forward_target(x, a_hat)
    norms = np.linalg.norm(z_raw, axis=1, keepdims=True)
    z = z_raw / np.maximum(norms, 1e-12)
    labels, _, _ = spherical_kmeans(z, k, rng_kmeans, n_init=n_init,
                                    init_centroids=warm_centroids)
    protos = np.zeros((k, z.shape[1]))
    np.add.at(protos, labels, z)
    pnorms = np.linalg.norm(protos, axis=1, keepdims=True)
    protos = protos / np.maximum(pnorms, 1e-12)
    assign_sims = z @ protos.T
    conf = assign_sims.max(axis=1)
    return ClusterState(labels, protos, conf), z


def run_training(cfg: RunConfig, cube: HsiCube, labels: LabelRaster | None = None,
                 out_dir: str | Path | None = None,
                 segmentation: np.ndarray | None = None,
                 graph_transform=None) -> TrainResult:
    """Run the full training loop; returns metrics, history and model state.

    `graph_transform(graph, sp_gt_labels, rng) -> graph` lets diagnostics (edge
    deletion sweeps) modify the initial graph before training.
    """
    t_start = time.monotonic()
    # fixed spawn order keeps runs bitwise reproducible; stream 0 is reserved
    # for segmentation backends that need randomness
    streams = np.random.SeedSequence(cfg.seed).spawn(6)
    _, rng_params, rng_noise, rng_augment, rng_kmeans, rng_misc = \
        [np.random.default_rng(s) for s in streams]

    prep = preprocess(cube, cfg.pca_dim, cfg.superpixels, cfg.seed, segmentation)
    sp, graph = prep.sp, prep.graph
    x = sp.features
    m = sp.m
    k = cfg.n_classes

    sp_gt = majority_labels(sp.assignment, labels.labels) if labels is not None else None
    if graph_transform is not None:
        graph = graph_transform(graph, sp_gt, rng_misc)

    enc_cfg = cfg.encoder_config()
    pair = EncoderPair.create(enc_cfg, rng_params, momentum=cfg.target_momentum)
    edge_params = None
    if cfg.egael_mode in ("full", "w_pre"):
        edge_params = init_edge_mlp(k, rng_params)
        pair.online.merge(edge_params)

    a_hat_np = normalize(graph)
    state, z_eval = _eval_state(pair, x, a_hat_np, k, rng_kmeans)

    history: list[EpochRecord] = []
    run_dir = _create_run_dir(out_dir) if out_dir is not None else None
    log_fh = open(run_dir / "train_log.jsonl", "w", encoding="utf-8") if run_dir else None

    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = nm.cosine_lr(epoch - 1, max(cfg.epochs, 1), cfg.lr)

            # edge step: predictions, evidence, loss, adjacency momentum update
            l_e_tensor = None
            w_pre_tensor = None
            a_hat_tensor = None
            if cfg.egael_mode != "off" and graph.n_edges > 0:
                assignments = soft_assignments(z_eval, state.prototypes)
                a_pre = None
                if cfg.egael_mode in ("full", "w_pre"):
                    w_pre_tensor = predict_edge_weights(pair.online, assignments, graph.edges)
                    a_pre = w_pre_tensor.value
                w_emp = None
                if cfg.egael_mode in ("full", "w_emp"):
                    w_emp = empirical_edge_weights(state.confidence, z_eval,
                                                   state.assignments, graph.edges)
                if cfg.egael_mode == "full":
                    l_e_tensor = edge_loss(w_pre_tensor, w_emp)
                blend_target = a_pre if a_pre is not None else w_emp
                old_weights = graph.weights
                graph = momentum_update(graph, blend_target, cfg.gamma)
                if cfg.egael_end_to_end and w_pre_tensor is not None:
                    base = Tensor(cfg.gamma * old_weights)
                    edge_w = nm.add(base, nm.scale(w_pre_tensor, 1.0 - cfg.gamma))
                    a_hat_tensor = nm.normalized_adjacency(edge_w, graph.edges, m)
                    a_hat_np = a_hat_tensor.value
                else:
                    a_hat_np = normalize(graph)
            if a_hat_tensor is None:
                a_hat_tensor = Tensor(a_hat_np)

            # contrastive step on freshly sampled pixel views
            x_aug = sample_augmented_views(sp, prep.pixel_features, rng_augment)
            f_out = pair.forward_online(Tensor(x), a_hat_tensor)
            t_aug = pair.forward_target(x_aug, a_hat_np)
            l_na = neighborhood_alignment_loss(f_out, t_aug, pair.forward_predictor,
                                               cfg.sigma, rng_noise,
                                               normalize=cfg.na_normalize)
            mu, mu_plus = build_prototypes(f_out, t_aug, state.assignments, k)
            l_pc = prototype_contrast_loss(mu, mu_plus, cfg.tau)
            loss = total_loss(l_na, l_pc, l_e_tensor, cfg.alpha, cfg.beta)

            pair.online.zero_grad()
            try:
                loss.backward()
            except nm.NonFiniteValue as exc:
                raise nm.NonFiniteValue(f"epoch {epoch}: {exc}") from exc
            if edge_params is not None:
                # ablations can leave h without a loss path; step it with zero grad
                for _, t in edge_params.items():
                    if t.grad is None:
                        t.grad = np.zeros_like(t.value)
            nm.sgd_step(pair.online, lr, cfg.weight_decay, cfg.sgd_momentum)
            pair.momentum_update_target()

            # evaluation pass drives the next epoch's edge step and the report
            state, z_eval = _eval_state(pair, x, a_hat_np, k, rng_kmeans,
                                        warm_centroids=state.prototypes)

            record = EpochRecord(
                epoch=epoch, lr=lr, loss=float(loss.value),
                l_na=float(l_na.value), l_pc=float(l_pc.value),
                l_e=float(l_e_tensor.value) if l_e_tensor is not None else None,
                acc=None, nmi=None, ari=None,
            )
            if labels is not None:
                pixel_pred = labels_to_pixels(state.assignments, sp.assignment)
                rep = compute_metrics(pixel_pred, labels, k=k)
                record.acc, record.nmi, record.ari = rep.acc, rep.nmi, rep.ari
            history.append(record)
            if log_fh:
                log_fh.write(record.to_json() + "\n")
    finally:
        if log_fh:
            log_fh.close()

    # final report and artifacts
    pixel_clusters = labels_to_pixels(state.assignments, sp.assignment)
    report = None
    if labels is not None:
        report = compute_metrics(pixel_clusters, labels, k=k)
        mapping = np.asarray(report.mapping)
        pixel_labels = mapping[pixel_clusters] + 1
    else:
        pixel_labels = pixel_clusters + 1

    final_w_pre = None
    if cfg.egael_mode in ("full", "w_pre") and graph.n_edges > 0:
        assignments = soft_assignments(z_eval, state.prototypes)
        with nm.no_grad():
            final_w_pre = predict_edge_weights(pair.online, assignments, graph.edges).value

    result = TrainResult(
        config=cfg, report=report, history=history, state=state,
        pixel_labels=pixel_labels, sp_gt_labels=sp_gt, final_w_pre=final_w_pre,
        pair=pair, edge_params=edge_params, graph=graph, sp=sp,
        run_dir=run_dir, elapsed_seconds=time.monotonic() - t_start,
    )
    if run_dir is not None:
        _write_artifacts(result)
    return result


def _create_run_dir(out_dir: str | Path) -> Path:
    """Allocate a fresh run directory; never reuses one holding a manifest."""
    base = Path(out_dir)
    candidate = base
    suffix = 0
    while (candidate / "manifest.json").exists():
        suffix += 1
        candidate = base.parent / f"{base.name}-{suffix}"
    candidate.mkdir(parents=True, exist_ok=True)
    return candidate


def _write_artifacts(result: TrainResult) -> None:
    run_dir = result.run_dir
    cfg = result.config
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "elapsed_seconds": result.elapsed_seconds,
        "n_superpixels": result.sp.m,
        "n_edges": result.graph.n_edges,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    if result.report is not None:
        (run_dir / "metrics.json").write_text(result.report.to_json(), encoding="utf-8")
    class_map_to_png(run_dir / "clustermap.png", result.pixel_labels)
    save_checkpoint(run_dir / "checkpoint.bin", result.pair)
    if result.final_w_pre is not None and result.sp_gt_labels is not None:
        edge_state = {
            "edges": result.graph.edges.tolist(),
            "w_pre": result.final_w_pre.tolist(),
            "weights": result.graph.weights.tolist(),
            "sp_gt_labels": result.sp_gt_labels.tolist(),
        }
        (run_dir / "edge_state.json").write_text(json.dumps(edge_state), encoding="utf-8")


def save_checkpoint(path, pair: EncoderPair) -> None:
    """Both towers in one blob; the edge MLP lives inside the online set."""
    combined = ParamSet()
    for name, t in pair.online.items():
        combined.add(f"online.{name}", t.value)
    for name, t in pair.target.items():
        combined.add(f"target.{name}", t.value)
    combined.save(path)


def load_checkpoint(path, pair: EncoderPair) -> None:
    combined = ParamSet()
    for name, t in pair.online.items():
        combined.add(f"online.{name}", np.zeros_like(t.value))
    for name, t in pair.target.items():
        combined.add(f"target.{name}", np.zeros_like(t.value))
    combined.load(path)
    for name, t in pair.online.items():
        np.copyto(t.value, combined[f"online.{name}"].value)
    for name, t in pair.target.items():
        np.copyto(t.value, combined[f"target.{name}"].value)


ABLATION_EGAEL_ROWS = (
    {"label": "none", "egael_mode": "off"},
    {"label": "w_pre", "egael_mode": "w_pre"},
    {"label": "w_emp", "egael_mode": "w_emp"},
    {"label": "w_pre+w_emp", "egael_mode": "full"},
)


def run_ablation(cfg: RunConfig, cube: HsiCube, labels: LabelRaster,
                 variants: list[str] | None = None,
                 egael_rows: bool = False,
                 seeds: list[int] | None = None) -> list[dict]:
    """Grid of runs sharing the data; one output row per setting with
    mean/std of ACC, NMI and ARI across seeds."""
    seeds = seeds or [cfg.seed]
    rows = []
    settings: list[dict] = []
    if egael_rows:
        settings = [dict(r) for r in ABLATION_EGAEL_ROWS]
    else:
        wanted = variants or ["ssgco"]
        if "ssgco" not in wanted:
            wanted = ["ssgco"] + wanted
        settings = [{"label": v, "variant": v} for v in wanted]

    for setting in settings:
        accs, nmis, aris = [], [], []
        for seed in seeds:
            run_cfg = RunConfig.from_dict({**cfg.to_dict(),
                                           **{k: v for k, v in setting.items() if k != "label"},
                                           "seed": seed})
            result = run_training(run_cfg, cube, labels)
            accs.append(result.report.acc)
            nmis.append(result.report.nmi)
            aris.append(result.report.ari)
        rows.append({
            "setting": setting["label"],
            "acc_mean": float(np.mean(accs)), "acc_std": float(np.std(accs)),
            "nmi_mean": float(np.mean(nmis)), "nmi_std": float(np.std(nmis)),
            "ari_mean": float(np.mean(aris)), "ari_std": float(np.std(aris)),
            "seeds": seeds,
        })
    return rows


def ablation_table_csv(rows: list[dict]) -> str:
    header = "setting,acc_mean,acc_std,nmi_mean,nmi_std,ari_mean,ari_std"
    lines = [header]
    for r in rows:
        lines.append(f"{r['setting']},{r['acc_mean']:.4f},{r['acc_std']:.4f},"
                     f"{r['nmi_mean']:.4f},{r['nmi_std']:.4f},"
                     f"{r['ari_mean']:.4f},{r['ari_std']:.4f}")
    return "\n".join(lines) + "\n"
