"""The optimisation loop: forward render, weighted loss, reverse pass, Adam
updates, periodic basis refresh, evaluation, and the ablation harness.

The loop is deliberately deterministic: one RNG stream drives feature
initialisation and view sampling, its state rides along in checkpoints, and
all reductions happen in fixed order, so identical configurations reproduce
identical metrics bit for bit.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field, replace

import numpy as np

from . import autodiff as ad
from .anchors import AnchorField, refresh_basis, voxelize_points
from .errors import ConfigError, InputError, TrainingDivergedError
from .heads import (
    MLPParams,
    head_input_dim,
    init_attribute_head,
    init_texture_extractor,
    mlp_forward_t,
    predict_gaussians_batch,
)
from .losses import LossWeights, psnr, ssim, total_loss_t
from .renderer import Camera, project_batch_t, rasterize_t
from .runtime import deterministic_mode, worker_threads
from .sceneio import Checkpoint, Scene, save_checkpoint
from . import runtime

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SCALING_FLOOR = 1e-8


@dataclass
class TrainConfig:
    feature_dim: int = 16
    m: int = 2
    k: int = 10
    iterations: int = 3000
    lr_features: float = 1e-2
    lr_offsets: float = 1e-3
    lr_scalings: float = 1e-3
    lr_mlps: float = 2e-3
    lr_final_fraction: float = 0.1     # exponential decay target over the run
    basis_refresh_every: int = 1
    weights: LossWeights = dc_field(default_factory=LossWeights)
    seed: int = 0
    use_soa: bool = True
    use_sgl: bool = True
    sgl_variant: str = "per_pixel"
    basis_stop_gradient: bool = True
    hidden_width: int = 32
    texture_hidden: int = 32
    quat_w_offset: float = 1.0
    eval_every: int = 100
    views_per_iteration: int = 1       # 0 renders every train view each step
    feature_init_scale: float = 0.01

    def __post_init__(self):
        if not (self.feature_dim >= self.m >= 1):
            raise ConfigError(f"need feature_dim >= m >= 1, got D={self.feature_dim}, m={self.m}")
        if self.k < 1 or self.iterations < 1 or self.basis_refresh_every < 1:
            raise ConfigError("k, iterations and basis_refresh_every must be >= 1")
        for name in ("lr_features", "lr_offsets", "lr_scalings", "lr_mlps"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        if not self.basis_stop_gradient:
            raise ConfigError(
                "basis_stop_gradient=False is recorded but not implemented: "
                "differentiating through the eigendecomposition is ill-posed "
                "near repeated eigenvalues")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass
class MetricsRow:
    iteration: int
    l1: float
    ssim_term: float
    vol: float
    sgl: float
    total: float
    train_psnr: float
    test_psnr: float
    test_ssim: float
    seconds: float


METRICS_HEADER = "iteration,l1,ssim_term,vol,sgl,total,train_psnr,test_psnr,test_ssim,seconds"


def metrics_to_csv(rows: list[MetricsRow]) -> str:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(",".join([str(r.iteration)] + [repr(float(v)) for v in (
            r.l1, r.ssim_term, r.vol, r.sgl, r.total,
            r.train_psnr, r.test_psnr, r.test_ssim, r.seconds)]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_init(param: np.ndarray) -> dict:
    return {"m": np.zeros_like(param), "v": np.zeros_like(param), "step": 0}


def adam_step(param: np.ndarray, grad: np.ndarray, state: dict, rate: float) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``param`` and ``state`` in place."""
    if param.shape != grad.shape or param.shape != state["m"].shape:
        raise ConfigError(f"adam shapes disagree: param {param.shape}, grad {grad.shape}")
    state["step"] += 1
    t = state["step"]
    state["m"] = ADAM_BETA1 * state["m"] + (1.0 - ADAM_BETA1) * grad
    state["v"] = ADAM_BETA2 * state["v"] + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = state["m"] / (1.0 - ADAM_BETA1 ** t)
    v_hat = state["v"] / (1.0 - ADAM_BETA2 ** t)
    param -= rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return param


# ---------------------------------------------------------------------------
# model state
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    field: AnchorField
    extractors: list            # list[MLPParams]
    head: MLPParams
    rng: np.random.Generator
    basis: object | None = None
    iteration: int = 0
    adam: dict = dc_field(default_factory=dict)

    def named_parameters(self):
        """(name, array, lr-group) triples in a fixed order."""
        out = [("features", self.field.features, "features"),
               ("offsets", self.field.offsets, "offsets"),
               ("scalings", self.field.scalings, "scalings")]
        for i, layer in enumerate(self.head.layers):
            out.append((f"head.{i}.weight", layer.weight, "mlps"))
            out.append((f"head.{i}.bias", layer.bias, "mlps"))
        for e, ext in enumerate(self.extractors):
            for i, layer in enumerate(ext.layers):
                out.append((f"ext{e}.{i}.weight", layer.weight, "mlps"))
                out.append((f"ext{e}.{i}.bias", layer.bias, "mlps"))
        return out


def build_state(scene: Scene, config: TrainConfig) -> TrainState:
    """Voxelise the scene points and initialise all learnable quantities."""
    rng = np.random.default_rng(config.seed)
    field = voxelize_points(scene.points, scene.spec.voxel_size,
                            feature_dim=config.feature_dim,
                            offsets_per_anchor=config.k)
    field.features[:] = rng.uniform(-config.feature_init_scale,
                                    config.feature_init_scale, field.features.shape)
    m_eff = config.m if config.use_soa else 0
    head = init_attribute_head(head_input_dim(config.feature_dim, m_eff),
                               config.hidden_width, config.k, rng)
    extractors = []
    if config.use_soa:
        extractors = [init_texture_extractor(config.feature_dim, config.texture_hidden, rng)
                      for _ in range(config.m)]
    state = TrainState(field=field, extractors=extractors, head=head, rng=rng)
    state.adam = {name: adam_init(arr) for name, arr, _ in state.named_parameters()}
    return state


@dataclass
class _TapeLeaves:
    features: ad.Tensor
    scalings: ad.Tensor
    offsets: ad.Tensor
    head: list
    extractors: list

    def by_name(self):
        out = {"features": self.features, "offsets": self.offsets, "scalings": self.scalings}
        for i, (w, b, _) in enumerate(self.head):
            out[f"head.{i}.weight"] = w
            out[f"head.{i}.bias"] = b
        for e, layers in enumerate(self.extractors):
            for i, (w, b, _) in enumerate(layers):
                out[f"ext{e}.{i}.weight"] = w
                out[f"ext{e}.{i}.bias"] = b
        return out


def _lift(state: TrainState, trainable: bool) -> _TapeLeaves:
    def tensor(arr):
        return ad.Tensor(arr, requires_grad=trainable)

    def lift_mlp(params: MLPParams):
        return [(tensor(l.weight), tensor(l.bias), l.activation) for l in params.layers]

    return _TapeLeaves(features=tensor(state.field.features),
                       scalings=tensor(state.field.scalings),
                       offsets=tensor(state.field.offsets),
                       head=lift_mlp(state.head),
                       extractors=[lift_mlp(e) for e in state.extractors])


def forward_image(state: TrainState, leaves: _TapeLeaves, camera: Camera,
                  background: np.ndarray, config: TrainConfig):
    """Render one view from the current model on the tape.

    Returns (image tensor, per-Gaussian scale tensor).  The scales cover every
    predicted Gaussian (depth-culled ones included) so the volume penalty sees
    them all.
    """
    field = state.field
    n = len(field)
    k = config.k

    textures = []
    if config.use_soa:
        if state.basis is None:
            raise ConfigError("augmentation requested but no basis has been computed")
        principal = state.basis.principal
        for i in range(config.m):
            col = np.broadcast_to(principal[:, i], (n, principal.shape[0])).copy()
            x = ad.concat([ad.constant(col), leaves.features], axis=1)
            textures.append(mlp_forward_t(leaves.extractors[i], x))

    deltas = field.positions - camera.position
    distances = np.linalg.norm(deltas, axis=1)
    directions = deltas / distances[:, None]

    batch = predict_gaussians_batch(leaves.features, textures, field.positions,
                                    leaves.scalings, leaves.offsets, distances,
                                    directions, leaves.head, k,
                                    quat_w_offset=config.quat_w_offset)

    s = n * k
    positions = ad.reshape(batch.positions, (s, 3))
    quats = ad.reshape(batch.quats, (s, 4))
    scales = ad.reshape(batch.scales, (s, 3))
    opacities = ad.reshape(batch.opacities, (s,))
    colors = ad.reshape(batch.colors, (s, 3))

    proj = project_batch_t(positions, quats, scales, camera)
    if proj is None:
        image = ad.constant(np.tile(background, (camera.height, camera.width, 1)))
        return image, scales

    kept = proj["kept"]
    image = rasterize_t(proj["mean_x"], proj["mean_y"], proj["cov_a"], proj["cov_b"],
                        proj["cov_c"], ad.index_select(opacities, kept),
                        ad.index_select(colors, kept), proj["depths"], kept,
                        camera.width, camera.height, background)
    return image, scales


def training_loss(state: TrainState, scene: Scene, view_indices, config: TrainConfig,
                  leaves: _TapeLeaves | None = None, sgl_weights=None):
    """Mean weighted loss over the given views, on the tape.

    Returns (total tensor, parts dict of floats, leaves).  The discrepancy
    subgraph is only built when its weight is non-zero, keeping disabled runs
    bitwise identical to a build without it.
    """
    if leaves is None:
        leaves = _lift(state, trainable=True)
    weights = config.weights
    if not config.use_sgl:
        weights = replace(weights, selective=0.0)

    totals = []
    part_sums = {"l1": 0.0, "ssim_term": 0.0, "vol": 0.0, "selective": 0.0}
    for view in view_indices:
        image, scales = forward_image(state, leaves, scene.cameras[view],
                                      scene.background, config)
        truth = ad.constant(scene.images[view])
        total, parts = total_loss_t(image, truth, scales, weights,
                                    sgl_variant=config.sgl_variant,
                                    sgl_weights=sgl_weights)
        totals.append(total)
        for key in part_sums:
            part_sums[key] += float(parts[key].value)

    count = float(len(view_indices))
    loss = totals[0]
    for t in totals[1:]:
        loss = loss + t
    if len(totals) > 1:
        loss = loss * (1.0 / count)
    parts_mean = {key: value / count for key, value in part_sums.items()}
    return loss, parts_mean, leaves


def render_view(state: TrainState, camera: Camera, background: np.ndarray,
                config: TrainConfig) -> np.ndarray:
    """Constant-mode forward pass; identical arithmetic to the training path."""
    leaves = _lift(state, trainable=False)
    image, _ = forward_image(state, leaves, camera, background, config)
    return image.value


def _render_views(state: TrainState, scene: Scene, indices, config: TrainConfig):
    background = scene.background
    threads = worker_threads()
    if threads > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(
                lambda i: render_view(state, scene.cameras[i], background, config), indices))
    return [render_view(state, scene.cameras[i], background, config) for i in indices]


def _metrics(state: TrainState, scene: Scene, config: TrainConfig, parts: dict,
             total: float, iteration: int, seconds: float) -> MetricsRow:
    train_images = _render_views(state, scene, scene.train_indices, config)
    test_images = _render_views(state, scene, scene.test_indices, config)
    train_psnr = float(np.mean([psnr(img, scene.images[i])
                                for img, i in zip(train_images, scene.train_indices)]))
    test_psnr = float(np.mean([psnr(img, scene.images[i])
                               for img, i in zip(test_images, scene.test_indices)]))
    test_ssim = float(np.mean([ssim(img, scene.images[i])
                               for img, i in zip(test_images, scene.test_indices)]))
    weights = config.weights
    sgl_weight = weights.selective if config.use_sgl else 0.0
    return MetricsRow(iteration=iteration, l1=parts["l1"], ssim_term=parts["ssim_term"],
                      vol=parts["vol"], sgl=sgl_weight * parts["selective"], total=total,
                      train_psnr=train_psnr, test_psnr=test_psnr, test_ssim=test_ssim,
                      seconds=0.0 if deterministic_mode() else seconds)


def build_checkpoint(state: TrainState, scene: Scene, config: TrainConfig) -> Checkpoint:
    optimizer = {}
    for name, st in state.adam.items():
        optimizer[f"{name}.m"] = st["m"].copy()
        optimizer[f"{name}.v"] = st["v"].copy()
        optimizer[f"{name}.step"] = np.array(st["step"])
    cameras = []
    for i, cam in enumerate(scene.cameras):
        cameras.append({"width": cam.width, "height": cam.height, "fx": cam.fx,
                        "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                        "rotation": cam.rotation.ravel().tolist(),
                        "translation": cam.translation.tolist(),
                        "split": "train" if i in scene.train_indices else "test"})
    config_echo = {"train": config.to_dict(),
                   "scene": {"cameras": cameras,
                             "background": list(scene.background),
                             "voxel_size": scene.spec.voxel_size}}
    field_copy = AnchorField(positions=state.field.positions.copy(),
                             features=state.field.features.copy(),
                             scalings=state.field.scalings.copy(),
                             offsets=state.field.offsets.copy())
    return Checkpoint(field=field_copy,
                      extractors=[MLPParams(layers=[type(l)(l.weight.copy(), l.bias.copy(), l.activation)
                                                    for l in e.layers]) for e in state.extractors],
                      head=MLPParams(layers=[type(l)(l.weight.copy(), l.bias.copy(), l.activation)
                                             for l in state.head.layers]),
                      basis=state.basis, optimizer=optimizer,
                      iteration=state.iteration, config=config_echo,
                      rng_state=state.rng.bit_generator.state)


def state_from_checkpoint(ckpt: Checkpoint, config: TrainConfig) -> TrainState:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = ckpt.rng_state
    state = TrainState(field=ckpt.field, extractors=ckpt.extractors, head=ckpt.head,
                       rng=rng, basis=ckpt.basis, iteration=ckpt.iteration)
    state.adam = {}
    for name, arr, _ in state.named_parameters():
        state.adam[name] = {"m": ckpt.optimizer[f"{name}.m"].reshape(arr.shape),
                            "v": ckpt.optimizer[f"{name}.v"].reshape(arr.shape),
                            "step": int(ckpt.optimizer[f"{name}.step"])}
    return state


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list


def train(scene: Scene, config: TrainConfig, resume_from: Checkpoint | None = None) -> TrainResult:
    """Run the optimisation loop; deterministic given (scene, config, env)."""
    if not scene.cameras or not scene.images:
        raise InputError("scene has no views")
    if resume_from is not None:
        saved = resume_from.config.get("train", {})
        for key in ("feature_dim", "m", "k", "use_soa"):
            if key in saved and saved[key] != getattr(config, key):
                raise ConfigError(f"resume config mismatch on {key}: "
                                  f"checkpoint {saved[key]} vs requested {getattr(config, key)}")
        state = state_from_checkpoint(resume_from, config)
    else:
        state = build_state(scene, config)

    n_train = len(scene.train_indices)
    metrics: list[MetricsRow] = []
    start = time.perf_counter()
    lr_base = {"features": config.lr_features, "offsets": config.lr_offsets,
               "scalings": config.lr_scalings, "mlps": config.lr_mlps}

    for iteration in range(state.iteration + 1, config.iterations + 1):
        state.iteration = iteration
        if config.use_soa and (iteration - 1) % config.basis_refresh_every == 0:
            state.basis = refresh_basis(state.field, config.m, iteration=iteration)

        if config.views_per_iteration == 0:
            views = list(scene.train_indices)
        else:
            views = [scene.train_indices[int(v)] for v in
                     state.rng.integers(0, n_train, size=config.views_per_iteration)]

        loss, parts, leaves = training_loss(state, scene, views, config)
        total_value = float(loss.value)
        if not np.isfinite(total_value):
            raise TrainingDivergedError(iteration, build_checkpoint(state, scene, config))

        loss.backward()

        progress = (iteration - 1) / max(config.iterations - 1, 1)
        factor = config.lr_final_fraction ** progress
        grads = leaves.by_name()
        for name, arr, group in state.named_parameters():
            leaf = grads[name]
            grad = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
            adam_step(arr, grad, state.adam[name], lr_base[group] * factor)
        np.maximum(state.field.scalings, SCALING_FLOOR, out=state.field.scalings)

        bad = [name for name, arr, _ in state.named_parameters()
               if not np.all(np.isfinite(arr))]
        if bad:
            raise TrainingDivergedError(iteration, build_checkpoint(state, scene, config))

        if iteration % config.eval_every == 0 or iteration == config.iterations:
            seconds = time.perf_counter() - start
            metrics.append(_metrics(state, scene, config, parts, total_value,
                                    iteration, seconds))

    return TrainResult(checkpoint=build_checkpoint(state, scene, config), metrics=metrics)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalRow:
    view: str
    psnr: float
    ssim: float


def evaluate(ckpt: Checkpoint, views) -> list[EvalRow]:
    """Per-view and mean PSNR/SSIM for (camera, ground truth) pairs."""
    views = list(views)
    if not views:
        raise InputError("evaluate needs at least one view")
    config = TrainConfig.from_dict(ckpt.config["train"])
    background = np.array(ckpt.config["scene"]["background"])
    state = state_from_checkpoint(ckpt, config)
    if config.use_soa and state.basis is None:
        state.basis = refresh_basis(state.field, config.m, iteration=state.iteration)

    rows = []
    rendered = []
    threads = worker_threads()
    if threads > 1 and len(views) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rendered = list(pool.map(
                lambda v: render_view(state, v[0], background, config), views))
    else:
        rendered = [render_view(state, cam, background, config) for cam, _ in views]
    for i, ((_, truth), image) in enumerate(zip(views, rendered)):
        rows.append(EvalRow(view=str(i), psnr=psnr(image, truth), ssim=ssim(image, truth)))
    rows.append(EvalRow(view="mean",
                        psnr=float(np.mean([r.psnr for r in rows])),
                        ssim=float(np.mean([r.ssim for r in rows]))))
    return rows


# ---------------------------------------------------------------------------
# ablation and dimension-sweep harnesses
# ---------------------------------------------------------------------------

ABLATION_CONFIGS = (("base", False, False), ("soa", True, False), ("soa_sgl", True, True))


def _test_psnr(scene: Scene, result: TrainResult) -> float:
    views = [(scene.cameras[i], scene.images[i]) for i in scene.test_indices]
    return evaluate(result.checkpoint, views)[-1].psnr


def run_ablation(scene: Scene, config: TrainConfig, seeds) -> dict:
    """Train the three wiring variants per seed; everything else held equal."""
    rows = []
    for seed in seeds:
        for name, use_soa, use_sgl in ABLATION_CONFIGS:
            cfg = replace(config, seed=seed, use_soa=use_soa, use_sgl=use_sgl)
            result = train(scene, cfg)
            rows.append({"config": name, "seed": seed,
                         "test_psnr": _test_psnr(scene, result)})
    means = {name: float(np.mean([r["test_psnr"] for r in rows if r["config"] == name]))
             for name, _, _ in ABLATION_CONFIGS}
    return {"rows": rows, "means": means}


def dimension_sweep(scene: Scene, config: TrainConfig, dims, seeds) -> dict:
    """Mean test PSNR of the full model as the feature dimension varies."""
    rows = []
    for d in dims:
        for seed in seeds:
            cfg = replace(config, feature_dim=d, seed=seed, use_soa=True, use_sgl=True)
            result = train(scene, cfg)
            rows.append({"feature_dim": d, "seed": seed,
                         "test_psnr": _test_psnr(scene, result)})
    means = {d: float(np.mean([r["test_psnr"] for r in rows if r["feature_dim"] == d]))
             for d in dims}
    return {"rows": rows, "means": means}
