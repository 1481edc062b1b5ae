"""SGD with the poly schedule, difference-map generation, and two-stage training.

Stage 1 trains a fresh model on a small dataset with cross-entropy only; its
only purpose is to produce per-image difference masks for the second dataset
(pixels where the binarized shallowest and deepest outputs disagree).  Stage 2
trains another fresh model, not a fine-tune, with the masked F-measure term
added.  Only the stage-2 checkpoint is used for inference.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import (
    DatasetManifest, LoadedDataset, load_dataset, load_image_rgb01, load_manifest,
    write_manifest, write_mask_pbm,
)
from .losses import LossWeights, total_loss
from .network import Model, NetworkConfig, build_network
from .tensor import Tensor, backward, bilinear_resize_array, no_grad

PRECISIONS = {"float32": np.float32, "float64": np.float64}
INPUT_SHIFT = 0.5  # images enter the network zero-centered


@dataclass
class TrainConfig:
    initial_lr: float = 1e-4
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_iter: int = 1000
    batch_size: int = 4
    seed: int = 0
    stage: int = 1
    size: int = 96
    precision: str = "float32"

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if min(self.initial_lr, self.power, self.momentum, self.weight_decay) < 0:
            raise ValueError("rates must be non-negative")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @staticmethod
    def from_kv(kv: dict, **overrides) -> "TrainConfig":
        fields = {
            "initial_lr": float, "power": float, "momentum": float,
            "weight_decay": float, "max_iter": int, "batch_size": int,
            "seed": int, "stage": int, "size": int, "precision": str,
        }
        args = {name: cast(kv[name]) for name, cast in fields.items() if name in kv}
        args.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig(**args)


def default_stage1_config(stage2: TrainConfig) -> TrainConfig:
    """Stage 1 runs a quarter of stage 2's budget; it only seeds the masks."""
    return replace(stage2, stage=1, max_iter=max(1, stage2.max_iter // 4))


def poly_lr(iteration: int, config: TrainConfig) -> float:
    if not 0 <= iteration <= config.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {config.max_iter}]")
    return config.initial_lr * (1.0 - iteration / config.max_iter) ** config.power


class SgdOptimizer:
    """Momentum SGD with weight decay; batch-norm gamma/beta are not decayed."""

    def __init__(self, model: Model, config: TrainConfig):
        self.model = model
        self.config = config
        self.velocity = {name: np.zeros_like(p.data) for name, p in model.named_params()}

    def step(self, lr: float) -> None:
        mom, wd = self.config.momentum, self.config.weight_decay
        for name, p in self.model.named_params():
            grad = p.grad
            if grad is None:
                grad = 0.0
            elif grad.shape != p.data.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            v = self.velocity[name]
            decay = 0.0 if name.endswith((".bn.gamma", ".bn.beta")) else wd * p.data
            v *= mom
            v += grad + decay
            p.data -= lr * v

    def state(self) -> dict:
        return {f"velocity.{name}": v for name, v in self.velocity.items()}


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    """Seed-determined epoch shuffling, yielding batches forever."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]
        if n < batch_size:
            yield rng.permutation(n)  # tiny dataset: one short batch per epoch


def train_model(model: Model, dataset: LoadedDataset, config: TrainConfig,
                weights: LossWeights, log_path=None) -> list[dict]:
    """SGD loop over the loaded dataset; returns the per-iteration term history."""
    dtype = model.dtype
    images = dataset.images.astype(dtype, copy=False)
    use_masks = weights.beta_w > 0
    if use_masks and dataset.masks is None:
        raise ValueError("stage-2 training requires difference masks in the dataset")
    rng = np.random.default_rng(config.seed)
    batches = _batch_indices(len(dataset.names), config.batch_size, rng)
    optimizer = SgdOptimizer(model, config)

    history: list[dict] = []
    log_file = writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        term_names = [f"side{i + 1}" for i in range(config_outputs(model))]
        if use_masks:
            term_names.append("iaf")
        writer.writerow(["iter", "lr"] + term_names + ["total"])
    try:
        for iteration in range(config.max_iter):
            lr = poly_lr(iteration, config)
            idx = next(batches)
            x = Tensor((images[idx] - INPUT_SHIFT).astype(dtype, copy=False))
            outputs = model.forward(x, training=True)
            masks = dataset.masks[idx] if use_masks else None
            loss, terms = total_loss(outputs, dataset.gts[idx], masks, weights)
            model.zero_grad()
            backward(loss)
            optimizer.step(lr)
            terms["iter"] = iteration
            terms["lr"] = lr
            history.append(terms)
            if writer is not None:
                row = [iteration, f"{lr:.10g}"]
                row += [f"{terms[name]:.10g}" for name in term_names]
                row.append(f"{terms['total']:.10g}")
                writer.writerow(row)
    finally:
        if log_file is not None:
            log_file.close()
    return history


def config_outputs(model: Model) -> int:
    return model.config.m


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------


def infer_probs(model: Model, image_chw01: np.ndarray, size: int,
                layers=(1,)) -> dict[int, np.ndarray]:
    """Saliency probabilities for the requested layers, upsampled to the
    image's own resolution (the same convention the losses and masks use)."""
    from .data import resize_chw  # local import keeps data free of pipeline

    h, w = image_chw01.shape[1], image_chw01.shape[2]
    x = (resize_chw(image_chw01, size) - INPUT_SHIFT).astype(model.dtype)
    with no_grad():
        outputs = model.forward(Tensor(x[None]), training=False)
    result = {}
    for layer in layers:
        prob = outputs.probs[layer - 1].data[0, 0]
        result[layer] = bilinear_resize_array(prob.astype(np.float64), h, w)
    return result


def difference_mask(prob_shallow: np.ndarray, prob_deep: np.ndarray,
                    threshold: float = 0.5) -> np.ndarray:
    """Pixels where the two binarized maps disagree."""
    if prob_shallow.shape != prob_deep.shape:
        raise ValueError("maps must share a resolution")
    return (prob_shallow >= threshold) != (prob_deep >= threshold)


def generate_difference_maps(model: Model, manifest: DatasetManifest, size: int,
                             out_dir, manifest_name: str = "manifest_masks.tsv") -> Path:
    """Per-image difference masks from the rough model; writes PBM masks plus a
    manifest that carries them.  Idempotent for a fixed model and dataset."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    deepest = model.config.m
    rows = []
    for entry in manifest.entries:
        image = load_image_rgb01(entry.image_path)
        probs = infer_probs(model, image, size, layers=(1, deepest))
        mask = difference_mask(probs[1], probs[deepest])
        mask_path = out_dir / f"mask_{entry.name}.pbm"
        write_mask_pbm(mask_path, mask)
        rows.append((_rel(entry.image_path, out_dir), _rel(entry.gt_path, out_dir),
                     mask_path.name))
    manifest_path = out_dir / manifest_name
    write_manifest(manifest_path, rows)
    return manifest_path


def _rel(target: Path, base: Path) -> str:
    import os

    return os.path.relpath(Path(target).resolve(), Path(base).resolve())


# ---------------------------------------------------------------------------
# the two-stage protocol
# ---------------------------------------------------------------------------


@dataclass
class TwoStageResult:
    stage1_checkpoint: Path
    stage2_checkpoint: Path
    masks_manifest: Path
    stage1_log: Path
    stage2_log: Path


def run_two_stage(stage1_manifest, stage2_manifest, net_config: NetworkConfig,
                  stage1_cfg: TrainConfig, stage2_cfg: TrainConfig, out_dir,
                  beta_w: float = 25.0) -> TwoStageResult:
    """Full protocol: rough stage-1 training, mask generation, fresh stage-2 model."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m_outputs = net_config.m

    manifest_a = _as_manifest(stage1_manifest)
    dataset_a = load_dataset(manifest_a, stage1_cfg.size, dtype=stage1_cfg.dtype)
    model_1 = build_network(net_config, stage1_cfg.seed, dtype=stage1_cfg.dtype)
    stage1_log = out_dir / "stage1_log.csv"
    train_model(model_1, dataset_a, stage1_cfg,
                LossWeights.for_outputs(m_outputs, beta_w=0.0), log_path=stage1_log)
    stage1_ckpt = out_dir / "stage1.ckpt"
    save_checkpoint(model_1, stage1_ckpt, stage=1, seed=stage1_cfg.seed)

    manifest_b = _as_manifest(stage2_manifest)
    masks_manifest = generate_difference_maps(model_1, manifest_b, stage1_cfg.size,
                                              out_dir / "masks")

    dataset_b = load_dataset(load_manifest(masks_manifest), stage2_cfg.size,
                             dtype=stage2_cfg.dtype)
    model_2 = build_network(net_config, stage2_cfg.seed, dtype=stage2_cfg.dtype)
    stage2_log = out_dir / "stage2_log.csv"
    train_model(model_2, dataset_b, stage2_cfg,
                LossWeights.for_outputs(m_outputs, beta_w=beta_w), log_path=stage2_log)
    stage2_ckpt = out_dir / "final.ckpt"
    save_checkpoint(model_2, stage2_ckpt, stage=2, seed=stage2_cfg.seed)

    return TwoStageResult(stage1_ckpt, stage2_ckpt, masks_manifest, stage1_log, stage2_log)


def _as_manifest(source) -> DatasetManifest:
    return source if isinstance(source, DatasetManifest) else load_manifest(source)
