"""SGD with momentum, the step learning-rate schedule, single training
stages, and the staged transfer pipeline (plain pretraining, zero-injected
attention upgrade, fine-tuning).

Everything is deterministic from (seed, data, preset): epoch shuffles come
from (seed, epoch) and each sample's augmentation generator from
(seed, sample_index, epoch), so the batch stream replays exactly no matter
how the work is scheduled.
"""

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tc
from .data import (AugmentConfig, Manifest, augment, crop_square,
                   load_sample_image, resample_balance)
from .errors import ConfigError, ShapeError, TrainingError, ValidationError
from .model import Network, NetworkSpec, build_network, load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class Schedule:
    lr0: float
    step_epochs: int
    factor: float = 0.1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not isinstance(self.step_epochs, int) or self.step_epochs < 1:
            raise ConfigError(f"step_epochs must be a positive integer, "
                              f"got {self.step_epochs!r}")
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"factor must lie in (0,1), got {self.factor}")


def lr_at(schedule: Schedule, epoch: int) -> float:
    """lr0 * factor^floor(epoch / step_epochs); the drop lands ON the boundary."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return schedule.lr0 * schedule.factor ** (epoch // schedule.step_epochs)


@dataclass(frozen=True)
class StagePreset:
    """One training stage's hyperparameters; epochs is a desk-scale default
    meant to be overridden for real runs."""
    name: str
    batch_size: int
    lr0: float
    weight_decay: float
    step_epochs: int
    epochs: int = 30
    momentum: float = 0.9
    augment: AugmentConfig = None
    resample: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        Schedule(self.lr0, self.step_epochs)  # reuse its validation

    def schedule(self) -> Schedule:
        return Schedule(self.lr0, self.step_epochs)


PRESETS = {
    # macro-expression pre-training: large batches, the three photometric
    # augmentations, no decay
    "pretrain": StagePreset("pretrain", batch_size=50, lr0=0.01, weight_decay=0.0,
                            step_epochs=20,
                            augment=AugmentConfig(color_shift_max=20,
                                                  rotation_max_deg=10.0,
                                                  smooth_window_max=6)),
    # holdout-database fine-tuning
    "hde": StagePreset("hde", batch_size=10, lr0=1e-4, weight_decay=3e-2,
                       step_epochs=10, resample=True,
                       augment=AugmentConfig(color_shift_max=20,
                                             rotation_max_deg=8.0)),
    # composite-database fine-tuning: corner crops of 240px masters
    "cde": StagePreset("cde", batch_size=8, lr0=1e-3, weight_decay=5e-6,
                       step_epochs=10, resample=True,
                       augment=AugmentConfig(crop=(240, 224))),
    # single-database leave-one-subject-out fine-tuning
    "loso": StagePreset("loso", batch_size=10, lr0=1e-3, weight_decay=5e-4,
                        step_epochs=10, resample=True,
                        augment=AugmentConfig(color_shift_max=20,
                                              rotation_max_deg=8.0)),
}


class OptimState:
    """One zero-initialized velocity buffer per parameter."""

    def __init__(self, params: dict):
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def check_against(self, params: dict):
        if set(self.velocity) != set(params):
            raise ConfigError("optimizer state does not match the parameter set")
        for name, p in params.items():
            if self.velocity[name].shape != p.data.shape:
                raise ConfigError(f"velocity shape {self.velocity[name].shape} does "
                                  f"not match parameter {name} {p.data.shape}")


def sgd_step(params: dict, grads: dict, state: OptimState, lr: float,
             momentum: float, weight_decay: float):
    """Classical heavy-ball update with coupled L2 decay:
    g' = g + wd*p; v <- momentum*v + g'; p <- p - lr*v."""
    state.check_against(params)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match "
                             f"parameter {name} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        if weight_decay:
            g = g + weight_decay * p.data
        v = state.velocity[name]
        v *= momentum
        v += g
        p.data -= lr * v


# ---------------------------------------------------------------------------
# data plumbing shared by training and evaluation

def prepare_input(image: np.ndarray, input_shape) -> np.ndarray:
    """uint8 [H,W,3] -> float [C,H,W] in [-0.5, 0.5]; oversized images are
    center-cropped down to the network size (the evaluation-time counterpart
    of the training-time corner crop)."""
    c, h, w = input_shape
    if image.ndim != 3 or image.shape[2] != c:
        raise ShapeError(f"expected [H,W,{c}] pixels, got {image.shape}")
    ih, iw = image.shape[:2]
    if ih < h or iw < w:
        raise ShapeError(f"image {ih}x{iw} is smaller than the network "
                         f"input {h}x{w}")
    if ih > h or iw > w:
        if h != w:
            raise ShapeError("center-crop fallback supports square inputs only")
        image = crop_square(image, h, "center")
    return image.astype(np.float64).transpose(2, 0, 1) / 255.0 - 0.5


def _batch_array(manifest: Manifest, indices, input_shape,
                 augment_cfg=None, rng_for=None) -> np.ndarray:
    rows = []
    for i in indices:
        img = load_sample_image(manifest.samples[i])
        if augment_cfg is not None:
            img = augment(img, augment_cfg, rng_for(i))
        rows.append(prepare_input(img, input_shape))
    return np.stack(rows)


def predict_classes(model: Network, manifest: Manifest, batch_size: int = 64) -> np.ndarray:
    """Argmax class indices in manifest order; no augmentation, no tape."""
    n = len(manifest)
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        x = _batch_array(manifest, idx, model.spec.input_shape)
        logits = model.forward(tc.Tensor(x))
        out[start:start + len(logits.data)] = np.argmax(logits.data, axis=1)
    return out


def evaluate_accuracy(model: Network, manifest: Manifest) -> float:
    if len(manifest) == 0:
        raise ConfigError("cannot evaluate accuracy on an empty manifest")
    predicted = predict_classes(model, manifest)
    return float(np.mean(predicted == manifest.label_indices()))


# ---------------------------------------------------------------------------
# training stages

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_accuracy: float  # measured entering the epoch; nan without a val set


@dataclass
class TrainLog:
    """Per-epoch records. val_accuracy is measured before the epoch's
    updates, so a stage that starts from another stage's final weights
    shows that model's accuracy at epoch 0."""
    records: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = ["epoch\tlr\ttrain_loss\tval_accuracy"]
        for r in self.records:
            lines.append(f"{r.epoch}\t{float(r.lr)!r}\t{float(r.train_loss)!r}"
                         f"\t{float(r.val_accuracy)!r}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def run_stage(model: Network, train_manifest: Manifest, val_manifest,
              preset: StagePreset, seed: int) -> tuple:
    """Train `model` in place for preset.epochs epochs; returns (model, log).

    Resampling (when the preset asks for it) happens once up front. Every
    epoch reshuffles from (seed, epoch); each sample's augmentation stream
    is seeded by (seed, sample_index, epoch), where sample_index is the
    position in the post-resampling list, so duplicated samples still see
    independent augmentations.
    """
    if len(train_manifest) == 0:
        raise ConfigError("training set is empty")
    train = resample_balance(train_manifest) if preset.resample else train_manifest
    n = len(train)
    if preset.batch_size > n:
        raise ConfigError(f"batch size {preset.batch_size} exceeds the "
                          f"{n}-sample training set (after resampling)")
    params = model.parameters()
    state = OptimState(params)
    schedule = preset.schedule()
    labels = train.label_indices()
    if labels.max() >= model.spec.num_classes:
        raise ConfigError(f"manifest has {labels.max() + 1}+ classes, the "
                          f"network predicts {model.spec.num_classes}")
    log = TrainLog()
    seed = int(seed)

    for epoch in range(preset.epochs):
        lr = lr_at(schedule, epoch)
        val_acc = (evaluate_accuracy(model, val_manifest)
                   if val_manifest is not None else float("nan"))
        order = np.random.default_rng(
            np.random.SeedSequence((seed, epoch))).permutation(n)

        def sample_rng(i, _epoch=epoch):
            return np.random.default_rng(
                np.random.SeedSequence((seed, int(i), _epoch)))

        loss_sum = 0.0
        for start in range(0, n, preset.batch_size):
            idx = order[start:start + preset.batch_size]
            x = _batch_array(train, idx, model.spec.input_shape,
                             augment_cfg=preset.augment, rng_for=sample_rng)
            model.zero_grads()
            with tc.Tape() as tape:
                loss = tc.softmax_cross_entropy(model.forward(tc.Tensor(x)),
                                                labels[idx])
            tape.backward(loss, params=params.values())
            grads = {name: p.grad for name, p in params.items()}
            sgd_step(params, grads, state, lr, preset.momentum,
                     preset.weight_decay)
            loss_sum += loss.item() * len(idx)
        model.zero_grads()
        log.records.append(EpochRecord(epoch=epoch, lr=lr,
                                       train_loss=loss_sum / n,
                                       val_accuracy=val_acc))
    return model, log


# ---------------------------------------------------------------------------
# staged transfer

@dataclass(frozen=True)
class PipelineStage:
    """One stage of the transfer pipeline.

    mode 'init' builds a fresh network (first stage only; `attention` picks
    the variant); 'exact' continues from the previous stage's checkpoint;
    'upgrade' loads a plain checkpoint and injects zero attention weights.
    A stage without an explicit seed uses pipeline_seed + stage_index.
    """
    preset: StagePreset
    train: Manifest
    val: Manifest = None
    mode: str = "exact"
    attention: bool = False
    seed: int = None


def transfer_pipeline(spec: NetworkSpec, stages, out_dir, seed: int,
                      init_checkpoint=None) -> tuple:
    """Run the stages in order, checkpointing each; returns (model, logs).

    Stage i writes out_dir/stage{i}.ckpt and out_dir/stage{i}.log. The
    first stage starts from a fresh init, from init_checkpoint, or (mode
    'upgrade') from init_checkpoint with attention injected; later stages
    chain off the previous stage's checkpoint.
    """
    stages = list(stages)
    if not stages:
        raise ConfigError("transfer pipeline needs at least one stage")
    for i, st in enumerate(stages):
        if st.mode not in ("init", "exact", "upgrade"):
            raise ConfigError(f"stage {i}: unknown mode {st.mode!r}")
        if st.mode == "init" and i > 0:
            raise ConfigError(f"stage {i}: only the first stage may use mode 'init'")
    if sum(1 for st in stages if st.mode == "upgrade") > 1:
        raise ConfigError("the attention upgrade must happen at most once")

    os.makedirs(out_dir, exist_ok=True)
    model = None
    logs = []
    prev_path = init_checkpoint
    for i, st in enumerate(stages):
        stage_seed = int(seed) + i if st.seed is None else int(st.seed)
        if st.mode == "init":
            model = build_network(spec, stage_seed, attention=st.attention)
        else:
            if prev_path is None:
                raise ConfigError(f"stage {i}: no checkpoint to continue from; "
                                  f"use mode 'init' or pass init_checkpoint")
            try:
                model = load_checkpoint(prev_path, spec, mode=st.mode)
            except ValidationError as e:
                raise type(e)(f"stage {i} ({st.preset.name}): {e}") from e
        model, log = run_stage(model, st.train, st.val, st.preset, stage_seed)
        prev_path = os.path.join(out_dir, f"stage{i}.ckpt")
        save_checkpoint(model, prev_path)
        log.save(os.path.join(out_dir, f"stage{i}.log"))
        logs.append(log)
    return model, logs


def preset_override(preset: StagePreset, **overrides) -> StagePreset:
    """A copy of `preset` with selected fields replaced (epochs, lr0, ...)."""
    return replace(preset, **overrides)
