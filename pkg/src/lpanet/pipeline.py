"""Backbone -> SAM -> ESM -> ISM -> fusion -> head, the total loss, two-stage
training, evaluation, checkpoints and the four-variant ablation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .errors import ConfigError, FormatError, UsageError, ValidationError
from .esm import ExplicitAlignment, esm_forward, mean_offsets
from .ism import ism_forward
from .nn import Conv, Module
from .optim import SGD
from .sam import SemanticAlignment, sa_loss
from .semantics import SemanticEmbeddings, load_embeddings, make_test_embeddings, save_embeddings
from .synth import Sample
from .tenio import file_checksum, load_tensor, save_tensor
from .tensor import Tensor, as_tensor, concat, get_default_dtype, no_grad, relu

log = logging.getLogger(__name__)

DOWNSAMPLE = 4
# fixed input standardisation: [0, 1] pixels -> roughly zero mean, unit spread
INPUT_MEAN = 0.5
INPUT_STD = 0.25
VARIANTS = ("baseline", "+SAM", "+ISM", "+ESM")
_VARIANT_FLAGS = {
    "baseline": (False, False, False),
    "+SAM": (True, False, False),
    "+ISM": (True, True, False),
    "+ESM": (True, True, True),
}


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


@dataclass
class ModelConfig:
    n_categories: int = 5
    d_vis: int = 32
    d_shared: int = 256
    d_text: int = 768
    gate: str = "max"
    text_scale: float = 8.0
    use_sam: bool = True
    use_ism: bool = True
    use_esm: bool = True
    seed: int = 0

    @classmethod
    def for_variant(cls, variant: str, **kwargs) -> "ModelConfig":
        if variant not in _VARIANT_FLAGS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        sam, ism, esm = _VARIANT_FLAGS[variant]
        return cls(use_sam=sam, use_ism=ism, use_esm=esm, **kwargs)

    @property
    def variant(self) -> str:
        flags = (self.use_sam, self.use_ism, self.use_esm)
        for name, value in _VARIANT_FLAGS.items():
            if value == flags:
                return name
        return "custom"


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr_stage1: float = 0.035
    lr_stage2: float = 0.02
    momentum: float = 0.843
    weight_decay: float = 0.00036
    w_det: float = 1.0
    w_sa: float = 1.0
    w_sc: float = 1.0
    seed: int = 0

    def lr(self, stage: int) -> float:
        return self.lr_stage1 if stage == 1 else self.lr_stage2


class ToyBackbone(Module):
    """Two 3x3 stride-2 convs with relu: ``[C,H,W] -> [d_vis, H/4, W/4]``.

    Each conv gets one extra row/column of zeros so the strided extent is
    integral: top/left for the first, bottom/right for the second. Feature cell i
    then sits over image pixel 4i + 2, within 2 px of where align-corners
    upsampling puts it.
    """

    def __init__(self, c_in: int, d_vis: int, seed: int, name: str, hidden: int = 16):
        self.conv1 = Conv(c_in, hidden, 3, seed, f"{name}.conv1", stride=2)
        self.conv2 = Conv(hidden, d_vis, 3, seed, f"{name}.conv2", stride=2)

    def __call__(self, x) -> Tensor:
        x = (as_tensor(x) - INPUT_MEAN) * (1.0 / INPUT_STD)
        x = relu(self.conv1(F.pad2d(x, (1, 0, 1, 0))))
        return relu(self.conv2(F.pad2d(x, (0, 1, 0, 1))))


class LPANet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        s = cfg.seed
        self.backbone_rgb = ToyBackbone(3, cfg.d_vis, s, "backbone_rgb")
        self.backbone_ir = ToyBackbone(1, cfg.d_vis, s, "backbone_ir")
        if cfg.use_sam:
            self.sam = SemanticAlignment(cfg.d_vis, cfg.d_text, cfg.d_shared, s)
        if cfg.use_esm:
            if not cfg.use_sam:
                raise ConfigError("ESM needs SAM similarity scores")
            self.esm = ExplicitAlignment(cfg.d_shared, cfg.gate)
        width = cfg.d_shared if cfg.use_sam else cfg.d_vis
        self.fusion = Conv(2 * width, cfg.d_shared, 1, s, "fusion")
        self.head = Conv(cfg.d_shared, cfg.n_categories + 1, 1, s, "head")

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]


def label_map(masks: np.ndarray) -> np.ndarray:
    """0 = background, c + 1 = category c (masks never overlap)."""
    return (masks * np.arange(1, masks.shape[0] + 1)[:, None, None]).sum(axis=0).astype(np.int64)


def forward(model: LPANet, sample: Sample, semantic: Tensor, stage: int = 2,
            weights: TrainConfig | None = None, want_offsets: bool = False):
    """One sample through the stack.

    Returns ``(losses, outputs)``. ``losses`` has l_det, l_sa, l_sc (None when the
    module is absent) and total. In stage 1 the ESM is bypassed.
    """
    cfg = model.cfg
    w = weights or TrainConfig()
    H, W = sample.ir.shape[1:]
    if H % DOWNSAMPLE or W % DOWNSAMPLE:
        raise ConfigError(f"image size {H}x{W} not divisible by {DOWNSAMPLE}")
    if sample.masks_ir.shape[0] != cfg.n_categories:
        raise ValidationError(
            f"sample has {sample.masks_ir.shape[0]} categories, model expects {cfg.n_categories}")
    dtype = get_default_dtype()
    f_rgb = model.backbone_rgb(Tensor(sample.rgb.astype(dtype)))
    f_ir = model.backbone_ir(Tensor(sample.ir.astype(dtype)))
    out: dict = {}
    l_sa = l_sc = None
    if cfg.use_sam:
        rgb, ir, maps_rgb, maps_ir = model.sam(f_rgb, f_ir, semantic * cfg.text_scale, (H, W))
        l_sa = sa_loss(maps_rgb, maps_ir, sample.masks_rgb, sample.masks_ir)
        out["maps_rgb"], out["maps_ir"] = maps_rgb, maps_ir
    else:
        rgb, ir = f_rgb, f_ir
    aligned = rgb
    if cfg.use_esm:
        bypass = stage == 1
        aligned, offsets = esm_forward(model.esm, rgb, ir, maps_rgb.scores, maps_ir.scores,
                                       bypass=bypass)
        if offsets is None and want_offsets:
            with no_grad():
                _, offsets = esm_forward(model.esm, rgb, ir, maps_rgb.scores, maps_ir.scores)
        out["offsets"] = offsets
    if cfg.use_ism:
        aligned, l_sc, vectors = ism_forward(ir, aligned)
        out["consistency"] = vectors
    fused = relu(model.fusion(concat([aligned, ir], axis=0)))
    logits = F.upsample_bilinear(model.head(fused), H, W)
    l_det = F.cross_entropy(logits, label_map(sample.masks_ir))
    total = l_det * w.w_det
    if l_sa is not None:
        total = total + l_sa * w.w_sa
    if l_sc is not None:
        total = total + l_sc * w.w_sc
    out["logits"] = logits
    return {"l_det": l_det, "l_sa": l_sa, "l_sc": l_sc, "total": total}, out


# -- training state and checkpoints ----------------------------------------
@dataclass
class TrainingState:
    model: LPANet
    embeddings: SemanticEmbeddings
    stage: int = 1
    epoch: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    momentum: dict = field(default_factory=dict)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.model.named_parameters()

    def trainable(self, stage: int) -> dict[str, Tensor]:
        params = self.params
        if stage == 1:
            return {k: v for k, v in params.items() if not k.startswith("esm.")}
        return params


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig | None = None,
               embeddings: SemanticEmbeddings | None = None) -> TrainingState:
    if embeddings is None:
        embeddings = make_test_embeddings(model_cfg.n_categories, model_cfg.d_text, model_cfg.seed)
    if len(embeddings) != model_cfg.n_categories or embeddings.dim != model_cfg.d_text:
        raise ValidationError(
            f"embeddings are {len(embeddings)}x{embeddings.dim}, model expects "
            f"{model_cfg.n_categories}x{model_cfg.d_text}")
    return TrainingState(LPANet(model_cfg), embeddings, train=train_cfg or TrainConfig())


def _kv_lines(values: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def _parse_kv(text: str, source: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{source}:{lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes")
    return type(like)(value)


def save_checkpoint(state: TrainingState, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "momentum").mkdir(exist_ok=True)
    rows = []
    for name, p in sorted(state.params.items()):
        digest = save_tensor(directory / f"{name}.ten", p.data)
        rows.append(f"{name}\t{'x'.join(map(str, p.shape))}\t{digest}\n")
    for name, buf in sorted(state.momentum.items()):
        digest = save_tensor(directory / "momentum" / f"{name}.ten", buf)
        rows.append(f"momentum/{name}\t{'x'.join(map(str, buf.shape))}\t{digest}\n")
    (directory / "manifest.txt").write_text("".join(rows))
    save_embeddings(state.embeddings, directory / "embeddings.csv")
    info = {"stage": state.stage, "epoch": state.epoch}
    info.update({f"model.{k}": v for k, v in dataclasses.asdict(state.model.cfg).items()})
    info.update({f"train.{k}": repr(v) if isinstance(v, float) else v
                 for k, v in dataclasses.asdict(state.train).items()})
    (directory / "state.txt").write_text(_kv_lines(info))


def load_checkpoint(directory, verify: bool = True) -> TrainingState:
    directory = Path(directory)
    if not (directory / "state.txt").exists():
        raise FormatError(f"{directory} is not a checkpoint (no state.txt)")
    info = _parse_kv((directory / "state.txt").read_text(), str(directory / "state.txt"))
    model_cfg, train_cfg = ModelConfig(), TrainConfig()
    for key, value in info.items():
        group, _, name = key.partition(".")
        target = {"model": model_cfg, "train": train_cfg}.get(group)
        if target is not None and hasattr(target, name):
            setattr(target, name, _coerce(value, getattr(target, name)))
    embeddings = load_embeddings(directory / "embeddings.csv")
    state = init_state(model_cfg, train_cfg, embeddings)
    state.stage, state.epoch = int(info["stage"]), int(info["epoch"])
    params = state.params
    for line in (directory / "manifest.txt").read_text().splitlines():
        name, shape, digest = line.split("\t")
        path = directory / f"{name}.ten"
        if verify and file_checksum(path) != digest:
            raise ValidationError(f"checksum mismatch for {path}")
        arr = load_tensor(path, dtype=np.float32)
        if name.startswith("momentum/"):
            state.momentum[name.split("/", 1)[1]] = arr
        elif name in params:
            if arr.shape != params[name].shape:
                raise ValidationError(f"{name}: checkpoint shape {arr.shape} != {params[name].shape}")
            params[name].data = arr
        else:
            raise ValidationError(f"checkpoint tensor {name} has no matching parameter")
    return state


# -- training ----------------------------------------------------------------
def batch_order(n: int, seed: int, stage: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(stage), int(epoch)]).permutation(n)


def _value(t):
    return None if t is None else float(t.item())


def weighted_total(parts: dict, weights: TrainConfig) -> float:
    """Reported total from the reported components, so the log adds up exactly
    instead of carrying the float32 rounding of the graph sum."""
    total = 0.0
    for key, w in (("l_det", weights.w_det), ("l_sa", weights.w_sa), ("l_sc", weights.w_sc)):
        if parts.get(key) is not None:
            total += w * parts[key]
    return total


def train_stage(stage: int, samples: list[Sample], state: TrainingState,
                epochs: int | None = None, log_path=None, on_step=None) -> TrainingState:
    """Run ``epochs`` epochs of SGD on ``samples``; mutates and returns ``state``.

    Stage 1 bypasses and freezes the ESM. Loss records go to ``log_path`` as
    JSON lines and to ``on_step`` if given.
    """
    if stage not in (1, 2):
        raise UsageError(f"stage must be 1 or 2, got {stage}")
    cfg = state.train
    epochs = cfg.epochs if epochs is None else epochs
    if stage != state.stage:
        state.momentum = {}  # a new stage starts a fresh optimizer
        state.epoch = 0
    state.stage = stage
    opt = SGD(state.trainable(stage), cfg.lr(stage), cfg.momentum, cfg.weight_decay)
    opt.buffers = state.momentum
    semantic = state.embeddings.matrix
    sink = open(log_path, "a") if log_path else None
    step = 0
    try:
        for _ in range(epochs):
            order = batch_order(len(samples), cfg.seed, stage, state.epoch)
            for start in range(0, len(order), cfg.batch_size):
                batch = [samples[i] for i in order[start:start + cfg.batch_size]]
                parts = {"l_det": 0.0, "l_sa": None, "l_sc": None}
                total = None
                for sample in batch:
                    losses, _ = forward(state.model, sample, semantic, stage, cfg)
                    total = losses["total"] if total is None else total + losses["total"]
                    for key in parts:
                        v = _value(losses[key])
                        if v is not None:
                            parts[key] = (parts[key] or 0.0) + v / len(batch)
                loss = total * (1.0 / len(batch))
                if not math.isfinite(loss.item()):
                    raise NonFiniteLoss(step, loss.item())
                parts["total"] = weighted_total(parts, cfg)
                opt.zero_grad()
                loss.backward()
                opt.step()
                record = {"epoch": state.epoch, "step": step, **parts}
                if sink:
                    sink.write(json.dumps(record) + "\n")
                if on_step:
                    on_step(record)
                step += 1
            state.epoch += 1
    finally:
        if sink:
            sink.close()
    state.momentum = opt.buffers
    return state


# -- evaluation --------------------------------------------------------------
@dataclass
class Metrics:
    per_category_iou: list[float]
    mean_iou: float
    offset_mae: float | None = None
    mean_offset_dy: float | None = None
    mean_offset_dx: float | None = None
    l_det: float | None = None
    l_sa: float | None = None
    l_sc: float | None = None
    total: float | None = None
    samples: int = 0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def object_pixels(mask: np.ndarray, factor: int = DOWNSAMPLE) -> np.ndarray:
    """Feature-resolution membership: at least half of the factor x factor block covered."""
    H, W = mask.shape
    blocks = mask.reshape(H // factor, factor, W // factor, factor).mean(axis=(1, 3))
    return blocks >= 0.5


def iou_counts(pred_labels: np.ndarray, masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = masks.shape[0]
    truth = masks > 0.5
    pred = pred_labels[None] == np.arange(1, n + 1)[:, None, None]
    inter = (pred & truth).sum(axis=(1, 2))
    union = (pred | truth).sum(axis=(1, 2))
    return inter, union


def ious_from_counts(inter, union) -> list[float]:
    # a category absent from both prediction and truth counts as a perfect match
    return [float(i / u) if u else 1.0 for i, u in zip(inter, union)]


def evaluate(state: TrainingState, samples: list[Sample]) -> Metrics:
    """Deterministic, no parameter mutation. Offsets are measured whenever the model
    has an ESM (stage-1 checkpoints report their frozen estimator)."""
    cfg = state.model.cfg
    n = cfg.n_categories
    inter = np.zeros(n, dtype=np.int64)
    union = np.zeros(n, dtype=np.int64)
    sums: dict[str, float] = {}
    err_sum, dy_sum, dx_sum, pix = 0.0, 0.0, 0.0, 0
    with no_grad():
        for sample in samples:
            if sample.masks_ir.shape[0] != n:
                raise ValidationError(
                    f"data has {sample.masks_ir.shape[0]} categories, checkpoint has {n}")
            losses, out = forward(state.model, sample, state.embeddings.matrix, state.stage,
                                  state.train, want_offsets=True)
            for key, value in losses.items():
                if value is not None and key != "total":
                    sums[key] = sums.get(key, 0.0) + value.item()
            i, u = iou_counts(np.argmax(out["logits"].data, axis=0), sample.masks_ir)
            inter += i
            union += u
            if out.get("offsets") is not None:
                mean = mean_offsets(out["offsets"])
                for obj, m in zip(sample.objects, sample.object_masks_ir()):
                    sel = object_pixels(m)
                    ty, tx = obj.shift[0] / DOWNSAMPLE, obj.shift[1] / DOWNSAMPLE
                    dy, dx = mean[0][sel].astype(np.float64), mean[1][sel].astype(np.float64)
                    err_sum += (np.abs(dy - ty).sum() + np.abs(dx - tx).sum()) / 2
                    dy_sum += dy.sum()
                    dx_sum += dx.sum()
                    pix += int(sel.sum())
    count = max(len(samples), 1)
    ious = ious_from_counts(inter, union)
    has_off = cfg.use_esm and pix > 0
    return Metrics(
        per_category_iou=ious,
        mean_iou=float(np.mean(ious)) if ious else 0.0,
        offset_mae=err_sum / pix if has_off else None,
        mean_offset_dy=dy_sum / pix if has_off else None,
        mean_offset_dx=dx_sum / pix if has_off else None,
        l_det=sums["l_det"] / count if "l_det" in sums else None,
        l_sa=sums["l_sa"] / count if "l_sa" in sums else None,
        l_sc=sums["l_sc"] / count if "l_sc" in sums else None,
        total=weighted_total({k: v / count for k, v in sums.items()}, state.train)
        if sums else None,
        samples=len(samples),
    )


def response_iou(state: TrainingState, samples: list[Sample], modality: str = "ir",
                 threshold: float = 0.5) -> list[float]:
    """IoU of thresholded similarity response maps against that modality's masks."""
    if not state.model.cfg.use_sam:
        raise UsageError("model has no semantic alignment module")
    n = state.model.cfg.n_categories
    inter = np.zeros(n, dtype=np.int64)
    union = np.zeros(n, dtype=np.int64)
    with no_grad():
        for sample in samples:
            _, out = forward(state.model, sample, state.embeddings.matrix, state.stage, state.train)
            pred = out[f"maps_{modality}"].response.data > threshold
            truth = getattr(sample, f"masks_{modality}") > 0.5
            inter += (pred & truth).sum(axis=(1, 2))
            union += (pred | truth).sum(axis=(1, 2))
    return ious_from_counts(inter, union)


# -- two-stage runs and ablation ---------------------------------------------
def train_two_stage(model_cfg: ModelConfig, train_cfg: TrainConfig, samples: list[Sample],
                    embeddings: SemanticEmbeddings | None = None, epochs1: int | None = None,
                    epochs2: int | None = None, out_dir=None) -> TrainingState:
    state = init_state(model_cfg, train_cfg, embeddings)
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss_log.jsonl"
    train_stage(1, samples, state, epochs1, log_path)
    if out_dir is not None:
        save_checkpoint(state, out_dir / "stage1")
    train_stage(2, samples, state, epochs2, log_path)
    if out_dir is not None:
        save_checkpoint(state, out_dir / "stage2")
    return state


def ablate(train_samples: list[Sample], eval_samples: list[Sample], train_cfg: TrainConfig,
           model_kwargs: dict | None = None, embeddings: SemanticEmbeddings | None = None,
           out_dir=None, variants=VARIANTS) -> list[tuple[str, Metrics]]:
    """Train each variant under identical seeds and budget; evaluate on held-out data."""
    results = []
    for variant in variants:
        model_cfg = ModelConfig.for_variant(variant, **(model_kwargs or {}))
        sub = None if out_dir is None else Path(out_dir) / variant.replace("+", "plus_")
        log.info("ablation variant %s", variant)
        state = train_two_stage(model_cfg, train_cfg, train_samples, embeddings, out_dir=sub)
        results.append((variant, evaluate(state, eval_samples)))
    return results


def format_summary(results: list[tuple[str, Metrics]]) -> str:
    def fmt(v):
        return "null" if v is None else f"{v:.6f}"

    lines = ["variant\tmean_iou\toffset_mae\tl_det\tl_sa\tl_sc"]
    for name, m in results:
        lines.append("\t".join([name, fmt(m.mean_iou), fmt(m.offset_mae), fmt(m.l_det),
                                fmt(m.l_sa), fmt(m.l_sc)]))
    return "\n".join(lines) + "\n"
