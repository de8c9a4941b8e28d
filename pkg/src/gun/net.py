"""Toy multi-resolution segmentation network with a guided upsampling head.

Two (optionally three) encoder branches consume the input subsampled by
their factor and share one weight stack: the less-subsampled branch stops
after the stride-2 stage (fine features), the most-subsampled branch also
runs the dilated deep stages (coarse features). A fusion block merges the
streams, a 1x1 classifier produces low-resolution logits, and the head
upsamples them to the input resolution either plainly or steered by a
guidance offset table.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import gum
from .autodiff import OptimState, gradient_map, sgd_momentum_step, step_lr
from .data import Corpus, random_scale, tensor_from_bytes, tensor_to_bytes
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .metrics import ConfusionMatrix, mean_iou
from .tensor import Tensor, no_grad, softmax_cross_entropy

FUSIONS = ("base-sum", "base-concat", "postproc-sum", "postproc-concat")
HEADS = ("bilinear-baseline", "gum-nearest", "gum-bilinear")


@dataclass
class ModelConfig:
    """Declarative description of the toy network."""

    num_classes: int
    branch_factors: Tuple[int, ...] = (2, 4)
    shared_weights: bool = True
    stem_channels: int = 16
    fine_channels: int = 16
    coarse_channels: int = 64
    fusion: str = "postproc-sum"
    postproc_channels: int = 0  # 0 picks coarse_channels // 2
    upsample_head: str = "bilinear-baseline"
    guidance: Optional[gum.GuidanceConfig] = None

    def __post_init__(self):
        self.branch_factors = tuple(int(f) for f in self.branch_factors)
        if len(self.branch_factors) not in (2, 3):
            raise ConfigError("branch_factors needs 2 or 3 entries")
        if any(b <= a for a, b in zip(self.branch_factors, self.branch_factors[1:])):
            raise ConfigError(f"branch factors must strictly increase: {self.branch_factors}")
        if any(f < 1 or f & (f - 1) for f in self.branch_factors):
            raise ConfigError(f"branch factors must be powers of 2: {self.branch_factors}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}, pick one of {FUSIONS}")
        if self.upsample_head not in HEADS:
            raise ConfigError(f"unknown head {self.upsample_head!r}, pick one of {HEADS}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.upsample_head.startswith("gum") and self.guidance is None:
            raise ConfigError(f"head {self.upsample_head!r} requires a guidance config")
        if self.upsample_head == "bilinear-baseline" and self.guidance is not None:
            raise ConfigError("the baseline head forbids a guidance config")

    @property
    def classifier_in_channels(self) -> int:
        if self.fusion.startswith("postproc"):
            return self.postproc_channels or self.coarse_channels // 2
        return self.coarse_channels * (2 if self.fusion.endswith("concat") else 1)


def guidance_for(cfg: ModelConfig, variant: str,
                 hidden_channels: int = 16) -> gum.GuidanceConfig:
    """A guidance config whose channel widths match this model."""
    return gum.GuidanceConfig(variant=variant,
                              deep_channels=cfg.classifier_in_channels,
                              early_channels=cfg.stem_channels,
                              hidden_channels=hidden_channels,
                              up_stages=2)


def with_head(cfg: ModelConfig, head: str, variant: str = "fusion",
              hidden_channels: int = 16) -> ModelConfig:
    """The same model with a different upsampling head."""
    if head == "bilinear-baseline":
        return replace(cfg, upsample_head=head, guidance=None)
    return replace(cfg, upsample_head=head,
                   guidance=guidance_for(cfg, variant, hidden_channels))


# ---------------------------------------------------------------------------
# parameters


def _branch_prefixes(cfg: ModelConfig) -> List[str]:
    if cfg.shared_weights:
        return ["enc" for _ in cfg.branch_factors]
    return [f"enc.b{i}" for i in range(len(cfg.branch_factors))]


def init_model_params(cfg: ModelConfig, seed=0):
    """Freshly initialized (params, state) dicts for a model config.

    seed may be an int or a numpy SeedSequence.
    """
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    rng = np.random.Generator(np.random.Philox(seed))
    params: Dict[str, Tensor] = {}
    state: Dict[str, np.ndarray] = {}

    def encoder_stack(prefix: str, deep: bool):
        # convs feeding a norm layer carry no bias (it would be a dead parameter)
        gum.init_conv(params, rng, f"{prefix}.stem.conv", cfg.stem_channels, 3, 3,
                      bias=False)
        gum.init_bn(params, state, f"{prefix}.stem.bn", cfg.stem_channels)
        gum.init_conv(params, rng, f"{prefix}.down.conv", cfg.fine_channels,
                      cfg.stem_channels, 3, bias=False)
        gum.init_bn(params, state, f"{prefix}.down.bn", cfg.fine_channels)
        if deep:
            gum.init_conv(params, rng, f"{prefix}.deep1.conv", cfg.coarse_channels,
                          cfg.fine_channels, 3, bias=False)
            gum.init_bn(params, state, f"{prefix}.deep1.bn", cfg.coarse_channels)
            gum.init_conv(params, rng, f"{prefix}.deep2.conv", cfg.coarse_channels,
                          cfg.coarse_channels, 3, bias=False)
            gum.init_bn(params, state, f"{prefix}.deep2.bn", cfg.coarse_channels)

    prefixes = _branch_prefixes(cfg)
    if cfg.shared_weights:
        encoder_stack("enc", deep=True)
    else:
        last = len(prefixes) - 1
        for i, prefix in enumerate(prefixes):
            encoder_stack(prefix, deep=(i == last))
    # per-branch batch-norm statistics even when weights are shared
    for i, _ in enumerate(cfg.branch_factors):
        for stage, ch in (("stem", cfg.stem_channels), ("down", cfg.fine_channels),
                          ("deep1", cfg.coarse_channels), ("deep2", cfg.coarse_channels)):
            if stage.startswith("deep") and i != len(cfg.branch_factors) - 1:
                continue
            gum.init_bn_state(state, f"encstate.b{i}.{stage}.bn", ch)

    gum.init_conv(params, rng, "fusion.expand", cfg.coarse_channels,
                  cfg.fine_channels, 1)
    if cfg.fusion.startswith("postproc"):
        merged = cfg.coarse_channels * (2 if cfg.fusion.endswith("concat") else 1)
        out_ch = cfg.postproc_channels or cfg.coarse_channels // 2
        gum.init_conv(params, rng, "fusion.postproc.conv", out_ch, merged, 3,
                      bias=False)
        gum.init_bn(params, state, "fusion.postproc.bn", out_ch)
    gum.init_conv(params, rng, "classifier", cfg.num_classes,
                  cfg.classifier_in_channels, 1)
    if cfg.guidance is not None:
        gum.init_guidance_params(cfg.guidance, rng, params, state)
    return params, state


def param_count(params: Dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))


# ---------------------------------------------------------------------------
# forward passes


def _check_divisible(h: int, w: int, cfg: ModelConfig):
    need = max(cfg.branch_factors) * 2
    if h % need or w % need:
        raise ShapeError(
            f"input extents {h}x{w} must be divisible by {need} "
            f"(largest branch factor x internal stride)")


def encoder_forward(image: Tensor, cfg: ModelConfig, params: Dict[str, Tensor],
                    state: Dict[str, np.ndarray], training: bool = True
                    ) -> Dict[str, Tensor]:
    """Run every branch on its subsampled input.

    Returns coarse (deep features, most-subsampled branch), fine (stride-2
    features of the next branch), early (pre-downsampling stem activation
    of the least-subsampled branch, feeding the high-res guidance input),
    and finest for three-branch configs.
    """
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"encoder expects [N,3,H,W], got {image.shape}")
    h, w = image.shape[2], image.shape[3]
    _check_divisible(h, w, cfg)
    prefixes = _branch_prefixes(cfg)
    last = len(cfg.branch_factors) - 1
    feats: Dict[str, Tensor] = {}
    shallow: List[Tensor] = []
    for i, (factor, prefix) in enumerate(zip(cfg.branch_factors, prefixes)):
        x = image if factor == 1 else gum.resize(image, h // factor, w // factor,
                                                 mode="bilinear")
        sname = f"encstate.b{i}"
        a1 = gum.conv_bn_relu(x, params, state, f"{prefix}.stem", training,
                              padding=1, state_name=f"{sname}.stem")
        a2 = gum.conv_bn_relu(a1, params, state, f"{prefix}.down", training,
                              stride=2, padding=1, state_name=f"{sname}.down")
        if i == 0:
            feats["early"] = a1
        if i == last:
            a3 = gum.conv_bn_relu(a2, params, state, f"{prefix}.deep1", training,
                                  padding=1, state_name=f"{sname}.deep1")
            a4 = gum.conv_bn_relu(a3, params, state, f"{prefix}.deep2", training,
                                  dilation=2, padding=2, state_name=f"{sname}.deep2")
            feats["coarse"] = a4
        else:
            shallow.append(a2)
    feats["fine"] = shallow[-1]
    if len(shallow) > 1:
        feats["finest"] = shallow[0]
    return feats


def fusion_forward(coarse: Tensor, fine: Tensor, cfg: ModelConfig,
                   params: Dict[str, Tensor], state: Dict[str, np.ndarray],
                   training: bool = True) -> Tensor:
    """Merge the coarse and fine streams at the fine resolution."""
    if (coarse.shape[2] * 2, coarse.shape[3] * 2) != (fine.shape[2], fine.shape[3]):
        raise ShapeError(
            f"coarse extents {coarse.shape[2:]} must be half of fine {fine.shape[2:]}")
    up = gum.upsample(coarse, 2, mode="bilinear")
    expanded = gum.conv_op(fine, params, "fusion.expand")
    merged = gum.merge(up, expanded, "concat" if cfg.fusion.endswith("concat") else "sum")
    if cfg.fusion.startswith("postproc"):
        merged = gum.conv_bn_relu(merged, params, state, "fusion.postproc",
                                  training, padding=1)
    return merged


def gun_forward(image: Tensor, cfg: ModelConfig, params: Dict[str, Tensor],
                state: Dict[str, np.ndarray], training: bool = True) -> Tensor:
    """Full-resolution class logits [N, C, H, W]."""
    feats = encoder_forward(image, cfg, params, state, training)
    fused = fusion_forward(feats["coarse"], feats["fine"], cfg, params, state, training)
    logits_lr = gum.conv_op(fused, params, "classifier")
    h, w = image.shape[2], image.shape[3]
    fh, fw = fused.shape[2], fused.shape[3]
    if cfg.upsample_head == "bilinear-baseline":
        return gum.resize(logits_lr, h, w, mode="bilinear")
    grid = gum.make_regular_grid(fh, fw, h, w)
    offsets = gum.guidance_offsets({"deep": fused, "early": feats["early"]},
                                   cfg.guidance, params, state, target_hw=(h, w),
                                   training=training)
    mode = "nearest" if cfg.upsample_head == "gum-nearest" else "bilinear"
    return gum.guided_sample(logits_lr, grid, offsets, mode=mode)


def predict(images: np.ndarray, cfg: ModelConfig, params, state,
            batch_size: int = 8) -> np.ndarray:
    """Argmax segmentation maps for a stack of images (eval mode)."""
    out = np.empty((images.shape[0],) + images.shape[2:], dtype=np.uint8)
    with no_grad():
        for lo in range(0, images.shape[0], batch_size):
            batch = Tensor(images[lo:lo + batch_size])
            logits = gun_forward(batch, cfg, params, state, training=False)
            out[lo:lo + batch_size] = logits.data.argmax(axis=1).astype(np.uint8)
    return out


def evaluate(corpus: Corpus, cfg: ModelConfig, params, state,
             batch_size: int = 8):
    """(per-class IoU, mIoU, confusion) of the model on a corpus."""
    preds = predict(corpus.images, cfg, params, state, batch_size)
    conf = ConfusionMatrix(cfg.num_classes)
    for p, g in zip(preds, corpus.gts):
        conf.add(p, g)
    per_class, miou = mean_iou(conf)
    return per_class, miou, conf


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainRecipe:
    """Optimization hyperparameters for one run."""

    epochs: int = 50
    batch_size: int = 8
    base_lr: float = 0.001
    momentum: float = 0.9
    seed: int = 0
    augment: str = "none"  # or "random-scale"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")
        if self.augment not in ("none", "random-scale"):
            raise ConfigError(f"unknown augment {self.augment!r}")


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_miou: float


@dataclass
class TrainResult:
    params: Dict[str, Tensor]
    state: Dict[str, np.ndarray]
    history: List[EpochStats] = field(default_factory=list)


def train(cfg: ModelConfig, recipe: TrainRecipe, train_corpus: Corpus,
          val_corpus: Corpus) -> TrainResult:
    """Train with SGD+momentum under the step learning-rate policy.

    Deterministic for a fixed seed: parameter init, shuffling and
    augmentation each draw from their own spawned stream. Aborts with
    epoch/step diagnostics if the loss goes non-finite.
    """
    if len(train_corpus) == 0:
        raise ConfigError("training corpus is empty")
    if recipe.batch_size > len(train_corpus):
        raise ConfigError(
            f"batch_size {recipe.batch_size} exceeds corpus size {len(train_corpus)}")
    init_ss, shuffle_ss, augment_ss = np.random.SeedSequence(recipe.seed).spawn(3)
    rng_shuffle = np.random.Generator(np.random.Philox(shuffle_ss))
    rng_augment = np.random.Generator(np.random.Philox(augment_ss))
    params, state = init_model_params(cfg, seed=init_ss)
    opt = OptimState.for_params(params, momentum=recipe.momentum,
                                base_lr=recipe.base_lr)
    history: List[EpochStats] = []
    for epoch in range(recipe.epochs):
        lr = step_lr(epoch, recipe.base_lr)
        order = rng_shuffle.permutation(len(train_corpus))
        losses = []
        for lo in range(0, len(order), recipe.batch_size):
            idx = order[lo:lo + recipe.batch_size]
            images = train_corpus.images[idx]
            gts = train_corpus.gts[idx]
            if recipe.augment == "random-scale":
                images = images.copy()
                gts = gts.copy()
                for k in range(images.shape[0]):
                    images[k], gts[k] = random_scale(images[k], gts[k], rng_augment)
            for p in params.values():
                p.zero_grad()
            logits = gun_forward(Tensor(images), cfg, params, state, training=True)
            loss = softmax_cross_entropy(logits, gts.astype(np.int64))
            lval = loss.item()
            if not np.isfinite(lval):
                raise TrainingDivergedError(
                    f"non-finite loss {lval} at epoch {epoch} step {lo // recipe.batch_size}")
            grads = gradient_map(loss, params)
            sgd_momentum_step(params, grads, opt, lr)
            losses.append(lval)
        opt.epoch = epoch + 1
        _, val_miou, _ = evaluate(val_corpus, cfg, params, state,
                                  batch_size=recipe.batch_size)
        history.append(EpochStats(epoch=epoch, lr=lr,
                                  train_loss=float(np.mean(losses)),
                                  val_miou=val_miou))
    return TrainResult(params=params, state=state, history=history)


def pipeline_fd_check(seed: int = 0, epsilon: float = 1e-5,
                      head: str = "gum-bilinear"):
    """Finite-difference check of every parameter through the whole model.

    Runs a miniature config (3x16x16 input, 3 classes, widths <= 8). The
    guidance final layer gets a tiny random draw so the offset path carries
    gradient while sample points stay clear of interpolation kinks.
    """
    from .autodiff import finite_diff_check

    cfg = ModelConfig(num_classes=3, stem_channels=4, fine_channels=4,
                      coarse_channels=8, postproc_channels=4,
                      upsample_head="bilinear-baseline")
    cfg = with_head(cfg, head, hidden_channels=4)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    params, state = init_model_params(cfg, seed=seed)
    if cfg.guidance is not None:
        for suffix in (".weight", ".bias"):
            p = params["guidance.final" + suffix]
            p.data = rng.normal(0.0, 0.02, size=p.data.shape)
    images = rng.uniform(0.0, 1.0, size=(2, 3, 16, 16))
    targets = rng.integers(0, cfg.num_classes, size=(2, 16, 16))
    names = sorted(params)

    def f(*tensors):
        run_params = dict(zip(names, tensors))
        run_state = {k: v.copy() for k, v in state.items()}
        logits = gun_forward(Tensor(images), cfg, run_params, run_state,
                             training=True)
        return softmax_cross_entropy(logits, targets)

    return finite_diff_check(f, [params[n].data for n in names], epsilon=epsilon)


# ---------------------------------------------------------------------------
# persistence: params.bin is concatenated tensor containers, the manifest
# maps name -> shape -> byte offset


def save_params(prefix, params: Dict[str, Tensor],
                state: Dict[str, np.ndarray]) -> None:
    blobs = []
    entries = []
    offset = 0
    for kind, table in (("param", {k: v.data for k, v in params.items()}),
                        ("state", state)):
        for name in sorted(table):
            blob = tensor_to_bytes(np.asarray(table[name], dtype=np.float64))
            entries.append({"name": name, "kind": kind,
                            "shape": list(np.asarray(table[name]).shape),
                            "offset": offset, "length": len(blob)})
            blobs.append(blob)
            offset += len(blob)
    with open(f"{prefix}.bin", "wb") as fh:
        fh.write(b"".join(blobs))
    with open(f"{prefix}.manifest.json", "w") as fh:
        json.dump({"tensors": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(prefix):
    with open(f"{prefix}.manifest.json") as fh:
        manifest = json.load(fh)
    with open(f"{prefix}.bin", "rb") as fh:
        blob = fh.read()
    params: Dict[str, Tensor] = {}
    state: Dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        arr = tensor_from_bytes(blob[entry["offset"]:entry["offset"] + entry["length"]])
        if list(arr.shape) != entry["shape"]:
            raise ConfigError(f"manifest shape mismatch for {entry['name']}")
        if entry["kind"] == "param":
            params[entry["name"]] = Tensor(arr, requires_grad=True)
        else:
            state[entry["name"]] = arr
    return params, state


def check_params_match(cfg: ModelConfig, params: Dict[str, Tensor],
                       state: Dict[str, np.ndarray]) -> None:
    """Raise ConfigError listing every name whose shape disagrees with cfg."""
    want_p, want_s = init_model_params(cfg, seed=0)
    problems = []
    for want, got, label in ((want_p, params, "param"), (want_s, state, "state")):
        for name in sorted(set(want) | set(got)):
            if name not in got:
                problems.append(f"missing {label} {name}")
            elif name not in want:
                problems.append(f"unexpected {label} {name}")
            else:
                ws = want[name].data.shape if label == "param" else want[name].shape
                gs = got[name].data.shape if label == "param" else got[name].shape
                if tuple(ws) != tuple(gs):
                    problems.append(f"{label} {name}: shape {gs}, config wants {ws}")
    if problems:
        raise ConfigError("params/config mismatch: " + "; ".join(problems))
