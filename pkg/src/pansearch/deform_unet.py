"""Encoder-decoder segmentation network with deformable encoder convolutions.

Per encoder unit: two 3x3 convolutions (deformable when configured) and a
2x2 max-pool. Bottleneck: two 3x3 convolutions. Per decoder unit: a 2x2
stride-2 transposed convolution, concatenation with the matching encoder
features, and two 3x3 convolutions. Head: 1x1 convolution and a sigmoid.
Every convolution and transposed convolution is followed by a ReLU.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
from pathlib import Path

import numpy as np

from .nn import functional as F
from .nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn.layers import Conv2d, ConvTranspose2x2, DeformConv2d, collect_parameters
from .nn.params import make_optimizer

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 8
    deformable_encoder: bool = True
    input_side: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be positive")
        if self.input_side % (2**self.depth):
            raise ValueError(f"input_side {self.input_side} is not divisible by 2**{self.depth}")


@dataclasses.dataclass(frozen=True)
class SegTrainConfig:
    epochs: int = 50
    batch_size: int = 8
    optimizer: str = "momentum"
    lr: float = 1e-3
    momentum: float = 0.9
    lr_decay: float = 0.95
    patience: int = 5
    val_fraction: float = 0.2
    # step multiplier for the convs that predict deformable offsets
    offset_lr_scale: float = 0.1
    seed: int = 0


class SegModel:
    def __init__(self, cfg: UNetConfig, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        widths = [cfg.base_channels * 2**i for i in range(cfg.depth + 1)]
        enc_conv = DeformConv2d if cfg.deformable_encoder else Conv2d
        self.encoder = []
        in_ch = 1
        for i in range(cfg.depth):
            self.encoder.append((enc_conv(in_ch, widths[i], 3, rng, dtype), enc_conv(widths[i], widths[i], 3, rng, dtype)))
            in_ch = widths[i]
        self.bottleneck = (
            Conv2d(widths[-2], widths[-1], 3, rng, dtype),
            Conv2d(widths[-1], widths[-1], 3, rng, dtype),
        )
        self.decoder = []
        for i in reversed(range(cfg.depth)):
            self.decoder.append(
                (
                    ConvTranspose2x2(widths[i + 1], widths[i], rng, dtype),
                    Conv2d(2 * widths[i], widths[i], 3, rng, dtype),
                    Conv2d(widths[i], widths[i], 3, rng, dtype),
                )
            )
        self.head = Conv2d(widths[0], 1, 1, rng, dtype)
        self._caches = None

    # -- parameters -------------------------------------------------------

    def named_layers(self):
        layers = []
        for i, (a, b) in enumerate(self.encoder):
            layers += [(f"enc{i}.conv_a", a), (f"enc{i}.conv_b", b)]
        layers += [("mid.conv_a", self.bottleneck[0]), ("mid.conv_b", self.bottleneck[1])]
        for j, (up, a, b) in enumerate(self.decoder):
            i = self.cfg.depth - 1 - j
            layers += [(f"dec{i}.up", up), (f"dec{i}.conv_a", a), (f"dec{i}.conv_b", b)]
        layers.append(("head", self.head))
        return layers

    def parameters(self):
        return collect_parameters(self.named_layers())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if strict and (missing or extra):
            raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if name in state:
                if state[name].shape != p.shape:
                    raise CheckpointError(f"{name}: shape {state[name].shape} != {p.shape}")
                p.value[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def activation_pattern(self) -> bytes:
        """Digest of the piecewise-linear cell of the last forward pass.

        Covers ReLU masks, max-pool winners and the integer cells of every
        bilinear sample; used to skip kinks during gradient checking.
        """
        c = self._caches
        if c is None:
            raise RuntimeError("no forward pass to describe")
        parts = []
        for ra, rb, pc in c["enc"]:
            parts += [ra, rb, pc[1]]
        parts += list(c["mid"])
        for ru, ra, rb, _ in c["dec"]:
            parts += [ru, ra, rb]
        for a, b in self.encoder:
            for layer in (a, b):
                if isinstance(layer, DeformConv2d):
                    parts.append(np.frombuffer(F.deform_sample_cells(layer._cache), np.uint8))
        h = hashlib.sha256()
        for part in parts:
            h.update(np.ascontiguousarray(part).tobytes())
        return h.digest()

    # -- forward / backward -----------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        s = self.cfg.input_side
        if x.ndim != 4 or x.shape[1:] != (1, s, s):
            raise F.ShapeError(f"expected input (N, 1, {s}, {s}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        caches = {"enc": [], "dec": []}
        skips = []
        for a, b in self.encoder:
            h, ra = F.relu_forward(a.forward(x))
            h, rb = F.relu_forward(b.forward(h))
            skips.append(h)
            x, pc = F.maxpool2x2_forward(h)
            caches["enc"].append((ra, rb, pc))
        h, ra = F.relu_forward(self.bottleneck[0].forward(x))
        x, rb = F.relu_forward(self.bottleneck[1].forward(h))
        caches["mid"] = (ra, rb)
        for (up, a, b), skip in zip(self.decoder, reversed(skips)):
            u, ru = F.relu_forward(up.forward(x))
            h = np.concatenate([u, skip], axis=1)
            h, ra = F.relu_forward(a.forward(h))
            x, rb = F.relu_forward(b.forward(h))
            caches["dec"].append((ru, ra, rb, u.shape[1]))
        out, sc = F.sigmoid_forward(self.head.forward(x))
        caches["head"] = sc
        self._caches = caches
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        c = self._caches
        if c is None:
            raise RuntimeError("backward called before forward")
        d = self.head.backward(F.sigmoid_backward(dout.astype(self.dtype, copy=False), c["head"]))
        dskips = []
        for (up, a, b), (ru, ra, rb, n_up) in zip(reversed(self.decoder), reversed(c["dec"])):
            d = a.backward(F.relu_backward(b.backward(F.relu_backward(d, rb)), ra))
            dskips.append(d[:, n_up:])
            d = up.backward(F.relu_backward(d[:, :n_up], ru))
        ra, rb = c["mid"]
        d = self.bottleneck[0].backward(F.relu_backward(self.bottleneck[1].backward(F.relu_backward(d, rb)), ra))
        for (a, b), (ra, rb, pc), dskip in zip(reversed(self.encoder), reversed(c["enc"]), reversed(dskips)):
            d = F.maxpool2x2_backward(d, pc) + dskip
            d = a.backward(F.relu_backward(b.backward(F.relu_backward(d, rb)), ra))
        self._caches = None
        return d


def build(cfg: UNetConfig, dtype=np.float32) -> SegModel:
    return SegModel(cfg, dtype)


def seg_forward(model: SegModel, image: np.ndarray) -> np.ndarray:
    """Probability map for ``(N, 1, S, S)`` inputs already scaled to [0, 1]."""
    out = model.forward(image)
    model._caches = None
    return out


def predict(model: SegModel, crops: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Probability maps for uint8-range crops of shape ``(S, S)`` or ``(N, S, S)``."""
    crops = np.asarray(crops)
    single = crops.ndim == 2
    if single:
        crops = crops[None]
    x = (crops.astype(model.dtype) / 255.0)[:, None]
    out = np.concatenate([seg_forward(model, x[i : i + batch_size]) for i in range(0, len(x), batch_size)])
    out = out[:, 0]
    return out[0] if single else out


def _batch_dice_loss(prob: np.ndarray, target: np.ndarray):
    """Soft Dice over every pixel of the mini-batch, and its gradient.

    Pooling the batch keeps crops without foreground from pulling every
    prediction toward zero, which a per-crop average does.
    """
    loss, grad = F.dice_loss(prob, target)
    return float(loss), grad


def dice_score(model: SegModel, images: np.ndarray, masks: np.ndarray, batch_size: int = 32) -> float:
    """Soft Dice (positive, in [0, 1]) pooled over a crop set."""
    if len(images) == 0:
        return float("nan")
    probs = predict(model, images, batch_size)[:, None]
    return -_batch_dice_loss(probs, masks[:, None].astype(probs.dtype))[0]


def train_segmenter(
    images: np.ndarray,
    masks: np.ndarray,
    cfg: UNetConfig,
    train_cfg: SegTrainConfig = SegTrainConfig(),
    model: SegModel | None = None,
):
    """Minimise soft Dice on ``(N, S, S)`` uint8 crops and binary masks.

    Holds out ``val_fraction`` of the crops for early stopping and returns
    ``(model, log_rows)`` with the best-validation weights restored.
    """
    images = np.asarray(images)
    masks = np.asarray(masks)
    if len(images) == 0:
        raise ValueError("segmenter training needs at least one crop")
    if images.shape != masks.shape:
        raise ValueError(f"images {images.shape} and masks {masks.shape} differ")
    model = model or build(cfg)
    rng = np.random.default_rng(train_cfg.seed)
    order = rng.permutation(len(images))
    n_val = int(round(train_cfg.val_fraction * len(images)))
    if len(images) - n_val < 1:
        n_val = 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    kw = {"momentum": train_cfg.momentum} if train_cfg.optimizer.lower().startswith(("momentum", "sgd")) else {}
    named = model.parameters()
    scales = [train_cfg.offset_lr_scale if ".offset." in name else 1.0 for name in named]
    opt = make_optimizer(train_cfg.optimizer, list(named.values()), train_cfg.lr, decay=train_cfg.lr_decay, scales=scales, **kw)

    x_all = (images.astype(model.dtype) / 255.0)[:, None]
    y_all = masks.astype(model.dtype)[:, None]
    rows = []
    best, best_state, stale = -np.inf, None, 0
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(perm), train_cfg.batch_size):
            idx = perm[start : start + train_cfg.batch_size]
            model.zero_grad()
            prob = model.forward(x_all[idx])
            loss, grad = _batch_dice_loss(prob, y_all[idx])
            model.backward(grad)
            opt.step()
            losses.append(loss * len(idx))
        train_dice = -sum(losses) / len(perm)
        val_dice = dice_score(model, images[val_idx], masks[val_idx]) if n_val else train_dice
        rows.append({"epoch": epoch, "train_dice": train_dice, "val_dice": val_dice, "lr": opt.lr})
        log.info("seg epoch %d train_dice %.4f val_dice %.4f lr %.2e", epoch, train_dice, val_dice, opt.lr)
        opt.end_epoch()
        if val_dice > best:
            best, stale = val_dice, 0
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, rows


def config_meta(cfg: UNetConfig) -> dict[str, str]:
    return {f"unet.{f.name}": str(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


def save_model(path, model: SegModel, meta: dict[str, str] | None = None) -> str:
    header = {"kind": "segmenter", **config_meta(model.cfg), **(meta or {})}
    return save_checkpoint(path, model.state_dict(), header)


def load_model(path) -> tuple[SegModel, dict[str, str]]:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "segmenter":
        raise CheckpointError(f"{path} is not a segmenter checkpoint (kind={meta.get('kind')!r})")
    cfg = UNetConfig(
        depth=int(meta["unet.depth"]),
        base_channels=int(meta["unet.base_channels"]),
        deformable_encoder=meta["unet.deformable_encoder"] == "True",
        input_side=int(meta["unet.input_side"]),
        seed=int(meta["unet.seed"]),
    )
    model = build(cfg)
    model.load_state_dict(params)
    return model, meta


def write_log(path, rows: list[dict], fields=("epoch", "train_dice", "val_dice", "lr")) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if isinstance(r[k], float) else r[k]) for k in fields})
