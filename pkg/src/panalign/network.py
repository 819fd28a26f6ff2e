"""Two-branch alignment/identification network at desk scale.

The base branch classifies the original image through four conv blocks
(conv3x3 -> ReLU -> maxpool2) and a classifier FC. A small grid network
reads the deepest base feature map and regresses six affine parameters;
those resample the block-1 feature map, which a two-block alignment
branch classifies again. Training is two-stage: the base branch alone
first, then the grid network and alignment branch with the base frozen.
"""

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import InvalidArgumentError, InvalidShapeError, PanalignError
from .spatial import affine_sample

INIT_THETA_BIAS = np.array([0.8, 0.0, 0.0, 0.0, 0.8, 0.0])


class NumericDivergenceError(PanalignError):
    """Training produced a non-finite loss."""


@dataclass
class PanConfig:
    num_classes: int
    input_h: int = 64
    input_w: int = 32
    base_channels: tuple = (16, 32, 64, 128)
    align_channels: tuple = (64, 128)
    grid_channels: int = 64
    alpha: float = 0.5
    lr_main: float = 1e-3
    lr_decay_epoch: int = 30
    total_epochs: int = 40
    lr_theta_layer: float = 1e-5
    momentum: float = 0.9
    grad_clip: float | None = None  # global L2 norm cap, None = off
    batch_size: int = 16
    horizontal_flip: bool = True
    random_crop: bool = True
    crop_pad: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidArgumentError(f"need >= 2 classes, got {self.num_classes}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidArgumentError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lr_main <= 0 or self.lr_theta_layer <= 0:
            raise InvalidArgumentError("learning rates must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise InvalidArgumentError(f"grad_clip must be positive, got {self.grad_clip}")

    def to_dict(self):
        d = self.__dict__.copy()
        d["base_channels"] = list(self.base_channels)
        d["align_channels"] = list(self.align_channels)
        return d


def _conv_block(x, w, b):
    return ad.max_pool2d(ad.relu(ad.conv2d(x, w, b, stride=1, padding=1)))


class PanModel:
    def __init__(self, config, params=None):
        self.config = config
        cfg = config
        if params is not None:
            self.params = params
        else:
            rng = np.random.default_rng(cfg.seed)
            p = {}

            def conv(name, cin, cout):
                p[f"{name}.w"] = Tensor(
                    ad.init_uniform(rng, (cout, cin, 3, 3), cin * 9), requires_grad=True
                )
                p[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)

            def fc(name, din, dout, zero=False):
                w = np.zeros((din, dout)) if zero else ad.init_uniform(rng, (din, dout), din)
                p[f"{name}.w"] = Tensor(w, requires_grad=True)
                p[f"{name}.b"] = Tensor(np.zeros(dout), requires_grad=True)

            cin = 3
            for i, c in enumerate(cfg.base_channels):
                conv(f"base{i}", cin, c)
                cin = c
            fc("base_fc", cfg.base_channels[-1], cfg.num_classes)

            conv("grid0", cfg.base_channels[-1], cfg.grid_channels)
            # zero weights + fixed bias: the initial transform is the
            # input-independent 0.8-scale centre view
            fc("grid_fc", cfg.grid_channels, 6, zero=True)
            p["grid_fc.b"].data[:] = INIT_THETA_BIAS

            cin = cfg.base_channels[0]
            for i, c in enumerate(cfg.align_channels):
                conv(f"align{i}", cin, c)
                cin = c
            fc("align_fc", cfg.align_channels[-1], cfg.num_classes)
            self.params = p

    # parameter partitions -------------------------------------------------
    def base_params(self):
        return {k: v for k, v in self.params.items() if k.startswith("base")}

    def theta_layer_params(self):
        return {k: v for k, v in self.params.items() if k.startswith("grid_fc")}

    def stage2_params(self):
        return {
            k: v
            for k, v in self.params.items()
            if k.startswith(("grid", "align")) and not k.startswith("grid_fc")
        }

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def save(self, path):
        save_checkpoint(path, {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path, config):
        state = load_checkpoint(path)
        fresh = cls(config)
        if set(state) != set(fresh.params):
            missing = set(fresh.params) - set(state)
            extra = set(state) - set(fresh.params)
            raise InvalidArgumentError(
                f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}"
            )
        for k, v in state.items():
            if v.shape != fresh.params[k].data.shape:
                raise InvalidShapeError(
                    f"checkpoint tensor {k}: {v.shape} vs {fresh.params[k].data.shape}"
                )
            fresh.params[k].data[...] = v
        return fresh

    # forward passes -------------------------------------------------------
    def _check_batch(self, batch):
        cfg = self.config
        if batch.ndim != 4 or batch.shape[1:] != (3, cfg.input_h, cfg.input_w):
            raise InvalidShapeError(
                f"batch {batch.shape} vs expected (N, 3, {cfg.input_h}, {cfg.input_w})"
            )

    def forward_base(self, batch):
        """Base branch only: returns (logits, embedding, block1 map)."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        self._check_batch(x.data)
        p = self.params
        feat = x
        block1 = None
        for i in range(len(self.config.base_channels)):
            feat = _conv_block(feat, p[f"base{i}.w"], p[f"base{i}.b"])
            if i == 0:
                block1 = feat
        embed = ad.avg_pool_global(feat)
        logits = ad.fully_connected(embed, p["base_fc.w"], p["base_fc.b"])
        return logits, embed, block1, feat

    def forward(self, batch, freeze_base=False):
        """Full two-branch pass.

        With ``freeze_base`` the base activations are detached: gradients
        still reach the grid network and alignment branch through them,
        but nothing propagates back into base parameters (stage-2 rule).
        """
        base_logits, base_embed, block1, deepest = self.forward_base(batch)
        if freeze_base:
            block1 = Tensor(block1.data)
            deepest = Tensor(deepest.data)
        p = self.params
        g = _conv_block(deepest, p["grid0.w"], p["grid0.b"])
        g = ad.avg_pool_global(g)
        theta = ad.fully_connected(g, p["grid_fc.w"], p["grid_fc.b"])
        _, _, bh, bw = block1.data.shape
        aligned = affine_sample(block1, theta, bh, bw)
        feat = aligned
        for i in range(len(self.config.align_channels)):
            feat = _conv_block(feat, p[f"align{i}.w"], p[f"align{i}.b"])
        align_embed = ad.avg_pool_global(feat)
        align_logits = ad.fully_connected(align_embed, p["align_fc.w"], p["align_fc.b"])
        return ForwardOut(base_logits, align_logits, theta, base_embed, align_embed)


@dataclass
class ForwardOut:
    base_logits: Tensor
    align_logits: Tensor
    theta: Tensor
    base_embed: Tensor
    align_embed: Tensor


def loss(base_logits, align_logits, labels, stage=2):
    """Mean cross-entropies and the stage-dependent total."""
    l_base = ad.softmax_cross_entropy(base_logits, labels)
    l_align = ad.softmax_cross_entropy(align_logits, labels)
    l_total = ad.add(l_base, l_align) if stage == 2 else l_base
    return l_base, l_align, l_total


# ---------------------------------------------------------------------------
# training


def augment_batch(images, rng, config):
    """Horizontal flip (p=0.5) and reflect-pad-4 random crop, per image."""
    out = images
    if config.horizontal_flip:
        flips = rng.random(len(images)) < 0.5
        out = out.copy()
        out[flips] = out[flips][..., ::-1]
    if config.random_crop:
        pad = config.crop_pad
        h, w = out.shape[2], out.shape[3]
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
        oy = rng.integers(0, 2 * pad + 1, size=len(images))
        ox = rng.integers(0, 2 * pad + 1, size=len(images))
        out = np.stack(
            [padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w] for i in range(len(images))]
        )
    return np.ascontiguousarray(out)


def _epoch_lr(config, epoch):
    return config.lr_main * (0.1 if epoch > config.lr_decay_epoch else 1.0)


def _check_finite(value):
    if not np.isfinite(value):
        raise NumericDivergenceError(f"non-finite loss: {value}")


def _run_epochs(model, images, labels, config, stage, optimizer, log_file=None):
    trace = []
    n = len(images)
    for epoch in range(1, config.total_epochs + 1):
        t0 = time.perf_counter()
        lr = _epoch_lr(config, epoch)
        scale = lr / config.lr_main
        optimizer.set_lr_scale(scale)
        rng = np.random.default_rng((config.seed, stage, epoch))
        order = rng.permutation(n)
        base_sum = align_sum = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = augment_batch(images[idx], rng, config)
            yb = labels[idx]
            if stage == 1:
                logits, _, _, _ = model.forward_base(xb)
                l_base = l_total = ad.softmax_cross_entropy(logits, yb)
                l_align_val = 0.0
            else:
                out = model.forward(xb, freeze_base=True)
                l_base, l_align, l_total = loss(out.base_logits, out.align_logits, yb, 2)
                l_align_val = float(l_align.data)
            _check_finite(float(l_total.data))
            optimizer.zero_grad()
            ad.backward(l_total)
            if config.grad_clip is not None:
                ad.clip_grad_norm(
                    [p for g in optimizer.groups for p in g["params"]],
                    config.grad_clip,
                )
            optimizer.step()
            base_sum += float(l_base.data)
            align_sum += l_align_val
            batches += 1
        rec = {
            "epoch": epoch,
            "stage": stage,
            "lr": lr,
            "l_base": base_sum / batches,
            "l_align": align_sum / batches if stage == 2 else None,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        trace.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
            log_file.flush()
    return trace


def train_stage1(model, images, labels, config, log_file=None):
    """Fit the base branch alone; returns the per-epoch loss trace."""
    if len(images) == 0:
        raise InvalidArgumentError("empty training corpus")
    images = np.ascontiguousarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    opt = SGD(
        [{"params": list(model.base_params().values()), "lr": config.lr_main}],
        momentum=config.momentum,
        nesterov=True,
    )
    return _run_epochs(model, images, labels, config, 1, opt, log_file)


def train_stage2(model, images, labels, config, log_file=None):
    """Fit grid network + alignment branch with the base branch frozen."""
    if len(images) == 0:
        raise InvalidArgumentError("empty training corpus")
    images = np.ascontiguousarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    opt = SGD(
        [
            {"params": list(model.stage2_params().values()), "lr": config.lr_main},
            {"params": list(model.theta_layer_params().values()),
             "lr": config.lr_theta_layer},
        ],
        momentum=config.momentum,
        nesterov=True,
    )
    return _run_epochs(model, images, labels, config, 2, opt, log_file)


def embed(model, images):
    """Deterministic inference: (base_embed, align_embed, theta) arrays."""
    images = np.ascontiguousarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    out = model.forward(images, freeze_base=True)
    b, a, t = out.base_embed.data, out.align_embed.data, out.theta.data
    if single:
        return b[0], a[0], t[0]
    return b, a, t
