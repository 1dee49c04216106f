"""Miniature residual CNN with a local-feature-masking site after the stem.

Layout: conv3x3 stem -> BN -> ReLU -> [feature masking, train only] ->
maxpool 2x2 -> three stages of two basic residual blocks (the second and
third stages downsample) -> global average pool -> embedding -> linear
classifier. The masking layer sits on the pre-pool stem activation, the
analogous site to masking the first convolution's output at full resolution
in a large backbone.

Tensor plumbing is torch; every random draw still comes from an
:class:`~lfmnet.rng.RngStream`, so forward passes are pure functions of
(params, input, stream) and eval mode consumes no randomness at all.
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import FormatError, InputError, NumericError, StructuralError
from .masking import LfmConfig, MaskDecision, sample_decisions
from .rng import RngStream

_CKPT_MAGIC = b"LFMC"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class MiniResNetConfig:
    num_classes: int
    input_shape: tuple = (3, 64, 32)
    stem_channels: int = 16
    stage_widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    embedding_dim: int = 64
    lfm_enabled: bool = False
    lfm: LfmConfig = field(default_factory=LfmConfig)
    dropout_rate: float = 0.0
    label_smoothing: float = 0.0

    def validate(self) -> None:
        from .errors import ConfigError

        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.stem_channels < 1 or self.blocks_per_stage < 1 or not self.stage_widths:
            raise ConfigError("stem_channels, stage_widths, blocks_per_stage must be positive")
        if self.stage_widths[-1] != self.embedding_dim:
            raise ConfigError(
                f"embedding_dim {self.embedding_dim} must equal the last stage width "
                f"{self.stage_widths[-1]}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not 0.0 <= self.label_smoothing <= 0.3:
            raise ConfigError(
                f"label_smoothing must be in [0, 0.3], got {self.label_smoothing}"
            )
        self.lfm.validate()
        # the masking site is the stem output, so N may not exceed its width
        self.lfm.resolve_channels(self.stem_channels)


def _finite_or_raise(t: torch.Tensor, layer: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite activation after {layer}")


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class MiniResNet(nn.Module):
    def __init__(self, cfg: MiniResNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        in_ch = cfg.input_shape[0]
        self.stem_conv = nn.Conv2d(in_ch, cfg.stem_channels, 3, stride=1, padding=1, bias=False)
        self.stem_bn = nn.BatchNorm2d(cfg.stem_channels)
        self.pool = nn.MaxPool2d(2)
        stages = []
        prev = cfg.stem_channels
        for si, width in enumerate(cfg.stage_widths):
            blocks = []
            for bi in range(cfg.blocks_per_stage):
                stride = 2 if (si > 0 and bi == 0) else 1
                blocks.append(BasicBlock(prev, width, stride))
                prev = width
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(cfg.embedding_dim, cfg.num_classes)
        # instrumentation for black-box hygiene checks
        self.input_grad_calls = 0
        self._captured_stem = None

    def forward(
        self,
        images: torch.Tensor,
        rng: RngStream | None = None,
        frozen_decisions: list[MaskDecision] | None = None,
        capture_stem: bool = False,
    ):
        """Returns (logits, embedding, decisions).

        Training mode with masking enabled needs ``rng`` (or explicit
        ``frozen_decisions`` for replay); eval mode consumes no randomness
        and returns an empty decision list.
        """
        cfg = self.cfg
        if images.ndim != 4 or tuple(images.shape[1:]) != tuple(cfg.input_shape):
            raise StructuralError(
                f"expected input (B, {', '.join(map(str, cfg.input_shape))}), "
                f"got {tuple(images.shape)}"
            )
        x = torch.relu(self.stem_bn(self.stem_conv(images)))
        _finite_or_raise(x, "stem")
        decisions: list[MaskDecision] = []
        if self.training and (cfg.lfm_enabled or frozen_decisions is not None):
            if frozen_decisions is not None:
                decisions = frozen_decisions
            else:
                if rng is None:
                    raise StructuralError("training forward with masking requires an rng")
                b, c, h, w = x.shape
                decisions = sample_decisions(rng.child("lfm"), b, c, h, w, cfg.lfm)
            if capture_stem:
                x.retain_grad()
                self._captured_stem = x
            x = _apply_decisions_torch(x, decisions)
            _finite_or_raise(x, "lfm")
        elif capture_stem:
            x.retain_grad()
            self._captured_stem = x
        x = self.pool(x)
        for si, stage in enumerate(self.stages):
            x = stage(x)
            _finite_or_raise(x, f"stage{si}")
        embedding = x.mean(dim=(2, 3))
        _finite_or_raise(embedding, "embedding")
        pre_fc = embedding
        if self.training and cfg.dropout_rate > 0.0:
            if rng is None:
                raise StructuralError("training forward with dropout requires an rng")
            keep = (
                rng.child("dropout").uniforms(0.0, 1.0, tuple(pre_fc.shape))
                >= cfg.dropout_rate
            )
            mask = torch.from_numpy(keep.astype(np.float32)).to(pre_fc.dtype)
            pre_fc = pre_fc * mask / (1.0 - cfg.dropout_rate)
        logits = self.fc(pre_fc)
        _finite_or_raise(logits, "classifier")
        return logits, embedding, decisions


def _apply_decisions_torch(x: torch.Tensor, decisions: list[MaskDecision]) -> torch.Tensor:
    """Torch twin of masking.apply_decisions; masked cells get constant fill,
    so they contribute zero gradient to the layer input."""
    out = None
    for d in decisions:
        for channel, rect in d.rects:
            if rect is None:
                continue
            if out is None:
                out = x.clone()
            out[
                d.sample_id,
                channel,
                rect.y0 : rect.y0 + rect.h_px,
                rect.x0 : rect.x0 + rect.w_px,
            ] = rect.fill
    return x if out is None else out


def build_model(cfg: MiniResNetConfig, init_rng: RngStream) -> MiniResNet:
    """Construct the network with fan-in-scaled uniform weights from the stream."""
    model = MiniResNet(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            stream = init_rng.child(name)
            if p.ndim == 4:  # conv weight
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.from_numpy(
                    stream.uniforms(-bound, bound, tuple(p.shape)).astype(np.float32)
                ))
            elif p.ndim == 2:  # linear weight
                bound = 1.0 / math.sqrt(p.shape[1])
                p.copy_(torch.from_numpy(
                    stream.uniforms(-bound, bound, tuple(p.shape)).astype(np.float32)
                ))
            elif name.endswith("weight"):  # BN scale
                p.fill_(1.0)
            else:  # biases (BN shift, linear bias)
                p.zero_()
    return model


def model_forward(
    model: MiniResNet,
    images,
    mode: str,
    rng: RngStream | None = None,
    frozen_decisions: list[MaskDecision] | None = None,
):
    """Functional forward: mode is ``"train"`` or ``"eval"``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    model.train(mode == "train")
    return model(images, rng=rng, frozen_decisions=frozen_decisions)


def stem_features(model: MiniResNet, images) -> np.ndarray:
    """Eval-mode pre-masking stem activation (B, C0, H, W), for visualization."""
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    model.eval()
    with torch.no_grad():
        out = torch.relu(model.stem_bn(model.stem_conv(images)))
    return out.numpy()


# -- loss and optimizer -------------------------------------------------------


def smoothed_cross_entropy(logits: torch.Tensor, labels, smoothing: float) -> torch.Tensor:
    """Cross entropy against targets weighted 1-eps on the label and eps/K elsewhere."""
    num_classes = logits.shape[1]
    labels_t = torch.as_tensor(labels, dtype=torch.long)
    if labels_t.min() < 0 or labels_t.max() >= num_classes:
        raise InputError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{int(labels_t.min())}, {int(labels_t.max())}]"
        )
    logp = torch.log_softmax(logits, dim=1)
    q = torch.full_like(logp, smoothing / num_classes)
    q[torch.arange(len(labels_t)), labels_t] = 1.0 - smoothing
    return -(q * logp).sum(dim=1).mean()


def loss_and_backward(logits: torch.Tensor, labels, smoothing: float = 0.0) -> float:
    """Compute the smoothed cross-entropy, backprop it, return the scalar loss."""
    loss = smoothed_cross_entropy(logits, labels, smoothing)
    loss.backward()
    return float(loss.detach())


@dataclass
class OptState:
    """SGD with momentum and decoupled-from-nothing weight decay:
    v <- mu*v + g + wd*w ; w <- w - lr*v."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    decay_epochs: tuple = ()
    decay_gamma: float = 0.1
    buffers: dict = field(default_factory=dict)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for boundary in self.decay_epochs:
            if epoch >= boundary:
                lr *= self.decay_gamma
        return lr


def sgd_step(model: nn.Module, opt: OptState, epoch: int = 0) -> None:
    lr = opt.lr_at(epoch)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.grad is None:
                raise StructuralError(f"missing gradient for parameter {name}")
            buf = opt.buffers.get(name)
            if buf is None:
                buf = torch.zeros_like(p)
                opt.buffers[name] = buf
            buf.mul_(opt.momentum).add_(p.grad).add_(p, alpha=opt.weight_decay)
            p.add_(buf, alpha=-lr)
            p.grad = None


# -- gradient verification ----------------------------------------------------


def grad_check(
    model: MiniResNet,
    images,
    labels,
    *,
    frozen_decisions: list[MaskDecision] | None = None,
    num_params: int = 200,
    step: float = 1e-7,
    coord_rng: RngStream | None = None,
) -> float:
    """Max guarded relative error between analytic and central-difference grads.

    Runs a double-precision deepcopy with batch-norm running statistics
    frozen so the loss is a fixed deterministic function; masking randomness,
    when present, must be frozen by ``frozen_decisions``. The error for each
    sampled coordinate is |a - n| / max(1, |a|, |n|), i.e. absolute near zero
    and relative at scale.

    The step must stay small: a ReLU or maxpool kink inside [theta - h,
    theta + h] contributes an error independent of h, so shrinking h only
    shrinks the chance of straddling one. 1e-7 keeps crossings essentially
    impossible while staying well above the double-precision roundoff floor
    (~1e-9 on a unit-scale loss).
    """
    if coord_rng is None:
        coord_rng = RngStream(0, ("grad-check",))
    work = copy.deepcopy(model).double()
    work.train()
    for m in work.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.momentum = 0.0  # keep running stats untouched across evaluations
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    x = images.detach().double()

    def loss_fn() -> torch.Tensor:
        logits, _, _ = work(x, rng=None, frozen_decisions=frozen_decisions)
        return smoothed_cross_entropy(logits, labels, work.cfg.label_smoothing)

    for p in work.parameters():
        p.grad = None
    loss_fn().backward()

    coords = []
    params = [p for p in work.parameters()]
    for pi, p in enumerate(params):
        for flat in range(p.numel()):
            coords.append((pi, flat))
    take = min(num_params, len(coords))
    chosen = coord_rng.sample_without_replacement(len(coords), take)
    max_err = 0.0
    with torch.no_grad():
        for ci in chosen:
            pi, flat = coords[int(ci)]
            p = params[pi]
            orig = float(p.view(-1)[flat])
            analytic = float(p.grad.view(-1)[flat])
            p.view(-1)[flat] = orig + step
            loss_plus = float(loss_fn())
            p.view(-1)[flat] = orig - step
            loss_minus = float(loss_fn())
            p.view(-1)[flat] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            max_err = max(max_err, err)
    return max_err


def stem_input_gradient(
    model: MiniResNet, images, labels, frozen_decisions: list[MaskDecision]
) -> np.ndarray:
    """Gradient of the loss w.r.t. the pre-masking stem activation.

    Masked rectangle positions must come back exactly zero: the output there
    is a constant that does not depend on the layer input.
    """
    work = copy.deepcopy(model).double()
    work.train()
    for m in work.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.momentum = 0.0
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    x = images.detach().double()
    logits, _, _ = work(x, frozen_decisions=frozen_decisions, capture_stem=True)
    loss = smoothed_cross_entropy(logits, labels, work.cfg.label_smoothing)
    loss.backward()
    grad = work._captured_stem.grad
    if grad is None:
        raise StructuralError("stem activation gradient was not captured")
    return grad.detach().numpy()


# -- checkpoint format --------------------------------------------------------


def _checkpoint_entries(model: nn.Module):
    for name, p in model.named_parameters():
        yield name, p
    for name, b in model.named_buffers():
        if not name.endswith("num_batches_tracked"):
            yield name, b


def save_checkpoint(model: nn.Module, path) -> None:
    """Binary checkpoint: magic, version u32, then (name, rank, dims, f32 data) records."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        for name, tensor in _checkpoint_entries(model):
            data = tensor.detach().cpu().to(torch.float32).numpy()
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_checkpoint(model: nn.Module, path) -> None:
    """Load a checkpoint into a structurally matching model (strict names + shapes)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise FormatError(f"truncated header: file ends at offset {len(raw)}")
    if raw[:4] != _CKPT_MAGIC:
        raise FormatError("bad magic at offset 0")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    pos = 8
    loaded = {}
    while pos < len(raw):
        try:
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated record at offset {pos}") from exc
        loaded[name] = arr
    expected = dict(_checkpoint_entries(model))
    if set(loaded) != set(expected):
        missing = sorted(set(expected) - set(loaded))
        extra = sorted(set(loaded) - set(expected))
        raise StructuralError(f"checkpoint mismatch: missing={missing}, extra={extra}")
    with torch.no_grad():
        for name, tensor in expected.items():
            arr = loaded[name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise StructuralError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model "
                    f"{tuple(tensor.shape)}"
                )
            tensor.copy_(torch.from_numpy(arr.copy()).to(tensor.dtype))
