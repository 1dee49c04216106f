"""Black-box transfer attacks on retrieval models.

The referenced attack from the comparison protocol is citation-only, so this
harness substitutes a fully specified stand-in with the same character: an
L-infinity projected-gradient attack that maximizes embedding displacement,
crafted on an independently trained surrogate and transferred to the target.
Every artifact produced here is labeled "transfer-PGD (DMR substitute)".
Only queries are perturbed; the gallery stays clean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericError
from .metrics import EvalReport, evaluate_embeddings
from .nn import MiniResNet
from .rng import RngStream

ATTACK_LABEL = "transfer-PGD (DMR substitute)"
GAUSSIAN_LABEL = "gaussian-noise"

ATTACK_CSV_HEADER = "model,attack,epsilon,steps,phase,rank1,rank5,rank10,map"


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8.0 / 255.0
    step_size: float = 2.0 / 255.0
    steps: int = 10
    random_start: bool = True
    noise_sigma: float = 8.0 / 255.0
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.step_size <= self.epsilon <= 1.0:
            raise ConfigError(
                f"need 0 <= step_size <= epsilon <= 1, got step_size={self.step_size}, "
                f"epsilon={self.epsilon}"
            )
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.noise_sigma < 0.0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass(frozen=True)
class AttackReport:
    clean: EvalReport
    attacked: EvalReport
    kind: str
    config: AttackConfig

    @property
    def deltas(self) -> dict:
        return {
            "rank1": self.clean.rank1 - self.attacked.rank1,
            "rank5": self.clean.rank5 - self.attacked.rank5,
            "rank10": self.clean.rank10 - self.attacked.rank10,
            "map": self.clean.map - self.attacked.map,
        }

    def csv_rows(self, model_name: str) -> list[str]:
        rows = []
        for phase, rep in (("clean", self.clean), ("attacked", self.attacked)):
            rows.append(
                f"{model_name},{self.kind},{self.config.epsilon:.4f},"
                f"{self.config.steps},{phase},{rep.rank1:.4f},{rep.rank5:.4f},"
                f"{rep.rank10:.4f},{rep.map:.4f}"
            )
        return rows


def embed(model: MiniResNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode embeddings for a pixel block in [0, 1]."""
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(images[start : start + batch_size])
            _, emb, _ = model(x)
            chunks.append(emb.numpy())
    return np.concatenate(chunks, axis=0)


def embedding_divergence_loss(
    model: MiniResNet, images: torch.Tensor, ref_embedding: torch.Tensor
) -> tuple[float, torch.Tensor]:
    """Summed squared L2 between current and reference embeddings, plus its
    gradient with respect to the input pixels."""
    model.eval()
    model.input_grad_calls += 1
    x = images.detach().clone().requires_grad_(True)
    _, emb, _ = model(x)
    loss = ((emb - ref_embedding) ** 2).sum()
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise NumericError("non-finite input gradient during attack crafting")
    return float(loss.detach()), grad.detach()


def pgd_attack(
    surrogate: MiniResNet, x_clean: np.ndarray, cfg: AttackConfig, rng: RngStream | None = None
) -> np.ndarray:
    """L-infinity PGD maximizing embedding divergence from the clean embedding.

    All crafting gradients come from the surrogate; the output stays inside
    the epsilon ball around the clean pixels, intersected with [0, 1]. The
    divergence objective has an exactly zero gradient at the clean point (it
    is the objective's minimum), so without ``random_start`` a single-step
    attack cannot move; the default keeps the random start enabled.
    """
    cfg.validate()
    if rng is None:
        rng = RngStream(cfg.seed, ("attack",))
    clean = torch.from_numpy(np.ascontiguousarray(x_clean, dtype=np.float32))
    surrogate.eval()
    with torch.no_grad():
        _, ref, _ = surrogate(clean)
    ref = ref.detach()
    x = clean.clone()
    if cfg.random_start and cfg.epsilon > 0.0:
        noise = rng.child("start").uniforms(-cfg.epsilon, cfg.epsilon, tuple(clean.shape))
        x = torch.clamp(clean + torch.from_numpy(noise.astype(np.float32)), 0.0, 1.0)
    for _ in range(cfg.steps):
        _, grad = embedding_divergence_loss(surrogate, x, ref)
        x = x + cfg.step_size * torch.sign(grad)
        x = torch.clamp(x, clean - cfg.epsilon, clean + cfg.epsilon)
        x = torch.clamp(x, 0.0, 1.0)
    return x.numpy()


def gaussian_attack(x_clean: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    """Additive per-pixel Gaussian noise, clipped to [0, 1]."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return x_clean
    noisy = x_clean + rng.normals(0.0, sigma, x_clean.shape).astype(x_clean.dtype)
    return np.clip(noisy, 0.0, 1.0)


def _models_identical(a: MiniResNet, b: MiniResNet) -> bool:
    pa = dict(a.named_parameters())
    pb = dict(b.named_parameters())
    if set(pa) != set(pb):
        return False
    return all(torch.equal(pa[k], pb[k]) for k in pa)


def transfer_evaluate(
    target: MiniResNet,
    surrogate: MiniResNet,
    query_images: np.ndarray,
    query_ids: np.ndarray,
    query_cams: np.ndarray,
    gallery_images: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
    cfg: AttackConfig,
    *,
    kind: str = "pgd",
    distance: str = "euclidean",
) -> AttackReport:
    """Craft adversarial queries on the surrogate, score them on the target.

    The target model's gradient path is never invoked; it only embeds pixels.
    Identical target and surrogate weights are rejected (that would be a
    white-box evaluation).
    """
    cfg.validate()
    if _models_identical(target, surrogate):
        raise ConfigError("target and surrogate checkpoints are identical (white-box)")
    rng = RngStream(cfg.seed, ("attack",))
    if kind == "pgd":
        x_adv = pgd_attack(surrogate, query_images, cfg, rng)
        label = ATTACK_LABEL
    elif kind == "gaussian":
        x_adv = gaussian_attack(query_images, cfg.noise_sigma, rng.child("gauss"))
        label = GAUSSIAN_LABEL
    else:
        raise ConfigError(f"unknown attack kind {kind!r}")
    gallery_emb = embed(target, gallery_images)
    clean = evaluate_embeddings(
        embed(target, query_images), query_ids, query_cams,
        gallery_emb, gallery_ids, gallery_cams, distance=distance,
    )
    attacked = evaluate_embeddings(
        embed(target, x_adv), query_ids, query_cams,
        gallery_emb, gallery_ids, gallery_cams, distance=distance,
    )
    return AttackReport(clean=clean, attacked=attacked, kind=label, config=cfg)
