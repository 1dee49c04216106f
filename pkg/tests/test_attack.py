import copy
import math

import numpy as np
import pytest
import torch

from lfmnet.attack import (
    ATTACK_CSV_HEADER,
    AttackConfig,
    embed,
    embedding_divergence_loss,
    gaussian_attack,
    pgd_attack,
    transfer_evaluate,
)

from lfmnet.data import make_split, normalize, synth_generate
from lfmnet.errors import ConfigError
from lfmnet.nn import MiniResNetConfig, build_model
from lfmnet.rng import RngStream

torch.set_num_threads(1)


def small_model(seed=0, num_classes=4):
    cfg = MiniResNetConfig(
        num_classes=num_classes,
        input_shape=(3, 16, 8),
        stem_channels=4,
        stage_widths=(4, 6),
        blocks_per_stage=1,
        embedding_dim=6,
    )
    return build_model(cfg, RngStream(seed).child("init"))


def retrieval_model(seed=0, num_classes=4):
    # full-resolution input, narrow widths: fast but shaped like the real thing
    cfg = MiniResNetConfig(
        num_classes=num_classes,
        stem_channels=4,
        stage_widths=(4, 6),
        blocks_per_stage=1,
        embedding_dim=6,
    )
    return build_model(cfg, RngStream(seed).child("init"))


def small_images(batch=4, seed=3):
    return RngStream(seed, ("imgs",)).uniforms(0.0, 1.0, (batch, 3, 16, 8)).astype(np.float32)


# -- config -------------------------------------------------------------------


def test_attack_config_validation():
    AttackConfig().validate()
    with pytest.raises(ConfigError):
        AttackConfig(epsilon=0.01, step_size=0.02).validate()
    with pytest.raises(ConfigError):
        AttackConfig(epsilon=1.5, step_size=0.1).validate()
    with pytest.raises(ConfigError):
        AttackConfig(steps=0).validate()
    with pytest.raises(ConfigError):
        AttackConfig(noise_sigma=-0.1).validate()


# -- embedding divergence loss --------------------------------------------------


def test_divergence_zero_at_reference():
    model = small_model()
    x = torch.from_numpy(small_images(2))
    model.eval()
    with torch.no_grad():
        _, ref, _ = model(x)
    loss, grad = embedding_divergence_loss(model, x, ref)
    assert loss == 0.0
    assert torch.all(grad == 0.0)


def test_divergence_is_symmetric_in_the_two_embeddings():
    model = small_model()
    x1 = torch.from_numpy(small_images(3, seed=5))
    x2 = torch.from_numpy(small_images(3, seed=6))
    model.eval()
    with torch.no_grad():
        _, e1, _ = model(x1)
        _, e2, _ = model(x2)
    loss_a, _ = embedding_divergence_loss(model, x1, e2)
    loss_b, _ = embedding_divergence_loss(model, x2, e1)
    assert loss_a == pytest.approx(loss_b, rel=1e-6)


def test_input_gradient_matches_finite_differences():
    model = small_model(seed=7).double()
    x = torch.from_numpy(small_images(1, seed=8)).double()
    model.eval()
    with torch.no_grad():
        _, ref, _ = model(torch.zeros_like(x))
    _, grad = embedding_divergence_loss(model, x, ref)

    def loss_at(t):
        with torch.no_grad():
            _, emb, _ = model(t)
            return float(((emb - ref) ** 2).sum())

    coords = RngStream(4, ("fd",)).sample_without_replacement(x.numel(), 20)
    h = 1e-5
    for ci in coords:
        flat = int(ci)
        plus = x.clone().view(-1)
        plus[flat] += h
        minus = x.clone().view(-1)
        minus[flat] -= h
        numeric = (loss_at(plus.view_as(x)) - loss_at(minus.view_as(x))) / (2 * h)
        analytic = float(grad.view(-1)[flat])
        assert abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric)) <= 1e-3


# -- pgd ----------------------------------------------------------------------


def test_pgd_epsilon_zero_is_identity():
    model = small_model()
    x = small_images(3)
    cfg = AttackConfig(epsilon=0.0, step_size=0.0, steps=3, random_start=True)
    adv = pgd_attack(model, x, cfg)
    assert np.array_equal(adv, x)


def test_pgd_ball_containment_and_pixel_range():
    model = small_model()
    x = small_images(5)
    cfg = AttackConfig()
    adv = pgd_attack(model, x, cfg, RngStream(1, ("pgd",)))
    ulp = np.float32(1e-7)
    assert np.all(np.abs(adv - x) <= cfg.epsilon + ulp)
    assert adv.min() >= 0.0 and adv.max() <= 1.0
    assert not np.array_equal(adv, x)


def test_pgd_multistep_diverges_at_least_as_much_as_single_step():
    # ten steps must beat the one-step special case on at least 90% of queries
    model = small_model(seed=11)
    x = small_images(20, seed=12)
    base = embed(model, x)
    eps = 8.0 / 255.0
    adv10 = pgd_attack(
        model, x, AttackConfig(epsilon=eps, step_size=2.0 / 255.0, steps=10),
        RngStream(2, ("pgd10",)),
    )
    adv1 = pgd_attack(
        model, x, AttackConfig(epsilon=eps, step_size=eps, steps=1),
        RngStream(2, ("pgd10",)),  # same random start
    )
    d10 = np.linalg.norm(embed(model, adv10) - base, axis=1)
    d1 = np.linalg.norm(embed(model, adv1) - base, axis=1)
    assert np.mean(d10 >= d1) >= 0.9


def test_pgd_is_deterministic():
    model = small_model()
    x = small_images(3)
    cfg = AttackConfig()
    a = pgd_attack(model, x, cfg, RngStream(5, ("det",)))
    b = pgd_attack(model, x, cfg, RngStream(5, ("det",)))
    assert np.array_equal(a, b)


# -- gaussian -----------------------------------------------------------------


def test_gaussian_sigma_zero_identity():
    x = small_images(2)
    assert gaussian_attack(x, 0.0, RngStream(0)) is x


def test_gaussian_outputs_clipped():
    x = small_images(4)
    out = gaussian_attack(x, 0.5, RngStream(1, ("g",)))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_gaussian_std_matches_estimator_bound():
    sigma = 0.02
    n = 1_000_000
    x = np.full((n,), 0.5, dtype=np.float64)  # clipping never triggers at 25 sigma
    out = gaussian_attack(x, sigma, RngStream(2, ("gstd",)))
    measured = float(np.std(out - x))
    se = sigma / math.sqrt(2 * n)
    assert abs(measured - sigma) <= 3 * se


# -- transfer harness -----------------------------------------------------------


@pytest.fixture(scope="module")
def retrieval_setup():
    ds = synth_generate(seed=3, n_identities=8, views_per_id=4, n_cams=2)
    split = make_split(ds, 4)
    return ds, split


def _attack_args(ds, split, target, surrogate, cfg, **kw):
    return dict(
        target=target,
        surrogate=surrogate,
        query_images=normalize(ds.images[split.query_indices]),
        query_ids=ds.identities[split.query_indices],
        query_cams=ds.cameras[split.query_indices],
        gallery_images=normalize(ds.images[split.gallery_indices]),
        gallery_ids=ds.identities[split.gallery_indices],
        gallery_cams=ds.cameras[split.gallery_indices],
        cfg=cfg,
        **kw,
    )


def test_transfer_rejects_identical_models(retrieval_setup):
    ds, split = retrieval_setup
    model = retrieval_model(seed=20)
    twin = copy.deepcopy(model)
    with pytest.raises(ConfigError):
        transfer_evaluate(**_attack_args(ds, split, model, twin, AttackConfig()))


def test_transfer_epsilon_zero_reports_equal_phases(retrieval_setup):
    ds, split = retrieval_setup
    target = retrieval_model(seed=21)
    surrogate = retrieval_model(seed=22)
    cfg = AttackConfig(epsilon=0.0, step_size=0.0, steps=1, random_start=True)
    report = transfer_evaluate(**_attack_args(ds, split, target, surrogate, cfg))
    assert report.clean == report.attacked
    assert report.deltas == {"rank1": 0.0, "rank5": 0.0, "rank10": 0.0, "map": 0.0}


def test_transfer_black_box_hygiene_and_determinism(retrieval_setup):
    ds, split = retrieval_setup
    target = retrieval_model(seed=23)
    surrogate = retrieval_model(seed=24)
    cfg = AttackConfig(seed=9)
    before = target.input_grad_calls
    rep_a = transfer_evaluate(**_attack_args(ds, split, target, surrogate, cfg))
    assert target.input_grad_calls == before  # target gradients never used
    assert surrogate.input_grad_calls > 0
    rep_b = transfer_evaluate(**_attack_args(ds, split, target, surrogate, cfg))
    assert rep_a.clean == rep_b.clean and rep_a.attacked == rep_b.attacked


def test_transfer_gaussian_kind(retrieval_setup):
    ds, split = retrieval_setup
    target = retrieval_model(seed=25)
    surrogate = retrieval_model(seed=26)
    report = transfer_evaluate(
        **_attack_args(ds, split, target, surrogate, AttackConfig(), kind="gaussian")
    )
    assert report.kind == "gaussian-noise"


def test_attack_csv_rows(retrieval_setup):
    ds, split = retrieval_setup
    target = retrieval_model(seed=27)
    surrogate = retrieval_model(seed=28)
    report = transfer_evaluate(**_attack_args(ds, split, target, surrogate, AttackConfig()))
    rows = report.csv_rows("target_model")
    assert ATTACK_CSV_HEADER == "model,attack,epsilon,steps,phase,rank1,rank5,rank10,map"
    assert len(rows) == 2
    assert rows[0].startswith("target_model,transfer-PGD (DMR substitute),0.0314,10,clean,")
    assert rows[1].split(",")[4] == "attacked"
    for row in rows:
        assert len(row.split(",")) == 9
