import numpy as np
import pytest

from xmodal import autodiff as ad
from xmodal import data, generation as gen
from xmodal.errors import ConfigError
from xmodal.optim import adam_step, zero_grads
from xmodal.util import stream

from fdcheck import assert_grad_matches


def zero_layer(layer):
    layer.W.data[...] = 0.0
    layer.b.data[...] = 0.0


def small_model(d=8, seed=0, hp=None):
    hp = hp or gen.GenHyperParams(lr=1e-3, batch=4, epochs=1, seed=seed)
    return gen.VaeGanModel(d, d, hp, stream(seed, "init")), hp


# ---------------------------------------------------------------------------
# encode / reparameterize


def test_reparameterization_identity_when_heads_zeroed():
    model, _ = small_model()
    zero_layer(model.encoder.mu_head)
    zero_layer(model.encoder.logvar_head)
    v = ad.Tensor(np.random.default_rng(1).normal(size=(3, 8)))
    a = ad.Tensor(np.random.default_rng(2).normal(size=(3, 8)))
    mu, logvar, z = model.encode(v, a, stream(5, "eps"))
    expected_eps = stream(5, "eps").standard_normal((3, model.d_z))
    assert np.array_equal(mu.data, np.zeros((3, model.d_z)))
    assert np.array_equal(z.data, expected_eps)


def test_zero_variance_limit_returns_mu():
    mu = ad.Tensor([[1.5, -2.0]])
    logvar = ad.Tensor([[-1e9, -1e9]])
    z = gen.reparameterize(mu, logvar, stream(0, "eps"))
    assert np.array_equal(z.data, mu.data)


def test_encoder_clamps_logvar():
    model, _ = small_model()
    model.encoder.logvar_head.b.data[...] = 1e6
    v = ad.Tensor(np.zeros((2, 8)))
    a = ad.Tensor(np.zeros((2, 8)))
    _, logvar = model.encoder(v, a)
    assert np.all(logvar.data <= 10.0)
    model.encoder.logvar_head.b.data[...] = -1e6
    _, logvar = model.encoder(v, a)
    assert np.all(logvar.data >= -10.0)


def test_reparameterized_moments_match_parameters():
    n = 10_000
    mu = ad.Tensor(np.ones((n, 1)))
    logvar = ad.Tensor(np.zeros((n, 1)))
    z = gen.reparameterize(mu, logvar, stream(3, "mc"))
    assert z.data.mean() == pytest.approx(1.0, abs=0.05)
    assert z.data.std() == pytest.approx(1.0, abs=0.05)


# ---------------------------------------------------------------------------
# kl / recon


def test_kl_zero_at_prior():
    assert gen.kl_loss(ad.Tensor([[0.0]]), ad.Tensor([[0.0]])).item() == 0.0


def test_kl_unit_mean_single_dim():
    assert gen.kl_loss(ad.Tensor([[1.0]]), ad.Tensor([[0.0]])).item() == 0.5


def test_kl_matches_monte_carlo_oracle():
    rng = np.random.default_rng(12)
    mu = rng.normal(size=(2, 3))
    logvar = rng.uniform(-1.0, 1.0, size=(2, 3))
    analytic = gen.kl_loss(ad.Tensor(mu), ad.Tensor(logvar)).item()

    # independent oracle: E_q[log q(z) - log p(z)] by sampling
    std = np.exp(logvar / 2.0)
    draws = 100_000
    eps = np.random.default_rng(99).standard_normal((draws, 2, 3))
    z = mu + std * eps
    log_q = -0.5 * (np.log(2 * np.pi) + logvar + eps**2)
    log_p = -0.5 * (np.log(2 * np.pi) + z**2)
    mc = (log_q - log_p).sum(axis=2).mean(axis=0).mean()
    assert analytic == pytest.approx(mc, rel=0.02)


def test_kl_nonnegative_on_random_inputs():
    rng = np.random.default_rng(4)
    for _ in range(50):
        mu = ad.Tensor(rng.normal(size=(3, 4)))
        logvar = ad.Tensor(rng.uniform(-3, 3, size=(3, 4)))
        assert gen.kl_loss(mu, logvar).item() >= 0.0


def test_recon_loss_values_and_gradient():
    v = ad.Tensor([[0.0, 0.0]])
    same = gen.recon_loss(v, ad.Tensor([[0.0, 0.0]]))
    assert same.item() == 0.0
    v_bar = ad.Parameter(np.array([[1.0, 1.0]]))
    loss = gen.recon_loss(v, v_bar)
    assert loss.item() == 1.0
    ad.backward(loss)
    assert np.allclose(v_bar.grad, 2.0 * v_bar.data / v_bar.data.size)


# ---------------------------------------------------------------------------
# gradient penalty


def linear_critic(w):
    W = ad.Tensor(np.asarray(w, dtype=float).reshape(-1, 1))

    def critic(v, a):
        return ad.matmul(v, W)

    return critic


def test_penalty_zero_for_unit_norm_linear_critic():
    rng = np.random.default_rng(0)
    real, fake = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    a = rng.normal(size=(6, 2))
    critic = linear_critic([0.6, 0.8])
    pen = gen.gradient_penalty(real, fake, a, critic, stream(1, "gp"))
    assert pen.item() == pytest.approx(0.0, abs=1e-12)


def test_penalty_closed_form_for_norm_three_critic():
    rng = np.random.default_rng(1)
    real, fake = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    a = rng.normal(size=(5, 2))
    critic = linear_critic([3.0, 0.0])
    pen = gen.gradient_penalty(real, fake, a, critic, stream(2, "gp"))
    assert pen.item() == pytest.approx(4.0, abs=1e-10)


def test_penalty_nonnegative():
    model, _ = small_model(d=6, seed=3)
    rng = np.random.default_rng(5)
    pen = gen.gradient_penalty(
        rng.normal(size=(4, 6)),
        rng.normal(size=(4, 6)),
        rng.normal(size=(4, 6)),
        model.critic,
        stream(4, "gp"),
    )
    assert pen.item() >= 0.0


def test_critic_input_gradient_matches_finite_differences():
    model, _ = small_model(d=6, seed=7)
    rng = np.random.default_rng(8)
    v_hat = ad.Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    a = ad.Tensor(rng.normal(size=(3, 6)))
    gin = gen.critic_input_gradient(model.critic, v_hat, a)

    eps = 1e-5
    fd = np.zeros_like(v_hat.data)
    for i in range(3):
        for j in range(6):
            with ad.no_grad():
                orig = v_hat.data[i, j]
                v_hat.data[i, j] = orig + eps
                up = ad.sum_all(model.critic(v_hat, a)).item()
                v_hat.data[i, j] = orig - eps
                down = ad.sum_all(model.critic(v_hat, a)).item()
                v_hat.data[i, j] = orig
            fd[i, j] = (up - down) / (2 * eps)
    rel = np.abs(gin.data - fd) / np.maximum(np.abs(fd), 1e-8)
    assert rel.max() < 1e-4
    ad.active_tape().clear()


# ---------------------------------------------------------------------------
# critic loss


def test_critic_loss_zero_for_zero_critic():
    model, _ = small_model(d=4, seed=9)
    zero_layer(model.critic.l1)
    zero_layer(model.critic.l2)
    rng = np.random.default_rng(3)
    loss = gen.critic_loss(
        ad.Tensor(rng.normal(size=(4, 4))),
        ad.Tensor(rng.normal(size=(4, 4))),
        ad.Tensor(rng.normal(size=(4, 4))),
        model.critic,
        lambda_gp=0.0,
        rng=stream(0, "gp"),
    )
    assert loss.item() == 0.0


def test_critic_loss_linear_critic_is_mean_difference():
    w = np.array([1.0, -2.0, 0.5])
    critic = linear_critic(w)
    real = np.tile([1.0, 1.0, 1.0], (4, 1))
    fake = np.tile([0.0, 2.0, -1.0], (4, 1))
    a = np.zeros((4, 3))
    loss = gen.critic_loss(real, fake, a, critic, lambda_gp=0.0, rng=stream(0, "gp"))
    expected = float(w @ real[0] - w @ fake[0])
    assert loss.item() == pytest.approx(expected, abs=1e-12)


def test_one_critic_step_increases_objective():
    model, hp = small_model(d=6, seed=11)
    rng = np.random.default_rng(13)
    v = ad.Tensor(rng.normal(size=(8, 6)))
    fake = ad.Tensor(rng.normal(size=(8, 6)) + 2.0)
    a = ad.Tensor(rng.normal(size=(8, 6)))

    def objective():
        with ad.no_grad():
            return gen.critic_loss(
                v, fake, a, model.critic, hp.lambda_gp, stream(1, "gp")
            ).item()

    before = objective()
    zero_grads(model.critic.params)
    loss = -gen.critic_loss(v, fake, a, model.critic, hp.lambda_gp, stream(1, "gp"))
    ad.backward(loss)
    adam_step(model.critic.params, lr=1e-3)
    assert objective() > before


# ---------------------------------------------------------------------------
# combined losses


def fixture_batch(d=8, n=4, seed=21):
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.05, 0.95, size=(n, d))
    a = rng.normal(size=(n, d))
    return ad.Tensor(v), ad.Tensor(a)


def test_generation_losses_additive_and_finite():
    model, hp = small_model()
    batch = fixture_batch()
    losses = gen.generation_losses(batch, model, hp, stream(0, "loss"))
    vals = {k: t.item() for k, t in losses.items()}
    assert all(np.isfinite(v) for v in vals.values())
    assert vals["total"] == pytest.approx(
        vals["vae"] + vals["gan1"] + vals["gan2"], abs=1e-12
    )
    ad.active_tape().clear()


def test_zero_penalty_zero_critic_reduces_to_vae():
    hp = gen.GenHyperParams(lambda_gp=0.0, lr=1e-3, batch=4, epochs=1)
    model = gen.VaeGanModel(8, 8, hp, stream(1, "init"))
    zero_layer(model.critic.l1)
    zero_layer(model.critic.l2)
    batch = fixture_batch()
    losses = gen.generation_losses(batch, model, hp, stream(2, "loss"))
    assert losses["total"].item() == pytest.approx(losses["vae"].item(), abs=1e-12)
    ad.active_tape().clear()


def test_generation_total_gradients_match_finite_differences():
    model, hp = small_model(d=6, seed=31)
    batch = fixture_batch(d=6, n=4, seed=32)

    def losses():
        return gen.generation_losses(batch, model, hp, stream(7, "fd"))["total"]

    def loss_value():
        with ad.no_grad():
            return losses().item()

    assert_grad_matches(loss_value, model.params, lambda: ad.backward(losses()), tol=1e-4)


def test_no_vae_losses_drop_reconstruction_path():
    model, hp = small_model(d=6, seed=41)
    batch = fixture_batch(d=6, n=4, seed=42)
    losses = gen.generation_losses(batch, model, hp, stream(3, "loss"), use_vae=False)
    assert losses["vae"].item() == 0.0
    assert losses["gan2"].item() == 0.0
    assert losses["total"].item() == losses["gan1"].item()
    ad.active_tape().clear()


# ---------------------------------------------------------------------------
# training and synthesis


@pytest.fixture(scope="module")
def trained_setup():
    corpus = data.synth_corpus(
        n_classes=12,
        per_class=40,
        dim=64,
        noise_sigma=0.085,
        proto_rank=4,
        modality_gap=0.5,
        seed=5,
    )
    split = data.split_xshot(corpus, x=0, seed=5)
    hp = gen.GenHyperParams(lr=1e-3, batch=64, epochs=70, seed=5)
    img, txt, curves = gen.train_generation(split, corpus, hp)
    return corpus, split, hp, img, txt, curves


def test_training_is_deterministic():
    corpus = data.synth_corpus(n_classes=4, per_class=6, dim=8, seed=2)
    split = data.split_xshot(corpus, x=0, seed=2)
    hp = gen.GenHyperParams(lr=1e-3, batch=8, epochs=1, seed=3)
    img1, txt1, _ = gen.train_generation(split, corpus, hp)
    img2, txt2, _ = gen.train_generation(split, corpus, hp)
    for (n1, p1), (n2, p2) in zip(img1.named_params(), img2.named_params()):
        assert n1 == n2
        assert np.array_equal(p1.data, p2.data)
    for (_, p1), (_, p2) in zip(txt1.named_params(), txt2.named_params()):
        assert np.array_equal(p1.data, p2.data)


def test_modality_streams_are_independent():
    corpus = data.synth_corpus(n_classes=4, per_class=6, dim=8, seed=2)
    # same images, different texts: the image model must come out identical
    other = data.make_corpus(
        corpus.image_matrix(),
        np.roll(corpus.text_matrix(), shift=1, axis=0),
        corpus.labels(),
        {c: corpus.class_attrs[c][0] for c in corpus.classes()},
    )
    split = data.split_xshot(corpus, x=0, seed=2)
    hp = gen.GenHyperParams(lr=1e-3, batch=8, epochs=2, seed=3)
    img1, _, _ = gen.train_generation(split, corpus, hp)
    img2, _, _ = gen.train_generation(split, other, hp)
    for (_, p1), (_, p2) in zip(img1.named_params(), img2.named_params()):
        assert np.array_equal(p1.data, p2.data)


def test_reconstruction_loss_halves(trained_setup):
    _, _, _, _, _, curves = trained_setup
    for modality in ("img", "txt"):
        recon = curves[modality]["recon"]
        assert recon[-1] <= 0.5 * recon[0]


def test_critic_gap_shrinks_from_peak(trained_setup):
    _, _, _, _, _, curves = trained_setup
    for modality in ("img", "txt"):
        gap = np.abs(np.array(curves[modality]["critic_gap"]))
        k = 5
        smoothed = np.convolve(gap, np.ones(k) / k, mode="valid")
        assert smoothed[-1] < smoothed.max()
        assert np.argmax(smoothed) < len(smoothed) - 1


def test_synthesized_counts_and_labels(trained_setup):
    corpus, split, _, img, txt, _ = trained_setup
    pseudo = gen.synthesize_target_set(
        (img, txt), split.target_classes, corpus.class_attrs, gen_num=7, seed=1
    )
    assert len(pseudo) == 7 * len(split.target_classes)
    assert set(pseudo.classes()) == set(split.target_classes)
    assert pseudo.dims == corpus.dims


def test_single_pair_synthesis(trained_setup):
    corpus, split, _, img, txt, _ = trained_setup
    c = split.target_classes[0]
    pseudo = gen.synthesize_target_set(
        (img, txt), [c], corpus.class_attrs, gen_num=1, seed=2
    )
    assert len(pseudo) == 1
    assert pseudo.instances[0].label == c


def test_gen_num_must_be_positive(trained_setup):
    corpus, split, _, img, txt, _ = trained_setup
    with pytest.raises(ConfigError):
        gen.synthesize_target_set(
            (img, txt), split.target_classes, corpus.class_attrs, gen_num=0, seed=0
        )


def test_pseudo_features_align_with_their_class(trained_setup):
    corpus, split, _, img, txt, _ = trained_setup
    pseudo = gen.synthesize_target_set(
        (img, txt), split.target_classes, corpus.class_attrs, gen_num=30, seed=3
    )
    protos = {c: corpus.class_attrs[c][0] for c in split.target_classes}
    for matrix in (pseudo.image_matrix(), pseudo.text_matrix()):
        for c in split.target_classes:
            rows = matrix[[i for i, inst in enumerate(pseudo.instances) if inst.label == c]]
            rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
            sims = {
                other: (rows @ (protos[other] / np.linalg.norm(protos[other]))).mean()
                for other in split.target_classes
            }
            assert max(sims, key=sims.get) == c


def test_empty_training_set_rejected():
    corpus = data.synth_corpus(n_classes=2, per_class=4, dim=8, seed=1)
    split = data.split_xshot(corpus, x=0, seed=1)
    hollow = split.__class__(**{**split.__dict__, "source_train": (), "target_train": ()})
    hp = gen.GenHyperParams(epochs=1)
    with pytest.raises(ConfigError, match="empty"):
        gen.train_generation(hollow, corpus, hp)
