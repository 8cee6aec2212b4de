"""Per-modality conditional VAE-GAN feature generator.

One network per modality (image, text), each built from an encoder, a
generator that doubles as the VAE decoder, and a Wasserstein critic with
gradient penalty. Trained on source-domain features (plus any x-shot target
samples), then used to synthesize class-conditional pseudo features for the
unseen target classes.

The generator ends in a sigmoid, so real features are min-max scaled to
[0, 1] per dimension before stage-1 training; the fitted transform travels
with the model and synthesized features are mapped back to the original
feature space.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, Tensor, no_grad
from .data import Corpus, XShotSplit, make_corpus
from .errors import ConfigError
from .optim import adam_step, zero_grads
from .util import stream

# reference layer widths at the 1024-d feature scale; other dims scale
# proportionally so the desk-size synthetic preset stays cheap
ENCODER_WIDTHS_1024 = (1024, 800, 512)
GENERATOR_HIDDEN_1024 = 800
LATENT_1024 = 512

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


def _scaled(ref: int, d: int) -> int:
    return max(2, round(ref * d / 1024))


def default_latent_dim(d: int) -> int:
    return _scaled(LATENT_1024, d)


@dataclass
class GenHyperParams:
    """Stage-1 knobs; latent_dim of None resolves to the width forced by d."""

    latent_dim: int | None = None
    lambda_gp: float = 10.0
    critic_steps: int = 5
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lambda_gp < 0:
            raise ConfigError(f"lambda_gp must be non-negative, got {self.lambda_gp}")
        if self.critic_steps < 1:
            raise ConfigError(f"critic_steps must be at least 1, got {self.critic_steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 1 or self.epochs < 1:
            raise ConfigError("batch and epochs must be positive")


class Encoder:
    """Three stacked affine layers (ReLU, ReLU, Sigmoid) plus mean/log-variance heads."""

    def __init__(self, d_feat: int, d_attr: int, d_z: int, rng):
        w1, w2, w3 = (_scaled(w, d_feat) for w in ENCODER_WIDTHS_1024)
        self.l1 = Linear(d_feat + d_attr, w1, rng)
        self.l2 = Linear(w1, w2, rng)
        self.l3 = Linear(w2, w3, rng)
        self.mu_head = Linear(w3, d_z, rng)
        self.logvar_head = Linear(w3, d_z, rng)

    def __call__(self, v, a):
        h = ad.relu(self.l1(ad.concat_cols(v, a)))
        h = ad.relu(self.l2(h))
        h = ad.sigmoid(self.l3(h))
        mu = self.mu_head(h)
        logvar = ad.clip(self.logvar_head(h), LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    @property
    def params(self):
        return (
            self.l1.params
            + self.l2.params
            + self.l3.params
            + self.mu_head.params
            + self.logvar_head.params
        )


class Generator:
    """Decoder/generator: (latent ++ attribute) -> hidden ReLU -> sigmoid feature."""

    def __init__(self, d_feat: int, d_attr: int, d_z: int, rng):
        hidden = _scaled(GENERATOR_HIDDEN_1024, d_feat)
        self.l1 = Linear(d_z + d_attr, hidden, rng)
        self.l2 = Linear(hidden, d_feat, rng)

    def __call__(self, z, a):
        h = ad.relu(self.l1(ad.concat_cols(z, a)))
        return ad.sigmoid(self.l2(h))

    @property
    def params(self):
        return self.l1.params + self.l2.params


class Critic:
    """Two affine layers with an intermediate LeakyReLU; raw scalar score per row."""

    def __init__(self, d_feat: int, d_attr: int, rng, leaky_slope: float = 0.2):
        hidden = d_feat + d_attr
        self.l1 = Linear(d_feat + d_attr, hidden, rng)
        self.l2 = Linear(hidden, 1, rng)
        self.leaky_slope = leaky_slope

    def __call__(self, v, a):
        h = ad.leaky_relu(self.l1(ad.concat_cols(v, a)), slope=self.leaky_slope)
        return self.l2(h)

    @property
    def params(self):
        return self.l1.params + self.l2.params


class FeatureScaler:
    """Per-dimension min-max map to [0, 1]; identity until fitted."""

    def __init__(self, lo: np.ndarray | None = None, span: np.ndarray | None = None):
        self.lo = lo
        self.span = span

    @property
    def fitted(self) -> bool:
        return self.lo is not None

    def fit(self, X: np.ndarray) -> "FeatureScaler":
        lo = X.min(axis=0, keepdims=True)
        span = X.max(axis=0, keepdims=True) - lo
        span = np.where(span > 0, span, 1.0)
        self.lo, self.span = lo, span
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        if not self.fitted:
            return X
        return (X - self.lo) / self.span

    def inverse(self, X: np.ndarray) -> np.ndarray:
        if not self.fitted:
            return X
        return X * self.span + self.lo


class VaeGanModel:
    """Encoder, generator, and critic for one modality plus the feature scaler."""

    def __init__(self, d_feat: int, d_attr: int, hp: GenHyperParams, rng):
        self.d_feat = d_feat
        self.d_attr = d_attr
        self.hp = hp
        self.d_z = hp.latent_dim if hp.latent_dim is not None else default_latent_dim(d_feat)
        self.encoder = Encoder(d_feat, d_attr, self.d_z, rng)
        self.generator = Generator(d_feat, d_attr, self.d_z, rng)
        self.critic = Critic(d_feat, d_attr, rng)
        self.scaler = FeatureScaler()
        self.rng_state: dict | None = None

    def encode(self, v, a, rng) -> tuple[Tensor, Tensor, Tensor]:
        """Posterior parameters plus a reparameterized latent sample."""
        mu, logvar = self.encoder(v, a)
        z = reparameterize(mu, logvar, rng)
        return mu, logvar, z

    def synthesize(self, attrs: np.ndarray, rng) -> np.ndarray:
        """Feature-space pseudo samples, one per attribute row."""
        noise = rng.standard_normal((attrs.shape[0], self.d_z))
        with no_grad():
            out = self.generator(Tensor(noise), Tensor(attrs))
        return self.scaler.inverse(out.data)

    def named_params(self) -> list[tuple[str, ad.Parameter]]:
        out = []
        for part_name, part in (
            ("encoder", self.encoder),
            ("generator", self.generator),
            ("critic", self.critic),
        ):
            for layer_name in sorted(vars(part)):
                layer = getattr(part, layer_name)
                if isinstance(layer, Linear):
                    out.append((f"{part_name}.{layer_name}.W", layer.W))
                    out.append((f"{part_name}.{layer_name}.b", layer.b))
        return out

    @property
    def params(self):
        return self.encoder.params + self.generator.params + self.critic.params


def reparameterize(mu, logvar, rng) -> Tensor:
    """z = mu + exp(logvar / 2) * eps with eps drawn from the given rng."""
    eps = Tensor(rng.standard_normal(mu.data.shape))
    return mu + ad.exp(logvar * 0.5) * eps


def kl_loss(mu, logvar) -> Tensor:
    """Mean over the batch of the analytic KL to the standard-normal prior."""
    per_row = ad.sum_axis(ad.exp(logvar) + ad.square(mu) - 1.0 - logvar, axis=1)
    n = mu.data.shape[0]
    return ad.sum_all(per_row) * (0.5 / n)


def recon_loss(v, v_bar) -> Tensor:
    """Mean squared error over all elements."""
    return ad.mean_all(ad.square(ad.as_tensor(v) - v_bar))


def critic_input_gradient(critic, v_hat: Tensor, a) -> Tensor:
    """Gradient of the summed critic score w.r.t. its feature input, as a graph node.

    Forces graph building: this value is defined through a gradient, so it
    must be computed even inside a no_grad region.
    """
    with ad.enable_grad():
        score = critic(v_hat, a)
        (gin,) = ad.grad(ad.sum_all(score), [v_hat], create_graph=True)
    return gin


def gradient_penalty(real, fake, a, critic, rng) -> Tensor:
    """Mean squared deviation of the critic's input-gradient norm from 1.

    Interpolates eps*real + (1-eps)*fake per row with eps ~ U(0, 1); real and
    fake enter as data (the penalty regularizes the critic only).
    """
    real_d = real.data if isinstance(real, Tensor) else ad.as_matrix(real)
    fake_d = fake.data if isinstance(fake, Tensor) else ad.as_matrix(fake)
    eps = rng.uniform(size=(real_d.shape[0], 1))
    a_const = Tensor(a.data) if isinstance(a, Tensor) else Tensor(ad.as_matrix(a))

    caller_wants_graph = ad.grad_enabled()
    mark = len(ad.active_tape().nodes)
    with ad.enable_grad():
        v_hat = Tensor(eps * real_d + (1.0 - eps) * fake_d, requires_grad=True)
        gin = critic_input_gradient(critic, v_hat, a_const)
        norms = ad.sqrt(ad.sum_axis(ad.square(gin), axis=1))
        penalty = ad.mean_all(ad.square(norms - 1.0))
    if caller_wants_graph:
        return penalty
    # pure evaluation: drop the throwaway inner graph, hand back a constant
    del ad.active_tape().nodes[mark:]
    return Tensor(penalty.data.copy())


def critic_loss(real, other, a, critic, lambda_gp: float, rng) -> Tensor:
    """E[D(real)] - E[D(other)] - lambda * gradient penalty.

    The critic maximizes this value; the encoder/generator minimize the same
    expression through `other`.
    """
    gap = ad.mean_all(critic(real, a)) - ad.mean_all(critic(other, a))
    if lambda_gp == 0:
        return gap
    return gap - lambda_gp * gradient_penalty(real, other, a, critic, rng)


def generation_losses(batch, model: VaeGanModel, hp: GenHyperParams, rng, use_vae: bool = True):
    """All stage-1 loss components on one batch of model-space features.

    Returns {"vae", "gan1", "gan2", "total"} as graph tensors; total is the
    exact sum of the three parts. With use_vae off, the reconstruction path
    is skipped and only the pure conditional WGAN-GP term remains.
    """
    v, a = batch
    v = ad.as_tensor(v)
    a = ad.as_tensor(a)
    n = v.data.shape[0]
    if n == 0:
        raise ConfigError("empty batch")

    if use_vae:
        mu, logvar, z = model.encode(v, a, rng)
        v_bar = model.generator(z, a)
        vae = kl_loss(mu, logvar) + recon_loss(v, v_bar)
    else:
        vae = Tensor(0.0)
        v_bar = None

    noise = Tensor(rng.standard_normal((n, model.d_z)))
    v_tilde = model.generator(noise, a)
    gan1 = critic_loss(v, v_tilde, a, model.critic, hp.lambda_gp, rng)
    if use_vae:
        gan2 = critic_loss(v, v_bar, a, model.critic, hp.lambda_gp, rng)
    else:
        gan2 = Tensor(0.0)

    total = vae + gan1 + gan2
    return {"vae": vae, "gan1": gan1, "gan2": gan2, "total": total}


def _critic_objective(v, a, model: VaeGanModel, hp: GenHyperParams, rng, use_vae: bool) -> Tensor:
    """Loss the critic minimizes: negated score gaps plus the penalties."""
    n = v.data.shape[0]
    with no_grad():
        noise = Tensor(rng.standard_normal((n, model.d_z)))
        v_tilde = model.generator(noise, a).detach()
        if use_vae:
            _, _, z = model.encode(v, a, rng)
            v_bar = model.generator(z, a).detach()

    def one_path(other):
        gap = ad.mean_all(model.critic(v, a)) - ad.mean_all(model.critic(other, a))
        penalty = gradient_penalty(v, other, a, model.critic, rng)
        return -gap + hp.lambda_gp * penalty

    loss = one_path(v_tilde)
    if use_vae:
        loss = loss + one_path(v_bar)
    return loss


def train_generation(
    split: XShotSplit,
    corpus: Corpus,
    hp: GenHyperParams,
    use_vae: bool = True,
):
    """Stage-1 training for both modalities; they share nothing but the data.

    Returns (image model, text model, loss curves); curves hold per-epoch
    means keyed by modality.
    """
    train_idx = list(split.source_train) + list(split.target_train)
    if not train_idx:
        raise ConfigError("generation training set is empty")
    attrs = corpus.attr_matrix(train_idx)
    d_attr = attrs.shape[1]

    models = {}
    curves = {}
    for modality, feats in (
        ("img", corpus.image_matrix(train_idx)),
        ("txt", corpus.text_matrix(train_idx)),
    ):
        model, curve = _train_single_modality(
            feats, attrs, hp, d_attr, modality, use_vae
        )
        models[modality] = model
        curves[modality] = curve
    return models["img"], models["txt"], curves


def _dataset_metrics(model, X, attrs, hp, rng, use_vae) -> dict[str, float]:
    """Loss components over a whole feature matrix, for curve logging."""
    with no_grad():
        v = Tensor(X)
        a = Tensor(attrs)
        out = {}
        if use_vae:
            mu, logvar, z = model.encode(v, a, rng)
            v_bar = model.generator(z, a)
            out["kl"] = kl_loss(mu, logvar).item()
            out["recon"] = recon_loss(v, v_bar).item()
            out["vae"] = out["kl"] + out["recon"]
        else:
            out["kl"] = out["recon"] = out["vae"] = 0.0
        noise = Tensor(rng.standard_normal((X.shape[0], model.d_z)))
        v_tilde = model.generator(noise, a)
        gap = (
            ad.mean_all(model.critic(v, a)).item()
            - ad.mean_all(model.critic(v_tilde, a)).item()
        )
        out["critic_gap"] = gap
        out["gan1"] = gap - hp.lambda_gp * gradient_penalty(
            X, v_tilde.data, attrs, model.critic, rng
        ).item()
        if use_vae:
            gap2 = (
                ad.mean_all(model.critic(v, a)).item()
                - ad.mean_all(model.critic(v_bar, a)).item()
            )
            out["gan2"] = gap2 - hp.lambda_gp * gradient_penalty(
                X, v_bar.data, attrs, model.critic, rng
            ).item()
        else:
            out["gan2"] = 0.0
        out["total"] = out["vae"] + out["gan1"] + out["gan2"]
    return out


def _train_single_modality(feats, attrs, hp, d_attr, modality, use_vae):
    rng_init = stream(hp.seed, modality, "init")
    rng_shuffle = stream(hp.seed, modality, "shuffle")
    rng_noise = stream(hp.seed, modality, "noise")

    model = VaeGanModel(feats.shape[1], d_attr, hp, rng_init)
    model.scaler.fit(feats)
    X = model.scaler.transform(feats)
    n = X.shape[0]

    eg_params = model.encoder.params + model.generator.params
    critic_params = model.critic.params

    # curve index 0 is the untrained model; one entry per epoch after that
    curve: dict[str, list[float]] = {}

    def log_point():
        probe = stream(hp.seed, modality, "probe")
        metrics = _dataset_metrics(model, X, attrs, hp, probe, use_vae)
        for k, val in metrics.items():
            curve.setdefault(k, []).append(val)

    log_point()
    for _ in range(hp.epochs):
        perm = rng_shuffle.permutation(n)
        for start in range(0, n, hp.batch):
            idx = perm[start : start + hp.batch]
            v = Tensor(X[idx])
            a = Tensor(attrs[idx])

            for _ in range(hp.critic_steps):
                zero_grads(model.params)
                d_loss = _critic_objective(v, a, model, hp, rng_noise, use_vae)
                ad.backward(d_loss)
                adam_step(critic_params, hp.lr)

            zero_grads(model.params)
            losses = generation_losses((v, a), model, hp, rng_noise, use_vae)
            ad.backward(losses["total"])
            adam_step(eg_params, hp.lr)
        log_point()

    model.rng_state = rng_noise.bit_generator.state
    return model, curve


def synthesize_target_set(
    models: tuple[VaeGanModel, VaeGanModel],
    target_classes,
    class_attrs: dict[int, np.ndarray],
    gen_num: int,
    seed: int,
) -> Corpus:
    """gen_num pseudo image/text pairs per target class, labeled with that class.

    Image and text features come from their own generators with independent
    noise but the same class attribute per pair.
    """
    if gen_num <= 0:
        raise ConfigError(f"gen_num must be positive, got {gen_num}")
    img_model, txt_model = models
    classes = sorted(int(c) for c in target_classes)
    for c in classes:
        if c not in class_attrs:
            raise ConfigError(f"no attribute vector for target class {c}")

    rng_img = stream(seed, "synthesize", "img")
    rng_txt = stream(seed, "synthesize", "txt")
    images, texts, labels = [], [], []
    for c in classes:
        attr_rows = np.repeat(np.asarray(class_attrs[c]).reshape(1, -1), gen_num, axis=0)
        images.append(img_model.synthesize(attr_rows, rng_img))
        texts.append(txt_model.synthesize(attr_rows, rng_txt))
        labels.extend([c] * gen_num)
    attrs = {c: np.asarray(class_attrs[c]).reshape(-1) for c in classes}
    return make_corpus(
        np.vstack(images), np.vstack(texts), labels, attrs, name="pseudo"
    )


def gen_hp_for_seed(hp: GenHyperParams, seed: int) -> GenHyperParams:
    return replace(hp, seed=seed)
