"""Disentangled sequential VAE.

A shared encoder maps a segment X (B, T, d) to W. The speaker branch pools W
over time to a single Gaussian posterior over z_s; the content branch keeps a
per-frame Gaussian posterior over z_c. p(z_s) is a standard normal, p(z_c) an
autoregressive LSTM evaluated on the posterior's own samples. The decoder sees
z_s broadcast to every frame, concatenated with z_c.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    MLP, RNN, Conv1d, InstanceNorm, Linear, Module, ModuleList, StackedLSTM, Tensor, TimeAvgPool,
    broadcast_to, clip, concat, exp, no_grad, relu, tanh,
)
from .autodiff.optim import DivergedError
from .autodiff.tensor import ShapeError
from .config import ModelConfig

LOG_VAR_BOUND = 10.0


@dataclass
class GaussianPosterior:
    mean: Tensor
    log_var: Tensor

    @property
    def shape(self):
        return self.mean.shape


@dataclass
class LossBreakdown:
    recon_nll: float
    kl_speaker: float
    kl_content: float
    total: float
    recon_mse: float


@dataclass
class InfoFlowReport:
    kl_speaker: float
    kl_content: float
    kl_sum: float
    recon_nll: float


def gaussian(mean: Tensor, raw_log_var: Tensor) -> GaussianPosterior:
    return GaussianPosterior(mean, clip(raw_log_var, -LOG_VAR_BOUND, LOG_VAR_BOUND))


def sample_posterior(post: GaussianPosterior, rng: np.random.Generator) -> Tensor:
    """Reparameterized draw ``mean + exp(log_var / 2) * eps``."""
    eps = rng.standard_normal(post.mean.shape)
    return post.mean + exp(post.log_var * 0.5) * eps


def gaussian_kl(mu_q, lv_q, mu_p, lv_p) -> Tensor:
    """Elementwise KL(N(mu_q, e^lv_q) || N(mu_p, e^lv_p))."""
    diff = mu_q - mu_p
    return 0.5 * (lv_p - lv_q + (exp(lv_q) + diff * diff) * exp(-1.0 * lv_p) - 1.0)


def _batch_kl(q: GaussianPosterior, mu_p, lv_p, direction: str) -> Tensor:
    if direction == "q_to_p":
        kl = gaussian_kl(q.mean, q.log_var, mu_p, lv_p)
    else:
        kl = gaussian_kl(mu_p, lv_p, q.mean, q.log_var)
    B = q.mean.shape[0]
    return kl.sum() * (1.0 / B)


def kl_speaker(post: GaussianPosterior, direction: str = "q_to_p") -> Tensor:
    """KL between the speaker posterior and N(0, I), summed over dims, averaged over batch."""
    zero = Tensor(np.zeros(post.shape))
    return _batch_kl(post, zero, zero, direction)


def kl_content(post: GaussianPosterior, prior_mean: Tensor, prior_log_var: Tensor,
               direction: str = "q_to_p") -> Tensor:
    """Sum over steps of the per-step Gaussian KL against the autoregressive prior."""
    return _batch_kl(post, prior_mean, prior_log_var, direction)


class ContentPrior(Module):
    """p(z_t | z_<t): LSTM over the latent sequence shifted right by one step."""

    def __init__(self, content_dim: int, hidden: int, rng):
        super().__init__()
        self.lstm = StackedLSTM(content_dim, hidden, 1, rng, bidirectional=False)
        self.mean_head = Linear(hidden, content_dim, rng)
        self.log_var_head = Linear(hidden, content_dim, rng)

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        B, T, D = z.shape
        shifted = concat([Tensor(np.zeros((B, 1, D))), z[:, :T - 1]], axis=1)
        h = self.lstm(shifted)
        return self.mean_head(h), clip(self.log_var_head(h), -LOG_VAR_BOUND, LOG_VAR_BOUND)

    def sample(self, batch: int, steps: int, rng) -> np.ndarray:
        """Ancestral sampling, one step at a time."""
        D = self.mean_head.weight.shape[1]
        z = np.zeros((batch, 0, D))
        with no_grad():
            for _ in range(steps):
                mu, lv = self.forward(Tensor(np.concatenate([z, np.zeros((batch, 1, D))], axis=1)))
                step = mu.data[:, -1] + np.exp(lv.data[:, -1] / 2) * rng.standard_normal((batch, D))
                z = np.concatenate([z, step[:, None]], axis=1)
        return z


class ConvSharedEncoder(Module):
    """Three blocks of conv -> linear -> instance norm."""

    def __init__(self, in_dim: int, channels: int, kernel: int, rng):
        super().__init__()
        convs, lins, norms = [], [], []
        d = in_dim
        for _ in range(3):
            convs.append(Conv1d(d, channels, kernel, rng))
            lins.append(Linear(channels, channels, rng))
            norms.append(InstanceNorm(channels))
            d = channels
        self.convs, self.lins, self.norms = ModuleList(convs), ModuleList(lins), ModuleList(norms)

    def forward(self, x):
        for conv, lin, norm in zip(self.convs, self.lins, self.norms):
            x = norm(lin(relu(conv(x))))
        return x


class PosteriorEncoder(Module):
    """BiLSTM x2 -> recurrent layer -> (optional time pooling) -> 2-layer Gaussian head."""

    def __init__(self, cfg: ModelConfig, out_dim: int, pooled: bool, rng):
        super().__init__()
        self.bilstm = StackedLSTM(cfg.shared_dim, cfg.enc_hidden, 2, rng)
        if cfg.rnn_cell == "lstm":
            self.rnn = StackedLSTM(2 * cfg.enc_hidden, cfg.enc_hidden, 1, rng, bidirectional=False)
        else:
            self.rnn = RNN(2 * cfg.enc_hidden, cfg.enc_hidden, rng)
        self.pool = TimeAvgPool() if pooled else None
        self.hidden = Linear(cfg.enc_hidden, cfg.head_hidden, rng)
        self.mean_head = Linear(cfg.head_hidden, out_dim, rng)
        self.log_var_head = Linear(cfg.head_hidden, out_dim, rng)

    def forward(self, w: Tensor) -> GaussianPosterior:
        h = self.rnn(self.bilstm(w))
        if self.pool is not None:
            h = self.pool(h)
            h = h.reshape(h.shape[0], h.shape[2])
        h = tanh(self.hidden(h))
        return gaussian(self.mean_head(h), self.log_var_head(h))


class MlpDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.pre = Linear(cfg.speaker_dim + cfg.content_dim, cfg.dec_hidden, rng)
        self.bilstm = StackedLSTM(cfg.dec_hidden, cfg.dec_hidden, 2, rng)
        self.post = MLP([2 * cfg.dec_hidden, cfg.dec_hidden, cfg.feature_dim], rng)

    def forward(self, z):
        return self.post(self.bilstm(tanh(self.pre(z))))


class ConvDecoder(Module):
    """Prenet, then BiLSTM -> 3 convs -> BiLSTM postnet; the two linear projections are summed."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        ch = cfg.dec_hidden
        self.prenet = Linear(cfg.speaker_dim + cfg.content_dim, ch, rng)
        self.lstm1 = StackedLSTM(ch, ch, 1, rng)
        self.convs = ModuleList([Conv1d(2 * ch, ch, cfg.conv_kernel, rng),
                                 Conv1d(ch, ch, cfg.conv_kernel, rng),
                                 Conv1d(ch, ch, cfg.conv_kernel, rng)])
        self.lstm2 = StackedLSTM(ch, ch, 1, rng)
        self.proj_a = Linear(2 * ch, cfg.feature_dim, rng)
        self.proj_b = Linear(2 * ch, cfg.feature_dim, rng)

    def forward(self, z):
        h1 = self.lstm1(relu(self.prenet(z)))
        h = h1
        for conv in self.convs:
            h = relu(conv(h))
        return self.proj_a(h1) + self.proj_b(self.lstm2(h))


class DSVAE(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        if cfg.variant == "timit_mlp":
            self.shared = MLP([cfg.feature_dim, cfg.shared_dim, cfg.shared_dim], rng)
        else:
            self.shared = ConvSharedEncoder(cfg.feature_dim, cfg.shared_dim, cfg.conv_kernel, rng)
        self.speaker = PosteriorEncoder(cfg, cfg.speaker_dim, pooled=True, rng=rng)
        self.content = PosteriorEncoder(cfg, cfg.content_dim, pooled=False, rng=rng)
        self.prior = ContentPrior(cfg.content_dim, cfg.prior_hidden, rng)
        self.decoder = MlpDecoder(cfg, rng) if cfg.variant == "timit_mlp" else ConvDecoder(cfg, rng)

    # -- encoder / decoder -------------------------------------------------
    def _check_input(self, x: Tensor) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[2] != self.cfg.feature_dim:
            raise ShapeError(f"encode_shared: expected (B, T, {self.cfg.feature_dim}) input, "
                             f"got {x.shape}")
        return x

    def encode_shared(self, x) -> Tensor:
        return self.shared(self._check_input(x))

    def encode_speaker(self, w: Tensor) -> GaussianPosterior:
        return self.speaker(w)

    def encode_content(self, w: Tensor) -> GaussianPosterior:
        return self.content(w)

    def encode(self, x) -> tuple[GaussianPosterior, GaussianPosterior]:
        w = self.encode_shared(x)
        return self.encode_speaker(w), self.encode_content(w)

    def decode(self, z_s, z_c) -> Tensor:
        z_s = z_s if isinstance(z_s, Tensor) else Tensor(z_s)
        z_c = z_c if isinstance(z_c, Tensor) else Tensor(z_c)
        cfg = self.cfg
        if (z_s.ndim != 2 or z_c.ndim != 3 or z_s.shape[0] != z_c.shape[0]
                or z_s.shape[1] != cfg.speaker_dim or z_c.shape[2] != cfg.content_dim):
            raise ShapeError(f"decode: incompatible latent shapes {z_s.shape} and {z_c.shape}")
        B, T, _ = z_c.shape
        tiled = broadcast_to(z_s.reshape(B, 1, cfg.speaker_dim), (B, T, cfg.speaker_dim))
        return self.decoder(concat([tiled, z_c], axis=-1))

    # -- objective -----------------------------------------------------------
    def loss(self, x, rng: np.random.Generator, target=None) -> tuple[Tensor, LossBreakdown]:
        """Negative ELBO with weighted KL terms.

        ``x`` is the encoder input; ``target`` (default ``x``) is what the
        decoder must reconstruct, e.g. the clean features for a noisy input.
        """
        x = self._check_input(x)
        target = x if target is None else self._check_input(target)
        cfg = self.cfg
        post_s, post_c = self.encode(x)
        z_s = sample_posterior(post_s, rng)
        z_c = sample_posterior(post_c, rng)
        x_hat = self.decode(z_s, z_c)
        B, T, d = target.shape
        err = x_hat - target
        recon = (err * err).sum() * (0.5 / B)
        kl_s = kl_speaker(post_s, cfg.kl_direction)
        prior_mean, prior_lv = self.prior(z_c)
        kl_c = kl_content(post_c, prior_mean, prior_lv, cfg.kl_direction)
        total = recon + kl_s * cfg.alpha + kl_c * cfg.beta
        if not np.isfinite(total.data):
            raise DivergedError("diverged: non-finite loss")
        parts = LossBreakdown(
            recon_nll=recon.item(), kl_speaker=kl_s.item(), kl_content=kl_c.item(),
            total=total.item(), recon_mse=2.0 * recon.item() / (T * d),
        )
        return total, parts

    def info_flow_report(self, x, rng: np.random.Generator | None = None, target=None) -> InfoFlowReport:
        """Batch-mean KL terms (variational MI estimates) and reconstruction NLL."""
        rng = np.random.default_rng(0) if rng is None else rng
        with no_grad():
            _, parts = self.loss(x, rng, target)
        return InfoFlowReport(parts.kl_speaker, parts.kl_content,
                              parts.kl_speaker + parts.kl_content, parts.recon_nll)

    # -- inference helpers -----------------------------------------------------
    def posterior_means(self, x) -> tuple[np.ndarray, np.ndarray]:
        """(B, d_S) speaker means and (B, T, d_C) content means, without recording a graph."""
        with no_grad():
            ps, pc = self.encode(x)
        return ps.mean.data, pc.mean.data

    def decode_means(self, z_s: np.ndarray, z_c: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.decode(Tensor(z_s), Tensor(z_c)).data


NORM_MEAN_KEY = "feature_norm.mean"
NORM_STD_KEY = "feature_norm.std"


def save_model(path, model: DSVAE, run_cfg, feature_cfg=None) -> None:
    """Write params plus the full run config; normalization stats ride along as extra records."""
    from .autodiff.checkpoint import save_checkpoint

    params = model.state_dict()
    feature_cfg = feature_cfg if feature_cfg is not None else run_cfg.feature
    if feature_cfg.normalized:
        params[NORM_MEAN_KEY] = feature_cfg.norm_mean
        params[NORM_STD_KEY] = feature_cfg.norm_std
    save_checkpoint(path, params, run_cfg.to_dict())


def load_model(path):
    """Return ``(model, run_cfg, feature_cfg)`` from a checkpoint; needs no external config."""
    from .autodiff.checkpoint import load_checkpoint
    from .config import from_dict

    cfg_text, params = load_checkpoint(path)
    run_cfg = from_dict(dict(cfg_text))
    feature_cfg = run_cfg.feature
    if NORM_MEAN_KEY in params:
        feature_cfg = feature_cfg.with_normalization(params.pop(NORM_MEAN_KEY), params.pop(NORM_STD_KEY))
    model = DSVAE(run_cfg.model)
    model.load_state_dict(params)
    return model, run_cfg, feature_cfg
