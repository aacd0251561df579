"""Training loop (Adam, cosine learning-rate decay), evaluation and inference."""
import logging
import math
import os

import numpy as np
import torch

from ..ddre import ExternalPrior, FrozenModelPrior, NoPrior, ToyPriorNet
from ..errors import ConfigError, NumericError
from ..losses import LossWeights, total_loss
from ..metrics import MetricsReport, psnr, ssim
from ..network import DHNet, restore
from .checkpoint import Checkpoint, decode, save_checkpoint
from .dataset import load_pairs, read_image, sample_patch

log = logging.getLogger("dhnet")


class TrainingAborted(NumericError):
    def __init__(self, step, checkpoint):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.checkpoint = checkpoint


def cosine_lr(step, horizon, peak=5e-4, floor=1e-6):
    """Cosine decay from ``peak`` at step 0 to ``floor`` at ``horizon``."""
    if horizon <= 0:
        return peak
    t = min(max(step / horizon, 0.0), 1.0)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * t))


def _read_container(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def build_provider(net_cfg, prior_records=None, seed=0):
    """Prior provider for a network config.

    ``prior_records`` (from a checkpoint) take precedence over ``prior_path``;
    a ``frozen_model`` prior with neither is a seeded random ToyPriorNet.
    """
    variant, channels = net_cfg.prior, net_cfg.prior_channels
    if variant == "none":
        return NoPrior(channels)
    if variant == "external":
        if prior_records and "feature_map" in prior_records:
            fm = prior_records["feature_map"]
        elif net_cfg.prior_path:
            _, records = _read_container(net_cfg.prior_path)
            fm = records.get("prior")
            if fm is None:
                raise ConfigError(f"{net_cfg.prior_path} has no 'prior' record")
        else:
            raise ConfigError("external prior needs network.prior_path")
        if fm.ndim != 4 or fm.shape[1] != channels:
            raise ConfigError(f"external prior must be (N, {channels}, H, W), got {fm.shape}")
        return ExternalPrior(torch.from_numpy(np.asarray(fm, dtype=np.float32)))
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed + 7919)
    model = ToyPriorNet(channels)
    torch.random.set_rng_state(gen_state)
    records = prior_records
    if not records and net_cfg.prior_path:
        _, raw = _read_container(net_cfg.prior_path)
        records = {k[len("prior."):]: v for k, v in raw.items() if k.startswith("prior.")}
    if records:
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in records.items()})
    return FrozenModelPrior(model, channels)


def provider_records(provider):
    if isinstance(provider, FrozenModelPrior):
        return {k: v.detach().float().numpy().copy() for k, v in provider.model.state_dict().items()}
    if isinstance(provider, ExternalPrior):
        return {"feature_map": provider.feature_map.float().numpy().copy()}
    return {}


def build_net(ckpt):
    provider = build_provider(ckpt.network, ckpt.prior)
    net = DHNet(ckpt.network, provider).to(ckpt.network.dtype)
    state = {k: torch.from_numpy(v.copy()).to(ckpt.network.dtype) for k, v in ckpt.params.items()}
    net.load_state_dict(state)
    return net


def snapshot(net, train_cfg=None, optimizer=None, step=0, rng=None, losses=None):
    params = {k: v.detach().cpu().numpy().copy() for k, v in net.named_parameters()}
    ckpt = Checkpoint(network=net.config, params=params, train=train_cfg, step=step,
                      prior=provider_records(net.provider))
    if optimizer is not None:
        by_id = {id(p): n for n, p in net.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if st:
                    ckpt.adam_m[by_id[id(p)]] = st["exp_avg"].detach().cpu().numpy().copy()
                    ckpt.adam_v[by_id[id(p)]] = st["exp_avg_sq"].detach().cpu().numpy().copy()
    if rng is not None:
        ckpt.numpy_rng = rng.bit_generator.state
        ckpt.torch_rng = torch.random.get_rng_state().numpy().copy()
    if losses is not None:
        ckpt.losses = np.asarray(losses, dtype=np.float64)
    return ckpt


def train(train_cfg, manifest, net_cfg, out_path=None, workers=1, callback=None):
    """Train a fresh network on ``manifest`` and return the final :class:`Checkpoint`.

    Deterministic for a given ``train_cfg.seed`` when ``workers == 1``.
    ``callback(step, loss, net)`` is invoked after each update.
    """
    if not len(manifest):
        raise ConfigError("cannot train on an empty manifest")
    torch.set_num_threads(max(1, workers))
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    dtype = net_cfg.dtype

    provider = build_provider(net_cfg, seed=train_cfg.seed)
    net = DHNet(net_cfg, provider).to(dtype)
    net.train()
    params = net.trainable_parameters()
    opt = torch.optim.Adam(params, lr=train_cfg.lr_peak, betas=(train_cfg.beta1, train_cfg.beta2))
    weights = LossWeights()
    pairs = load_pairs(manifest)
    horizon = train_cfg.steps - 1
    losses = []

    for step in range(train_cfg.steps):
        lr = cosine_lr(step, horizon, train_cfg.lr_peak, train_cfg.lr_floor)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = rng.integers(0, len(pairs), size=train_cfg.batch_size)
        patches = [sample_patch(pairs[i], train_cfg.patch_size, rng, train_cfg.flip) for i in idx]
        blur = torch.from_numpy(np.stack([b for b, _ in patches])).to(dtype)
        sharp = torch.from_numpy(np.stack([s for _, s in patches])).to(dtype)

        loss = total_loss(net(blur), sharp, weights, train_cfg.loss_reduction)
        if not torch.isfinite(loss):
            prior = snapshot(net, train_cfg, opt, step, rng, losses)
            if out_path:
                save_checkpoint(prior, out_path + ".abort")
            raise TrainingAborted(step, prior)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if train_cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, train_cfg.grad_clip)
        opt.step()
        losses.append(loss.item())
        if callback is not None:
            callback(step, losses[-1], net)
        if train_cfg.log_every and (step % train_cfg.log_every == 0 or step == horizon):
            log.info("step %d/%d loss %.6f lr %.3e", step, train_cfg.steps, losses[-1], lr)

    ckpt = snapshot(net, train_cfg, opt, train_cfg.steps, rng, losses)
    if out_path:
        save_checkpoint(ckpt, out_path)
    return ckpt


def _to_tensor(img, dtype):
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].to(dtype)


def _from_tensor(t):
    return t[0].detach().to(torch.float64).clamp(0, 1).numpy().transpose(1, 2, 0)


def evaluate(ckpt_or_net, manifest, baseline=False):
    """Per-image PSNR/SSIM of restored blurred images against their sharp targets.

    With ``baseline=True`` the blurred inputs themselves are scored.
    """
    net = None
    if not baseline:
        net = build_net(ckpt_or_net) if isinstance(ckpt_or_net, Checkpoint) else ckpt_or_net
        net.eval()
    report = MetricsReport()
    for sharp_path, blur_path in manifest.pairs:
        name = os.path.basename(blur_path)
        sharp, blur = read_image(sharp_path), read_image(blur_path)
        if sharp.shape != blur.shape:
            report.skipped.append((name, f"size mismatch {sharp.shape} vs {blur.shape}"))
            continue
        if net is None:
            out = blur.astype(np.float64)
        else:
            with torch.no_grad():
                out = _from_tensor(restore(net, _to_tensor(blur, net.config.dtype)))
        sharp64 = sharp.astype(np.float64)
        report.add(name, psnr(out, sharp64), ssim(out.transpose(2, 0, 1), sharp64.transpose(2, 0, 1)))
    return report


def infer_image(net, img):
    """Restore one ``(H, W, 3)`` float image."""
    net.eval()
    with torch.no_grad():
        return _from_tensor(restore(net, _to_tensor(img, net.config.dtype)))
